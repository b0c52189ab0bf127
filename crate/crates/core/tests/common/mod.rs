//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use twinmae_core::attention::DropMode;
use twinmae_core::model::{DropPlans, ForwardOptions, Model, ModelConfig, Planning, Sample, StackConfig};
use twinmae_core::seeds::StreamRng;
use twinmae_core::tokenizer::sample_mask;
use twinmae_core::video::{Frame, FramePair};
use twinmae_core::{GradStore, Tape};

pub fn config(mode: DropMode, asad_in_encoder: bool) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        patch: 4,
        encoder: StackConfig { depth: 2, width: 8, heads: 2 },
        decoder: StackConfig { depth: 2, width: 8, heads: 2 },
        mlp_ratio: 2,
        mask_ratio: 0.5,
        drop_ratio: 0.25,
        drop_mode: mode,
        asad_in_encoder,
        identity_embed: true,
    }
}

pub fn noise_pair(rng: &mut StreamRng) -> FramePair {
    let mut frame = || Frame { width: 16, height: 16, data: (0..16 * 16 * 3).map(|_| rng.random::<f32>()).collect() };
    FramePair { frame_a: frame(), frame_b: frame(), start: 0, gap: 1, correspondence: None }
}

fn loss(model: &Model<f64>, sample: &Sample<f64>, plans: &DropPlans) -> f64 {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, sample, Planning::Replay(plans), ForwardOptions::default()).unwrap();
    tape.value(out.loss).item()
}

/// Asserts every sampled entry is within 1e-4 and returns the worst error.
pub fn check(mode: DropMode, asad_in_encoder: bool, seed: u64, count: usize) -> f64 {
    let (worst, at) = worst_relative_error(mode, asad_in_encoder, seed, count);
    assert!(worst < 1e-4, "{at}: relative error {worst:e}");
    worst
}

/// Worst relative error between backprop and central differences over
/// `count` random parameter entries, with a description of where it occurred.
pub fn worst_relative_error(mode: DropMode, asad_in_encoder: bool, seed: u64, count: usize) -> (f64, String) {
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut model = Model::<f64>::init(&config(mode, asad_in_encoder), seed).unwrap();
    // Larger weights than the 0.02 init make attention non-uniform, so the
    // check exercises softmax curvature rather than a near-linear regime.
    for p in model.params_mut() {
        if p.name.ends_with(".weight") || p.name.contains("identity") || p.name.contains("mask_token") {
            for v in p.tensor.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        } else {
            for v in p.tensor.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    }
    let pair = noise_pair(&mut rng);
    let mask = sample_mask(&model.layout(), 0.5, &mut rng).unwrap();
    let sample = Sample::new(&pair, 4, mask).unwrap();

    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &sample, Planning::Sample { seed }, ForwardOptions::default()).unwrap();
    let plans = out.diagnostics.plans.clone();
    if mode != DropMode::None {
        assert!(plans.decoder.iter().flatten().any(|d| !d.is_empty()), "plans should drop something");
    }
    let mut grads = GradStore::new();
    tape.backward(out.loss, &mut grads).unwrap();
    let analytic: Vec<Vec<f64>> = (0..model.params().len())
        .map(|id| grads.get(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; model.params()[id].tensor.len()]))
        .collect();
    drop(tape);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut at = String::new();
    for _ in 0..count {
        let id = rng.random_range(0..model.params().len());
        let k = rng.random_range(0..model.params()[id].tensor.len());
        let orig = model.params()[id].tensor.data()[k];
        model.params_mut()[id].tensor.data_mut()[k] = orig + h;
        let plus = loss(&model, &sample, &plans);
        model.params_mut()[id].tensor.data_mut()[k] = orig - h;
        let minus = loss(&model, &sample, &plans);
        model.params_mut()[id].tensor.data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[id][k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel >= worst {
            worst = rel;
            at = format!("{} [{k}]: analytic {a:e} numeric {numeric:e}", model.params()[id].name);
        }
    }
    (worst, at)
}
