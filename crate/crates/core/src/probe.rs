//! Evaluation of trained models: decoder attention statistics, temporal
//! matching heatmaps, reconstructions and a correspondence probe.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::TraceRequest;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seeds;
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{patch_stats, patchify, sample_mask, unpatchify, FrameLayout, MaskSet};
use crate::video::{crop_resize, sample_pair_times, CropBox, Frame, FramePair, GridCell, Scene, SceneSpec};

/// Mean attention mass per decoder layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMass {
    pub layer: usize,
    pub within_mass: f64,
    pub between_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub layers: Vec<LayerMass>,
    pub n_samples: usize,
}

impl AttentionStats {
    pub fn mean_between(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| l.between_mass).sum::<f64>() / self.layers.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,within_mass,between_mass\n");
        for l in &self.layers {
            out.push_str(&format!("{},{},{}\n", l.layer, l.within_mass, l.between_mass));
        }
        out
    }
}

/// Twin-frame pairs drawn from freshly generated synthetic clips.
pub fn synthetic_pairs(spec: &SceneSpec, n: usize, max_gap: usize, seed: u64) -> Result<Vec<FramePair>> {
    (0..n as u64)
        .map(|i| {
            let mut rng = seeds::stream(&[seeds::TAG_EVAL, seed, i]);
            let scene = Scene::new(spec, rng.random())?;
            let (start, gap) = sample_pair_times(scene.len(), max_gap, &mut rng)?;
            let correspondence = Some(scene.correspondence(start, start + gap));
            Ok(FramePair { frame_a: scene.render(start), frame_b: scene.render(start + gap), start, gap, correspondence })
        })
        .collect()
}

/// Resizes both frames of a pair to `size × size` without cropping.
fn fit_pair(pair: &FramePair, size: usize) -> FramePair {
    let full = CropBox { x: 0.0, y: 0.0, width: pair.frame_a.width as f32, height: pair.frame_a.height as f32 };
    FramePair {
        frame_a: crop_resize(&pair.frame_a, full, size),
        frame_b: crop_resize(&pair.frame_b, full, size),
        start: pair.start,
        gap: pair.gap,
        correspondence: None,
    }
}

/// Within/between-frame decoder attention mass over masked inputs, with
/// attention dropout off and masks drawn from `seed`.
pub fn decoder_attention_stats<T: Real>(model: &Model<T>, pairs: &[FramePair], seed: u64) -> Result<AttentionStats> {
    if pairs.is_empty() {
        return Err(Error::rejected("attention statistics need at least one sample"));
    }
    let depth = model.config().decoder.depth;
    let mut within = vec![0.0; depth];
    let mut between = vec![0.0; depth];
    for (i, pair) in pairs.iter().enumerate() {
        let mut rng = seeds::stream(&[seeds::TAG_EVAL, seed, i as u64, 1]);
        let size = model.config().input_size;
        let resized;
        let pair = if pair.frame_a.width == size && pair.frame_a.height == size {
            pair
        } else {
            resized = fit_pair(pair, size);
            &resized
        };
        let (patches, layout) = patchify::<T>(pair, model.config().patch)?;
        let mask = sample_mask(&layout, model.config().mask_ratio, &mut rng)?;
        let (_, diag) = model.analyze(&patches, &mask, TraceRequest { masses: true, ..TraceRequest::default() })?;
        for (l, summary) in diag.decoder_layers.iter().enumerate() {
            within[l] += summary.within_mass;
            between[l] += summary.between_mass;
        }
    }
    let n = pairs.len() as f64;
    let layers = (0..depth)
        .map(|l| LayerMass { layer: l, within_mass: within[l] / n, between_mass: between[l] / n })
        .collect();
    Ok(AttentionStats { layers, n_samples: pairs.len() })
}

/// Head-averaged temporal matching probability per pixel for both frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub layer: usize,
    pub frame_a: Vec<f32>,
    pub frame_b: Vec<f32>,
}

/// Temporal matching map at decoder `layer` (default: last) with every
/// token visible, upsampled to pixels by nearest neighbour.
pub fn ftem_heatmap<T: Real>(model: &Model<T>, pair: &FramePair, layer: Option<usize>) -> Result<Heatmap> {
    let depth = model.config().decoder.depth;
    if depth == 0 {
        return Err(Error::rejected("model has no decoder layers"));
    }
    let layer = layer.unwrap_or(depth - 1);
    if layer >= depth {
        return Err(Error::rejected(format!("layer {layer} out of range for {depth} decoder layers")));
    }
    let patch = model.config().patch;
    let (patches, layout) = patchify::<T>(pair, patch)?;
    let mask = MaskSet::none(layout.total_tokens);
    let (_, diag) = model.analyze(&patches, &mask, TraceRequest { f_tem: true, ..TraceRequest::default() })?;
    let f_tem = diag.decoder_layers[layer].f_tem.as_ref().ok_or_else(|| Error::Internal("f_tem not recorded".into()))?;
    let (gr, gc) = layout.grid;
    let (width, height) = (gc * patch, gr * patch);
    let upsample = |frame: usize| {
        let mut out = vec![0.0f32; width * height];
        for (i, v) in out.iter_mut().enumerate() {
            let (y, x) = (i / width, i % width);
            let token = frame * layout.tokens_per_frame + (y / patch) * gc + x / patch;
            *v = (f_tem[token] as f32).clamp(0.0, 1.0);
        }
        out
    };
    Ok(Heatmap { width, height, layer, frame_a: upsample(0), frame_b: upsample(1) })
}

/// Original, masked-input and reconstructed images for both frames.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub original: [Frame; 2],
    pub masked: [Frame; 2],
    pub reconstruction: [Frame; 2],
    pub mask: MaskSet,
    /// Mean squared pixel error over masked patches.
    pub masked_mse: f64,
}

pub const MASK_GRAY: f32 = 0.5;

/// Masks a pair as in pre-training, reconstructs it, de-normalizes each
/// predicted patch with the true patch statistics and pastes visible
/// patches back from the original.
pub fn reconstruct_demo<T: Real>(model: &Model<T>, pair: &FramePair, rng: &mut impl Rng) -> Result<Reconstruction> {
    let patch = model.config().patch;
    let (patches, layout) = patchify::<T>(pair, patch)?;
    let mask = sample_mask(&layout, model.config().mask_ratio, rng)?;
    let (pred, _) = model.analyze(&patches, &mask, TraceRequest::default())?;
    let cols = patches.cols();
    let mut recon = patches.clone();
    let mut masked_in = patches.clone();
    let mut sq = 0.0;
    for &m in &mask.masked {
        let (mean, std) = patch_stats(patches.row(m));
        for c in 0..cols {
            let v = (pred.row(m)[c] * std + mean).max(T::zero()).min(T::one());
            sq += (v - patches.row(m)[c]).f64().powi(2);
            recon.row_mut(m)[c] = v;
            masked_in.row_mut(m)[c] = T::c(MASK_GRAY as f64);
        }
    }
    let masked_mse = sq / (mask.masked.len() * cols) as f64;
    let frames = |t: &Tensor<T>| [unpatchify(t, &layout, patch, 0), unpatchify(t, &layout, patch, 1)];
    Ok(Reconstruction {
        original: [pair.frame_a.clone(), pair.frame_b.clone()],
        masked: frames(&masked_in),
        reconstruction: frames(&recon),
        mask,
        masked_mse,
    })
}

/// Pairs for the correspondence probe. Start and gap are multiples of the
/// patch size so every sprite with unit speed stays grid-aligned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSpec {
    pub scene: SceneSpec,
    /// Largest gap, in units of the patch size.
    pub max_gap_cells: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { scene: SceneSpec::default(), max_gap_cells: 2 }
    }
}

pub fn probe_pairs(spec: &ProbeSpec, n: usize, seed: u64) -> Result<Vec<FramePair>> {
    spec.scene.validate()?;
    let p = spec.scene.patch;
    let slots = spec.scene.clip_length.saturating_sub(1) / p;
    if spec.max_gap_cells == 0 || slots == 0 {
        return Err(Error::rejected("clip too short for patch-aligned probe pairs"));
    }
    (0..n as u64)
        .map(|i| {
            let mut rng = seeds::stream(&[seeds::TAG_PROBE, seed, i]);
            let scene = Scene::new(&spec.scene, rng.random())?;
            let gap_cells = rng.random_range(1..=spec.max_gap_cells.min(slots));
            let start = p * rng.random_range(0..=slots - gap_cells);
            let end = start + gap_cells * p;
            Ok(FramePair {
                frame_a: scene.render(start),
                frame_b: scene.render(end),
                start,
                gap: end - start,
                correspondence: Some(scene.correspondence(start, end)),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub n_pairs: usize,
    pub n_patches: usize,
    pub config_hash: String,
    pub seed: u64,
}

/// Counts frame-A sprite tokens whose most cosine-similar frame-B token is
/// the true correspondent. Ties go to the lowest index.
pub fn match_count<T: Real>(features: &Tensor<T>, layout: &FrameLayout, pairs: &[(GridCell, GridCell)]) -> (usize, usize) {
    let norms: Vec<f64> = (0..features.rows())
        .map(|r| features.row(r).iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let mut correct = 0;
    for &(a, b) in pairs {
        let qa = layout.token(0, a);
        let query = features.row(qa);
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for t in layout.tokens_per_frame..layout.total_tokens {
            let dot: f64 = query.iter().zip(features.row(t)).map(|(x, y)| x.f64() * y.f64()).sum();
            let sim = dot / (norms[qa] * norms[t]);
            if sim > best.0 {
                best = (sim, t);
            }
        }
        if best.1 == layout.token(1, b) {
            correct += 1;
        }
    }
    (correct, pairs.len())
}

/// Probe accuracy for an arbitrary token featurizer.
pub fn matching_probe_with<T: Real>(
    pairs: &[FramePair],
    patch: usize,
    mut features: impl FnMut(&FramePair) -> Result<Tensor<T>>,
) -> Result<(f64, usize)> {
    let mut correct = 0;
    let mut total = 0;
    for pair in pairs {
        let oracle = pair.correspondence.as_ref().ok_or_else(|| Error::rejected("probe pair has no correspondence oracle"))?;
        let w = pair.frame_a.width / patch;
        let layout = FrameLayout::new(pair.frame_a.height / patch, w);
        let (c, n) = match_count(&features(pair)?, &layout, oracle);
        correct += c;
        total += n;
    }
    if total == 0 {
        return Err(Error::rejected("probe pairs contain no corresponding sprite patches"));
    }
    Ok((correct as f64 / total as f64, total))
}

/// Correspondence probe on the encoder's final-layer token features.
pub fn matching_probe<T: Real>(model: &Model<T>, pairs: &[FramePair], seed: u64, config_hash: &str) -> Result<ProbeReport> {
    if pairs.is_empty() {
        return Err(Error::rejected("probe needs at least one pair"));
    }
    let (accuracy, n_patches) = matching_probe_with(pairs, model.config().patch, |p| model.encode_features(p))?;
    Ok(ProbeReport { accuracy, n_pairs: pairs.len(), n_patches, config_hash: config_hash.to_string(), seed })
}

/// Raw pixel features, one row per patch.
pub fn pixel_features(pair: &FramePair, patch: usize) -> Result<Tensor<f64>> {
    patchify::<f64>(pair, patch).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, StackConfig};
    use crate::video::CHANNELS;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            patch: 4,
            encoder: StackConfig { depth: 1, width: 8, heads: 2 },
            decoder: StackConfig { depth: 2, width: 8, heads: 2 },
            mlp_ratio: 2,
            ..ModelConfig::default()
        }
    }

    fn small_scene() -> SceneSpec {
        SceneSpec { canvas: 16, patch: 4, sprite_size: 4, sprites: 2, clip_length: 12, ..SceneSpec::default() }
    }

    #[test]
    fn uniform_attention_splits_mass_evenly() {
        let mut model = Model::<f64>::init(&tiny(), 0).unwrap();
        for p in model.params_mut() {
            if p.name.contains("decoder.") && p.name.contains(".attn.qkv.") {
                p.tensor.fill(0.0);
            }
        }
        let pairs = synthetic_pairs(&small_scene(), 3, 4, 1).unwrap();
        let stats = decoder_attention_stats(&model, &pairs, 2).unwrap();
        for l in &stats.layers {
            assert!((l.within_mass - 0.5).abs() < 1e-9 && (l.between_mass - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn stats_rows_sum_to_one_and_reject_empty() {
        let model = Model::<f32>::init(&tiny(), 4).unwrap();
        let pairs = synthetic_pairs(&small_scene(), 2, 4, 1).unwrap();
        let stats = decoder_attention_stats(&model, &pairs, 0).unwrap();
        for l in &stats.layers {
            assert!((l.within_mass + l.between_mass - 1.0).abs() < 1e-6);
        }
        assert!(stats.to_csv().starts_with("layer,within_mass,between_mass\n"));
        assert!(decoder_attention_stats(&model, &[], 0).is_err());
    }

    #[test]
    fn heatmap_matches_frame_shape_and_range() {
        let model = Model::<f32>::init(&tiny(), 4).unwrap();
        let pair = &synthetic_pairs(&small_scene(), 1, 4, 1).unwrap()[0];
        let map = ftem_heatmap(&model, pair, None).unwrap();
        assert_eq!((map.width, map.height, map.layer), (16, 16, 1));
        assert!(map.frame_a.iter().chain(&map.frame_b).all(|v| (0.0..=1.0).contains(v)));
        assert!(ftem_heatmap(&model, pair, Some(2)).is_err());
    }

    #[test]
    fn reconstruction_keeps_visible_patches() {
        let model = Model::<f32>::init(&tiny(), 4).unwrap();
        let pair = &synthetic_pairs(&small_scene(), 1, 4, 1).unwrap()[0];
        let r = reconstruct_demo(&model, pair, &mut seeds::stream(&[5])).unwrap();
        assert_eq!(r.mask.masked.len(), 24);
        let layout = model.layout();
        for &v in &r.mask.visible {
            let frame = v / layout.tokens_per_frame;
            let cell = layout.cell_of(v);
            for y in 0..4 {
                for x in 0..4 {
                    let (px, py) = (cell.col * 4 + x, cell.row * 4 + y);
                    assert_eq!(r.reconstruction[frame].pixel(px, py), r.original[frame].pixel(px, py));
                }
            }
        }
        let gray = |f: &Frame| (0..16 * 16).filter(|i| f.data[i * 3..i * 3 + 3].iter().all(|&v| v == MASK_GRAY)).count();
        assert!(gray(&r.masked[0]) + gray(&r.masked[1]) >= 24 * 16);
    }

    #[test]
    fn one_hot_textures_give_perfect_pixel_matching() {
        // Four 2x2 cells; cell k carries a one-hot texture at patch element k
        // and moves one cell forward in frame B.
        let layout = FrameLayout::new(2, 2);
        let frame = |shift: usize| {
            let mut f = Frame::filled(4, 4, 0.0);
            for k in 0..4 {
                let cell = layout.cell_of((k + shift) % 4);
                let (px, c) = (k / CHANNELS, k % CHANNELS);
                f.pixel_mut(cell.col * 2 + px % 2, cell.row * 2 + px / 2)[c] = 1.0;
            }
            f
        };
        let corr = (0..4).map(|k| (layout.cell_of(k), layout.cell_of((k + 1) % 4))).collect();
        let pair = FramePair { frame_a: frame(0), frame_b: frame(1), start: 0, gap: 1, correspondence: Some(corr) };
        let (acc, n) = matching_probe_with(&[pair], 2, |p| pixel_features(p, 2)).unwrap();
        assert_eq!((acc, n), (1.0, 4));
    }

    #[test]
    fn probe_requires_oracle_and_is_deterministic() {
        let model = Model::<f32>::init(&tiny(), 4).unwrap();
        let spec = ProbeSpec { scene: small_scene(), max_gap_cells: 2 };
        let pairs = probe_pairs(&spec, 4, 9).unwrap();
        let a = matching_probe(&model, &pairs, 9, "h").unwrap();
        let b = matching_probe(&model, &probe_pairs(&spec, 4, 9).unwrap(), 9, "h").unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.accuracy) && a.n_pairs == 4);
        let mut bare = pairs[0].clone();
        bare.correspondence = None;
        assert!(matching_probe(&model, &[bare], 9, "h").is_err());
    }
}
