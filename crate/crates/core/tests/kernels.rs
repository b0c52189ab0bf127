//! Dense kernels against naive references, plus randomized invariants.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use twinmae_core::attention::{drop_budget_for, plan_asad, sample_random_positions, SeqLayout};
use twinmae_core::seeds::StreamRng;
use twinmae_core::tensor::softmax_rows;
use twinmae_core::tokenizer::{mask_count, sample_mask, FrameLayout};
use twinmae_core::Tensor;

fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

fn random(rows: usize, cols: usize, rng: &mut StreamRng) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = StreamRng::seed_from_u64(7);
    for (m, k, n) in [(1, 1, 1), (3, 5, 7), (17, 64, 9), (128, 48, 130)] {
        let a = random(m, k, &mut rng);
        let b = random(k, n, &mut rng);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&naive(&a, &b)) < 1e-12);
        let bt = b.transpose().unwrap();
        assert!(a.matmul_nt(&bt).unwrap().max_abs_diff(&naive(&a, &b)) < 1e-12);
    }
}

#[test]
fn matmul_rejects_mismatched_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    assert!(a.matmul(&Tensor::zeros(&[2, 3])).is_err());
    assert!(a.matmul_nt(&Tensor::zeros(&[2, 2])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..40, scale in 0.0f64..50.0, seed in any::<u64>()) {
        let mut rng = StreamRng::seed_from_u64(seed);
        let t = random(rows, cols, &mut rng).map(|v| v * scale);
        let p = softmax_rows(&t).unwrap();
        for r in 0..rows {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn masks_have_exact_size(side in 1usize..9, ratio in 0.01f64..0.99, seed in any::<u64>()) {
        let layout = FrameLayout::new(side, side);
        let mask = sample_mask(&layout, ratio, &mut StreamRng::seed_from_u64(seed)).unwrap();
        let n = layout.total_tokens;
        prop_assert_eq!(mask.masked.len(), mask_count(n, ratio));
        prop_assert_eq!(mask.masked.len() + mask.visible.len(), n);
        prop_assert!(mask.masked.iter().all(|i| !mask.visible.contains(i)));
    }

    #[test]
    fn asad_plans_stay_within_frame(side in 1usize..6, ratio in 0.0f64..0.9, seed in any::<u64>()) {
        prop_assume!(side > 1);
        let layout = FrameLayout::new(side, side);
        let seq = SeqLayout::full(&layout);
        let n = layout.total_tokens;
        let mut rng = StreamRng::seed_from_u64(seed);
        let scores = random(n, n, &mut rng).map(|v| 3.0 * v);
        let (plan, _, _) = plan_asad(&scores, &seq, ratio, &mut rng).unwrap();
        prop_assert_eq!(plan.dropped.len(), drop_budget_for(n, ratio));
        for &k in &plan.dropped {
            prop_assert!(seq.is_spatial(k / n, k % n));
        }
    }

    #[test]
    fn random_positions_are_distinct_and_off_diagonal(n in 2usize..40, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let count = ((n * (n - 1)) as f64 * frac) as usize;
        let picks = sample_random_positions(n, count, &mut StreamRng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(picks.len(), count);
        prop_assert!(picks.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(picks.iter().all(|&k| k / n != k % n));
    }
}
