use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seca_core::encoder::{AdapterStack, EncoderConfig};
use seca_core::numkernel::ops::{kl_div, layernorm, softmax_temp};
use seca_core::numkernel::{ProbVector, Tensor};
use seca_core::sevpr::{affinity_matrix, refine_prototypes};
use seca_core::sgakt::{aggregate, AdapterPool};
use seca_core::theory::{closed_form_weights, probe_points, surrogate_objective};

fn finite_vec(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_is_a_distribution(logits in finite_vec(1..=12), tau in 0.01f64..20.0) {
        let p = softmax_temp(&logits, tau).unwrap();
        let s: f64 = p.probs().iter().sum();
        prop_assert!((s - 1.0).abs() <= ProbVector::SUM_TOL);
        prop_assert!(p.probs().iter().all(|v| *v >= 0.0));
        // ordering of logits is preserved
        for i in 0..logits.len() {
            for j in 0..logits.len() {
                if logits[i] > logits[j] {
                    prop_assert!(p.probs()[i] >= p.probs()[j]);
                }
            }
        }
    }

    #[test]
    fn kl_is_nearly_non_negative(a in finite_vec(2..=10), shift in finite_vec(10..=10), tau in 0.05f64..5.0) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let p = softmax_temp(&a, tau).unwrap();
        let q = softmax_temp(&b, tau).unwrap();
        prop_assert!(kl_div(&p, &q, 1e-8).unwrap() >= -1e-6);
        prop_assert!(kl_div(&p, &p, 1e-8).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn layernorm_centers_and_scales(v in prop::collection::vec(-100.0f64..100.0, 2..=32)) {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        prop_assume!(var > 1e-3);
        let y = layernorm(&v).unwrap();
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let s = y.iter().map(|x| (x - m).powi(2)).sum::<f64>() / y.len() as f64;
        prop_assert!(m.abs() < 1e-9);
        prop_assert!((s - var / (var + 1e-5)).abs() < 1e-9);
    }

    #[test]
    fn aggregation_stays_in_the_convex_hull(
        views in prop::collection::vec(matrix(4, 3), 1..=5),
        seed in any::<u64>(),
        lambda in 0.0f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = Tensor::matrix(4, views.len(), (0..4 * views.len()).map(|_| rand::Rng::random_range(&mut rng, -4.0..4.0)).collect()).unwrap();
        let r = aggregate(&views, &alpha, lambda).unwrap();
        for i in 0..4 {
            let s: f64 = r.weights.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            for j in 0..3 {
                let lo = views.iter().map(|v| v.get(i, j)).fold(f64::INFINITY, f64::min);
                let hi = views.iter().map(|v| v.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
                let x = r.aggregated.get(i, j);
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn refinement_rows_are_stochastic(z in matrix(5, 4), raw in matrix(5, 3), gamma in 0.0f64..3.0) {
        let m = affinity_matrix(&z, &Tensor::identity(4), gamma).unwrap();
        for k in 0..5 {
            prop_assert_eq!(m.get(k, k), 1.0);
            for j in 0..5 {
                prop_assert_eq!(m.get(k, j), m.get(j, k));
            }
        }
        let refined = refine_prototypes(&m, &raw).unwrap();
        // each refined row is a convex combination of raw rows
        for k in 0..5 {
            for j in 0..3 {
                let lo = (0..5).map(|i| raw.get(i, j)).fold(f64::INFINITY, f64::min);
                let hi = (0..5).map(|i| raw.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(refined.get(k, j) >= lo - 1e-12 && refined.get(k, j) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn pool_never_exceeds_capacity(cap in 1usize..6, steps in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..20)) {
        let cfg = EncoderConfig { d_v: 4, d_t: 4, layers: 1, width: 2, prompt_tokens: 1, seed: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pool = AdapterPool::new(Some(cap)).unwrap();
        for a in &steps {
            if !pool.is_empty() {
                pool.update_utilities(&a[..pool.len()], 0.9).unwrap();
            }
            let before = pool.utilities();
            let removed = pool.admit_and_prune(AdapterStack::new(&cfg, &mut rng));
            prop_assert!(pool.len() <= cap);
            if let Some(r) = removed {
                let max = before.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(before[r], max);
                prop_assert!(before[..r].iter().all(|u| *u < max));
            }
        }
    }

    #[test]
    fn closed_form_beats_every_probe(losses in prop::collection::vec(0.0f64..5.0, 2..=8), tau in 0.05f64..10.0, seed in any::<u64>()) {
        let best = closed_form_weights(&losses, tau).unwrap();
        let f = surrogate_objective(&best, &losses, tau).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in probe_points(losses.len(), 20, &mut rng) {
            prop_assert!(surrogate_objective(&p, &losses, tau).unwrap() >= f - 1e-9);
        }
    }
}
