use grap::linalg::{cosine, dot, norm};
use grap::oracles::{grid_argmax_weights, GRID_RESOLUTION_K2, GRID_RESOLUTION_K3};
use grap::tuner::{alignment_gradient, alignment_objective, normalized_weights, weight_step};
use grap::{Mat, Normalization, NormalizationMode, Rng, WeightVector};
use proptest::prelude::*;

const MODES: [NormalizationMode; 4] = [
    NormalizationMode::None,
    NormalizationMode::WeightSum,
    NormalizationMode::WeightNorm,
    NormalizationMode::CompositeGrad,
];

fn instance(seed: u64, k: usize, dim: usize) -> (Mat, Vec<f64>, Vec<f64>) {
    let mut rng = Rng::new(seed);
    let g = Mat::random_normal(k, dim, 1.0, &mut rng);
    let gd: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let w: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.05, 2.0)).collect();
    (g, gd, w)
}

/// Objective with the normalizer frozen at `w0`.
fn frozen_objective(w: &[f64], w0: &[f64], g: &Mat, gd: &[f64], mode: NormalizationMode) -> f64 {
    let n = match mode {
        NormalizationMode::None => 1.0,
        NormalizationMode::WeightSum => w0.iter().sum(),
        NormalizationMode::WeightNorm => norm(w0),
        NormalizationMode::CompositeGrad => norm(&g.matvec_t(w0).unwrap()),
    };
    dot(w, &g.matvec(gd).unwrap()) / n
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn composite_objective_is_scale_invariant(seed in any::<u64>(), k in 1usize..6, dim in 1usize..8, c in 1e-3f64..1e3) {
        let (g, gd, w) = instance(seed, k, dim);
        let f = alignment_objective(&w, &g, &gd, NormalizationMode::CompositeGrad).unwrap();
        let cw: Vec<f64> = w.iter().map(|v| c * v).collect();
        let fc = alignment_objective(&cw, &g, &gd, NormalizationMode::CompositeGrad).unwrap();
        prop_assert!((f - fc).abs() <= 1e-12 * (1.0 + f.abs()));
    }

    #[test]
    fn objective_is_a_distance(seed in any::<u64>(), k in 1usize..6, dim in 1usize..8) {
        let (g, gd, w) = instance(seed, k, dim);
        let u = g.matvec_t(&w).unwrap();
        let nu = norm(&u);
        let dist: f64 = u.iter().zip(&gd).map(|(a, b)| (a / nu - b).powi(2)).sum();
        let f = alignment_objective(&w, &g, &gd, NormalizationMode::CompositeGrad).unwrap();
        let rhs = 1.0 + dot(&gd, &gd) - 2.0 * f;
        prop_assert!((dist - rhs).abs() <= 1e-10 * (1.0 + dist.abs()), "{dist} vs {rhs}");
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>(), k in 1usize..6, dim in 1usize..8, detach in any::<bool>(), m in 0usize..4) {
        let mode = MODES[m];
        let (g, gd, w) = instance(seed, k, dim);
        let cfg = Normalization { mode, detach_norm: detach };
        let grad = alignment_gradient(&w, &g, &gd, cfg).unwrap();
        let h = 1e-6;
        for i in 0..k {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            let fd = if detach {
                (frozen_objective(&wp, &w, &g, &gd, mode) - frozen_objective(&wm, &w, &g, &gd, mode)) / (2.0 * h)
            } else {
                (alignment_objective(&wp, &g, &gd, mode).unwrap() - alignment_objective(&wm, &g, &gd, mode).unwrap()) / (2.0 * h)
            };
            let diff = (grad[i] - fd).abs();
            prop_assert!(diff <= 1e-5 * grad[i].abs().max(fd.abs()) || diff <= 1e-9, "coord {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn weights_stay_above_the_floor(seed in any::<u64>(), k in 1usize..6, dim in 1usize..8, floor in 0.0f64..0.2, lr_w in 0.01f64..20.0) {
        let (g, _, w) = instance(seed, k, dim);
        let mut rng = Rng::new(seed ^ 0x5eed);
        let mut wv = WeightVector::from_values(w.iter().map(|v| v + floor).collect(), lr_w, floor).unwrap();
        for _ in 0..25 {
            let gd: Vec<f64> = (0..dim).map(|_| 3.0 * rng.normal()).collect();
            let d = weight_step(&mut wv, &g, &gd, Normalization::default()).unwrap();
            if d.reset {
                prop_assert!(wv.values().iter().all(|v| (v - 1.0 / k as f64).abs() < 1e-15));
            } else {
                prop_assert!(wv.values().iter().all(|v| *v >= floor));
            }
        }
    }

    #[test]
    fn small_steps_never_decrease_the_objective(seed in any::<u64>(), k in 1usize..9, dim in 1usize..10, detach in any::<bool>()) {
        let (g, gd, w) = instance(seed, k, dim);
        let mode = NormalizationMode::CompositeGrad;
        // A detached step ascends the objective with the normalizer frozen.
        let objective = |v: &[f64]| {
            if detach {
                frozen_objective(v, &w, &g, &gd, mode)
            } else {
                alignment_objective(v, &g, &gd, mode).unwrap()
            }
        };
        let before = objective(&w);
        let mut lr_w = 1.0;
        let mut ok = false;
        for _ in 0..=20 {
            let mut wv = WeightVector::from_values(w.clone(), lr_w, 0.0).unwrap();
            weight_step(&mut wv, &g, &gd, Normalization { mode, detach_norm: detach }).unwrap();
            let after = objective(wv.values());
            if after >= before - 1e-15 * (1.0 + before.abs()) {
                ok = true;
                break;
            }
            lr_w /= 2.0;
        }
        prop_assert!(ok);
    }

    #[test]
    fn normalized_weights_give_a_unit_composite(seed in any::<u64>(), k in 1usize..6, dim in 1usize..8, c in 1e-2f64..1e2) {
        let (g, _, w) = instance(seed, k, dim);
        let wb = normalized_weights(&w, &g).unwrap();
        prop_assert!((norm(&g.matvec_t(&wb).unwrap()) - 1.0).abs() <= 1e-12);
        let cw: Vec<f64> = w.iter().map(|v| c * v).collect();
        let wc = normalized_weights(&cw, &g).unwrap();
        for (a, b) in wb.iter().zip(&wc) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn single_loss_normalization_example() {
    let g = Mat::from_rows(&[[0.0, 2.0]]).unwrap();
    assert_eq!(normalized_weights(&[1.0], &g).unwrap(), vec![0.5]);
}

#[test]
fn grid_oracle_single_loss_is_trivial() {
    let g = Mat::from_rows(&[[1.0, 2.0]]).unwrap();
    for mode in MODES {
        assert_eq!(grid_argmax_weights(&g, &[0.5, -1.0], mode, GRID_RESOLUTION_K2).unwrap(), vec![1.0]);
    }
}

#[test]
fn grid_oracle_recovers_the_aligned_direction() {
    let g = Mat::identity(2);
    let gd = [0.6, 0.8];
    let w = grid_argmax_weights(&g, &gd, NormalizationMode::CompositeGrad, GRID_RESOLUTION_K2).unwrap();
    assert!((w[1] / w[0] - 4.0 / 3.0).abs() < 1e-6);
    let best = cosine(&g.matvec_t(&w).unwrap(), &gd);
    assert!(best >= 1.0 - 1e-6);
    for mode in [NormalizationMode::WeightSum, NormalizationMode::WeightNorm] {
        let wm = grid_argmax_weights(&g, &gd, mode, GRID_RESOLUTION_K2).unwrap();
        assert!(cosine(&g.matvec_t(&wm).unwrap(), &gd) <= best + 1e-12);
    }
    let f = alignment_objective(&[3.0, 4.0], &g, &gd, NormalizationMode::CompositeGrad).unwrap();
    assert!((f - 1.0).abs() < 1e-15);
    assert!(alignment_objective(&w, &g, &gd, NormalizationMode::CompositeGrad).unwrap() <= f + 1e-12);
}

#[test]
fn grid_oracle_lands_on_the_boundary_outside_the_cone() {
    let g = Mat::identity(2);
    for gd in [[1.0, -0.5], [-0.3, 1.0]] {
        for mode in MODES {
            let w = grid_argmax_weights(&g, &gd, mode, GRID_RESOLUTION_K2).unwrap();
            assert!(w.iter().any(|v| v.abs() < 1e-12), "{mode:?}: {w:?}");
        }
    }
    let g3 = Mat::identity(3);
    let w = grid_argmax_weights(&g3, &[1.0, 0.5, -1.0], NormalizationMode::CompositeGrad, GRID_RESOLUTION_K3).unwrap();
    assert!(w[2].abs() < 1e-12);
}

#[test]
fn grid_oracle_dominates_random_weights() {
    let mut rng = Rng::new(21);
    for _ in 0..20 {
        let k = 2 + rng.index(2);
        let g = Mat::random_normal(k, 4, 1.0, &mut rng);
        let gd: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let res = if k == 2 { GRID_RESOLUTION_K2 } else { GRID_RESOLUTION_K3 };
        let w = grid_argmax_weights(&g, &gd, NormalizationMode::CompositeGrad, res).unwrap();
        let best = alignment_objective(&w, &g, &gd, NormalizationMode::CompositeGrad).unwrap();
        for _ in 0..200 {
            let probe: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
            let f = alignment_objective(&probe, &g, &gd, NormalizationMode::CompositeGrad).unwrap();
            assert!(f <= best + 1e-9, "{f} > {best}");
        }
    }
}

#[test]
fn grid_oracle_rejects_many_losses() {
    let g = Mat::identity(4);
    assert!(grid_argmax_weights(&g, &[1.0; 4], NormalizationMode::CompositeGrad, 10).is_err());
}
