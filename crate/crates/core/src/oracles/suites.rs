//! Randomized verification sweeps over the oracles. Each instance draws
//! from its own indexed substream, so results do not depend on thread
//! scheduling.

use rayon::prelude::*;

use super::{
    analytic_hypergradient, bound_check, composite_cosine, exact_multistep_hypergradient, fd_hypergradient,
    firstorder_multistep_approx, grid_argmax_weights, DownstreamPoint, ModelObjective, QuadraticTask, FD_EPS,
    GRID_RESOLUTION_K2,
};
use crate::error::Result;
use crate::linalg::{axpy, dot, norm, sub, Mat};
use crate::loss::LossKind;
use crate::mlp::{Activation, Mlp};
use crate::model::{Batch, CompositeModel};
use crate::rng::Rng;
use crate::tuner::{self, Normalization, NormalizationMode};

/// Outcome of one sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub failures: usize,
    /// Largest observed error statistic, in the suite's own units.
    pub worst: f64,
    pub detail: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {}/{} instances ok, worst {:.3e}; {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances - self.failures,
            self.instances,
            self.worst,
            self.detail
        )
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = norm(b).max(norm(a));
    if scale == 0.0 {
        0.0
    } else {
        norm(&sub(a, b)) / scale
    }
}

fn perturb(mlp: &mut Mlp, std: f64, rng: &mut Rng) -> Result<()> {
    let mut p = mlp.params_flat();
    p.iter_mut().for_each(|v| *v += std * rng.normal());
    mlp.set_params_flat(&p)
}

/// A random composite model and batch with `k` losses and embedding width
/// `d`: tanh backbone, mixed squared-error and cross-entropy heads, and a
/// partially labeled batch with at least one labeled row.
pub fn random_model_instance(rng: &mut Rng, k: usize, d: usize) -> Result<(CompositeModel, Batch)> {
    let n_features = 3 + rng.index(6);
    let hidden = 4 + rng.index(12);
    let b = 6 + rng.index(10);
    let mut backbone = Mlp::init(&[n_features, hidden, d], Activation::Tanh, Activation::Tanh, rng)?;
    perturb(&mut backbone, 0.1, rng)?;
    let inputs = Mat::random_normal(b, n_features, 1.0, rng);
    let mut heads = Vec::with_capacity(k);
    let mut kinds = Vec::with_capacity(k);
    let mut targets = Vec::with_capacity(k);
    for _ in 0..k {
        let out = 1 + rng.index(3);
        let kind = if rng.uniform() < 0.3 {
            LossKind::CrossEntropy
        } else {
            LossKind::SquaredError
        };
        let out = if kind == LossKind::CrossEntropy { out + 1 } else { out };
        let mut head = if rng.uniform() < 0.5 {
            Mlp::init(&[d, out], Activation::Identity, Activation::Identity, rng)?
        } else {
            Mlp::init(&[d, 4, out], Activation::Tanh, Activation::Identity, rng)?
        };
        perturb(&mut head, 0.1, rng)?;
        let target = match kind {
            LossKind::SquaredError => Mat::random_normal(b, out, 1.0, rng),
            LossKind::CrossEntropy => Mat::from_fn(b, 1, |_, _| rng.index(out) as f64),
        };
        heads.push(head);
        kinds.push(kind);
        targets.push(target);
    }
    let (down_kind, down_head, labels) = if rng.uniform() < 0.5 {
        let h = Mlp::init(&[d, 2], Activation::Identity, Activation::Identity, rng)?;
        (LossKind::CrossEntropy, h, Mat::from_fn(b, 1, |_, _| rng.index(2) as f64))
    } else {
        let h = Mlp::init(&[d, 1], Activation::Identity, Activation::Identity, rng)?;
        (LossKind::SquaredError, h, Mat::random_normal(b, 1, 1.0, rng))
    };
    let mut mask: Vec<bool> = (0..b).map(|_| rng.uniform() < 0.6).collect();
    let first = rng.index(b);
    mask[first] = true;
    let model = CompositeModel::new(backbone, heads, down_head, kinds, down_kind)?;
    let batch = Batch::new(inputs, targets, labels, mask)?;
    Ok((model, batch))
}

/// Tolerances of the hypergradient sweep.
pub const HYPERGRADIENT_REL_TOL: f64 = 1e-4;
const HYPERGRADIENT_HALVINGS: usize = 4;
const HYPERGRADIENT_LR: f64 = 0.05;

/// Exact single-step hypergradient (downstream gradient at the updated
/// parameters) against finite differences on random MLP instances, and
/// linear-or-faster shrinkage of the current-point approximation error
/// as the learning rate halves.
pub fn hypergradient_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let root = Rng::new(seed).substream("hypergradient-suite");
    let results = (0..instances)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let mut rng = root.substream_indexed("instance", i as u64);
            let k = 1 + rng.index(8);
            let d = 2 + rng.index(31);
            let (model, batch) = random_model_instance(&mut rng, k, d)?;
            let obj = ModelObjective::new(&model, &batch);
            let w: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.2, 1.5)).collect();
            let lr = HYPERGRADIENT_LR;
            let exact = analytic_hypergradient(&obj, &w, lr, DownstreamPoint::Updated)?;
            let fd = fd_hypergradient(&obj, &w, lr, FD_EPS)?;
            let err = rel_err(&exact, &fd);
            let mut worst_ratio = f64::INFINITY;
            let mut lr_h = HYPERGRADIENT_LR;
            let mut prev: Option<f64> = None;
            for _ in 0..=HYPERGRADIENT_HALVINGS {
                let ex = analytic_hypergradient(&obj, &w, lr_h, DownstreamPoint::Updated)?;
                let ap = analytic_hypergradient(&obj, &w, lr_h, DownstreamPoint::Current)?;
                let dev = norm(&sub(&ex, &ap));
                if let Some(p) = prev {
                    worst_ratio = worst_ratio.min(if dev == 0.0 { f64::INFINITY } else { p / dev });
                }
                prev = Some(dev);
                lr_h /= 2.0;
            }
            Ok((err, worst_ratio))
        })
        .collect::<Result<Vec<_>>>()?;
    let failures = results
        .iter()
        .filter(|(e, r)| *e > HYPERGRADIENT_REL_TOL || *r < 2.0)
        .count();
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let min_ratio = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    Ok(SuiteReport {
        name: "hypergradient",
        instances,
        failures,
        worst,
        detail: format!("max rel err vs finite differences (tol {HYPERGRADIENT_REL_TOL:e}); min halving ratio {min_ratio:.3} (need >= 2)"),
    })
}

pub const WEIGHT_GRAD_REL_TOL: f64 = 1e-5;
const WEIGHT_GRAD_ABS_FLOOR: f64 = 1e-9;

fn random_grad_instance(rng: &mut Rng, k: usize, d: usize) -> (Mat, Vec<f64>, Vec<f64>) {
    let g = Mat::random_normal(k, d, 1.0, rng);
    let gd = (0..d).map(|_| rng.normal()).collect();
    let w = (0..k).map(|_| rng.uniform_in(0.1, 2.0)).collect();
    (g, gd, w)
}

/// Analytic gradient of the composite-normalized objective against
/// coordinate-wise central differences, with and without the detached
/// normalizer.
pub fn weight_gradient_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let root = Rng::new(seed).substream("weight-gradient-suite");
    let eps = 1e-6;
    let results = (0..instances)
        .into_par_iter()
        .map(|i| -> Result<(usize, f64, f64)> {
            let mut rng = root.substream_indexed("instance", i as u64);
            let k = 1 + rng.index(8);
            let d = 2 + rng.index(15);
            let (g, gd, w) = random_grad_instance(&mut rng, k, d);
            let mut bad = 0;
            let mut worst: f64 = 0.0;
            let mut max_abs: f64 = 0.0;
            for detach in [false, true] {
                let cfg = Normalization {
                    mode: NormalizationMode::CompositeGrad,
                    detach_norm: detach,
                };
                let analytic = tuner::alignment_gradient(&w, &g, &gd, cfg)?;
                let frozen = norm(&g.matvec_t(&w)?);
                let a = g.matvec(&gd)?;
                let f = |w: &[f64]| -> Result<f64> {
                    if detach {
                        Ok(dot(w, &a) / frozen)
                    } else {
                        tuner::alignment_objective(w, &g, &gd, NormalizationMode::CompositeGrad)
                    }
                };
                for j in 0..k {
                    let mut p = w.clone();
                    let mut m = w.clone();
                    p[j] += eps;
                    m[j] -= eps;
                    let fd = (f(&p)? - f(&m)?) / (2.0 * eps);
                    let diff = (fd - analytic[j]).abs();
                    let rel = diff / fd.abs().max(analytic[j].abs());
                    max_abs = max_abs.max(diff);
                    if diff > WEIGHT_GRAD_ABS_FLOOR {
                        worst = worst.max(rel);
                        if rel > WEIGHT_GRAD_REL_TOL {
                            bad += 1;
                        }
                    }
                }
            }
            Ok((bad, worst, max_abs))
        })
        .collect::<Result<Vec<_>>>()?;
    let max_abs = results.iter().map(|r| r.2).fold(0.0, f64::max);
    Ok(SuiteReport {
        name: "weight-gradient",
        instances,
        failures: results.iter().filter(|r| r.0 > 0).count(),
        worst: results.iter().map(|r| r.1).fold(0.0, f64::max),
        detail: format!(
            "max coordinate rel err above abs floor {WEIGHT_GRAD_ABS_FLOOR:e}, both detach modes (tol {WEIGHT_GRAD_REL_TOL:e}); max abs diff {max_abs:.1e}"
        ),
    })
}

pub const DOMINANCE_SLACK: f64 = 1e-3;
pub const CONE_COSINE_TOL: f64 = 1e-6;

/// Grid-oracle comparison of the normalization modes on K = 2 instances
/// whose downstream gradient lies strictly inside the cone of the rows.
pub fn normalization_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let root = Rng::new(seed).substream("normalization-suite");
    let results = (0..instances)
        .into_par_iter()
        .map(|i| -> Result<(bool, f64)> {
            let mut rng = root.substream_indexed("instance", i as u64);
            let d = 2 + rng.index(7);
            let g = Mat::random_normal(2, d, 1.0, &mut rng);
            let (a, b) = (rng.uniform_in(0.1, 1.0), rng.uniform_in(0.1, 1.0));
            let mut gd = g.row(0).iter().map(|v| a * v).collect::<Vec<_>>();
            axpy(b, g.row(1), &mut gd);
            let cos = |mode| -> Result<f64> {
                let w = grid_argmax_weights(&g, &gd, mode, GRID_RESOLUTION_K2)?;
                composite_cosine(&w, &g, &gd)
            };
            let c = cos(NormalizationMode::CompositeGrad)?;
            let s = cos(NormalizationMode::WeightSum)?;
            let n = cos(NormalizationMode::WeightNorm)?;
            let ok = c >= s - DOMINANCE_SLACK && c >= n - DOMINANCE_SLACK && c >= 1.0 - CONE_COSINE_TOL;
            Ok((ok, 1.0 - c))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        name: "normalization-dominance",
        instances,
        failures: results.iter().filter(|r| !r.0).count(),
        worst: results.iter().map(|r| r.1).fold(0.0, f64::max),
        detail: format!("max 1 - cosine of the composite-normalized argmax (tol {CONE_COSINE_TOL:e})"),
    })
}

pub const BOUND_SLACK: f64 = 1e-9;
pub const ISOMETRY_TOL: f64 = 1e-12;

/// Both Jacobian bounds on random instances with nonnegative alignment,
/// plus equality of the mismatch bound for an identity Jacobian.
pub fn jacobian_bound_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let root = Rng::new(seed).substream("jacobian-bound-suite");
    let results = (0..instances)
        .into_par_iter()
        .map(|i| -> Result<(bool, f64)> {
            let mut rng = root.substream_indexed("instance", i as u64);
            let k = 1 + rng.index(6);
            let d = 2 + rng.index(10);
            let p = 2 + rng.index(14);
            let j = Mat::random_normal(d, p, 1.0, &mut rng);
            let (gt, mut gd, w) = random_grad_instance(&mut rng, k, d);
            if dot(&gt.matvec_t(&w)?, &gd) < 0.0 {
                gd.iter_mut().for_each(|v| *v = -*v);
            }
            let r = bound_check(&j, &gt, &gd, &w)?;
            let s1 = r.mismatch_slack();
            let s2 = r.normalized_slack().unwrap_or(0.0);
            let id = bound_check(&Mat::identity(d), &gt, &gd, &w)?;
            let eq = (id.param_mismatch - id.mismatch_bound).abs();
            let ok = s1 >= -BOUND_SLACK && s2 >= -BOUND_SLACK && eq <= ISOMETRY_TOL;
            Ok((ok, eq.max((-s1).max(0.0)).max((-s2).max(0.0))))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        name: "jacobian-bounds",
        instances,
        failures: results.iter().filter(|r| !r.0).count(),
        worst: results.iter().map(|r| r.1).fold(0.0, f64::max),
        detail: format!("max violation or isometry gap (slack {BOUND_SLACK:e}, isometry {ISOMETRY_TOL:e})"),
    })
}

pub const MULTISTEP_LRS: [f64; 4] = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
pub const MULTISTEP_HORIZONS: [usize; 3] = [2, 4, 8];
pub const MULTISTEP_SLOPE_TOL: f64 = 0.15;
pub const MULTISTEP_BASE_TOL: f64 = 1e-10;

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Quadratic instance used by the multi-step sweep.
pub fn random_quadratic(rng: &mut Rng) -> QuadraticTask {
    let k = 2 + rng.index(3);
    let p = 3 + rng.index(6);
    QuadraticTask::random(rng, k, p, p + 2, 0.3)
}

/// Log-log slope of the first-order multi-step error against the learning
/// rate, and coincidence of the two at a single step.
pub fn multistep_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let root = Rng::new(seed).substream("multistep-suite");
    let results = (0..instances)
        .into_par_iter()
        .map(|i| -> Result<(bool, f64, f64)> {
            let mut rng = root.substream_indexed("instance", i as u64);
            let task = random_quadratic(&mut rng);
            let w: Vec<f64> = (0..task.a.len()).map(|_| rng.uniform_in(0.5, 1.5)).collect();
            let mut ok = true;
            let mut worst_slope_dev: f64 = 0.0;
            for n in MULTISTEP_HORIZONS {
                let xs: Vec<f64> = MULTISTEP_LRS.iter().map(|l| l.ln()).collect();
                let ys = MULTISTEP_LRS
                    .iter()
                    .map(|&lr| {
                        let ex = exact_multistep_hypergradient(&task, &w, lr, n)?;
                        let fo = firstorder_multistep_approx(&task, &w, lr, n)?;
                        Ok(norm(&sub(&ex, &fo)).ln())
                    })
                    .collect::<Result<Vec<_>>>()?;
                let dev = (fit_slope(&xs, &ys) - 2.0).abs();
                worst_slope_dev = worst_slope_dev.max(dev);
                ok &= dev <= MULTISTEP_SLOPE_TOL;
            }
            let ex = exact_multistep_hypergradient(&task, &w, MULTISTEP_LRS[0], 0)?;
            let fo = firstorder_multistep_approx(&task, &w, MULTISTEP_LRS[0], 0)?;
            let base = rel_err(&ex, &fo);
            ok &= base <= MULTISTEP_BASE_TOL;
            Ok((ok, worst_slope_dev, base))
        })
        .collect::<Result<Vec<_>>>()?;
    let base = results.iter().map(|r| r.2).fold(0.0, f64::max);
    Ok(SuiteReport {
        name: "multistep-scaling",
        instances,
        failures: results.iter().filter(|r| !r.0).count(),
        worst: results.iter().map(|r| r.1).fold(0.0, f64::max),
        detail: format!(
            "max |slope - 2| (tol {MULTISTEP_SLOPE_TOL}); single-step rel gap {base:.1e} (tol {MULTISTEP_BASE_TOL:e})"
        ),
    })
}

/// Instance counts used by the full verification run.
pub const DEFAULT_COUNTS: [(&str, usize); 5] = [
    ("hypergradient", 100),
    ("weight-gradient", 100),
    ("normalization-dominance", 50),
    ("jacobian-bounds", 500),
    ("multistep-scaling", 10),
];

/// Runs every sweep with its default instance count.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        hypergradient_suite(seed, DEFAULT_COUNTS[0].1)?,
        weight_gradient_suite(seed, DEFAULT_COUNTS[1].1)?,
        normalization_suite(seed, DEFAULT_COUNTS[2].1)?,
        jacobian_bound_suite(seed, DEFAULT_COUNTS[3].1)?,
        multistep_suite(seed, DEFAULT_COUNTS[4].1)?,
    ])
}
