//! Reference multi-task weighting schemes: equal weights, GradNorm, DWA,
//! MGDA, PCGrad and the median-weight retraining used by the two-phase
//! tuned protocol.
//!
//! All of them consume the same embedding-space gradients as the
//! alignment tuner.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Mat};
use crate::rng::Rng;

pub const MGDA_MAX_ITERS: usize = 250;
pub const MGDA_GAP_TOL: f64 = 1e-8;

fn check_finite(g: &Mat, what: &'static str) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Min-norm point of the convex hull of the rows of `g` (pairwise
/// Frank-Wolfe with exact line search on the Gram matrix). Starts from, and
/// on ties stays at, the uniform weights.
pub fn mgda_weights(g: &Mat) -> Result<Vec<f64>> {
    let k = g.rows();
    if k == 0 {
        return Err(Error::InvalidArgument("MGDA needs K >= 1".into()));
    }
    check_finite(g, "MGDA gradients")?;
    let gram = g.gram();
    let mut w = vec![1.0 / k as f64; k];
    for _ in 0..MGDA_MAX_ITERS {
        let mw = gram.matvec(&w)?;
        let vv = dot(&w, &mw);
        let t = (0..k).min_by(|&a, &b| mw[a].total_cmp(&mw[b])).expect("k >= 1");
        // duality gap of min ||w^T G||^2 over the simplex
        if 2.0 * (vv - mw[t]) <= MGDA_GAP_TOL {
            break;
        }
        let s = (0..k)
            .filter(|&i| w[i] > 0.0)
            .max_by(|&a, &b| mw[a].total_cmp(&mw[b]))
            .expect("simplex point has support");
        // move mass from s to t: min over gamma in [0, w_s] of ||v + gamma (g_t - g_s)||^2
        let denom = gram[(t, t)] + gram[(s, s)] - 2.0 * gram[(t, s)];
        if s == t || denom <= 0.0 {
            break;
        }
        let gamma = ((mw[s] - mw[t]) / denom).clamp(0.0, w[s]);
        w[s] -= gamma;
        w[t] += gamma;
    }
    Ok(w)
}

/// PCGrad: each gradient, taken in task order, is projected onto the normal
/// plane of every other (current) gradient it conflicts with, visiting the
/// others in random order; the projected gradients are summed.
pub fn pcgrad_combine(g: &Mat, rng: &mut Rng) -> Result<Vec<f64>> {
    check_finite(g, "PCGrad gradients")?;
    let k = g.rows();
    let mut rows: Vec<Vec<f64>> = g.row_iter().map(<[f64]>::to_vec).collect();
    for i in 0..k {
        let mut others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        rng.shuffle(&mut others);
        for j in others {
            let gj = rows[j].clone();
            let nj = dot(&gj, &gj);
            if nj == 0.0 {
                continue;
            }
            let c = dot(&rows[i], &gj);
            if c < 0.0 {
                axpy(-c / nj, &gj, &mut rows[i]);
            }
        }
    }
    let mut out = vec![0.0; g.cols()];
    for r in &rows {
        axpy(1.0, r, &mut out);
    }
    Ok(out)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// GradNorm weights: match each weighted gradient norm `w_k ||g~_k||` to the
/// mean norm scaled by the relative inverse training rate raised to `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradNormState {
    pub alpha: f64,
    weights: Vec<f64>,
    initial_losses: Option<Vec<f64>>,
}

impl GradNormState {
    pub fn new(k: usize, alpha: f64) -> Self {
        GradNormState {
            alpha,
            weights: vec![1.0; k],
            initial_losses: None,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn initial_losses(&self) -> Option<&[f64]> {
        self.initial_losses.as_deref()
    }

    /// Targets `mean_j(w_j n_j) * r_k^alpha`, held constant during the step.
    pub fn targets(&self, norms: &[f64], losses: &[f64]) -> Vec<f64> {
        let k = self.weights.len() as f64;
        let initial = self.initial_losses.as_deref().unwrap_or(losses);
        let ratios: Vec<f64> = losses
            .iter()
            .zip(initial)
            .map(|(l, l0)| l / l0.max(f64::MIN_POSITIVE))
            .collect();
        let mean_ratio = ratios.iter().sum::<f64>() / k;
        let mean_norm = self.weights.iter().zip(norms).map(|(w, n)| w * n).sum::<f64>() / k;
        ratios
            .iter()
            .map(|r| {
                let rel = if mean_ratio > 0.0 { r / mean_ratio } else { 1.0 };
                mean_norm * rel.powf(self.alpha)
            })
            .collect()
    }

    /// Gradient of `sum_k |w_k n_k - target_k|` with frozen targets.
    pub fn objective_gradient(&self, norms: &[f64], targets: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(norms)
            .zip(targets)
            .map(|((w, n), t)| sign(w * n - t) * n)
            .collect()
    }

    /// One GradNorm step; weights are clamped at zero and renormalized to
    /// sum to `K`.
    pub fn step(&mut self, norms: &[f64], losses: &[f64], lr_w: f64) -> Result<&[f64]> {
        let k = self.weights.len();
        if norms.len() != k || losses.len() != k {
            return Err(Error::shape("GradNorm step", k, norms.len().min(losses.len())));
        }
        if norms.iter().chain(losses).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GradNorm inputs"));
        }
        if self.initial_losses.is_none() {
            self.initial_losses = Some(losses.to_vec());
        }
        let targets = self.targets(norms, losses);
        let grad = self.objective_gradient(norms, &targets);
        for (w, g) in self.weights.iter_mut().zip(&grad) {
            *w = (*w - lr_w * g).max(0.0);
        }
        let sum: f64 = self.weights.iter().sum();
        if sum > 0.0 {
            let s = k as f64 / sum;
            self.weights.iter_mut().for_each(|w| *w *= s);
        } else {
            self.weights.iter_mut().for_each(|w| *w = 1.0);
        }
        Ok(&self.weights)
    }
}

/// `K * softmax(r / T)` with `r_k = L_k(t-1) / L_k(t-2)`.
pub fn dwa_weights(last: &[f64], before_last: &[f64], temperature: f64) -> Vec<f64> {
    let k = last.len() as f64;
    let scores: Vec<f64> = last
        .iter()
        .zip(before_last)
        .map(|(a, b)| a / b.max(f64::MIN_POSITIVE) / temperature)
        .collect();
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| k * e / z).collect()
}

/// Dynamic weight averaging over windows of `window` steps; uniform until
/// two full windows of losses have been seen.
#[derive(Clone, Debug, PartialEq)]
pub struct DwaState {
    pub window: usize,
    pub temperature: f64,
    sums: Vec<f64>,
    count: usize,
    last: Option<Vec<f64>>,
    before_last: Option<Vec<f64>>,
}

impl DwaState {
    pub fn new(k: usize, window: usize, temperature: f64) -> Self {
        DwaState {
            window: window.max(1),
            temperature,
            sums: vec![0.0; k],
            count: 0,
            last: None,
            before_last: None,
        }
    }

    pub fn observe(&mut self, losses: &[f64]) {
        axpy(1.0, losses, &mut self.sums);
        self.count += 1;
        if self.count == self.window {
            let mean: Vec<f64> = self.sums.iter().map(|s| s / self.window as f64).collect();
            self.before_last = self.last.take();
            self.last = Some(mean);
            self.sums.iter_mut().for_each(|s| *s = 0.0);
            self.count = 0;
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        match (&self.last, &self.before_last) {
            (Some(a), Some(b)) => dwa_weights(a, b, self.temperature),
            _ => vec![1.0; self.sums.len()],
        }
    }
}

/// Coordinate-wise median of logged weight vectors, skipping the first
/// `burn_in` fraction of rows (at least one row is always kept).
pub fn median_weights(rows: &[Vec<f64>], burn_in: f64) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("median of an empty trajectory".into()));
    }
    if !(0.0..1.0).contains(&burn_in) {
        return Err(Error::InvalidArgument(format!("burn-in fraction {burn_in}")));
    }
    let k = rows[0].len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidArgument("ragged weight trajectory".into()));
    }
    let skip = ((rows.len() as f64 * burn_in).floor() as usize).min(rows.len() - 1);
    let kept = &rows[skip..];
    let n = kept.len();
    let mut col = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        col.clear();
        col.extend(kept.iter().map(|r| r[c]));
        let (_, hi, _) = col.select_nth_unstable_by(n / 2, f64::total_cmp);
        let hi = *hi;
        let m = if n % 2 == 1 {
            hi
        } else {
            let lo = col[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            0.5 * (lo + hi)
        };
        out.push(m);
    }
    Ok(out)
}

/// Per-method state carried across training steps.
#[derive(Clone, Debug)]
pub enum BaselineState {
    Equal,
    GradNorm(GradNormState),
    Dwa(DwaState),
    Mgda,
    PcGrad,
    /// Retraining with fixed weights taken from an earlier trajectory.
    Tuned { weights: Vec<f64> },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mgda_closed_form_cases() {
        let w = mgda_weights(&Mat::identity(2)).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        let w = mgda_weights(&Mat::from_rows(&[[2.0, 0.0], [1.0, 0.0]]).unwrap()).unwrap();
        assert!(w[0].abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);
        let same = Mat::from_rows(&[[1.0, -2.0, 0.5]; 3]).unwrap();
        assert_eq!(mgda_weights(&same).unwrap(), vec![1.0 / 3.0; 3]);
        let mut bad = Mat::identity(2);
        bad[(0, 0)] = f64::INFINITY;
        assert!(mgda_weights(&bad).is_err());
    }

    #[test]
    fn pcgrad_examples() {
        let mut rng = Rng::new(0);
        let orth = Mat::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, -1.0]]).unwrap();
        assert_eq!(pcgrad_combine(&orth, &mut rng).unwrap(), vec![1.0, 2.0, -1.0]);

        let g = Mat::from_rows(&[[1.0, 0.0], [-1.0, 1.0]]).unwrap();
        let c = pcgrad_combine(&g, &mut rng).unwrap();
        assert!((c[0] + 0.5).abs() < 1e-15 && (c[1] - 1.5).abs() < 1e-15);

        let g = Mat::from_rows(&[[1.0, 2.0], [-1.0, -2.0]]).unwrap();
        assert_eq!(pcgrad_combine(&g, &mut rng).unwrap(), vec![-1.0, -2.0]);

        let g = Mat::from_rows(&[[0.0, 0.0], [-1.0, 1.0]]).unwrap();
        assert_eq!(pcgrad_combine(&g, &mut rng).unwrap(), vec![-1.0, 1.0]);
    }

    #[test]
    fn gradnorm_symmetric_state_stays_uniform() {
        let mut s = GradNormState::new(3, 1.5);
        for _ in 0..5 {
            s.step(&[0.7; 3], &[2.0; 3], 0.1).unwrap();
        }
        assert_eq!(s.weights(), &[1.0; 3]);
    }

    #[test]
    fn gradnorm_equalizes_weighted_norms() {
        let mut s = GradNormState::new(2, 0.0);
        s.step(&[2.0, 1.0], &[1.0, 1.0], 0.05).unwrap();
        let w = s.weights().to_vec();
        assert!(w[0] < 1.0 && w[1] > 1.0);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        let before = (2.0f64 - 1.0).abs();
        assert!((w[0] * 2.0 - w[1]).abs() < before);
    }

    #[test]
    fn gradnorm_gradient_matches_finite_differences() {
        let mut s = GradNormState::new(3, 1.5);
        s.step(&[1.0, 0.5, 2.0], &[1.0, 2.0, 0.5], 0.01).unwrap();
        let norms = [1.3, 0.4, 2.2];
        let losses = [0.8, 1.7, 0.45];
        let targets = s.targets(&norms, &losses);
        let grad = s.objective_gradient(&norms, &targets);
        let objective = |w: &[f64]| -> f64 {
            w.iter()
                .zip(&norms)
                .zip(&targets)
                .map(|((w, n), t)| (w * n - t).abs())
                .sum()
        };
        let h = 1e-7;
        for k in 0..3 {
            let mut p = s.weights().to_vec();
            let mut m = p.clone();
            p[k] += h;
            m[k] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6, "{fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn dwa_examples() {
        let w = dwa_weights(&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0], 2.0);
        assert!(w.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let w = dwa_weights(&[1.0, 3.0], &[2.0, 1.0], 1e12);
        assert!(w.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let w = dwa_weights(&[1.0, 1.1], &[1.0, 1.0], 2.0);
        let (a, b) = (0.5f64.exp(), 0.55f64.exp());
        assert!((w[0] - 2.0 * a / (a + b)).abs() < 1e-15);
        assert!((w[1] - 2.0 * b / (a + b)).abs() < 1e-15);
    }

    #[test]
    fn dwa_state_is_uniform_for_two_windows() {
        let mut s = DwaState::new(2, 3, 2.0);
        for step in 0..6 {
            assert_eq!(s.weights(), vec![1.0, 1.0], "step {step}");
            s.observe(&[1.0 + step as f64, 1.0]);
        }
        let w = s.weights();
        assert!(w[0] > 1.0 && (w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn median_examples() {
        let constant = vec![vec![0.3, 2.0]; 5];
        assert_eq!(median_weights(&constant, 0.0).unwrap(), vec![0.3, 2.0]);
        let rows = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert_eq!(median_weights(&rows, 0.0).unwrap(), vec![1.0]);
        let rows = vec![vec![9.0], vec![1.0], vec![2.0], vec![4.0]];
        assert_eq!(median_weights(&rows, 0.25).unwrap(), vec![2.0]);
        assert_eq!(median_weights(&rows, 0.0).unwrap(), vec![3.0]);
        assert!(median_weights(&[], 0.0).is_err());
        assert!(median_weights(&rows, 1.0).is_err());
    }
}
