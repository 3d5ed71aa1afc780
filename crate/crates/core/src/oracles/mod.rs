//! Independent numerical oracles: finite-difference hypergradients,
//! exact multi-step sensitivities on quadratic problems, the Jacobian
//! bounds relating parameter-space and embedding-space alignment, and
//! brute-force grid search over loss weights.
//!
//! Nothing here calls into the tuner's analytic gradients.

pub mod suites;

use crate::error::{Error, Result};
use crate::linalg::{axpy, cosine, dot, norm, spectral_norm, sub, Mat};
use crate::model::{Batch, CompositeModel};
use crate::rng::Rng;
use crate::tuner::{self, NormalizationMode};

/// Default central-difference step.
pub const FD_EPS: f64 = 1e-5;

/// An inner problem with shared parameters `theta`, `K` pretraining losses
/// and a downstream loss.
pub trait InnerObjective {
    fn num_losses(&self) -> usize;

    /// Starting parameters.
    fn params(&self) -> Vec<f64>;

    /// `K x P` matrix of per-loss gradients at `theta`.
    fn loss_grads(&self, theta: &[f64]) -> Result<Mat>;

    fn downstream_loss(&self, theta: &[f64]) -> Result<f64>;

    fn downstream_grad(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// `theta - lr * sum_k w_k grad L_k(theta)`.
pub fn sgd_step<O: InnerObjective + ?Sized>(obj: &O, theta: &[f64], w: &[f64], lr: f64) -> Result<Vec<f64>> {
    let g = obj.loss_grads(theta)?;
    let dir = g.matvec_t(w)?;
    let mut next = theta.to_vec();
    axpy(-lr, &dir, &mut next);
    Ok(next)
}

/// Parameters `theta_0 ..= theta_{n+1}` of an `n + 1` step SGD rollout.
pub fn rollout<O: InnerObjective + ?Sized>(obj: &O, w: &[f64], lr: f64, n: usize) -> Result<Vec<Vec<f64>>> {
    let mut thetas = vec![obj.params()];
    for _ in 0..=n {
        let next = sgd_step(obj, thetas.last().expect("non-empty"), w, lr)?;
        thetas.push(next);
    }
    Ok(thetas)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// Central difference of the downstream loss after an `n + 1` step rollout
/// with respect to each weight.
pub fn fd_multistep_hypergradient<O: InnerObjective + ?Sized>(
    obj: &O,
    w: &[f64],
    lr: f64,
    n: usize,
    eps: f64,
) -> Result<Vec<f64>> {
    check_eps(eps)?;
    if w.len() != obj.num_losses() {
        return Err(Error::shape("fd hypergradient weights", obj.num_losses(), w.len()));
    }
    let eval = |w: &[f64]| -> Result<f64> {
        let thetas = rollout(obj, w, lr, n)?;
        let v = obj.downstream_loss(thetas.last().expect("non-empty"))?;
        if !v.is_finite() {
            return Err(Error::NonFinite("downstream loss in finite differences"));
        }
        Ok(v)
    };
    (0..w.len())
        .map(|k| {
            let mut plus = w.to_vec();
            let mut minus = w.to_vec();
            plus[k] += eps;
            minus[k] -= eps;
            Ok((eval(&plus)? - eval(&minus)?) / (2.0 * eps))
        })
        .collect()
}

/// Single-step finite-difference hypergradient.
pub fn fd_hypergradient<O: InnerObjective + ?Sized>(obj: &O, w: &[f64], lr: f64, eps: f64) -> Result<Vec<f64>> {
    fd_multistep_hypergradient(obj, w, lr, 0, eps)
}

/// Which downstream gradient enters the single-step analytic hypergradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownstreamPoint {
    /// `g_down` at the current parameters (the runtime approximation).
    Current,
    /// `g'_down` at the parameters after the step (exact).
    Updated,
}

/// `-lr * G(theta) g_down` with the downstream gradient taken at `point`.
pub fn analytic_hypergradient<O: InnerObjective + ?Sized>(
    obj: &O,
    w: &[f64],
    lr: f64,
    point: DownstreamPoint,
) -> Result<Vec<f64>> {
    let theta = obj.params();
    let g = obj.loss_grads(&theta)?;
    let g_down = match point {
        DownstreamPoint::Current => obj.downstream_grad(&theta)?,
        DownstreamPoint::Updated => obj.downstream_grad(&sgd_step(obj, &theta, w, lr)?)?,
    };
    tuner::hypergradient(&g, &g_down, lr)
}

/// Backbone parameters of a composite model on a fixed batch; heads are
/// held fixed.
pub struct ModelObjective<'a> {
    model: &'a CompositeModel,
    batch: &'a Batch,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a CompositeModel, batch: &'a Batch) -> Self {
        ModelObjective { model, batch }
    }

    fn at(&self, theta: &[f64]) -> Result<CompositeModel> {
        let mut m = self.model.clone();
        m.backbone.set_params_flat(theta)?;
        Ok(m)
    }
}

impl InnerObjective for ModelObjective<'_> {
    fn num_losses(&self) -> usize {
        self.model.num_losses()
    }

    fn params(&self) -> Vec<f64> {
        self.model.backbone.params_flat()
    }

    fn loss_grads(&self, theta: &[f64]) -> Result<Mat> {
        Ok(self.at(theta)?.full_param_grads(self.batch)?.g)
    }

    fn downstream_loss(&self, theta: &[f64]) -> Result<f64> {
        self.at(theta)?.downstream_loss(self.batch)
    }

    fn downstream_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.at(theta)?.full_param_grads(self.batch)?.g_down)
    }
}

/// `L_k(theta) = 1/2 ||A_k theta - b_k||^2` with a downstream loss of the
/// same form. Hessians are constant, which makes the sensitivity recursion
/// exact.
#[derive(Clone, Debug)]
pub struct QuadraticTask {
    pub a: Vec<Mat>,
    pub b: Vec<Vec<f64>>,
    pub a_down: Mat,
    pub b_down: Vec<f64>,
    pub theta0: Vec<f64>,
}

fn quad_value(a: &Mat, b: &[f64], theta: &[f64]) -> Result<f64> {
    let r = sub(&a.matvec(theta)?, b);
    Ok(0.5 * dot(&r, &r))
}

fn quad_grad(a: &Mat, b: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    a.matvec_t(&sub(&a.matvec(theta)?, b))
}

impl QuadraticTask {
    /// `k` losses over `p` parameters with `m` residuals each; `scale`
    /// controls the Hessian magnitude.
    pub fn random(rng: &mut Rng, k: usize, p: usize, m: usize, scale: f64) -> Self {
        let std = scale / (m as f64).sqrt();
        let a = (0..k).map(|_| Mat::random_normal(m, p, std, rng)).collect();
        let b = (0..k).map(|_| (0..m).map(|_| rng.normal()).collect()).collect();
        let a_down = Mat::random_normal(m, p, 1.0 / (m as f64).sqrt(), rng);
        let b_down = (0..m).map(|_| rng.normal()).collect();
        let theta0 = (0..p).map(|_| rng.normal()).collect();
        QuadraticTask {
            a,
            b,
            a_down,
            b_down,
            theta0,
        }
    }

    pub fn param_dim(&self) -> usize {
        self.theta0.len()
    }

    /// `sum_k w_k A_k^T A_k`.
    pub fn weighted_hessian(&self, w: &[f64]) -> Result<Mat> {
        let p = self.param_dim();
        let mut h = Mat::zeros(p, p);
        for (a, wk) in self.a.iter().zip(w) {
            h.axpy(*wk, &a.matmul_tn(a)?)?;
        }
        Ok(h)
    }
}

impl InnerObjective for QuadraticTask {
    fn num_losses(&self) -> usize {
        self.a.len()
    }

    fn params(&self) -> Vec<f64> {
        self.theta0.clone()
    }

    fn loss_grads(&self, theta: &[f64]) -> Result<Mat> {
        let rows = self
            .a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| quad_grad(a, b, theta))
            .collect::<Result<Vec<_>>>()?;
        Mat::from_rows(&rows)
    }

    fn downstream_loss(&self, theta: &[f64]) -> Result<f64> {
        quad_value(&self.a_down, &self.b_down, theta)
    }

    fn downstream_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        quad_grad(&self.a_down, &self.b_down, theta)
    }
}

/// Exact `dL_down(theta_{n+1}) / dw_i` by propagating the sensitivities
/// `Omega_i^t = d theta_t / d w_i` through the rollout:
/// `Omega^{t+1} = Omega^t - lr grad L_i(theta_t) - lr H Omega^t`.
pub fn exact_multistep_hypergradient(task: &QuadraticTask, w: &[f64], lr: f64, n: usize) -> Result<Vec<f64>> {
    let k = task.num_losses();
    if w.len() != k {
        return Err(Error::shape("exact_multistep_hypergradient", k, w.len()));
    }
    let h = task.weighted_hessian(w)?;
    let thetas = rollout(task, w, lr, n)?;
    let p = task.param_dim();
    let mut omega = vec![vec![0.0; p]; k];
    for theta in &thetas[..=n] {
        let g = task.loss_grads(theta)?;
        for (i, om) in omega.iter_mut().enumerate() {
            let h_om = h.matvec(om)?;
            axpy(-lr, g.row(i), om);
            axpy(-lr, &h_om, om);
        }
    }
    let g_final = task.downstream_grad(&thetas[n + 1])?;
    Ok(omega.iter().map(|om| dot(&g_final, om)).collect())
}

/// `-lr * grad L_down(theta_{n+1}) . sum_{t=0}^{n} grad L_i(theta_t)`.
pub fn firstorder_multistep_approx<O: InnerObjective + ?Sized>(
    obj: &O,
    w: &[f64],
    lr: f64,
    n: usize,
) -> Result<Vec<f64>> {
    let thetas = rollout(obj, w, lr, n)?;
    let p = thetas[0].len();
    let mut acc = vec![vec![0.0; p]; obj.num_losses()];
    for theta in &thetas[..=n] {
        let g = obj.loss_grads(theta)?;
        for (i, a) in acc.iter_mut().enumerate() {
            axpy(1.0, g.row(i), a);
        }
    }
    let g_final = obj.downstream_grad(&thetas[n + 1])?;
    Ok(acc.iter().map(|a| -lr * dot(&g_final, a)).collect())
}

/// Exponential moving average of per-loss gradients,
/// `m_i <- beta m_i + (1 - beta) grad L_i`.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub beta: f64,
    m: Vec<Vec<f64>>,
}

impl EmaState {
    pub fn new(k: usize, p: usize, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!("EMA momentum {beta} outside [0, 1)")));
        }
        Ok(EmaState {
            beta,
            m: vec![vec![0.0; p]; k],
        })
    }

    pub fn update(&mut self, grads: &Mat) -> Result<()> {
        if grads.rows() != self.m.len() {
            return Err(Error::shape("EmaState::update", self.m.len(), grads.rows()));
        }
        for (m, g) in self.m.iter_mut().zip(grads.row_iter()) {
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta * *mi + (1.0 - self.beta) * gi;
            }
        }
        Ok(())
    }

    pub fn averages(&self) -> &[Vec<f64>] {
        &self.m
    }
}

/// First-order multi-step hypergradient with the gradient sum replaced by
/// `(n + 1)` times the EMA of the per-loss gradients.
pub fn ema_multistep_approx<O: InnerObjective + ?Sized>(
    obj: &O,
    w: &[f64],
    lr: f64,
    n: usize,
    beta: f64,
) -> Result<Vec<f64>> {
    let thetas = rollout(obj, w, lr, n)?;
    let mut ema = EmaState::new(obj.num_losses(), thetas[0].len(), beta)?;
    for theta in &thetas[..=n] {
        ema.update(&obj.loss_grads(theta)?)?;
    }
    let g_final = obj.downstream_grad(&thetas[n + 1])?;
    let steps = (n + 1) as f64;
    Ok(ema.averages().iter().map(|m| -lr * steps * dot(&g_final, m)).collect())
}

/// Both sides of the two Jacobian bounds for one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundReport {
    pub sigma_max: f64,
    /// `||w^T G - g_down||`.
    pub param_mismatch: f64,
    /// `sigma_max * ||w^T G~ - g~_down||`.
    pub mismatch_bound: f64,
    /// `x . g~_down` with `x = G~^T w`.
    pub alignment: f64,
    /// `(x . g~_down) / ||w^T G||`.
    pub param_normalized: f64,
    /// `(x . g~_down) / (sigma_max ||x||)`.
    pub normalized_bound: f64,
}

impl BoundReport {
    /// Slack by which the mismatch bound holds (negative on violation).
    pub fn mismatch_slack(&self) -> f64 {
        self.mismatch_bound - self.param_mismatch
    }

    /// Slack of the normalized lower bound; `None` when the alignment is
    /// negative and the bound does not apply.
    pub fn normalized_slack(&self) -> Option<f64> {
        (self.alignment >= 0.0).then_some(self.param_normalized - self.normalized_bound)
    }
}

/// Checks `||w^T G - g_down|| <= sigma_max(J^T) ||w^T G~ - g~_down||` and,
/// for nonnegative alignment, the normalized lower bound, where
/// `g_k = J^T g~_k` and `J` is `d x P`.
pub fn bound_check(jacobian: &Mat, g_tilde: &Mat, g_tilde_down: &[f64], w: &[f64]) -> Result<BoundReport> {
    if g_tilde.cols() != jacobian.rows() || g_tilde_down.len() != jacobian.rows() {
        return Err(Error::shape("bound_check embedding width", jacobian.rows(), g_tilde.cols()));
    }
    if w.len() != g_tilde.rows() {
        return Err(Error::shape("bound_check weights", g_tilde.rows(), w.len()));
    }
    // rows of G are J^T g~_k
    let g = g_tilde.matmul(jacobian)?;
    let g_down = jacobian.matvec_t(g_tilde_down)?;
    let sigma_max = spectral_norm(jacobian, 1e-10)?;
    let x = g_tilde.matvec_t(w)?;
    let composite = g.matvec_t(w)?;
    let param_mismatch = norm(&sub(&composite, &g_down));
    let mismatch_bound = sigma_max * norm(&sub(&x, g_tilde_down));
    let alignment = dot(&x, g_tilde_down);
    let param_normalized = alignment / norm(&composite);
    let normalized_bound = alignment / (sigma_max * norm(&x));
    Ok(BoundReport {
        sigma_max,
        param_mismatch,
        mismatch_bound,
        alignment,
        param_normalized,
        normalized_bound,
    })
}

/// Default grid resolutions.
pub const GRID_RESOLUTION_K2: usize = 721;
pub const GRID_RESOLUTION_K3: usize = 50;
const GRID_ZOOM_ROUNDS: usize = 4;

fn grid_objective(w: &[f64], g: &Mat, g_down: &[f64], mode: NormalizationMode) -> Option<f64> {
    tuner::alignment_objective(w, g, g_down, mode).ok()
}

/// Exhaustive search for the weights maximizing the alignment objective of
/// `mode` over the nonnegative orthant (K <= 3), refined by repeated
/// zoomed grids around the incumbent.
///
/// Normalized modes are ray invariant, so K = 2 searches the quarter circle
/// (`WeightNorm`, `CompositeGrad`) or the simplex edge (`WeightSum`), and
/// K = 3 the simplex. `None` searches the box `[0, 1]^K`. The result is
/// returned on the simplex for `WeightSum`, on the unit sphere for
/// `WeightNorm` and `CompositeGrad`, and as found in the box for `None`.
pub fn grid_argmax_weights(g: &Mat, g_down: &[f64], mode: NormalizationMode, resolution: usize) -> Result<Vec<f64>> {
    let k = g.rows();
    if g.cols() != g_down.len() {
        return Err(Error::shape("grid_argmax_weights", g.cols(), g_down.len()));
    }
    if resolution < 3 {
        return Err(Error::InvalidArgument("grid resolution must be >= 3".into()));
    }
    let best = match k {
        1 => vec![1.0],
        2 => grid_k2(g, g_down, mode, resolution)?,
        3 => grid_k3(g, g_down, mode, resolution)?,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "grid oracle supports K <= 3, got K = {k}"
            )))
        }
    };
    Ok(match mode {
        NormalizationMode::None => best,
        NormalizationMode::WeightSum => {
            let s: f64 = best.iter().sum();
            best.iter().map(|v| v / s).collect()
        }
        NormalizationMode::WeightNorm | NormalizationMode::CompositeGrad => {
            let n = norm(&best);
            best.iter().map(|v| v / n).collect()
        }
    })
}

/// Maximizes `f` over `[lo, hi]` by a grid followed by zoomed grids.
fn zoom_1d(lo: f64, hi: f64, resolution: usize, f: impl Fn(f64) -> Option<f64>) -> Option<f64> {
    let (mut a, mut b) = (lo, hi);
    let mut best: Option<(f64, f64)> = None;
    for _ in 0..GRID_ZOOM_ROUNDS {
        let step = (b - a) / (resolution - 1) as f64;
        for i in 0..resolution {
            let s = a + step * i as f64;
            if let Some(v) = f(s) {
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((s, v));
                }
            }
        }
        let (s, _) = best?;
        a = (s - step).max(lo);
        b = (s + step).min(hi);
    }
    best.map(|(s, _)| s)
}

fn grid_k2(g: &Mat, g_down: &[f64], mode: NormalizationMode, res: usize) -> Result<Vec<f64>> {
    let point = |s: f64| -> Vec<f64> {
        match mode {
            NormalizationMode::WeightSum => vec![1.0 - s, s],
            _ => {
                let phi = s * std::f64::consts::FRAC_PI_2;
                vec![phi.cos(), phi.sin()]
            }
        }
    };
    if mode == NormalizationMode::None {
        return grid_box(g, g_down, 2, res);
    }
    let s = zoom_1d(0.0, 1.0, res, |s| grid_objective(&point(s), g, g_down, mode))
        .ok_or(Error::DegenerateNorm(0.0))?;
    Ok(point(s))
}

fn grid_k3(g: &Mat, g_down: &[f64], mode: NormalizationMode, res: usize) -> Result<Vec<f64>> {
    if mode == NormalizationMode::None {
        return grid_box(g, g_down, 3, res);
    }
    let eval = |a: f64, b: f64| -> Option<f64> {
        if a + b > 1.0 + 1e-15 {
            return None;
        }
        grid_objective(&[a, b, (1.0 - a - b).max(0.0)], g, g_down, mode)
    };
    let (mut lo_a, mut hi_a, mut lo_b, mut hi_b) = (0.0, 1.0, 0.0, 1.0);
    let mut best: Option<(f64, f64, f64)> = None;
    for _ in 0..GRID_ZOOM_ROUNDS {
        let sa = (hi_a - lo_a) / res as f64;
        let sb = (hi_b - lo_b) / res as f64;
        for i in 0..=res {
            for j in 0..=res {
                let a = lo_a + sa * i as f64;
                let b = lo_b + sb * j as f64;
                if let Some(v) = eval(a, b) {
                    if best.is_none_or(|(_, _, bv)| v > bv) {
                        best = Some((a, b, v));
                    }
                }
            }
        }
        let (a, b, _) = best.ok_or(Error::DegenerateNorm(0.0))?;
        lo_a = (a - sa).max(0.0);
        hi_a = (a + sa).min(1.0);
        lo_b = (b - sb).max(0.0);
        hi_b = (b + sb).min(1.0);
    }
    let (a, b, _) = best.ok_or(Error::DegenerateNorm(0.0))?;
    Ok(vec![a, b, (1.0 - a - b).max(0.0)])
}

fn grid_box(g: &Mat, g_down: &[f64], k: usize, res: usize) -> Result<Vec<f64>> {
    let mut best: Option<(Vec<f64>, f64)> = None;
    let total = res.pow(k as u32);
    for idx in 0..total {
        let mut rem = idx;
        let w: Vec<f64> = (0..k)
            .map(|_| {
                let i = rem % res;
                rem /= res;
                i as f64 / (res - 1) as f64
            })
            .collect();
        if let Some(v) = grid_objective(&w, g, g_down, NormalizationMode::None) {
            if best.as_ref().is_none_or(|(_, bv)| v > *bv) {
                best = Some((w, v));
            }
        }
    }
    best.map(|(w, _)| w).ok_or(Error::DegenerateNorm(0.0))
}

/// Cosine between the composite gradient `w^T G` and `g_down`.
pub fn composite_cosine(w: &[f64], g: &Mat, g_down: &[f64]) -> Result<f64> {
    Ok(cosine(&g.matvec_t(w)?, g_down))
}
