//! Loss-weight tuning by aligning the composite pretraining gradient with
//! the downstream gradient.
//!
//! With `a = G g_down` and `u = G^T w`, the objectives are
//!
//! | mode            | objective            |
//! |-----------------|----------------------|
//! | `None`          | `w.a`                |
//! | `WeightSum`     | `w.a / sum(w)`       |
//! | `WeightNorm`    | `w.a / ||w||`        |
//! | `CompositeGrad` | `w.a / ||u||`        |
//!
//! `CompositeGrad` equals `||g_down|| cos(u, g_down)` and is invariant to
//! rescaling `w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine, dot, norm, Mat};

/// Normalizers below this are treated as degenerate.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    None,
    WeightSum,
    WeightNorm,
    #[default]
    CompositeGrad,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Normalization {
    pub mode: NormalizationMode,
    /// Treat the normalizer as a constant when differentiating.
    pub detach_norm: bool,
}

/// Nonnegative loss weights and their update settings.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    w: Vec<f64>,
    pub lr_w: f64,
    pub floor: f64,
    degenerate: bool,
}

impl WeightVector {
    /// All-ones initialization.
    pub fn ones(k: usize, lr_w: f64, floor: f64) -> Result<Self> {
        Self::from_values(vec![1.0; k], lr_w, floor)
    }

    pub fn from_values(w: Vec<f64>, lr_w: f64, floor: f64) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidArgument("weight vector needs K >= 1".into()));
        }
        if !(lr_w.is_finite() && lr_w >= 0.0) {
            return Err(Error::InvalidArgument(format!("weight learning rate {lr_w}")));
        }
        if !(floor.is_finite() && floor >= 0.0) {
            return Err(Error::InvalidArgument(format!("weight floor {floor}")));
        }
        if w.iter().any(|v| !v.is_finite() || *v < floor) {
            return Err(Error::InvalidArgument(format!("weights {w:?} below floor {floor}")));
        }
        Ok(WeightVector {
            w,
            lr_w,
            floor,
            degenerate: false,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Whether the last step hit a degenerate composite norm.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}

fn check_dims(w: Option<&[f64]>, g: &Mat, g_down: &[f64]) -> Result<()> {
    if g.cols() != g_down.len() {
        return Err(Error::shape("gradient matrix vs downstream gradient", g.cols(), g_down.len()));
    }
    if let Some(w) = w {
        if w.len() != g.rows() {
            return Err(Error::shape("weights vs gradient rows", g.rows(), w.len()));
        }
    }
    Ok(())
}

/// `-lr * G g_down`: the derivative of the downstream loss after one SGD
/// step with respect to each weight.
pub fn hypergradient(g: &Mat, g_down: &[f64], lr: f64) -> Result<Vec<f64>> {
    check_dims(None, g, g_down)?;
    Ok(g.matvec(g_down)?.into_iter().map(|v| -lr * v).collect())
}

fn normalizer(w: &[f64], g: &Mat, mode: NormalizationMode) -> Result<f64> {
    Ok(match mode {
        NormalizationMode::None => 1.0,
        NormalizationMode::WeightSum => w.iter().sum(),
        NormalizationMode::WeightNorm => norm(w),
        NormalizationMode::CompositeGrad => norm(&g.matvec_t(w)?),
    })
}

pub fn alignment_objective(w: &[f64], g: &Mat, g_down: &[f64], mode: NormalizationMode) -> Result<f64> {
    check_dims(Some(w), g, g_down)?;
    let a = g.matvec(g_down)?;
    let n = normalizer(w, g, mode)?;
    if n < EPS_NORM {
        return Err(Error::DegenerateNorm(n));
    }
    Ok(dot(w, &a) / n)
}

/// Gradient of [`alignment_objective`] with respect to `w`; with
/// `detach_norm` the normalizer is held at its current value.
pub fn alignment_gradient(w: &[f64], g: &Mat, g_down: &[f64], norm_cfg: Normalization) -> Result<Vec<f64>> {
    check_dims(Some(w), g, g_down)?;
    let a = g.matvec(g_down)?;
    let n = normalizer(w, g, norm_cfg.mode)?;
    if n < EPS_NORM {
        return Err(Error::DegenerateNorm(n));
    }
    let f = dot(w, &a) / n;
    let mut grad: Vec<f64> = a.iter().map(|v| v / n).collect();
    if norm_cfg.detach_norm {
        return Ok(grad);
    }
    match norm_cfg.mode {
        NormalizationMode::None => {}
        NormalizationMode::WeightSum => grad.iter_mut().for_each(|x| *x -= f / n),
        NormalizationMode::WeightNorm => {
            for (x, wk) in grad.iter_mut().zip(w) {
                *x -= f * wk / (n * n);
            }
        }
        NormalizationMode::CompositeGrad => {
            let u = g.matvec_t(w)?;
            let gu = g.matvec(&u)?;
            for (x, v) in grad.iter_mut().zip(&gu) {
                *x -= f * v / (n * n);
            }
        }
    }
    Ok(grad)
}

/// `w / ||G^T w||`, so that the composite gradient has unit norm.
pub fn normalized_weights(w: &[f64], g: &Mat) -> Result<Vec<f64>> {
    scale_weights(w, g, NormalizationMode::CompositeGrad)
}

/// Rescales `w` by the normalizer of `mode`.
pub fn scale_weights(w: &[f64], g: &Mat, mode: NormalizationMode) -> Result<Vec<f64>> {
    if w.len() != g.rows() {
        return Err(Error::shape("scale_weights", g.rows(), w.len()));
    }
    let n = normalizer(w, g, mode)?;
    if n < EPS_NORM {
        return Err(Error::DegenerateNorm(n));
    }
    Ok(w.iter().map(|v| v / n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDiagnostics {
    /// `cos(G^T w, g_down)` before the step.
    pub cosine: f64,
    /// `||G^T w||` before the step.
    pub comp_norm: f64,
    /// The normalizer was degenerate and the unnormalized objective was used.
    pub degenerate: bool,
    /// Every weight hit zero and the vector was reset to uniform.
    pub reset: bool,
}

/// One projected ascent step on the alignment objective.
pub fn weight_step(
    weights: &mut WeightVector,
    g: &Mat,
    g_down: &[f64],
    norm_cfg: Normalization,
) -> Result<StepDiagnostics> {
    check_dims(Some(&weights.w), g, g_down)?;
    let u = g.matvec_t(&weights.w)?;
    let comp_norm = norm(&u);
    let cos = cosine(&u, g_down);
    let (grad, degenerate) = match alignment_gradient(&weights.w, g, g_down, norm_cfg) {
        Ok(grad) => (grad, false),
        Err(Error::DegenerateNorm(_)) => (g.matvec(g_down)?, true),
        Err(e) => return Err(e),
    };
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("weight gradient"));
    }
    for (wk, gk) in weights.w.iter_mut().zip(&grad) {
        *wk = (*wk + weights.lr_w * gk).max(weights.floor);
    }
    let reset = weights.w.iter().all(|v| *v <= 0.0);
    if reset {
        log::warn!("all loss weights reached zero; resetting to uniform");
        let k = weights.w.len() as f64;
        weights.w.iter_mut().for_each(|v| *v = 1.0 / k);
    }
    weights.degenerate = degenerate;
    Ok(StepDiagnostics {
        cosine: cos,
        comp_norm,
        degenerate,
        reset,
    })
}
