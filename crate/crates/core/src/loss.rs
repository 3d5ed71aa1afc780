//! Batch-mean losses and their gradients with respect to head outputs.
//!
//! Squared error is `1/(2n) * sum ||o_i - t_i||^2`; cross-entropy takes
//! logits and a single column of class indices. `n` counts the rows that
//! participate, so a masked loss averages over the selected rows only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

impl LossKind {
    pub(crate) fn tag(self) -> u8 {
        match self {
            LossKind::SquaredError => 0,
            LossKind::CrossEntropy => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(LossKind::SquaredError),
            1 => Some(LossKind::CrossEntropy),
            _ => None,
        }
    }

    /// Number of target columns for a head with `out_dim` outputs.
    pub fn target_cols(self, out_dim: usize) -> usize {
        match self {
            LossKind::SquaredError => out_dim,
            LossKind::CrossEntropy => 1,
        }
    }
}

fn check_target(kind: LossKind, output: &Mat, target: &Mat) -> Result<()> {
    let cols = kind.target_cols(output.cols());
    if target.rows() != output.rows() || target.cols() != cols {
        return Err(Error::shape(
            "loss target",
            format!("{}x{}", output.rows(), cols),
            format!("{}x{}", target.rows(), target.cols()),
        ));
    }
    Ok(())
}

fn class_index(value: f64, n_classes: usize) -> Result<usize> {
    if value < 0.0 || value.fract() != 0.0 || value as usize >= n_classes {
        return Err(Error::InvalidArgument(format!(
            "class label {value} outside 0..{n_classes}"
        )));
    }
    Ok(value as usize)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Loss value and gradient with respect to `output`, averaged over the rows
/// selected by `mask` (all rows when `None`). Unselected rows get a zero
/// gradient.
pub fn loss_and_grad(kind: LossKind, output: &Mat, target: &Mat, mask: Option<&[bool]>) -> Result<(f64, Mat)> {
    check_target(kind, output, target)?;
    if let Some(m) = mask {
        if m.len() != output.rows() {
            return Err(Error::shape("loss mask", output.rows(), m.len()));
        }
    }
    let selected = |i: usize| mask.is_none_or(|m| m[i]);
    let n = (0..output.rows()).filter(|&i| selected(i)).count();
    if n == 0 {
        return Err(Error::EmptyLabeledSubset);
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Mat::zeros(output.rows(), output.cols());
    let mut total = 0.0;
    for i in 0..output.rows() {
        if !selected(i) {
            continue;
        }
        let o = output.row(i);
        let g = grad.row_mut(i);
        match kind {
            LossKind::SquaredError => {
                for ((gj, oj), tj) in g.iter_mut().zip(o).zip(target.row(i)) {
                    let r = oj - tj;
                    total += 0.5 * r * r;
                    *gj = r * inv_n;
                }
            }
            LossKind::CrossEntropy => {
                let y = class_index(target[(i, 0)], o.len())?;
                let lse = log_sum_exp(o);
                total += lse - o[y];
                for (j, (gj, oj)) in g.iter_mut().zip(o).enumerate() {
                    let p = (oj - lse).exp();
                    *gj = (p - if j == y { 1.0 } else { 0.0 }) * inv_n;
                }
            }
        }
    }
    Ok((total * inv_n, grad))
}

pub fn loss_value(kind: LossKind, output: &Mat, target: &Mat, mask: Option<&[bool]>) -> Result<f64> {
    loss_and_grad(kind, output, target, mask).map(|(v, _)| v)
}

/// Classification accuracy of argmax predictions against class indices.
pub fn accuracy(logits: &Mat, labels: &Mat) -> Result<f64> {
    check_target(LossKind::CrossEntropy, logits, labels)?;
    if logits.rows() == 0 {
        return Err(Error::InvalidArgument("accuracy of an empty batch".into()));
    }
    let mut correct = 0usize;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let pred = (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap_or(0);
        if pred == class_index(labels[(i, 0)], row.len())? {
            correct += 1;
        }
    }
    Ok(correct as f64 / logits.rows() as f64)
}

pub fn rmse(output: &Mat, target: &Mat) -> Result<f64> {
    check_target(LossKind::SquaredError, output, target)?;
    if output.is_empty() {
        return Err(Error::InvalidArgument("rmse of an empty batch".into()));
    }
    let n = output.as_slice().len() as f64;
    let sse: f64 = output
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((sse / n).sqrt())
}
