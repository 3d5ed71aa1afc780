//! Shared backbone, per-loss pretraining heads and a detached downstream
//! head.

use crate::error::{Error, LossId, Result};
use crate::linalg::{axpy, Mat};
use crate::loss::{self, LossKind};
use crate::mlp::{ForwardTape, Mlp, MlpGrads};

/// One minibatch: inputs, one target block per pretraining loss, downstream
/// labels and the mask of rows that carry a downstream label.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Mat,
    pub targets: Vec<Mat>,
    pub downstream: Mat,
    pub labeled_mask: Vec<bool>,
}

impl Batch {
    pub fn new(inputs: Mat, targets: Vec<Mat>, downstream: Mat, labeled_mask: Vec<bool>) -> Result<Self> {
        let b = inputs.rows();
        if let Some(t) = targets.iter().find(|t| t.rows() != b) {
            return Err(Error::shape("Batch targets", b, t.rows()));
        }
        if downstream.rows() != b {
            return Err(Error::shape("Batch downstream labels", b, downstream.rows()));
        }
        if labeled_mask.len() != b {
            return Err(Error::shape("Batch labeled mask", b, labeled_mask.len()));
        }
        Ok(Batch {
            inputs,
            targets,
            downstream,
            labeled_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled_mask.iter().filter(|m| **m).count()
    }

    /// Rows `idx` in order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.iter().map(|t| t.select_rows(idx)).collect(),
            downstream: self.downstream.select_rows(idx),
            labeled_mask: idx.iter().map(|&i| self.labeled_mask[i]).collect(),
        }
    }

    /// The labeled rows only, all marked labeled.
    pub fn labeled_subset(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labeled_mask[i]).collect();
        self.select(&idx)
    }
}

/// Whether [`CompositeModel::compute_embedding_grads`] must produce the
/// downstream gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownstreamGrad {
    /// Error out when the batch has no labeled rows.
    Required,
    /// Compute it when the batch has labeled rows.
    IfLabeled,
    Skip,
}

/// Embedding-space gradients of every loss for one batch.
///
/// Row `k` of `g_tilde` is the gradient of the batch-mean loss `k` with
/// respect to the `B x d` embedding, flattened row-major.
#[derive(Clone, Debug)]
pub struct EmbeddingGrads {
    pub g_tilde: Mat,
    pub g_tilde_down: Option<Vec<f64>>,
    pub losses: Vec<f64>,
    pub downstream_loss: Option<f64>,
    pub embedding: Mat,
    backbone_tape: ForwardTape,
    head_grads: Vec<MlpGrads>,
    downstream_head_grads: Option<MlpGrads>,
}

impl EmbeddingGrads {
    pub fn num_losses(&self) -> usize {
        self.g_tilde.rows()
    }

    /// `sum_k w_k g~_k`.
    pub fn combine(&self, weights: &[f64]) -> Result<Vec<f64>> {
        self.g_tilde.matvec_t(weights)
    }

    pub fn head_grads(&self) -> &[MlpGrads] {
        &self.head_grads
    }

    pub fn downstream_head_grads(&self) -> Option<&MlpGrads> {
        self.downstream_head_grads.as_ref()
    }
}

/// Parameter-space gradients with respect to the backbone parameters.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    /// `K x P`.
    pub g: Mat,
    pub g_down: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateRates {
    pub backbone: f64,
    pub heads: f64,
    pub downstream: f64,
}

impl UpdateRates {
    pub fn uniform(lr: f64) -> Self {
        UpdateRates {
            backbone: lr,
            heads: lr,
            downstream: lr,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("backbone", self.backbone),
            ("heads", self.heads),
            ("downstream", self.downstream),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} learning rate {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeModel {
    pub backbone: Mlp,
    pub heads: Vec<Mlp>,
    pub downstream_head: Mlp,
    pub loss_kinds: Vec<LossKind>,
    pub downstream_loss_kind: LossKind,
}

impl CompositeModel {
    pub fn new(
        backbone: Mlp,
        heads: Vec<Mlp>,
        downstream_head: Mlp,
        loss_kinds: Vec<LossKind>,
        downstream_loss_kind: LossKind,
    ) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::InvalidArgument("a composite model needs K >= 1 heads".into()));
        }
        if heads.len() != loss_kinds.len() {
            return Err(Error::shape("CompositeModel loss kinds", heads.len(), loss_kinds.len()));
        }
        let d = backbone.fan_out();
        for h in heads.iter().chain(std::iter::once(&downstream_head)) {
            if h.fan_in() != d {
                return Err(Error::shape("CompositeModel head fan-in", d, h.fan_in()));
            }
        }
        Ok(CompositeModel {
            backbone,
            heads,
            downstream_head,
            loss_kinds,
            downstream_loss_kind,
        })
    }

    pub fn num_losses(&self) -> usize {
        self.heads.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone.fan_out()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.targets.len() != self.num_losses() {
            return Err(Error::shape("batch target blocks", self.num_losses(), batch.targets.len()));
        }
        if batch.inputs.cols() != self.backbone.fan_in() {
            return Err(Error::shape("batch inputs", self.backbone.fan_in(), batch.inputs.cols()));
        }
        Ok(())
    }

    /// One backbone forward, `K + 1` head forwards and `K + 1` head-level
    /// backward passes; the backbone itself is not differentiated here.
    pub fn compute_embedding_grads(&self, batch: &Batch, downstream: DownstreamGrad) -> Result<EmbeddingGrads> {
        self.check_batch(batch)?;
        let (z, backbone_tape) = self.backbone.forward(&batch.inputs)?;
        let width = z.as_slice().len();
        let k = self.num_losses();
        let mut g_tilde = Mat::zeros(k, width);
        let mut losses = Vec::with_capacity(k);
        let mut head_grads = Vec::with_capacity(k);
        for (i, ((head, kind), target)) in self.heads.iter().zip(&self.loss_kinds).zip(&batch.targets).enumerate() {
            let (out, tape) = head.forward(&z)?;
            let (value, cot) = loss::loss_and_grad(*kind, &out, target, None)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(LossId::Pretrain(i)));
            }
            let (grads, gz) = head.vjp(&tape, &cot)?;
            g_tilde.row_mut(i).copy_from_slice(gz.as_slice());
            losses.push(value);
            head_grads.push(grads);
        }

        let want_down = match downstream {
            DownstreamGrad::Required => {
                if batch.n_labeled() == 0 {
                    return Err(Error::EmptyLabeledSubset);
                }
                true
            }
            DownstreamGrad::IfLabeled => batch.n_labeled() > 0,
            DownstreamGrad::Skip => false,
        };
        let (g_tilde_down, downstream_loss, downstream_head_grads) = if want_down {
            let (out, tape) = self.downstream_head.forward(&z)?;
            let (value, cot) = loss::loss_and_grad(
                self.downstream_loss_kind,
                &out,
                &batch.downstream,
                Some(&batch.labeled_mask),
            )?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(LossId::Downstream));
            }
            let (grads, gz) = self.downstream_head.vjp(&tape, &cot)?;
            (Some(gz.into_vec()), Some(value), Some(grads))
        } else {
            (None, None, None)
        };

        Ok(EmbeddingGrads {
            g_tilde,
            g_tilde_down,
            losses,
            downstream_loss,
            embedding: z,
            backbone_tape,
            head_grads,
            downstream_head_grads,
        })
    }

    /// Backbone step along `w_bar^T G~`; heads step on their own unweighted
    /// gradients and the downstream head on the downstream gradient, which
    /// never reaches the backbone.
    pub fn apply_composite_update(&mut self, grads: &EmbeddingGrads, w_bar: &[f64], rates: UpdateRates) -> Result<()> {
        if w_bar.len() != self.num_losses() {
            return Err(Error::shape("apply_composite_update weights", self.num_losses(), w_bar.len()));
        }
        let cotangent = grads.combine(w_bar)?;
        self.apply_update_with_cotangent(grads, &cotangent, rates)
    }

    /// As [`CompositeModel::apply_composite_update`] with an explicit
    /// flattened embedding cotangent for the backbone.
    pub fn apply_update_with_cotangent(
        &mut self,
        grads: &EmbeddingGrads,
        cotangent: &[f64],
        rates: UpdateRates,
    ) -> Result<()> {
        rates.validate()?;
        if grads.head_grads.len() != self.num_losses() {
            return Err(Error::shape("embedding grads", self.num_losses(), grads.head_grads.len()));
        }
        let z = &grads.embedding;
        let cot = Mat::from_vec(z.rows(), z.cols(), cotangent.to_vec())?;
        if !cot.is_finite() {
            return Err(Error::NonFinite("composite cotangent"));
        }
        let backbone_grads = self.backbone.vjp_params(&grads.backbone_tape, &cot)?;
        self.backbone.sgd_step(&backbone_grads, rates.backbone)?;
        for (head, g) in self.heads.iter_mut().zip(&grads.head_grads) {
            head.sgd_step(g, rates.heads)?;
        }
        if let Some(g) = &grads.downstream_head_grads {
            self.downstream_head.sgd_step(g, rates.downstream)?;
        }
        Ok(())
    }

    /// Parameter-space gradients `g_k` and `g_down` with respect to the
    /// backbone parameters, one full backbone backward pass per loss.
    pub fn full_param_grads(&self, batch: &Batch) -> Result<ParamGrads> {
        let eg = self.compute_embedding_grads(batch, DownstreamGrad::Required)?;
        self.param_grads_from(&eg)
    }

    /// Backbone VJPs of every row of `G~` (and of `g~_down`) taken from an
    /// existing forward tape.
    pub fn param_grads_from(&self, eg: &EmbeddingGrads) -> Result<ParamGrads> {
        let (rows, cols) = eg.embedding.shape();
        let p = self.backbone.param_count();
        let mut g = Mat::zeros(eg.num_losses(), p);
        for k in 0..eg.num_losses() {
            let cot = Mat::from_vec(rows, cols, eg.g_tilde.row(k).to_vec())?;
            let grads = self.backbone.vjp_params(&eg.backbone_tape, &cot)?;
            g.row_mut(k).copy_from_slice(&grads.flatten());
        }
        let down = eg.g_tilde_down.as_ref().ok_or(Error::EmptyLabeledSubset)?;
        let cot = Mat::from_vec(rows, cols, down.clone())?;
        let g_down = self.backbone.vjp_params(&eg.backbone_tape, &cot)?.flatten();
        Ok(ParamGrads { g, g_down })
    }

    /// Backbone step along an explicit parameter-space direction.
    pub fn step_backbone_params(&mut self, direction: &[f64], lr: f64) -> Result<()> {
        let mut theta = self.backbone.params_flat();
        if direction.len() != theta.len() {
            return Err(Error::shape("step_backbone_params", theta.len(), direction.len()));
        }
        axpy(-lr, direction, &mut theta);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("step_backbone_params"));
        }
        self.backbone.set_params_flat(&theta)
    }

    /// Head-only update (pretraining heads and downstream head).
    pub fn step_heads(&mut self, grads: &EmbeddingGrads, rates: UpdateRates) -> Result<()> {
        for (head, g) in self.heads.iter_mut().zip(&grads.head_grads) {
            head.sgd_step(g, rates.heads)?;
        }
        if let Some(g) = &grads.downstream_head_grads {
            self.downstream_head.sgd_step(g, rates.downstream)?;
        }
        Ok(())
    }

    pub fn embed(&self, inputs: &Mat) -> Result<Mat> {
        self.backbone.predict(inputs)
    }

    /// Downstream loss over the labeled rows of `batch`.
    pub fn downstream_loss(&self, batch: &Batch) -> Result<f64> {
        let z = self.embed(&batch.inputs)?;
        let out = self.downstream_head.predict(&z)?;
        let v = loss::loss_value(self.downstream_loss_kind, &out, &batch.downstream, Some(&batch.labeled_mask))?;
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(LossId::Downstream));
        }
        Ok(v)
    }

    /// Downstream loss and metric over every row of `batch`: accuracy for a
    /// cross-entropy head, RMSE for a squared-error head.
    pub fn evaluate_downstream(&self, batch: &Batch) -> Result<(f64, f64)> {
        let z = self.embed(&batch.inputs)?;
        let out = self.downstream_head.predict(&z)?;
        let value = loss::loss_value(self.downstream_loss_kind, &out, &batch.downstream, None)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(LossId::Downstream));
        }
        let metric = match self.downstream_loss_kind {
            LossKind::CrossEntropy => loss::accuracy(&out, &batch.downstream)?,
            LossKind::SquaredError => loss::rmse(&out, &batch.downstream)?,
        };
        Ok((value, metric))
    }

    /// Per-loss pretraining values on `batch`.
    pub fn pretraining_losses(&self, batch: &Batch) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let z = self.embed(&batch.inputs)?;
        self.heads
            .iter()
            .zip(&self.loss_kinds)
            .zip(&batch.targets)
            .map(|((h, kind), t)| loss::loss_value(*kind, &h.predict(&z)?, t, None))
            .collect()
    }
}
