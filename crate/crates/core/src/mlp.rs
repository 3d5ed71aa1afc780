//! Fixed-structure multilayer perceptron with hand-written vector-Jacobian
//! products.
//!
//! A layer computes `act(x W^T + b)` on a batch of row vectors, so the
//! weight of a layer with fan-in `n` and fan-out `m` is an `m x n` matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, Mat};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_out x fan_in`.
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Mat, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("Layer::new", weight.rows(), bias.len()));
        }
        Ok(Layer {
            weight,
            bias,
            activation,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Parameters of a multilayer perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Values recorded by [`Mlp::forward`]; `values[0]` is the input and
/// `values[i + 1]` the output of layer `i`.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    values: Vec<Mat>,
}

impl ForwardTape {
    pub fn input(&self) -> &Mat {
        &self.values[0]
    }

    pub fn output(&self) -> &Mat {
        self.values.last().expect("tape holds at least the input")
    }
}

/// Gradient with the same block structure as an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.as_slice().len() + b.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Mat::is_finite) && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::shape("Mlp::new", pair[0].fan_out(), pair[1].fan_in()));
            }
        }
        Ok(Mlp { layers })
    }

    /// Random initialization with `N(0, 1/fan_in)` weights and zero biases.
    ///
    /// `sizes` lists the layer widths including input and output; hidden
    /// layers use `hidden` and the last layer uses `output`.
    pub fn init(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = (1.0 / w[0] as f64).sqrt();
                let act = if i + 1 == n { output } else { hidden };
                Layer {
                    weight: Mat::random_normal(w[1], w[0], std, rng),
                    bias: vec![0.0; w[1]],
                    activation: act,
                }
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn fan_in(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn fan_out(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer: weight (row-major), then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("Mlp::set_params_flat", self.param_count(), flat.len()));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            weights: self
                .layers
                .iter()
                .map(|l| Mat::zeros(l.fan_out(), l.fan_in()))
                .collect(),
            biases: self.layers.iter().map(|l| vec![0.0; l.fan_out()]).collect(),
        }
    }

    pub fn forward(&self, input: &Mat) -> Result<(Mat, ForwardTape)> {
        if input.cols() != self.fan_in() {
            return Err(Error::shape("Mlp::forward", self.fan_in(), input.cols()));
        }
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.clone());
        for layer in &self.layers {
            let x = values.last().expect("non-empty");
            let mut y = x.matmul(&layer.weight.transpose())?;
            for r in 0..y.rows() {
                for (v, b) in y.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v = layer.activation.apply(*v + b);
                }
            }
            values.push(y);
        }
        let out = values.last().expect("non-empty").clone();
        if !out.is_finite() {
            return Err(Error::NonFinite("Mlp::forward"));
        }
        Ok((out, ForwardTape { values }))
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, input: &Mat) -> Result<Mat> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Exact gradients of `<output, cotangent>` with respect to the
    /// parameters and the input.
    pub fn vjp(&self, tape: &ForwardTape, cotangent: &Mat) -> Result<(MlpGrads, Mat)> {
        let (grads, input_grad) = self.vjp_impl(tape, cotangent, true)?;
        Ok((grads, input_grad.expect("requested")))
    }

    /// Like [`Mlp::vjp`] but skips the input gradient of the first layer.
    pub fn vjp_params(&self, tape: &ForwardTape, cotangent: &Mat) -> Result<MlpGrads> {
        self.vjp_impl(tape, cotangent, false).map(|(g, _)| g)
    }

    fn vjp_impl(&self, tape: &ForwardTape, cotangent: &Mat, want_input: bool) -> Result<(MlpGrads, Option<Mat>)> {
        if tape.values.len() != self.layers.len() + 1 {
            return Err(Error::shape("Mlp::vjp tape depth", self.layers.len() + 1, tape.values.len()));
        }
        for (l, v) in self.layers.iter().zip(&tape.values) {
            if v.cols() != l.fan_in() {
                return Err(Error::shape("Mlp::vjp tape width", l.fan_in(), v.cols()));
            }
        }
        let out = tape.output();
        if cotangent.shape() != out.shape() {
            return Err(Error::shape(
                "Mlp::vjp cotangent",
                format!("{:?}", out.shape()),
                format!("{:?}", cotangent.shape()),
            ));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut upstream = cotangent.clone();
        let mut input_grad = None;
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let y = &tape.values[i + 1];
            let x = &tape.values[i];
            if layer.activation != Activation::Identity {
                for (g, yv) in upstream.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *g *= layer.activation.derivative_from_output(*yv);
                }
            }
            let grad_w = upstream.matmul_tn(x)?;
            let mut grad_b = vec![0.0; layer.fan_out()];
            for r in upstream.row_iter() {
                axpy(1.0, r, &mut grad_b);
            }
            weights.push(grad_w);
            biases.push(grad_b);
            if i > 0 || want_input {
                let next = upstream.matmul(&layer.weight)?;
                if i == 0 {
                    input_grad = Some(next);
                } else {
                    upstream = next;
                }
            }
        }
        weights.reverse();
        biases.reverse();
        let grads = MlpGrads { weights, biases };
        if !grads.is_finite() || input_grad.as_ref().is_some_and(|g| !g.is_finite()) {
            return Err(Error::NonFinite("Mlp::vjp"));
        }
        Ok((grads, input_grad))
    }

    /// `params -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &MlpGrads, lr: f64) -> Result<()> {
        if grads.weights.len() != self.layers.len() {
            return Err(Error::shape("Mlp::sgd_step", self.layers.len(), grads.weights.len()));
        }
        for ((l, gw), gb) in self.layers.iter_mut().zip(&grads.weights).zip(&grads.biases) {
            l.weight.axpy(-lr, gw)?;
            axpy(-lr, gb, &mut l.bias);
        }
        if self
            .layers
            .iter()
            .any(|l| !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()))
        {
            return Err(Error::NonFinite("Mlp::sgd_step"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_net(rng: &mut Rng, sizes: &[usize], hidden: Activation, output: Activation) -> Mlp {
        let mut net = Mlp::init(sizes, hidden, output, rng).unwrap();
        // non-zero biases so bias gradients are exercised
        for l in net.layers_mut() {
            for b in &mut l.bias {
                *b = 0.3 * rng.normal();
            }
        }
        net
    }

    /// Straight-line re-evaluation of one row, independent of the batched path.
    fn forward_row(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in net.layers() {
            let mut next = Vec::with_capacity(l.fan_out());
            for o in 0..l.fan_out() {
                let mut s = l.bias[o];
                for (i, hi) in h.iter().enumerate() {
                    s += l.weight[(o, i)] * hi;
                }
                next.push(match l.activation {
                    Activation::Tanh => s.tanh(),
                    Activation::Relu => {
                        if s > 0.0 {
                            s
                        } else {
                            0.0
                        }
                    }
                    Activation::Identity => s,
                });
            }
            h = next;
        }
        h
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Mlp::new(vec![Layer::new(Mat::identity(2), vec![0.0; 2], Activation::Identity).unwrap()]).unwrap();
        let (out, _) = net.forward(&Mat::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let net = Mlp::new(vec![Layer::new(Mat::zeros(1, 3), vec![0.5], Activation::Identity).unwrap()]).unwrap();
        let mut rng = Rng::new(1);
        let x = Mat::random_normal(4, 3, 1.0, &mut rng);
        let (out, _) = net.forward(&x).unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let mut rng = Rng::new(2);
        let net = random_net(&mut rng, &[4, 6, 3], Activation::Tanh, Activation::Tanh);
        let x = Mat::random_normal(5, 4, 1.0, &mut rng);
        let (out, _) = net.forward(&x).unwrap();
        for r in 0..5 {
            let reference = forward_row(&net, x.row(r));
            for (a, b) in out.row(r).iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_fan_in() {
        let mut rng = Rng::new(3);
        let net = random_net(&mut rng, &[4, 2], Activation::Tanh, Activation::Identity);
        assert!(matches!(net.forward(&Mat::zeros(2, 3)), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_vjp_is_outer_product() {
        let w = Mat::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let net = Mlp::new(vec![Layer::new(w.clone(), vec![0.0; 2], Activation::Identity).unwrap()]).unwrap();
        let x = Mat::from_rows(&[[0.5, -1.0, 2.0]]).unwrap();
        let c = Mat::from_rows(&[[3.0, -2.0]]).unwrap();
        let (_, tape) = net.forward(&x).unwrap();
        let (g, gx) = net.vjp(&tape, &c).unwrap();
        // grad_W = c x^T, grad_x = W^T c
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(g.weights[0][(o, i)], c[(0, o)] * x[(0, i)]);
            }
        }
        assert_eq!(g.biases[0], vec![3.0, -2.0]);
        let expect: Vec<f64> = (0..3).map(|i| w[(0, i)] * 3.0 + w[(1, i)] * -2.0).collect();
        assert_eq!(gx.as_slice(), expect.as_slice());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = Rng::new(4);
        let net = random_net(&mut rng, &[3, 5, 2], Activation::Relu, Activation::Tanh);
        let x = Mat::random_normal(4, 3, 1.0, &mut rng);
        let (out, tape) = net.forward(&x).unwrap();
        let (g, gx) = net.vjp(&tape, &Mat::zeros(out.rows(), out.cols())).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(gx.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vjp_rejects_mismatched_cotangent() {
        let mut rng = Rng::new(5);
        let net = random_net(&mut rng, &[3, 2], Activation::Tanh, Activation::Identity);
        let (_, tape) = net.forward(&Mat::zeros(4, 3)).unwrap();
        assert!(net.vjp(&tape, &Mat::zeros(4, 3)).is_err());
        let other = random_net(&mut rng, &[3, 4, 2], Activation::Tanh, Activation::Identity);
        assert!(other.vjp(&tape, &Mat::zeros(4, 2)).is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = Rng::new(6);
        let mut net = random_net(&mut rng, &[3, 4, 2], Activation::Tanh, Activation::Identity);
        let flat = net.params_flat();
        assert_eq!(flat.len(), net.param_count());
        let copy = net.clone();
        net.set_params_flat(&flat).unwrap();
        assert_eq!(net, copy);
        assert!(net.set_params_flat(&flat[1..]).is_err());
    }
}
