//! Online tuning of pretraining loss weights by aligning the composite
//! pretraining gradient with a downstream gradient in the shared embedding
//! space, together with multi-task weighting baselines and numerical
//! oracles for every derivation the method relies on.

pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod loss;
pub mod mlp;
pub mod model;
pub mod oracles;
pub mod rng;
pub mod tasks;
pub mod tuner;

pub use error::{Error, LossId, Result};
pub use linalg::Mat;
pub use model::{Batch, CompositeModel, DownstreamGrad, EmbeddingGrads, ParamGrads, UpdateRates};
pub use rng::Rng;
pub use tuner::{Normalization, NormalizationMode, WeightVector};
