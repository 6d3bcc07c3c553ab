//! A minimal dense-tensor toolkit: layer kernels with explicit backward
//! passes, losses, SGD, a small backbone, gradient checking and weight
//! persistence. Everything runs in `f64`.

pub mod backbone;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
mod tensor;
pub mod weights;

use thiserror::Error;

pub use backbone::{backbone_forward, Backbone, BackboneCache, BackboneSpec, ConvSpec, StageSpec, TapSpec};
pub use gradcheck::{check_gradients, finite_diff_check, hash_active, Differentiable, GradCheckReport};
pub use layers::{Conv2d, Linear};
pub use loss::{smooth_l1_loss, softmax_ce_loss};
pub use optim::{sgd_step, Sgd, SgdConfig};
pub use tensor::{pad_to_multiple, Tensor};
pub use weights::WeightFile;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("weight file: {0}")]
    Weights(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
