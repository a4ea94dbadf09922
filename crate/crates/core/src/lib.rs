//! Polyp segmentation with coupled attention-gated UNets whose encoders are
//! built from split-attention residual blocks.
//!
//! The crate is self-contained: [`graph`] provides reverse-mode
//! differentiation over the dense [`tensor::Tensor`] type, [`nn`] builds the
//! network on top of it, [`metrics`] holds the Tversky objective and the
//! evaluation suite, [`data`] the dataset/augmentation/fold machinery and
//! [`train`] the two-phase training loop, checkpoints and inference.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, Mode, Var};
pub use params::{ParamId, ParamKind, ParamSet};
pub use tensor::{Real, Tensor};
