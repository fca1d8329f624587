//! A small dually supervised feature pyramid detector.
//!
//! Everything runs on a define-by-run autodiff tape ([`autodiff::Graph`])
//! over `f64` tensors. The detector ([`model::Model`]) is a two-stage or
//! three-stage cascade FPN detector; with dual supervision enabled it also
//! trains auxiliary heads on the bottom-up pyramid, which are dropped for
//! inference.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod boxes;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod heads;
pub mod instrument;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pyramid;
pub mod roi_align;
pub mod rpn;
pub mod tensor;
pub mod training;
pub mod util;

pub use autodiff::{Graph, Var};
pub use boxes::{BBox, BoxDelta};
pub use dataset::{Dataset, Instance, Mask, Sample};
pub use error::{Error, Result};
pub use metrics::{EvalReport, FullReport};
pub use model::{Detection, Model, ModelConfig};
pub use params::ParamStore;
pub use tensor::{DType, Tensor};
pub use training::{LossReport, TrainConfig};
