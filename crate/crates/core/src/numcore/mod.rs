//! Dense tensors, a recording tape with the kernels the models need, and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use params::{ParamGrads, ParamId, ParamLayout, ParamSpec, ParamStore, ParameterRecord};
pub use tape::{attention_weights, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
