//! Dense `f64` tensors, a reverse-mode tape, the three-headed model and its optimizers.

pub mod gradcheck;
mod model;
mod optim;
mod tape;
mod tensor;

pub use model::{
    extract_features, forward, head_logits, init_affine, input_var, run_extractor, ActShape, Architecture,
    BoundParams, ExtractorTrace, InputShape, LayerSpec, ModelParams, ParamGrads, ParamSet,
};
pub use optim::{Optimizer, OptimizerConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
