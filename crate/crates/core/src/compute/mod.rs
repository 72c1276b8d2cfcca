//! Minimal reverse-mode differentiable tensor substrate: exactly the layers
//! the span model needs, plus gradient verification, Adam and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{finite_difference_check, CheckOptions, GradCheckReport, Objective, ParamCheck};
pub use layers::{Conv1d, LayerNorm, Linear, SelfAttention, TransformerBlock};
pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{masked_softmax, softmax_cross_entropy, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
