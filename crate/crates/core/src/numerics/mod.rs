//! Real-valued tensors, reverse-mode autodiff, the handful of neural layers
//! the denoiser needs, and RMSprop.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, CoordinateCheck, GradCheckOptions, GradCheckReport, FD_STEP};
pub use layers::{
    batchnorm_forward, conv2d_forward, linear_forward, multihead_attention, BatchNorm, Conv2d,
    Linear, MultiHeadAttention,
};
pub use optim::{rmsprop_step, OptimizerState, Rmsprop};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
