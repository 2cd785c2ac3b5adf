//! Dense tensors, the layer set with hand-written backward passes, AdamW,
//! the finite-difference checker and the tensor container format.

pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use optim::{adamw_step, OptimizerConfig, ParamSlot, Params};
pub use rng::SplitMix64;
pub use tensor::{cst, Scalar, Tensor};
