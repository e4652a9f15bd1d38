//! Differentiable array kernel: tensors, a reverse-mode tape, masked
//! optimisers and a finite-difference gradient checker.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::{
    masked_sgd_step, OptimizerKind, Optimizer, ParamId, ParamStore, Parameter, ParameterMask,
    TrainConfig,
};
pub use tape::{concat, mix, stack, Gradients, LookupIndex, Tape, Var, LN_FLOOR};
pub use tensor::Tensor;
