//! Dense f64 tensors, reverse-mode differentiation, and gradient checking.

pub mod gradcheck;
pub mod param;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use param::{ParamId, ParamSet, Parameter};
pub use tape::{scalar_loss, Binding, Tape, ValueId};
pub use tensor::Tensor;
