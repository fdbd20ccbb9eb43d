//! Reverse-mode differentiation, parameters, optimizer and gradient checking.

mod gradcheck;
mod optim;
mod param;
mod tape;

pub use gradcheck::{fd_check, fd_check_module, fd_check_tape, ArgReport, FdConfig, FdReport, ScalarFunction, TapeFn};
pub use optim::Adam;
pub use param::{Binding, Param, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
