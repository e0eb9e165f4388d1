//! Reverse-mode automatic differentiation on a tape.
//!
//! A [`Tape`] records every forward value together with the op that made
//! it. [`Tape::backward`] walks the nodes in reverse creation order, which is
//! a valid reverse topological order, and accumulates adjoints. Gradients are
//! checked against central differences by [`grad_check`].

mod attention;
mod gradcheck;
mod tape;

pub use attention::{attention, AttnTrace, AttnVars};
pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckOptions, GradReport, ParamCheck};
pub use tape::{Gradients, Tape, Var};
