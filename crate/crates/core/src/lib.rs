//! Interactive multi-head self-attention (iMHSA) with linear complexity.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense row-major tensors, the primitive kernels and the
//!   [`Meter`](tensor::Meter) used for FLOP and memory accounting.
//! * [`attention`]: baseline MHSA, MHSA with cross-head interaction,
//!   landmark-decomposed attention and iMHSA, plus head diagnostics and
//!   heatmap export.
//! * [`autodiff`]: a reverse-mode tape over the same op set and a
//!   central-difference gradient checker.
//! * [`model`]: a scaled-down hierarchical iViT with an Adam training loop.
//! * [`data`]: SplitMix64, the synthetic majority task, the CIFAR-10 binary
//!   reader and the text/binary codecs shared by the CLI.
//! * [`bench`]: closed-form FLOP counts, the scaling benchmark and log-log
//!   slope fitting.
//! * [`suite`]: the gradient checks run by the tests and `imhsa gradcheck`.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

// `!(x > 0.0)` is how NaN gets rejected along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod model;
pub mod par;
pub mod suite;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Meter, Scalar, Tensor};
