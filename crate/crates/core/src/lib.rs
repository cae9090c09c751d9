//! Frequency-aware MLP-mixer for domain generalization.
//!
//! The crate is self-contained: a small reverse-mode autodiff core
//! ([`tensor`]), FFT-domain filtering ([`fft`]), Jacobi SVD for the low-rank
//! enhancement path ([`linalg`]), the network itself ([`model`]), the
//! EMA-teacher training loop ([`training`]), synthetic multi-domain data
//! with a leave-one-domain-out protocol ([`data`]), frequency diagnostics
//! ([`analysis`]), and the experiment driver used by the CLI
//! ([`experiment`]).

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fft;
pub mod linalg;
pub mod model;
pub mod tensor;
pub mod training;

mod rng;

pub use error::{Error, Result};
pub use fft::ComplexTensor;
pub use tensor::{ComplexVar, Graph, Tensor, Var};
