//! Polynomial feedback synthesis for quadratic-in-state control systems.
//!
//! The pipeline: build or load a system ([`problems`], [`io`]), eliminate the
//! algebraic constraint ([`leray`]), solve the Riccati equation ([`riccati`]),
//! solve the order-3 tensor Lyapunov equation ([`tensor_lyap`]), evaluate the
//! resulting feedback ([`feedback`]), simulate the closed loop ([`simulate`])
//! and check the result ([`verify`]). [`cli`] wires these into a runner.

pub mod cli;
pub mod error;
pub mod feedback;
pub mod io;
pub mod linalg;
pub mod model;
pub mod leray;
pub mod problems;
pub mod riccati;
pub mod simulate;
pub mod symtensor;
pub mod tensor_lyap;
pub mod verify;

pub use error::{Error, Result};
