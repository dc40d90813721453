//! Core library for the Dabformer image-restoration model: dense f64
//! tensors, a per-pass reverse-mode autodiff tape, wavelet and Fourier
//! transforms with hand-derived adjoints, the attention and feedforward
//! blocks, the full encoder-decoder model, losses, the AdamW optimizer and
//! the synthetic-data harness.
//!
//! Everything runs on CPU in f64. Graphs are rebuilt per forward pass, so
//! control flow (ablation switches, shape-dependent padding) is plain Rust.

pub mod fdagn;
pub mod fdfa;
pub mod gabor;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod spectral;
pub mod tensor;
pub mod verify;

mod conv;

pub use graph::{Graph, Var};
pub use tensor::{Result, Tensor, TensorError};
