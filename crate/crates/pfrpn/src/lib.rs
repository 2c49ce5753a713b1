//! Prompt-free region proposals on synthetic scenes.
//!
//! A desk-scale region-proposal network that localizes objects with no text or
//! exemplar prompt: a learnable embedding stands in for the prompt and is
//! refined against the image itself. Three mechanisms do the work:
//!
//! - **SIA** (sparse image-aware adapter): an MoE router scores the four
//!   pyramid levels, the top-k are fused into the embedding by cross-attention
//!   ([`sia`]);
//! - **CSP** (cascade self-prompt): the embedding is iteratively refined by
//!   cosine-threshold masks and masked average pooling, cascading deep→shallow
//!   ([`csp`]);
//! - **CG-QS** (centerness-guided query selection): memory tokens are scored
//!   by classification × predicted centerness and the top-N become decoder
//!   queries ([`cgqs`]).
//!
//! Everything runs on a from-scratch f64 autodiff tape ([`numerics`]) so every
//! gradient is checkable against central finite differences, and training data
//! is a deterministic synthetic-shapes generator ([`synthdata`]). See the
//! `examples/` directory for one runnable walkthrough per capability, and
//! [`cli`] for the subcommand surface (`gen-data`, `train`, `eval`, `propose`,
//! `ablate`, `heatmap`).

pub mod cgqs;
pub mod cli;
pub mod config;
pub mod csp;
pub mod error;
pub mod geometry;
pub mod imageio;
pub mod matching;
pub mod numerics;
pub mod pipeline;
pub mod sia;
pub mod synthdata;
pub mod viz;

pub use error::{Error, Result};
