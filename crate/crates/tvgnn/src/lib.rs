//! Traffic flow forecasting with a hybrid time-varying graph neural network.
//!
//! The crate is layered bottom-up:
//!
//! - [`numcore`] — dense tensors with tape-based reverse-mode differentiation
//! - [`data`] — series ingestion, normalization, windowing, synthetic data
//! - [`graphs`] — road topology and DTW traffic-pattern graphs
//! - [`attention`] — positional encoding and time-mask-enhanced self-attention
//! - [`tvgraph`] — learned static (coupled) and dynamic (masked) adjacencies
//! - [`ctvgcru`] — the dual-graph-convolution GRU and full model assembly
//! - [`trainer`] — Adam loop, metrics, early stopping, checkpoints
//! - [`cli`] — operator commands binding the pipeline together

pub mod attention;
pub mod cli;
pub mod ctvgcru;
pub mod data;
pub mod graphs;
pub mod numcore;
pub mod trainer;
pub mod tvgraph;
pub mod verify;
