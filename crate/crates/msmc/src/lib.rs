//! Crowd anomaly detection over precomputed optical flow.
//!
//! The pipeline: partition each frame into region grids at several scales,
//! summarize crowd motion per region and per adjacent region pair with four
//! consistency measures (direction entropies, adjusted cosine similarity,
//! direction mutual information), assemble the measures into per-snippet
//! motion graphs, train a graph autoencoder (per-scale two-channel GCN
//! encoders, cross-scale attention fusion, inner-product edge decoders) on
//! normal footage only, and score frames by how badly the fused model
//! reconstructs their edges.
//!
//! Modules follow that flow: [`flow`] (file I/O), [`grid`] (region
//! geometry), [`consistency`] (the four measures), [`graph`] (graph
//! assembly and normalized adjacency), [`net`] (model, losses, training,
//! gradient checking), [`scoring`] (frame scores and ROC metrics),
//! [`synth`] (synthetic crowd scenarios), [`config`] and [`pipeline`]
//! (end-to-end runs and artifacts).

pub mod config;
pub mod consistency;
pub mod error;
pub mod flow;
pub mod graph;
pub mod grid;
pub mod net;
pub mod pipeline;
pub mod scoring;
pub mod synth;

pub use error::{Error, Result};
