//! Batch-graph transformer for mini-batch sample-relationship modeling.
//!
//! A mini-batch becomes a graph: a directed k-NN adjacency over feature
//! similarity carries visual relationships, a same-label adjacency carries
//! semantic ones. Encoder blocks run structure-constrained self-attention
//! over both edge sets with a shared projection, fuse the branches, and
//! finish with a layer-normed feed-forward residual. A hyperbolic embedding
//! head maps features into a Poincare ball where a pairwise cross-entropy
//! loss does metric learning; training drives two shared-parameter branches
//! (raw and encoded features) so the encoder can be dropped entirely at test
//! time.
//!
//! Everything computes in f64 with deterministic reduction orders; gradients
//! come from a small reverse-mode tape checked against central finite
//! differences.

pub mod batch_graph;
pub mod bench;
pub mod data;
pub mod encoder;
pub mod error;
pub mod hyperbolic;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
