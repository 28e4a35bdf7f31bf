//! Dense matrix arithmetic, seeded randomness, named parameters and the
//! reverse-mode gradient engine with its finite-difference oracle.

pub mod matrix;
pub mod params;
pub mod rng;
pub mod tape;

pub use matrix::{gelu, layer_norm, matmul, Matrix};
pub use params::{ParamGroup, ParamTensor};
pub use rng::{init_normal, Rng};
pub use tape::{fd_check, max_rel_error, numeric_gradients, tape_gradients, NodeId, Tape};
