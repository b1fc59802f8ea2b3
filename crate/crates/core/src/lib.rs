//! Recursive transformers with per-token recursion depth.
//!
//! The crate covers parameter-shared model construction, recursion routing,
//! recursion-aware key/value caching, early-exit decoding with adaptive
//! thresholds, a depth-wise batching simulator and analytic cost accounting,
//! on top of a small `f64` tensor engine with reverse-mode differentiation.

pub mod config;
pub mod cost;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kvcache;
pub mod model;
pub mod ops;
pub mod relax;
pub mod routing;
pub mod scheduler;
pub mod tensor;
pub mod threshold;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
