//! Cross-level attention, feature fusion and cross-level supervision for
//! salient object detection, on top of a small gradient-checked autograd core.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod params;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
