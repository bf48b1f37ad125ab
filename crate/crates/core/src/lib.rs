//! Semantic change detection on bi-temporal imagery: a small reverse-mode
//! tape, a cascaded gated decoder, consistency losses, binary16 emulation and
//! SCD metrics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod precision;
pub mod tensor;
pub mod train;

pub use error::{Result, ScdError};
pub use graph::{finite_diff_check, GradReport, Graph, NodeId};
pub use tensor::Tensor4;
