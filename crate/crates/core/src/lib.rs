// `!(x > 0.0)` is how NaN gets rejected along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// index loops read better in the kernels.
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod error;
pub mod eval;
pub mod fdr;
pub mod geometry;
pub mod gradcam;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod labels;
pub mod losses;
pub mod network;
pub mod nn;
pub mod postprocess;
pub mod primitives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, PoolMode};
pub use tensor::{FeatureMap, FlowField};
