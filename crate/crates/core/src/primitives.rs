//! Value-level entry points for the shared sampling and pooling primitives.
//! Each runs the same tape op the network uses, so there is one code path.

use crate::error::Result;
use crate::graph::{Graph, PoolMode};
use crate::kernels::ResizeMode;
use crate::tensor::{FeatureMap, FlowField};

/// Warps `f` by `flow`: `out(c, p) = sum_q w_q f(c, q)` over the four
/// neighbours of `p + flow(p)`, with the target clamped to the border.
pub fn bilinear_sample(f: &FeatureMap, flow: &FlowField) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let phi = g.constant(flow.as_map().clone());
    let y = g.warp(x, phi)?;
    Ok(g.take_value(y))
}

/// Per-channel average or maximum over the spatial extent.
pub fn global_pool(f: &FeatureMap, mode: PoolMode) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let y = g.global_pool(x, mode)?;
    Ok(g.take_value(y).into_vec())
}

/// Per-pixel average or maximum over channels; a one-channel map.
pub fn channelwise_pool(f: &FeatureMap, mode: PoolMode) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let y = g.channel_pool(x, mode)?;
    Ok(g.take_value(y))
}

pub fn resize(f: &FeatureMap, height: usize, width: usize, mode: ResizeMode) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let y = g.resize(x, height, width, mode)?;
    Ok(g.take_value(y))
}
