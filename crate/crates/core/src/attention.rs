//! Cross-level attention: channel attention followed by spatial attention,
//! each gating the feature map multiplicatively.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, PoolMode};
use crate::kernels::ConvGeom;
use crate::nn::{Bound, Conv2d, ParamBuilder, ParamStore};
use crate::tensor::FeatureMap;

pub const SPATIAL_KERNEL: usize = 7;

/// Hidden width of the shared perceptron for `channels` and reduction `r`.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Shared two-layer perceptron `C -> C/r -> C` applied to both pooled
/// descriptors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelAttentionParams {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl ChannelAttentionParams {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = hidden_width(channels, reduction);
        Self {
            fc1: b.conv(&format!("{name}.fc1"), ConvGeom::same(channels, hidden, 1), true),
            fc2: b.conv(&format!("{name}.fc2"), ConvGeom::same(hidden, channels, 1), true),
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1.geom.in_channels
    }

    fn mlp(&self, g: &mut Graph, p: &Bound, v: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, p, v)?;
        let h = g.relu(h);
        self.fc2.forward(g, p, h)
    }

    /// `sigmoid(MLP(avgpool F) + MLP(maxpool F))` as a `C x 1 x 1` node.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f: NodeId) -> Result<NodeId> {
        let c = g.value(f).channels();
        if c != self.channels() {
            return Err(Error::Shape {
                op: "channel_attention",
                detail: format!("map has {c} channels, attention expects {}", self.channels()),
            });
        }
        let avg = g.global_pool(f, PoolMode::Avg)?;
        let max = g.global_pool(f, PoolMode::Max)?;
        let a = self.mlp(g, p, avg)?;
        let m = self.mlp(g, p, max)?;
        let s = g.add(a, m)?;
        Ok(g.sigmoid(s))
    }
}

/// One 7x7 convolution from `[channel max; channel mean]` to one channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialAttentionParams {
    pub conv: Conv2d,
}

impl SpatialAttentionParams {
    pub fn new(b: &mut ParamBuilder, name: &str) -> Self {
        Self {
            conv: b.conv(&format!("{name}.conv"), ConvGeom::same(2, 1, SPATIAL_KERNEL), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f: NodeId) -> Result<NodeId> {
        let max = g.channel_pool(f, PoolMode::Max)?;
        let avg = g.channel_pool(f, PoolMode::Avg)?;
        let cat = g.concat(&[max, avg])?;
        let s = self.conv.forward(g, p, cat)?;
        Ok(g.sigmoid(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cla {
    pub channel: ChannelAttentionParams,
    pub spatial: SpatialAttentionParams,
}

impl Cla {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, reduction: usize) -> Self {
        Self {
            channel: ChannelAttentionParams::new(b, &format!("{name}.channel"), channels, reduction),
            spatial: SpatialAttentionParams::new(b, &format!("{name}.spatial")),
        }
    }

    /// `F' = A_c(F) * F`, then `A_s(F') * F'`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f: NodeId) -> Result<NodeId> {
        let ac = self.channel.forward(g, p, f)?;
        let refined = g.mul_channel(f, ac)?;
        let as_ = self.spatial.forward(g, p, refined)?;
        g.mul_spatial(refined, as_)
    }
}

fn run<T>(store: &ParamStore, f: &FeatureMap, body: impl FnOnce(&mut Graph, &Bound, NodeId) -> Result<NodeId>, out: impl FnOnce(FeatureMap) -> T) -> Result<T> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(f.clone());
    let y = body(&mut g, &p, x)?;
    Ok(out(g.take_value(y)))
}

/// Channel attention weights `A_c`, one per channel, each in `(0, 1)`.
pub fn channel_attention(f: &FeatureMap, params: &ChannelAttentionParams, store: &ParamStore) -> Result<Vec<f64>> {
    run(store, f, |g, p, x| params.forward(g, p, x), FeatureMap::into_vec)
}

/// Spatial attention map `A_s` (`1 x H x W`).
pub fn spatial_attention(f: &FeatureMap, params: &SpatialAttentionParams, store: &ParamStore) -> Result<FeatureMap> {
    run(store, f, |g, p, x| params.forward(g, p, x), |m| m)
}

pub fn cla_apply(f: &FeatureMap, cla: &Cla, store: &ParamStore) -> Result<FeatureMap> {
    run(store, f, |g, p, x| cla.forward(g, p, x), |m| m)
}

/// Pyramid level a CLA block can be attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Out2,
    Out3,
    Out4,
    Out5,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Out2, Level::Out3, Level::Out4, Level::Out5];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Out2 => "out2",
            Level::Out3 => "out3",
            Level::Out4 => "out4",
            Level::Out5 => "out5",
        }
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Level::ALL
            .into_iter()
            .find(|l| l.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown pyramid level {s:?}")))
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Non-empty set of pyramid levels carrying a CLA block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClaPlacement(BTreeSet<Level>);

impl ClaPlacement {
    pub fn new(levels: impl IntoIterator<Item = Level>) -> Result<Self> {
        let set: BTreeSet<Level> = levels.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Config("CLA placement must name at least one level".into()));
        }
        Ok(Self(set))
    }

    /// The single-block default, on the highest-resolution level.
    pub fn cla1() -> Self {
        Self::new([Level::Out2]).unwrap()
    }

    pub fn cla2() -> Self {
        Self::new([Level::Out2, Level::Out3]).unwrap()
    }

    pub fn cla4() -> Self {
        Self::new(Level::ALL).unwrap()
    }

    pub fn contains(&self, l: Level) -> bool {
        self.0.contains(&l)
    }

    pub fn levels(&self) -> impl Iterator<Item = Level> + '_ {
        self.0.iter().copied()
    }

    pub fn parse_list<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(names.iter().map(|s| s.as_ref().parse()).collect::<Result<Vec<_>>>()?)
    }
}
