//! Named parameters and the small set of layers the detector is built from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Gradients, NodeId};
use crate::kernels::ConvGeom;
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Sets every parameter whose name starts with `prefix` to `value`.
    pub fn fill_prefix(&mut self, prefix: &str, value: f64) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value.fill(value);
        }
    }

    /// Registers every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let nodes = self
            .params
            .iter()
            .map(|p| g.variable(FeatureMap::from_vec(1, 1, p.value.len(), p.value.clone()).unwrap()))
            .collect();
        Bound { nodes }
    }

    /// Overwrites values from `other`, matching by name; every mismatch is
    /// collected into the returned error.
    pub fn load_from(&mut self, other: &[Param]) -> Result<()> {
        let mut problems = Vec::new();
        for p in &self.params {
            match other.iter().find(|o| o.name == p.name) {
                None => problems.push(format!("missing parameter {}", p.name)),
                Some(o) if o.shape != p.shape => problems.push(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    p.name, o.shape, p.shape
                )),
                Some(_) => {}
            }
        }
        for o in other {
            if !self.params.iter().any(|p| p.name == o.name) {
                problems.push(format!("unexpected parameter {}", o.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointMismatch(problems));
        }
        for p in &mut self.params {
            let o = other.iter().find(|o| o.name == p.name).unwrap();
            p.value.clone_from(&o.value);
        }
        Ok(())
    }
}

/// Graph leaves holding one forward pass's copy of a [`ParamStore`].
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    /// Wraps leaves created elsewhere, in store order.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Self { nodes }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    /// Per-parameter gradients in store order; zeros where nothing flowed.
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> Vec<Vec<f64>> {
        self.nodes
            .iter()
            .map(|&n| match grads.get(n) {
                Some(d) => d.data().to_vec(),
                None => vec![0.0; g.value(n).len()],
            })
            .collect()
    }

    /// Like [`Bound::gradients`] but `None` where no gradient reached the leaf.
    pub fn gradients_opt(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.nodes.iter().map(|&n| grads.get(n).map(|d| d.data().to_vec())).collect()
    }
}

/// Creates parameters with seeded He-normal initialisation.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    pub fn conv(&mut self, name: &str, geom: ConvGeom, bias: bool) -> Conv2d {
        self.conv_scaled(name, geom, bias, 1.0)
    }

    /// He-normal initialisation multiplied by `gain`.
    pub fn conv_scaled(&mut self, name: &str, geom: ConvGeom, bias: bool, gain: f64) -> Conv2d {
        let fan_in = (geom.in_channels * geom.kernel * geom.kernel) as f64;
        let w = self.normal(geom.weight_len(), gain * (2.0 / fan_in).sqrt());
        let weight = self.store.push(
            format!("{name}.weight"),
            vec![geom.out_channels, geom.in_channels, geom.kernel, geom.kernel],
            w,
        );
        let bias = bias.then(|| {
            self.store
                .push(format!("{name}.bias"), vec![geom.out_channels], vec![0.0; geom.out_channels])
        });
        Conv2d { weight, bias, geom }
    }

    /// Group normalisation over `channels`, initialised to the identity affine.
    pub fn group_norm(&mut self, name: &str, channels: usize) -> GroupNorm {
        let gamma = self.store.push(format!("{name}.gamma"), vec![channels], vec![1.0; channels]);
        let beta = self.store.push(format!("{name}.beta"), vec![channels], vec![0.0; channels]);
        GroupNorm {
            gamma,
            beta,
            groups: norm_groups(channels),
        }
    }

    pub fn conv_transpose(&mut self, name: &str, in_channels: usize, out_channels: usize, k: usize, bias: bool) -> ConvTranspose2d {
        self.conv_transpose_scaled(name, in_channels, out_channels, k, bias, 1.0)
    }

    pub fn conv_transpose_scaled(
        &mut self,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        bias: bool,
        gain: f64,
    ) -> ConvTranspose2d {
        let fan_in = in_channels as f64;
        let w = self.normal(in_channels * out_channels * k * k, gain * (2.0 / fan_in).sqrt());
        let weight = self
            .store
            .push(format!("{name}.weight"), vec![in_channels, out_channels, k, k], w);
        let bias = bias.then(|| {
            self.store
                .push(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels])
        });
        ConvTranspose2d {
            weight,
            bias,
            in_channels,
            out_channels,
            k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, p.node(self.weight), self.bias.map(|b| p.node(b)), self.geom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub k: usize,
}

impl ConvTranspose2d {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.conv_transpose(x, p.node(self.weight), self.bias.map(|b| p.node(b)), self.out_channels, self.k)
    }
}

pub const MAX_NORM_GROUPS: usize = 8;
pub const NORM_EPS: f64 = 1e-5;

/// Largest group count up to [`MAX_NORM_GROUPS`] that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=MAX_NORM_GROUPS.min(channels.max(1))).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Per-sample normalisation, independent of the batch size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.group_norm(x, p.node(self.gamma), p.node(self.beta), self.groups, NORM_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_deterministic() {
        let mk = || {
            let mut b = ParamBuilder::new(7);
            b.conv("a", ConvGeom::same(3, 4, 3), true);
            b.finish()
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn load_from_lists_every_offender() {
        let mut b = ParamBuilder::new(1);
        b.conv("a", ConvGeom::same(2, 2, 1), true);
        let mut store = b.finish();
        let other = vec![
            Param { name: "a.weight".into(), shape: vec![2, 2, 3, 3], value: vec![0.0; 36] },
            Param { name: "z".into(), shape: vec![1], value: vec![0.0] },
        ];
        let Err(Error::CheckpointMismatch(list)) = store.load_from(&other) else {
            panic!("expected mismatch");
        };
        assert_eq!(list.len(), 3, "{list:?}");
    }
}
