//! Reverse-mode automatic differentiation over [`FeatureMap`] values.
//!
//! A [`Graph`] is a tape: every op evaluates eagerly, appends a node and
//! records what its backward pass needs. [`Graph::backward`] walks the tape in
//! reverse and returns [`Gradients`] for every node that depends on a
//! variable leaf.
//!
//! When pattern tracking is enabled the tape also folds every discrete
//! decision it makes (rectifier signs, pooling arg-maxima, bilinear cells and
//! border clamps, loss clamps) into a fingerprint. Two evaluations with equal
//! fingerprints lie on the same smooth piece of the function, which is what
//! the finite-difference checker uses to recognise kink crossings.

use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvCache, ConvGeom, ResizeMode, SampleTap};
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

enum Op {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        cache: ConvCache,
    },
    ConvTranspose {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        out_channels: usize,
        k: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    MulChannel { x: NodeId, gate: NodeId },
    MulSpatial { x: NodeId, gate: NodeId },
    Concat(Vec<NodeId>),
    Resize { x: NodeId, mode: ResizeMode },
    Warp {
        x: NodeId,
        flow: NodeId,
        taps: Vec<SampleTap>,
    },
    GlobalPool {
        x: NodeId,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    ChannelPool {
        x: NodeId,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Sum(NodeId),
    Dot { x: NodeId, weights: Vec<f64> },
    LinComb(Vec<(NodeId, f64)>),
    Bce {
        x: NodeId,
        target: Vec<f64>,
        mask: Vec<f64>,
        eps: f64,
    },
    Dice {
        x: NodeId,
        target: Vec<f64>,
        mask: Vec<f64>,
        eps: f64,
    },
    L1 {
        x: NodeId,
        target: Vec<f64>,
        mask: Vec<f64>,
    },
    GradFault { x: NodeId, factor: f64 },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        /// Normalised input and per-group `1 / sqrt(var + eps)`.
        xhat: FeatureMap,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: FeatureMap,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    pattern: Option<DefaultHasher>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<FeatureMap>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&FeatureMap> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros shaped like `like` when nothing flowed in.
    pub fn get_or_zeros(&self, id: NodeId, like: &FeatureMap) -> FeatureMap {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| FeatureMap::zeros(like.channels(), like.height(), like.width()))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that fingerprints every discrete branch it takes.
    pub fn with_pattern_tracking() -> Self {
        Self {
            nodes: Vec::new(),
            pattern: Some(DefaultHasher::new()),
        }
    }

    pub fn pattern(&self) -> Option<u64> {
        self.pattern.as_ref().map(|h| h.finish())
    }

    fn track(&mut self, f: impl FnOnce(&mut DefaultHasher)) {
        if let Some(h) = self.pattern.as_mut() {
            f(h);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: FeatureMap, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient is propagated into it.
    pub fn constant(&mut self, value: FeatureMap) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf (input or parameter).
    pub fn variable(&mut self, value: FeatureMap) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &FeatureMap {
        &self.nodes[id.0].value
    }

    pub fn take_value(&self, id: NodeId) -> FeatureMap {
        self.nodes[id.0].value.clone()
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.channels() != geom.in_channels {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xv.channels(), geom.in_channels),
            ));
        }
        if geom.output_size(xv.height(), xv.width()).is_none() {
            return Err(shape_err("conv2d", "input smaller than kernel"));
        }
        if self.value(w).len() != geom.weight_len() {
            return Err(shape_err("conv2d", "weight length"));
        }
        if let Some(b) = b {
            if self.value(b).len() != geom.out_channels {
                return Err(shape_err("conv2d", "bias length"));
            }
        }
        let (y, cache) = kernels::conv2d_forward(
            self.value(x),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                geom,
                cache,
            },
            &inputs,
        ))
    }

    /// Transposed convolution with stride equal to kernel size `k`; weight
    /// layout `[in][out][k][k]`.
    pub fn conv_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        out_channels: usize,
        k: usize,
    ) -> Result<NodeId> {
        let cin = self.value(x).channels();
        if self.value(w).len() != cin * out_channels * k * k {
            return Err(shape_err("conv_transpose", "weight length"));
        }
        if let Some(b) = b {
            if self.value(b).len() != out_channels {
                return Err(shape_err("conv_transpose", "bias length"));
            }
        }
        let y = kernels::conv_transpose_forward(
            self.value(x),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            out_channels,
            k,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            y,
            Op::ConvTranspose {
                x,
                w,
                b,
                out_channels,
                k,
            },
            &inputs,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.max(0.0));
        if self.pattern.is_some() {
            let signs: Vec<bool> = self.value(x).data().iter().map(|&v| v > 0.0).collect();
            self.track(|h| signs.hash(h));
        }
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let y = self.value(x).map(|v| v * s);
        self.push(y, Op::Scale(x, s), &[x])
    }

    /// `x * gate` with a `C x 1 x 1` gate broadcast over space.
    pub fn mul_channel(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let gv = self.value(gate);
        if gv.shape() != (xv.channels(), 1, 1) {
            return Err(shape_err(
                "mul_channel",
                format!("gate {:?} for map {:?}", gv.shape(), xv.shape()),
            ));
        }
        let mut y = xv.clone();
        for c in 0..y.channels() {
            let g = gv.data()[c];
            y.channel_mut(c).iter_mut().for_each(|v| *v *= g);
        }
        Ok(self.push(y, Op::MulChannel { x, gate }, &[x, gate]))
    }

    /// `x * gate` with a `1 x H x W` gate broadcast over channels.
    pub fn mul_spatial(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let gv = self.value(gate);
        if gv.shape() != (1, xv.height(), xv.width()) {
            return Err(shape_err(
                "mul_spatial",
                format!("gate {:?} for map {:?}", gv.shape(), xv.shape()),
            ));
        }
        let mut y = xv.clone();
        let g = gv.data();
        for c in 0..y.channels() {
            y.channel_mut(c).iter_mut().zip(g).for_each(|(v, g)| *v *= g);
        }
        Ok(self.push(y, Op::MulSpatial { x, gate }, &[x, gate]))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let (_, h, w) = self.value(*first).shape();
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let v = self.value(p);
            if (v.height(), v.width()) != (h, w) {
                return Err(shape_err(
                    "concat",
                    format!("spatial {}x{} vs {}x{}", v.height(), v.width(), h, w),
                ));
            }
            channels += v.channels();
            data.extend_from_slice(v.data());
        }
        let y = FeatureMap::from_vec(channels, h, w, data)?;
        Ok(self.push(y, Op::Concat(parts.to_vec()), parts))
    }

    pub fn resize(&mut self, x: NodeId, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<NodeId> {
        if out_h == 0 || out_w == 0 || self.value(x).is_empty() {
            return Err(Error::EmptyMap("resize"));
        }
        let y = kernels::resize_forward(self.value(x), out_h, out_w, mode);
        Ok(self.push(y, Op::Resize { x, mode }, &[x]))
    }

    /// Bilinear warp of `x` by a `2 x H x W` flow; see [`kernels::warp_forward`].
    pub fn warp(&mut self, x: NodeId, flow: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let fv = self.value(flow);
        if fv.shape() != (2, xv.height(), xv.width()) {
            return Err(shape_err(
                "bilinear_sample",
                format!("flow {:?} for map {:?}", fv.shape(), xv.shape()),
            ));
        }
        if xv.is_empty() {
            return Err(Error::EmptyMap("bilinear_sample"));
        }
        let (y, taps) = kernels::warp_forward(xv, fv);
        if self.pattern.is_some() {
            let key: Vec<(usize, usize, bool, bool)> = taps
                .iter()
                .map(|t| (t.x0, t.y0, t.clamped_x, t.clamped_y))
                .collect();
            self.track(|h| key.hash(h));
        }
        Ok(self.push(y, Op::Warp { x, flow, taps }, &[x, flow]))
    }

    pub fn global_pool(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.plane() == 0 || xv.channels() == 0 {
            return Err(Error::EmptyMap("global_pool"));
        }
        let mut out = Vec::with_capacity(xv.channels());
        let mut argmax = Vec::new();
        for c in 0..xv.channels() {
            let ch = xv.channel(c);
            match mode {
                PoolMode::Avg => out.push(ch.iter().sum::<f64>() / ch.len() as f64),
                PoolMode::Max => {
                    let (i, v) = first_argmax(ch);
                    argmax.push(i);
                    out.push(v);
                }
            }
        }
        let y = FeatureMap::vector(out);
        if !argmax.is_empty() {
            let key = argmax.clone();
            self.track(|h| key.hash(h));
        }
        Ok(self.push(y, Op::GlobalPool { x, mode, argmax }, &[x]))
    }

    pub fn channel_pool(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let xv = self.value(x);
        let (c, h, w) = xv.shape();
        if c == 0 || h * w == 0 {
            return Err(Error::EmptyMap("channelwise_pool"));
        }
        let p = h * w;
        let mut out = FeatureMap::zeros(1, h, w);
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Avg => {
                let o = out.data_mut();
                for ci in 0..c {
                    for (d, v) in o.iter_mut().zip(xv.channel(ci)) {
                        *d += v;
                    }
                }
                o.iter_mut().for_each(|v| *v /= c as f64);
            }
            PoolMode::Max => {
                argmax = vec![0usize; p];
                let o = out.data_mut();
                o.copy_from_slice(xv.channel(0));
                for ci in 1..c {
                    for (i, v) in xv.channel(ci).iter().enumerate() {
                        if *v > o[i] {
                            o[i] = *v;
                            argmax[i] = ci;
                        }
                    }
                }
            }
        }
        if !argmax.is_empty() {
            let key = argmax.clone();
            self.track(|h| key.hash(h));
        }
        Ok(self.push(out, Op::ChannelPool { x, mode, argmax }, &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(FeatureMap::scalar(s), Op::Sum(x), &[x])
    }

    /// Scalar `sum_i weights[i] * x[i]`.
    pub fn dot(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err("dot", "weight count"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(FeatureMap::scalar(s), Op::Dot { x, weights }, &[x]))
    }

    /// `sum_k c_k * x_k` over same-shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let (first, _) = *terms.first().ok_or_else(|| shape_err("lin_comb", "no terms"))?;
        let mut y = self.value(first).map(|_| 0.0);
        for &(id, c) in terms {
            let v = self.value(id);
            y.ensure_same_shape(v, "lin_comb")?;
            for (d, s) in y.data_mut().iter_mut().zip(v.data()) {
                *d += c * s;
            }
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(y, Op::LinComb(terms.to_vec()), &ids))
    }

    fn check_target(&self, op: &'static str, x: NodeId, target: &[f64], mask: &[f64]) -> Result<()> {
        let n = self.value(x).len();
        if target.len() != n || mask.len() != n {
            return Err(shape_err(
                op,
                format!("{} predictions, {} targets, {} mask entries", n, target.len(), mask.len()),
            ));
        }
        Ok(())
    }

    /// Mean binary cross-entropy over pixels with `mask > 0`; predictions are
    /// clamped to `[eps, 1 - eps]` before taking logs.
    pub fn bce(&mut self, x: NodeId, target: Vec<f64>, mask: Vec<f64>, eps: f64) -> Result<NodeId> {
        self.check_target("bce_loss", x, &target, &mask)?;
        let xv = self.value(x).data();
        let count: f64 = mask.iter().sum();
        let mut total = 0.0;
        let mut clamps = Vec::new();
        for i in 0..xv.len() {
            if mask[i] == 0.0 {
                continue;
            }
            let p = xv[i].clamp(eps, 1.0 - eps);
            clamps.push(p != xv[i]);
            total -= mask[i] * (target[i] * p.ln() + (1.0 - target[i]) * (1.0 - p).ln());
        }
        let loss = if count > 0.0 { total / count } else { 0.0 };
        self.track(|h| clamps.hash(h));
        Ok(self.push(
            FeatureMap::scalar(loss),
            Op::Bce {
                x,
                target,
                mask,
                eps,
            },
            &[x],
        ))
    }

    /// `1 - 2 sum(m x y) / (sum(m |x|) + sum(m |y|) + eps)`.
    pub fn dice(&mut self, x: NodeId, target: Vec<f64>, mask: Vec<f64>, eps: f64) -> Result<NodeId> {
        self.check_target("dice_loss", x, &target, &mask)?;
        let (inter, denom) = dice_terms(self.value(x).data(), &target, &mask, eps);
        let loss = 1.0 - 2.0 * inter / denom;
        if self.pattern.is_some() {
            let signs: Vec<bool> = self.value(x).data().iter().map(|&v| v >= 0.0).collect();
            self.track(|h| signs.hash(h));
        }
        Ok(self.push(
            FeatureMap::scalar(loss),
            Op::Dice {
                x,
                target,
                mask,
                eps,
            },
            &[x],
        ))
    }

    /// Mean absolute error over pixels with `mask > 0`; zero for an empty mask.
    pub fn l1(&mut self, x: NodeId, target: Vec<f64>, mask: Vec<f64>) -> Result<NodeId> {
        self.check_target("l1_thresh_loss", x, &target, &mask)?;
        let xv = self.value(x).data();
        let count: f64 = mask.iter().sum();
        let total: f64 = (0..xv.len())
            .filter(|&i| mask[i] != 0.0)
            .map(|i| mask[i] * (target[i] - xv[i]).abs())
            .sum();
        let loss = if count > 0.0 { total / count } else { 0.0 };
        if self.pattern.is_some() {
            let signs: Vec<bool> = xv.iter().zip(&target).map(|(a, b)| b > a).collect();
            self.track(|h| signs.hash(h));
        }
        Ok(self.push(
            FeatureMap::scalar(loss),
            Op::L1 { x, target, mask },
            &[x],
        ))
    }

    /// Identity in the forward pass whose backward multiplies the gradient
    /// by `factor`. Exists so gradient checks can be shown to catch faults.
    pub fn fault_injected_identity(&mut self, x: NodeId, factor: f64) -> NodeId {
        let y = self.value(x).clone();
        self.push(y, Op::GradFault { x, factor }, &[x])
    }

    /// Per-sample group normalisation with a per-channel affine:
    /// `gamma_c * (x - mean_g) / sqrt(var_g + eps) + beta_c`, statistics taken
    /// over each group of `C / groups` channels and all positions.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let (c, h, w) = xv.shape();
        if groups == 0 || c % groups != 0 {
            return Err(shape_err("group_norm", format!("{c} channels in {groups} groups")));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(
                "group_norm",
                format!("affine of {} / {} for {c} channels", self.value(gamma).len(), self.value(beta).len()),
            ));
        }
        let per = c / groups * h * w;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(groups);
        for chunk in xhat.data_mut().chunks_mut(per.max(1)) {
            let n = chunk.len() as f64;
            let mean = chunk.iter().sum::<f64>() / n;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * r);
            inv_std.push(r);
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = xhat.clone();
        for ch in 0..c {
            let (gc, bc) = (gv[ch], bv[ch]);
            y.channel_mut(ch).iter_mut().for_each(|v| *v = gc * *v + bc);
        }
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            inv_std,
        };
        Ok(self.push(y, op, &[x, gamma, beta]))
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(shape_err("backward", "output is not a scalar"));
        }
        self.backward_with(output, FeatureMap::scalar(1.0))
    }

    /// Back-propagates an explicit upstream gradient `seed` from `output`.
    pub fn backward_with(&self, output: NodeId, seed: FeatureMap) -> Result<Gradients> {
        self.value(output).ensure_same_shape(&seed, "backward")?;
        let mut grads: Vec<Option<FeatureMap>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<FeatureMap>], id: NodeId, g: FeatureMap) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &FeatureMap, grads: &mut [Option<FeatureMap>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                cache,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w).data(),
                    geom,
                    cache,
                    g,
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                let wshape = self.value(*w).shape();
                self.accumulate(grads, *w, FeatureMap::from_vec(wshape.0, wshape.1, wshape.2, dw).unwrap());
                if let Some(b) = b {
                    let bshape = self.value(*b).shape();
                    self.accumulate(grads, *b, FeatureMap::from_vec(bshape.0, bshape.1, bshape.2, db).unwrap());
                }
            }
            Op::ConvTranspose {
                x,
                w,
                b,
                out_channels,
                k,
            } => {
                let (dx, dw, db) = kernels::conv_transpose_backward(
                    self.value(*x),
                    self.value(*w).data(),
                    *out_channels,
                    *k,
                    g,
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                let wshape = self.value(*w).shape();
                self.accumulate(grads, *w, FeatureMap::from_vec(wshape.0, wshape.1, wshape.2, dw).unwrap());
                if let Some(b) = b {
                    let bshape = self.value(*b).shape();
                    self.accumulate(grads, *b, FeatureMap::from_vec(bshape.0, bshape.1, bshape.2, db).unwrap());
                }
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })
                    .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = node.value.zip_map(g, |s, gv| gv * s * (1.0 - s)).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::MulChannel { x, gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for c in 0..dx.channels() {
                        let s = gv.data()[c];
                        dx.channel_mut(c).iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gate) {
                    let dg = (0..xv.channels())
                        .map(|c| xv.channel(c).iter().zip(g.channel(c)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *gate, FeatureMap::vector(dg));
                }
            }
            Op::MulSpatial { x, gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for c in 0..dx.channels() {
                        dx.channel_mut(c)
                            .iter_mut()
                            .zip(gv.data())
                            .for_each(|(v, s)| *v *= s);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gate) {
                    let mut dg = FeatureMap::zeros(1, xv.height(), xv.width());
                    for c in 0..xv.channels() {
                        for ((d, a), b) in dg.data_mut().iter_mut().zip(xv.channel(c)).zip(g.channel(c)) {
                            *d += a * b;
                        }
                    }
                    self.accumulate(grads, *gate, dg);
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).channels();
                    if self.wants(p) {
                        self.accumulate(grads, p, g.slice_channels(start, c).unwrap());
                    }
                    start += c;
                }
            }
            Op::Resize { x, mode } => {
                let d = kernels::resize_backward(self.value(*x).shape(), g, *mode);
                self.accumulate(grads, *x, d);
            }
            Op::Warp { x, flow, taps } => {
                let (dx, dflow) = kernels::warp_backward(self.value(*x), taps, g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *flow, dflow);
            }
            Op::GlobalPool { x, mode, argmax } => {
                let (c, h, w) = self.value(*x).shape();
                let mut d = FeatureMap::zeros(c, h, w);
                for ci in 0..c {
                    let gv = g.data()[ci];
                    match mode {
                        PoolMode::Avg => {
                            let s = gv / (h * w) as f64;
                            d.channel_mut(ci).fill(s);
                        }
                        PoolMode::Max => d.channel_mut(ci)[argmax[ci]] = gv,
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ChannelPool { x, mode, argmax } => {
                let (c, h, w) = self.value(*x).shape();
                let mut d = FeatureMap::zeros(c, h, w);
                match mode {
                    PoolMode::Avg => {
                        for ci in 0..c {
                            for (dv, gv) in d.channel_mut(ci).iter_mut().zip(g.data()) {
                                *dv = gv / c as f64;
                            }
                        }
                    }
                    PoolMode::Max => {
                        let p = h * w;
                        let dd = d.data_mut();
                        for (i, &ci) in argmax.iter().enumerate() {
                            dd[ci * p + i] = g.data()[i];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let gv = g.item();
                let d = self.value(*x).map(|_| gv);
                self.accumulate(grads, *x, d);
            }
            Op::Dot { x, weights } => {
                let gv = g.item();
                let (c, h, w) = self.value(*x).shape();
                let d = FeatureMap::from_vec(c, h, w, weights.iter().map(|v| v * gv).collect()).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::LinComb(terms) => {
                for &(id, c) in terms {
                    self.accumulate(grads, id, g.map(|v| v * c));
                }
            }
            Op::Bce {
                x,
                target,
                mask,
                eps,
            } => {
                let xv = self.value(*x);
                let count: f64 = mask.iter().sum();
                let gv = g.item();
                let mut d = xv.map(|_| 0.0);
                if count > 0.0 {
                    for (i, dv) in d.data_mut().iter_mut().enumerate() {
                        let p = xv.data()[i];
                        if mask[i] == 0.0 || p <= *eps || p >= 1.0 - eps {
                            continue;
                        }
                        let y = target[i];
                        *dv = gv * mask[i] / count * (-y / p + (1.0 - y) / (1.0 - p));
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Dice {
                x,
                target,
                mask,
                eps,
            } => {
                let xv = self.value(*x);
                let (inter, denom) = dice_terms(xv.data(), target, mask, *eps);
                let gv = g.item();
                let mut d = xv.map(|_| 0.0);
                for (i, dv) in d.data_mut().iter_mut().enumerate() {
                    if mask[i] == 0.0 {
                        continue;
                    }
                    let sign = if xv.data()[i] >= 0.0 { 1.0 } else { -1.0 };
                    *dv = gv * -2.0 * mask[i] * (target[i] * denom - inter * sign) / (denom * denom);
                }
                self.accumulate(grads, *x, d);
            }
            Op::L1 { x, target, mask } => {
                let xv = self.value(*x);
                let count: f64 = mask.iter().sum();
                let gv = g.item();
                let mut d = xv.map(|_| 0.0);
                if count > 0.0 {
                    for (i, dv) in d.data_mut().iter_mut().enumerate() {
                        if mask[i] == 0.0 {
                            continue;
                        }
                        let diff = target[i] - xv.data()[i];
                        let s = if diff > 0.0 {
                            -1.0
                        } else if diff < 0.0 {
                            1.0
                        } else {
                            0.0
                        };
                        *dv = gv * mask[i] * s / count;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::GradFault { x, factor } => {
                let f = *factor;
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (c, h, w) = xhat.shape();
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let (mut dg, mut db) = (vec![0.0; c], vec![0.0; c]);
                for ch in 0..c {
                    let (gy, xh) = (g.channel(ch), xhat.channel(ch));
                    dg[ch] = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
                    db[ch] = gy.iter().sum();
                }
                if self.wants(*x) {
                    // dx = r / n * (n * dxh - sum(dxh) - xhat * sum(dxh * xhat)) per group
                    let cpg = c / groups;
                    let n = (cpg * hw) as f64;
                    let mut dx = FeatureMap::zeros(c, h, w);
                    for (gi, &r) in inv_std.iter().enumerate() {
                        let chans = gi * cpg..(gi + 1) * cpg;
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for ch in chans.clone() {
                            for (&gy, &xh) in g.channel(ch).iter().zip(xhat.channel(ch)) {
                                let d = gy * gv[ch];
                                s1 += d;
                                s2 += d * xh;
                            }
                        }
                        for ch in chans {
                            let out = dx.channel_mut(ch);
                            for ((o, &gy), &xh) in out.iter_mut().zip(g.channel(ch)).zip(xhat.channel(ch)) {
                                *o = r / n * (n * gy * gv[ch] - s1 - xh * s2);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                let shape_of = |id: NodeId| self.value(id).shape();
                let (a, b, cc) = shape_of(*gamma);
                self.accumulate(grads, *gamma, FeatureMap::from_vec(a, b, cc, dg).unwrap());
                let (a, b, cc) = shape_of(*beta);
                self.accumulate(grads, *beta, FeatureMap::from_vec(a, b, cc, db).unwrap());
            }
        }
    }
}

fn first_argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn dice_terms(x: &[f64], y: &[f64], mask: &[f64], eps: f64) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for i in 0..x.len() {
        let m = mask[i];
        if m == 0.0 {
            continue;
        }
        inter += m * x[i] * y[i];
        sx += m * x[i].abs();
        sy += m * y[i].abs();
    }
    (inter, sx + sy + eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_shared_node_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(FeatureMap::vector(vec![2.0, -1.0]));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(FeatureMap::vector(vec![1.0]));
        let w = g.variable(FeatureMap::vector(vec![3.0]));
        let y = g.mul_channel(x, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().item(), 1.0);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pattern_changes_when_relu_sign_flips() {
        let eval = |v: f64| {
            let mut g = Graph::with_pattern_tracking();
            let x = g.variable(FeatureMap::scalar(v));
            g.relu(x);
            g.pattern().unwrap()
        };
        assert_eq!(eval(0.3), eval(0.4));
        assert_ne!(eval(0.3), eval(-0.3));
    }

    #[test]
    fn group_norm_normalises_each_group() {
        let mut g = Graph::new();
        let x = g.constant(FeatureMap::from_fn(4, 3, 3, |c, y, x| (c * 9 + y * 3 + x) as f64 * 0.7 + c as f64));
        let gamma = g.constant(FeatureMap::vector(vec![1.0; 4]));
        let beta = g.constant(FeatureMap::vector(vec![0.0; 4]));
        let y = g.group_norm(x, gamma, beta, 2, 0.0).unwrap();
        for grp in g.value(y).data().chunks(18) {
            let m = grp.iter().sum::<f64>() / 18.0;
            let v = grp.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
        assert!(g.group_norm(x, gamma, beta, 3, 1e-5).is_err());
    }

    #[test]
    fn group_norm_gradients_match_finite_differences() {
        use crate::gradcheck::{finite_diff_check, GradCheckConfig};
        let x = FeatureMap::from_fn(4, 3, 2, |c, y, x| ((c * 7 + y * 5 + x * 3) % 11) as f64 * 0.3 - 1.2);
        let gamma = FeatureMap::vector(vec![0.5, -1.3, 2.0, 0.9]);
        let beta = FeatureMap::vector(vec![0.1, 0.0, -0.4, 0.7]);
        let r = finite_diff_check(
            "group_norm",
            &[("x", &x), ("gamma", &gamma), ("beta", &beta)],
            |g, ids| g.group_norm(ids[0], ids[1], ids[2], 2, 1e-5),
            &GradCheckConfig::default(),
        );
        assert!(r.pass, "{r}");
    }
}
