//! Feature decomposition and reconstruction.
//!
//! A flow field predicted from the feature and a coarse copy of it warps the
//! feature into a smooth ("low frequency") term. The residual is the high
//! frequency term; it is fused with low-level backbone features and added
//! back onto the low term.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::{ConvGeom, ResizeMode};
use crate::nn::{Bound, Conv2d, ParamBuilder, ParamStore};
use crate::tensor::{FeatureMap, FlowField};

pub const DEFAULT_LOW_LEVEL_CHANNELS: usize = 48;
pub const DEFAULT_FUSE_KERNEL: usize = 3;
/// Initial scale of the flow convolution relative to He initialisation, so
/// that freshly built models start close to a zero flow.
pub const FLOW_INIT_GAIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdrParams {
    pub down1: Conv2d,
    pub down2: Conv2d,
    pub flow: Conv2d,
    pub fuse: Conv2d,
    pub channels: usize,
    pub low_level_channels: usize,
}

impl FdrParams {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, low_level_channels: usize, fuse_kernel: usize) -> Self {
        let c = channels;
        Self {
            down1: b.conv(&format!("{name}.down1"), ConvGeom::strided(c, c, 3, 2), true),
            down2: b.conv(&format!("{name}.down2"), ConvGeom::strided(c, c, 3, 2), true),
            flow: b.conv_scaled(&format!("{name}.flow"), ConvGeom::same(2 * c, 2, 3), true, FLOW_INIT_GAIN),
            fuse: b.conv(
                &format!("{name}.fuse"),
                ConvGeom::same(c + low_level_channels, c, fuse_kernel),
                true,
            ),
            channels,
            low_level_channels,
        }
    }

    pub fn flow_field(&self, g: &mut Graph, p: &Bound, f: NodeId) -> Result<NodeId> {
        let (c, h, w) = g.value(f).shape();
        if c != self.channels {
            return Err(Error::Shape {
                op: "gen_flow_field",
                detail: format!("map has {c} channels, module expects {}", self.channels),
            });
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape {
                op: "gen_flow_field",
                detail: format!("spatial size {h}x{w} is not a positive multiple of 4"),
            });
        }
        let d = self.down1.forward(g, p, f)?;
        let d = g.relu(d);
        let d = self.down2.forward(g, p, d)?;
        let d = g.relu(d);
        let up = g.resize(d, h, w, ResizeMode::Bilinear)?;
        let cat = g.concat(&[f, up])?;
        self.flow.forward(g, p, cat)
    }

    /// Returns `(F_low, F_high_raw)`.
    pub fn decompose(g: &mut Graph, f: NodeId, flow: NodeId) -> Result<(NodeId, NodeId)> {
        let low = g.warp(f, flow)?;
        let high = g.sub(f, low)?;
        Ok((low, high))
    }

    pub fn fuse_high(&self, g: &mut Graph, p: &Bound, high_raw: NodeId, low_level: NodeId) -> Result<NodeId> {
        let cs = g.value(low_level).channels();
        if cs != self.low_level_channels {
            return Err(Error::Shape {
                op: "fuse_high",
                detail: format!("low-level map has {cs} channels, module expects {}", self.low_level_channels),
            });
        }
        let cat = g.concat(&[high_raw, low_level])?;
        self.fuse.forward(g, p, cat)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f: NodeId, low_level: NodeId) -> Result<NodeId> {
        let flow = self.flow_field(g, p, f)?;
        let (low, high_raw) = Self::decompose(g, f, flow)?;
        let high = self.fuse_high(g, p, high_raw, low_level)?;
        g.add(low, high)
    }
}

pub fn gen_flow_field(f: &FeatureMap, params: &FdrParams, store: &ParamStore) -> Result<FlowField> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(f.clone());
    let phi = params.flow_field(&mut g, &p, x)?;
    FlowField::from_map(g.take_value(phi))
}

pub fn decompose(f: &FeatureMap, flow: &FlowField) -> Result<(FeatureMap, FeatureMap)> {
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let phi = g.constant(flow.as_map().clone());
    let (low, high) = FdrParams::decompose(&mut g, x, phi)?;
    Ok((g.take_value(low), g.take_value(high)))
}

pub fn fuse_high(high_raw: &FeatureMap, low_level: &FeatureMap, params: &FdrParams, store: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let h = g.constant(high_raw.clone());
    let s = g.constant(low_level.clone());
    let y = params.fuse_high(&mut g, &p, h, s)?;
    Ok(g.take_value(y))
}

pub fn reconstruct(low: &FeatureMap, high: &FeatureMap) -> Result<FeatureMap> {
    low.ensure_same_shape(high, "reconstruct")?;
    low.zip_map(high, |a, b| a + b)
}

pub fn fdr_forward(f: &FeatureMap, low_level: &FeatureMap, params: &FdrParams, store: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(f.clone());
    let s = g.constant(low_level.clone());
    let y = params.forward(&mut g, &p, x, s)?;
    Ok(g.take_value(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, GradCheckConfig};
    use crate::kernels;
    use crate::primitives::{bilinear_sample, resize};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn module(c: usize, cs: usize, seed: u64) -> (FdrParams, ParamStore) {
        let mut b = ParamBuilder::new(seed);
        let m = FdrParams::new(&mut b, "fdr", c, cs, 3);
        let mut store = b.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for p in store.iter_mut() {
            p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        (m, store)
    }

    fn set_pass_through(m: &FdrParams, store: &mut ParamStore) {
        let fuse = store.get_mut(m.fuse.weight);
        fuse.value.fill(0.0);
        let (c, cin, k) = (m.channels, m.channels + m.low_level_channels, m.fuse.geom.kernel);
        for o in 0..c {
            fuse.value[((o * cin + o) * k + k / 2) * k + k / 2] = 1.0;
        }
        store.get_mut(m.fuse.bias.unwrap()).value.fill(0.0);
    }

    fn conv_oracle(x: &FeatureMap, conv: &Conv2d, store: &ParamStore) -> FeatureMap {
        let b = conv.bias.map(|b| store.get(b).value.as_slice());
        kernels::conv2d_forward(x, &store.get(conv.weight).value, b, &conv.geom).0
    }

    fn concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
        let mut d = a.data().to_vec();
        d.extend_from_slice(b.data());
        FeatureMap::from_vec(a.channels() + b.channels(), a.height(), a.width(), d).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_flow() {
        let (m, mut store) = module(3, 2, 1);
        store.fill_prefix("fdr.flow", 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi = gen_flow_field(&random_map(&mut rng, 3, 8, 12), &m, &store).unwrap();
        assert!(phi.as_map().data().iter().all(|&v| v == 0.0));
        assert_eq!((phi.height(), phi.width()), (8, 12));
    }

    #[test]
    fn flow_requires_multiples_of_four() {
        let (m, store) = module(2, 2, 1);
        assert!(gen_flow_field(&FeatureMap::zeros(2, 6, 8), &m, &store).is_err());
        assert!(gen_flow_field(&FeatureMap::zeros(2, 4, 8), &m, &store).is_ok());
    }

    #[test]
    fn flow_matches_stepwise_composition() {
        let (m, store) = module(3, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_map(&mut rng, 3, 8, 8);
        let relu = |x: FeatureMap| x.map(|v| v.max(0.0));
        let d = relu(conv_oracle(&f, &m.down1, &store));
        let d = relu(conv_oracle(&d, &m.down2, &store));
        assert_eq!(d.shape(), (3, 2, 2));
        let up = resize(&d, 8, 8, ResizeMode::Bilinear).unwrap();
        let expect = conv_oracle(&concat(&f, &up), &m.flow, &store);
        let got = gen_flow_field(&f, &m, &store).unwrap();
        assert_eq!(got.as_map(), &expect);
    }

    #[test]
    fn zero_flow_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_map(&mut rng, 3, 4, 4);
        let (low, high) = decompose(&f, &FlowField::zeros(4, 4)).unwrap();
        assert_eq!(low, f);
        assert!(high.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_map_has_no_high_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = FeatureMap::filled(2, 8, 8, 0.625);
        let flow = FeatureMap::from_fn(2, 8, 8, |_, _, _| rng.random_range(-3.0..3.0));
        let (_, high) = decompose(&f, &FlowField::from_map(flow).unwrap()).unwrap();
        assert!(high.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decomposition_is_exact_when_subtraction_is_exact() {
        // Values on a common dyadic grid make F - F_low exact, and then the
        // sum reproduces F bit for bit.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = FeatureMap::from_fn(3, 8, 8, |_, _, _| rng.random_range(-1024i32..1024) as f64 / 256.0);
        let flow = FeatureMap::from_fn(2, 8, 8, |_, _, _| rng.random_range(-8i32..8) as f64 / 4.0);
        let (low, high) = decompose(&f, &FlowField::from_map(flow).unwrap()).unwrap();
        assert_eq!(reconstruct(&low, &high).unwrap(), f);
    }

    #[test]
    fn decomposition_is_within_an_ulp_in_general() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_map(&mut rng, 3, 8, 8);
        let flow = FeatureMap::from_fn(2, 8, 8, |_, _, _| rng.random_range(-2.5..2.5));
        let (low, high) = decompose(&f, &FlowField::from_map(flow).unwrap()).unwrap();
        let sum = reconstruct(&low, &high).unwrap();
        for ((s, x), l) in sum.data().iter().zip(f.data()).zip(low.data()) {
            let ulp = f64::EPSILON * l.abs().max(x.abs());
            assert!((s - x).abs() <= ulp, "{s} vs {x}");
        }
    }

    #[test]
    fn pass_through_fusion_returns_high_term() {
        let (m, mut store) = module(3, 2, 9);
        set_pass_through(&m, &mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = random_map(&mut rng, 3, 4, 4);
        let s = random_map(&mut rng, 2, 4, 4);
        assert_eq!(fuse_high(&h, &s, &m, &store).unwrap(), h);
    }

    #[test]
    fn zero_fusion_weights_give_bias_map() {
        let (m, mut store) = module(3, 2, 11);
        store.fill_prefix("fdr.fuse.weight", 0.0);
        let bias = store.get(m.fuse.bias.unwrap()).value.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let out = fuse_high(&random_map(&mut rng, 3, 4, 4), &random_map(&mut rng, 2, 4, 4), &m, &store).unwrap();
        for c in 0..3 {
            assert!(out.channel(c).iter().all(|&v| v == bias[c]));
        }
    }

    #[test]
    fn fusion_matches_concat_then_convolve() {
        let (m, store) = module(3, 2, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h = random_map(&mut rng, 3, 4, 4);
        let s = random_map(&mut rng, 2, 4, 4);
        assert_eq!(fuse_high(&h, &s, &m, &store).unwrap(), conv_oracle(&concat(&h, &s), &m.fuse, &store));
        assert!(fuse_high(&h, &random_map(&mut rng, 3, 4, 4), &m, &store).is_err());
    }

    #[test]
    fn reconstruct_is_elementwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = random_map(&mut rng, 2, 3, 3);
        let b = random_map(&mut rng, 2, 3, 3);
        let r = reconstruct(&a, &b).unwrap();
        for i in 0..a.len() {
            assert_eq!(r.data()[i], a.data()[i] + b.data()[i]);
        }
        assert_eq!(reconstruct(&a, &FeatureMap::zeros(2, 3, 3)).unwrap(), a);
        assert!(reconstruct(&a, &FeatureMap::zeros(2, 3, 4)).is_err());
    }

    #[test]
    fn zero_flow_and_pass_through_is_identity() {
        let (m, mut store) = module(4, 3, 16);
        store.fill_prefix("fdr.flow", 0.0);
        set_pass_through(&m, &mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = random_map(&mut rng, 4, 8, 8);
        let s = random_map(&mut rng, 3, 8, 8);
        assert_eq!(fdr_forward(&f, &s, &m, &store).unwrap(), f);
    }

    #[test]
    fn forward_matches_four_stage_composition() {
        let (m, store) = module(3, 2, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let f = random_map(&mut rng, 3, 8, 4);
        let s = random_map(&mut rng, 2, 8, 4);
        let phi = gen_flow_field(&f, &m, &store).unwrap();
        let low = bilinear_sample(&f, &phi).unwrap();
        let high_raw = f.zip_map(&low, |a, b| a - b).unwrap();
        let high = fuse_high(&high_raw, &s, &m, &store).unwrap();
        let expect = reconstruct(&low, &high).unwrap();
        let got = fdr_forward(&f, &s, &m, &store).unwrap();
        assert_eq!(got, expect);
        assert_eq!(got.shape(), f.shape());
    }

    #[test]
    fn forward_passes_gradient_check() {
        let (m, store) = module(2, 2, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = random_map(&mut rng, 2, 4, 8);
        let s = random_map(&mut rng, 2, 4, 8);
        let mut inputs: Vec<(String, FeatureMap)> = vec![("F".into(), f), ("F_s".into(), s)];
        for p in store.iter() {
            inputs.push((p.name.clone(), FeatureMap::from_vec(1, 1, p.value.len(), p.value.clone()).unwrap()));
        }
        let named: Vec<(&str, &FeatureMap)> = inputs.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let r = finite_diff_check(
            "fdr_forward",
            &named,
            |g, ids| {
                let p = Bound::from_nodes(ids[2..].to_vec());
                m.forward(g, &p, ids[0], ids[1])
            },
            &GradCheckConfig::with_tolerance(1e-4),
        );
        assert!(r.pass, "{r}");
        let phi = gen_flow_field(&inputs[0].1, &m, &store).unwrap();
        assert!(phi.as_map().max_abs() > 0.1, "flow too small to exercise the warp");
    }

    proptest! {
        #[test]
        fn output_shape_matches_input(h4 in 1usize..4, w4 in 1usize..4, seed in 0u64..100) {
            let (m, store) = module(2, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_map(&mut rng, 2, 4 * h4, 4 * w4);
            let s = random_map(&mut rng, 3, 4 * h4, 4 * w4);
            let phi = gen_flow_field(&f, &m, &store).unwrap();
            prop_assert_eq!(phi.as_map().shape(), (2, 4 * h4, 4 * w4));
            let out = fdr_forward(&f, &s, &m, &store).unwrap();
            prop_assert_eq!(out.shape(), f.shape());
            prop_assert!(out.is_finite());
        }

        #[test]
        fn constant_maps_warp_to_themselves(v in -4.0f64..4.0, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = FeatureMap::filled(2, 4, 8, v);
            let flow = FeatureMap::from_fn(2, 4, 8, |_, _, _| rng.random_range(-6.0..6.0));
            let (low, high) = decompose(&f, &FlowField::from_map(flow).unwrap()).unwrap();
            for (l, h) in low.data().iter().zip(high.data()) {
                prop_assert!((l - v).abs() <= 1e-15 * v.abs().max(1.0));
                prop_assert!(h.abs() <= 1e-15 * v.abs().max(1.0));
            }
        }
    }
}
