//! Detector assembly: plain convolutional backbone, top-down pyramid fusion
//! with optional cross-level attention, optional decomposition and
//! reconstruction of the fused map, and the two-branch binarization head.

use std::fmt;
use std::str::FromStr;

use crate::attention::{Cla, ClaPlacement, Level};
use crate::error::{Error, Result};
use crate::fdr::{FdrParams, DEFAULT_FUSE_KERNEL, DEFAULT_LOW_LEVEL_CHANNELS};
use crate::graph::{Graph, NodeId};
use crate::kernels::{ConvGeom, ResizeMode};
use crate::nn::{Bound, Conv2d, ConvTranspose2d, GroupNorm, ParamBuilder, ParamStore};
use crate::tensor::FeatureMap;

pub const DEFAULT_K: f64 = 50.0;
pub const DEFAULT_FUSED_CHANNELS: usize = 256;
pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];
/// Initial scale of the last head layer, keeping fresh maps away from the
/// saturated ends of the sigmoid.
pub const HEAD_OUT_GAIN: f64 = 0.1;
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Backbone stage whose output feeds the low-level branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LowLevelStage {
    Conv2,
    Conv3,
}

impl LowLevelStage {
    fn level(self) -> usize {
        match self {
            LowLevelStage::Conv2 => 0,
            LowLevelStage::Conv3 => 1,
        }
    }
}

impl FromStr for LowLevelStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "conv2" => Ok(Self::Conv2),
            "conv3" => Ok(Self::Conv3),
            other => Err(Error::Config(format!("unknown low-level stage {other:?} (conv2|conv3)"))),
        }
    }
}

impl fmt::Display for LowLevelStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Conv2 => "conv2",
            Self::Conv3 => "conv3",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub stem: usize,
    pub widths: [usize; 4],
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            stem: 16,
            widths: DEFAULT_WIDTHS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub backbone: BackboneSpec,
    pub fused_channels: usize,
    pub enable_cla: bool,
    pub cla_placement: ClaPlacement,
    pub cla_reduction: usize,
    pub enable_fdr: bool,
    pub low_level_stage: LowLevelStage,
    pub low_level_channels: usize,
    pub fuse_kernel: usize,
    pub k: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            fused_channels: DEFAULT_FUSED_CHANNELS,
            enable_cla: true,
            cla_placement: ClaPlacement::cla1(),
            cla_reduction: 16,
            enable_fdr: true,
            low_level_stage: LowLevelStage::Conv2,
            low_level_channels: DEFAULT_LOW_LEVEL_CHANNELS,
            fuse_kernel: DEFAULT_FUSE_KERNEL,
            k: DEFAULT_K,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.fused_channels == 0 || !self.fused_channels.is_multiple_of(4) {
            bad.push(format!("model.fused_channels = {} must be a positive multiple of 4", self.fused_channels));
        }
        if self.backbone.stem == 0 || self.backbone.widths.contains(&0) {
            bad.push("backbone widths must be positive".to_string());
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            bad.push(format!("model.k = {} must be positive", self.k));
        }
        if self.low_level_channels == 0 {
            bad.push("fdr.low_level_channels must be positive".into());
        }
        if self.fuse_kernel.is_multiple_of(2) {
            bad.push(format!("fdr.fuse_kernel = {} must be odd", self.fuse_kernel));
        }
        if self.cla_reduction == 0 {
            bad.push("cla.reduction must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// One of the four ablation rows.
    pub fn with_modules(mut self, fdr: bool, cla: bool) -> Self {
        self.enable_fdr = fdr;
        self.enable_cla = cla;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    stem: (Conv2d, GroupNorm),
    stages: Vec<[(Conv2d, GroupNorm); 2]>,
}

impl Backbone {
    pub fn new(b: &mut ParamBuilder, spec: &BackboneSpec) -> Self {
        let mut block = |name: &str, geom: ConvGeom| {
            let out = geom.out_channels;
            (b.conv(name, geom, false), b.group_norm(&format!("{name}.norm"), out))
        };
        let stem = block("backbone.stem", ConvGeom::strided(3, spec.stem, 3, 2));
        let mut prev = spec.stem;
        let stages = spec
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let name = format!("backbone.stage{}", i + 1);
                let down = block(&format!("{name}.conv1"), ConvGeom::strided(prev, w, 3, 2));
                let conv = block(&format!("{name}.conv2"), ConvGeom::same(w, w, 3));
                prev = w;
                [down, conv]
            })
            .collect();
        Self { stem, stages }
    }

    /// Maps at strides 4, 8, 16 and 32.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: NodeId) -> Result<[NodeId; 4]> {
        let (c, h, w) = g.value(image).shape();
        if c != 3 {
            return Err(Error::Shape {
                op: "backbone_forward",
                detail: format!("image has {c} channels, expected 3"),
            });
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape {
                op: "backbone_forward",
                detail: format!("image size {h}x{w} is not a positive multiple of 32"),
            });
        }
        let unit = |g: &mut Graph, (conv, norm): &(Conv2d, GroupNorm), x: NodeId| -> Result<NodeId> {
            let y = conv.forward(g, p, x)?;
            let y = norm.forward(g, p, y)?;
            Ok(g.relu(y))
        };
        let mut x = unit(g, &self.stem, image)?;
        let mut outs = [x; 4];
        for (i, [down, conv]) in self.stages.iter().enumerate() {
            let y = unit(g, down, x)?;
            x = unit(g, conv, y)?;
            outs[i] = x;
        }
        Ok(outs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fpn {
    lateral: [Conv2d; 4],
    smooth: [Conv2d; 4],
    cla: [Option<Cla>; 4],
}

impl Fpn {
    pub fn new(b: &mut ParamBuilder, widths: &[usize; 4], fused: usize, placement: &ClaPlacement, reduction: usize) -> Self {
        let inner = fused / 4;
        let lateral = std::array::from_fn(|i| b.conv(&format!("fpn.lateral{}", i + 2), ConvGeom::same(widths[i], inner, 1), true));
        let smooth = std::array::from_fn(|i| b.conv(&format!("fpn.smooth{}", i + 2), ConvGeom::same(inner, inner, 3), true));
        let cla = std::array::from_fn(|i| {
            let level = Level::ALL[i];
            placement
                .contains(level)
                .then(|| Cla::new(b, &format!("cla.{level}"), inner, reduction))
        });
        Self { lateral, smooth, cla }
    }

    /// Per-level maps after smoothing (and attention where enabled), each
    /// at its own stride.
    pub fn levels(&self, g: &mut Graph, p: &Bound, feats: &[NodeId; 4], enable_cla: bool) -> Result<[NodeId; 4]> {
        let mut lat = [feats[0]; 4];
        for i in 0..4 {
            lat[i] = self.lateral[i].forward(g, p, feats[i])?;
        }
        let mut td = lat;
        for i in (0..3).rev() {
            let (_, h, w) = g.value(lat[i]).shape();
            let up = g.resize(td[i + 1], h, w, ResizeMode::Nearest)?;
            td[i] = g.add(lat[i], up)?;
        }
        let mut out = td;
        for i in 0..4 {
            let mut y = self.smooth[i].forward(g, p, td[i])?;
            if enable_cla {
                if let Some(cla) = &self.cla[i] {
                    y = cla.forward(g, p, y)?;
                }
            }
            out[i] = y;
        }
        Ok(out)
    }

    /// Upsamples every level to stride 4 and concatenates.
    pub fn forward(&self, g: &mut Graph, p: &Bound, feats: &[NodeId; 4], enable_cla: bool) -> Result<NodeId> {
        let levels = self.levels(g, p, feats, enable_cla)?;
        let (_, h, w) = g.value(levels[0]).shape();
        let mut parts = vec![levels[0]];
        for &l in &levels[1..] {
            parts.push(g.resize(l, h, w, ResizeMode::Nearest)?);
        }
        g.concat(&parts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadBranch {
    conv: Conv2d,
    norm1: GroupNorm,
    up1: ConvTranspose2d,
    norm2: GroupNorm,
    up2: ConvTranspose2d,
}

impl HeadBranch {
    fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let inner = (channels / 4).max(1);
        Self {
            conv: b.conv(&format!("{name}.conv"), ConvGeom::same(channels, inner, 3), false),
            norm1: b.group_norm(&format!("{name}.norm1"), inner),
            up1: b.conv_transpose(&format!("{name}.up1"), inner, inner, 2, false),
            norm2: b.group_norm(&format!("{name}.norm2"), inner),
            up2: b.conv_transpose_scaled(&format!("{name}.up2"), inner, 1, 2, true, HEAD_OUT_GAIN),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f: NodeId) -> Result<NodeId> {
        let x = self.conv.forward(g, p, f)?;
        let x = self.norm1.forward(g, p, x)?;
        let x = g.relu(x);
        let x = self.up1.forward(g, p, x)?;
        let x = self.norm2.forward(g, p, x)?;
        let x = g.relu(x);
        let x = self.up2.forward(g, p, x)?;
        Ok(g.sigmoid(x))
    }
}

/// Probability and threshold branches with disjoint parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DbHead {
    pub prob: HeadBranch,
    pub thresh: HeadBranch,
}

impl DbHead {
    pub fn new(b: &mut ParamBuilder, channels: usize) -> Self {
        Self {
            prob: HeadBranch::new(b, "head.prob", channels),
            thresh: HeadBranch::new(b, "head.thresh", channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f: NodeId) -> Result<(NodeId, NodeId)> {
        Ok((self.prob.forward(g, p, f)?, self.thresh.forward(g, p, f)?))
    }
}

/// `B = sigmoid(k (P - T))` on the tape.
pub fn approx_binarize_node(g: &mut Graph, p: NodeId, t: NodeId, k: f64) -> Result<NodeId> {
    let d = g.sub(p, t)?;
    let s = g.scale(d, k);
    Ok(g.sigmoid(s))
}

pub fn approx_binarize(p: &FeatureMap, t: &FeatureMap, k: f64) -> Result<FeatureMap> {
    if !(k > 0.0) {
        return Err(Error::Invalid(format!("binarization steepness must be positive, got {k}")));
    }
    let mut g = Graph::new();
    let pn = g.constant(p.clone());
    let tn = g.constant(t.clone());
    let b = approx_binarize_node(&mut g, pn, tn, k)?;
    Ok(g.take_value(b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    pub prob: FeatureMap,
    pub thresh: FeatureMap,
    pub binary: FeatureMap,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub stages: [NodeId; 4],
    pub fused: NodeId,
    /// Feature entering the head (the reconstructed map when enabled).
    pub head_input: NodeId,
    pub prob: NodeId,
    pub thresh: NodeId,
    pub binary: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub fdr: FdrParams,
    pub low_level: Conv2d,
    pub head: DbHead,
}

impl Detector {
    /// Builds the detector and its freshly initialised parameters.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut b = ParamBuilder::new(seed);
        let backbone = Backbone::new(&mut b, &config.backbone);
        let fpn = Fpn::new(
            &mut b,
            &config.backbone.widths,
            config.fused_channels,
            &config.cla_placement,
            config.cla_reduction,
        );
        let src = config.backbone.widths[config.low_level_stage.level()];
        let low_level = b.conv("fdr.reduce", ConvGeom::same(src, config.low_level_channels, 1), true);
        let fdr = FdrParams::new(
            &mut b,
            "fdr",
            config.fused_channels,
            config.low_level_channels,
            config.fuse_kernel,
        );
        let head = DbHead::new(&mut b, config.fused_channels);
        Ok((
            Self {
                config,
                backbone,
                fpn,
                fdr,
                low_level,
                head,
            },
            b.finish(),
        ))
    }

    pub fn forward_nodes(&self, g: &mut Graph, p: &Bound, image: NodeId) -> Result<ForwardNodes> {
        let stages = self.backbone.forward(g, p, image)?;
        let fused = self.fpn.forward(g, p, &stages, self.config.enable_cla)?;
        let head_input = if self.config.enable_fdr {
            let (_, h, w) = g.value(fused).shape();
            let s = self.low_level.forward(g, p, stages[self.config.low_level_stage.level()])?;
            let s = if g.value(s).height() != h || g.value(s).width() != w {
                g.resize(s, h, w, ResizeMode::Bilinear)?
            } else {
                s
            };
            self.fdr.forward(g, p, fused, s)?
        } else {
            fused
        };
        let (prob, thresh) = self.head.forward(g, p, head_input)?;
        let binary = approx_binarize_node(g, prob, thresh, self.config.k)?;
        Ok(ForwardNodes {
            stages,
            fused,
            head_input,
            prob,
            thresh,
            binary,
        })
    }

    pub fn forward(&self, store: &ParamStore, image: &FeatureMap) -> Result<DetectorOutput> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(image.clone());
        let n = self.forward_nodes(&mut g, &p, x)?;
        Ok(DetectorOutput {
            prob: g.take_value(n.prob),
            thresh: g.take_value(n.thresh),
            binary: g.take_value(n.binary),
        })
    }

    /// Names of the parameters that only the FDR branch uses.
    pub fn is_fdr_param(name: &str) -> bool {
        name.starts_with("fdr.")
    }

    pub fn is_cla_param(name: &str) -> bool {
        name.starts_with("cla.")
    }
}

pub fn backbone_forward(backbone: &Backbone, store: &ParamStore, image: &FeatureMap) -> Result<[FeatureMap; 4]> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(image.clone());
    let outs = backbone.forward(&mut g, &p, x)?;
    Ok(outs.map(|n| g.take_value(n)))
}

pub fn fpn_fuse(fpn: &Fpn, store: &ParamStore, feats: &[FeatureMap; 4], enable_cla: bool) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let ids = std::array::from_fn(|i| g.constant(feats[i].clone()));
    let y = fpn.forward(&mut g, &p, &ids, enable_cla)?;
    Ok(g.take_value(y))
}

pub fn db_head(head: &DbHead, store: &ParamStore, f: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(f.clone());
    let (pr, th) = head.forward(&mut g, &p, x)?;
    Ok((g.take_value(pr), g.take_value(th)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DetectorConfig {
        DetectorConfig {
            backbone: BackboneSpec {
                stem: 4,
                widths: [4, 8, 8, 8],
            },
            fused_channels: 16,
            low_level_channels: 4,
            ..DetectorConfig::default()
        }
    }

    fn image(seed: u64, h: usize, w: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(3, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn backbone_strides() {
        let (d, store) = Detector::new(tiny(), 1).unwrap();
        let outs = backbone_forward(&d.backbone, &store, &image(1, 64, 64)).unwrap();
        let sizes: Vec<_> = outs.iter().map(|o| (o.channels(), o.height(), o.width())).collect();
        assert_eq!(sizes, vec![(4, 16, 16), (8, 8, 8), (8, 4, 4), (8, 2, 2)]);
        assert!(backbone_forward(&d.backbone, &store, &image(1, 48, 64)).is_err());
    }

    #[test]
    fn backbone_strides_at_training_size() {
        let mut cfg = tiny();
        cfg.backbone = BackboneSpec { stem: 2, widths: [2, 2, 2, 2] };
        let (d, store) = Detector::new(cfg, 1).unwrap();
        let outs = backbone_forward(&d.backbone, &store, &FeatureMap::zeros(3, 640, 640)).unwrap();
        let sizes: Vec<_> = outs.iter().map(|o| o.height()).collect();
        assert_eq!(sizes, vec![160, 80, 40, 20]);
    }

    #[test]
    fn fused_map_has_configured_channels() {
        for widths in [[4, 8, 8, 8], [3, 5, 7, 9]] {
            let mut cfg = tiny();
            cfg.backbone.widths = widths;
            cfg.fused_channels = DEFAULT_FUSED_CHANNELS;
            let (d, store) = Detector::new(cfg, 2).unwrap();
            let feats = backbone_forward(&d.backbone, &store, &image(2, 32, 32)).unwrap();
            let f = fpn_fuse(&d.fpn, &store, &feats, true).unwrap();
            assert_eq!(f.shape(), (256, 8, 8));
        }
    }

    #[test]
    fn disabled_cla_ignores_its_parameters() {
        let mut cfg = tiny();
        cfg.enable_cla = false;
        let (d, mut store) = Detector::new(cfg, 3).unwrap();
        let feats = backbone_forward(&d.backbone, &store, &image(3, 32, 32)).unwrap();
        let before = fpn_fuse(&d.fpn, &store, &feats, false).unwrap();
        store.fill_prefix("cla.", 0.37);
        assert_eq!(fpn_fuse(&d.fpn, &store, &feats, false).unwrap(), before);
    }

    #[test]
    fn cla_on_out2_changes_only_that_branch() {
        let (d, store) = Detector::new(tiny(), 4).unwrap();
        let feats = backbone_forward(&d.backbone, &store, &image(4, 32, 32)).unwrap();
        let with = fpn_fuse(&d.fpn, &store, &feats, true).unwrap();
        let without = fpn_fuse(&d.fpn, &store, &feats, false).unwrap();
        let q = 4;
        for c in 0..16 {
            let same = with.channel(c) == without.channel(c);
            assert_eq!(same, c >= q, "channel {c}");
        }
    }

    #[test]
    fn zero_head_gives_half_maps() {
        let (d, mut store) = Detector::new(tiny(), 5).unwrap();
        store.fill_prefix("head.", 0.0);
        let f = image(5, 8, 8).slice_channels(0, 1).unwrap();
        let f = FeatureMap::from_fn(16, 8, 8, |c, y, x| f.get(0, y, x) * c as f64);
        let (p, t) = db_head(&d.head, &store, &f).unwrap();
        assert_eq!(p.shape(), (1, 32, 32));
        assert!(p.data().iter().chain(t.data()).all(|&v| v == 0.5));
    }

    #[test]
    fn head_branches_are_independent() {
        let (d, mut store) = Detector::new(tiny(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = FeatureMap::from_fn(16, 4, 6, |_, _, _| rng.random_range(-1.0..1.0));
        let (p0, t0) = db_head(&d.head, &store, &f).unwrap();
        for prm in store.iter_mut().filter(|p| p.name.starts_with("head.thresh")) {
            prm.value.iter_mut().for_each(|v| *v += 0.3);
        }
        let (p1, t1) = db_head(&d.head, &store, &f).unwrap();
        assert_eq!(p0, p1);
        assert_ne!(t0, t1);
        assert_eq!(p1.shape(), (1, 16, 24));
    }

    #[test]
    fn binarize_examples() {
        let p = FeatureMap::filled(1, 2, 2, 0.4);
        assert!(approx_binarize(&p, &p, 50.0).unwrap().data().iter().all(|&v| v == 0.5));
        let b = approx_binarize(&FeatureMap::scalar(0.9), &FeatureMap::scalar(0.3), 50.0).unwrap();
        assert!((b.item() - sigmoid(30.0)).abs() < 1e-15);
        assert!(b.item() > 1.0 - 1e-12);
        assert!(approx_binarize(&p, &p, 0.0).is_err());
    }

    #[test]
    fn binarize_is_monotone() {
        let grid: Vec<f64> = (0..=40).map(|i| i as f64 / 40.0).collect();
        let n = grid.len();
        let p = FeatureMap::from_fn(1, n, n, |_, y, _| grid[y]);
        let t = FeatureMap::from_fn(1, n, n, |_, _, x| grid[x]);
        let b = approx_binarize(&p, &t, 5.0).unwrap();
        for y in 0..n {
            for x in 0..n {
                if y + 1 < n {
                    assert!(b.get(0, y + 1, x) > b.get(0, y, x));
                }
                if x + 1 < n {
                    assert!(b.get(0, y, x + 1) < b.get(0, y, x));
                }
            }
        }
    }

    #[test]
    fn full_forward_is_finite_and_bounded() {
        for (fdr, cla) in [(false, false), (true, false), (false, true), (true, true)] {
            let (d, store) = Detector::new(tiny().with_modules(fdr, cla), 7).unwrap();
            let out = d.forward(&store, &image(7, 64, 64)).unwrap();
            for m in [&out.prob, &out.thresh, &out.binary] {
                assert_eq!(m.shape(), (1, 64, 64));
                let (lo, hi) = m.data().iter().fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
                assert!(lo > 0.0 && hi < 1.0, "fdr={fdr} cla={cla} range {lo} {hi}");
            }
            assert_eq!(out, d.forward(&store, &image(7, 64, 64)).unwrap());
        }
    }

    #[test]
    fn disabled_modules_receive_no_gradient() {
        for (fdr, cla) in [(false, false), (true, false), (false, true)] {
            let (d, store) = Detector::new(tiny().with_modules(fdr, cla), 8).unwrap();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(image(8, 32, 32));
            let n = d.forward_nodes(&mut g, &p, x).unwrap();
            let s = g.sum(n.binary);
            let grads = g.backward(s).unwrap();
            for (prm, gr) in store.iter().zip(p.gradients(&g, &grads)) {
                let off = (!fdr && Detector::is_fdr_param(&prm.name)) || (!cla && Detector::is_cla_param(&prm.name));
                if off {
                    assert!(gr.iter().all(|&v| v == 0.0), "{}", prm.name);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.fused_channels = 10;
        c.k = -1.0;
        let Err(Error::Config(msg)) = c.validate() else { panic!() };
        assert!(msg.contains("fused_channels") && msg.contains("model.k"));
        assert_eq!("conv3".parse::<LowLevelStage>().unwrap(), LowLevelStage::Conv3);
    }

    #[test]
    fn conv3_low_level_source_runs() {
        let mut cfg = tiny();
        cfg.low_level_stage = LowLevelStage::Conv3;
        let (d, store) = Detector::new(cfg, 9).unwrap();
        let out = d.forward(&store, &image(9, 32, 64)).unwrap();
        assert_eq!(out.prob.shape(), (1, 32, 64));
    }

    #[test]
    fn end_to_end_gradient_check_32x32() {
        let (d, mut store) = Detector::new(tiny(), 10).unwrap();
        // zero biases (and norm shifts on 1x1 maps) sit exactly on a ReLU kink; move off it
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in store.iter_mut().filter(|p| p.name.ends_with(".bias") || p.name.ends_with(".beta")) {
            p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        let img = image(10, 32, 32);
        let mut inputs: Vec<(String, FeatureMap)> = vec![("image".into(), img)];
        for p in store.iter() {
            inputs.push((p.name.clone(), FeatureMap::from_vec(1, 1, p.value.len(), p.value.clone()).unwrap()));
        }
        let named: Vec<(&str, &FeatureMap)> = inputs.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let cfg = crate::gradcheck::GradCheckConfig {
            step: 1e-5,
            max_probes: Some(8),
            ..crate::gradcheck::GradCheckConfig::with_tolerance(1e-3)
        };
        let t = std::time::Instant::now();
        let r = crate::gradcheck::finite_diff_check(
            "detector_forward",
            &named,
            |g, ids| {
                let p = Bound::from_nodes(ids[1..].to_vec());
                let n = d.forward_nodes(g, &p, ids[0])?;
                g.concat(&[n.prob, n.thresh, n.binary])
            },
            &cfg,
        );
        eprintln!("{r}{:?}", t.elapsed());
        assert!(r.pass, "{r}");
    }
}
