//! Gradient-weighted activation maps for the segmentation output. The target
//! scalar is the sum of the probability map, optionally restricted to a box.

use std::fmt::Write as _;
use std::str::FromStr;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::network::{Detector, ForwardNodes};
use crate::nn::ParamStore;
use crate::tensor::FeatureMap;
use crate::train::imaging::{mean_pixel, normalize, scale_and_pad, warp, Affine};
use crate::train::infer::input_geometry;

/// Which activation the map is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamLayer {
    /// Last backbone stage (stride 32).
    Stage4,
    /// Feature entering the head (stride 4).
    Final,
}

impl CamLayer {
    pub fn node(self, n: &ForwardNodes) -> NodeId {
        match self {
            CamLayer::Stage4 => n.stages[3],
            CamLayer::Final => n.head_input,
        }
    }
}

impl FromStr for CamLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage4" => Ok(CamLayer::Stage4),
            "final" => Ok(CamLayer::Final),
            _ => Err(Error::Config(format!("unknown layer {s:?}, expected stage4 or final"))),
        }
    }
}

/// Target scalar. `region` is `[x0, y0, x1, y1]` in probability-map pixels
/// (half-open); an extension for probing single failures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CamTarget {
    pub region: Option<[usize; 4]>,
    /// Multiplies the target; the normalised map does not depend on it.
    pub scale: f64,
}

impl Default for CamTarget {
    fn default() -> Self {
        Self { region: None, scale: 1.0 }
    }
}

/// `sum_p P(p)` (times `scale`, inside `region` when given) on the tape.
pub fn seg_target_scalar(g: &mut Graph, prob: NodeId, target: &CamTarget) -> Result<NodeId> {
    let (c, h, w) = g.value(prob).shape();
    let Some([x0, y0, x1, y1]) = target.region else {
        let s = g.sum(prob);
        return Ok(if target.scale == 1.0 { s } else { g.scale(s, target.scale) });
    };
    if x0 >= x1 || y0 >= y1 || x1 > w || y1 > h {
        return Err(Error::Invalid(format!("target box {:?} outside {w}x{h}", [x0, y0, x1, y1])));
    }
    let mut wts = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in y0..y1 {
            for x in x0..x1 {
                wts[(ch * h + y) * w + x] = target.scale;
            }
        }
    }
    g.dot(prob, wts)
}

/// `alpha_k = mean over (i, j) of dy / dA^k_ij`.
pub fn gradcam_weights(grad: &FeatureMap) -> Vec<f64> {
    let n = grad.plane().max(1) as f64;
    (0..grad.channels()).map(|k| grad.channel(k).iter().sum::<f64>() / n).collect()
}

/// `ReLU(sum_k alpha_k A^k)` as a `1 x H x W` map.
pub fn gradcam_heatmap(alpha: &[f64], a: &FeatureMap) -> Result<FeatureMap> {
    let (c, h, w) = a.shape();
    if alpha.len() != c {
        return Err(Error::Shape {
            op: "gradcam_heatmap",
            detail: format!("{} weights for {c} channels", alpha.len()),
        });
    }
    let mut out = FeatureMap::zeros(1, h, w);
    for (k, &ak) in alpha.iter().enumerate() {
        for (o, &v) in out.data_mut().iter_mut().zip(a.channel(k)) {
            *o += ak * v;
        }
    }
    Ok(out.map(|v| v.max(0.0)))
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_heatmap(m: &FeatureMap) -> FeatureMap {
    let (lo, hi) = m.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return FeatureMap::zeros(m.channels(), m.height(), m.width());
    }
    m.map(|v| (v - lo) / (hi - lo))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    pub layer: CamLayer,
    pub alpha: Vec<f64>,
    /// Heat map at the layer's resolution, before normalisation.
    pub raw: FeatureMap,
    /// Normalised map resampled to the original image.
    pub heat: FeatureMap,
}

/// Activation of the chosen layer and the gradient of the target with
/// respect to it, for an RGB image in `[0, 1]` resized the way inference
/// resizes it.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub activation: FeatureMap,
    pub gradient: FeatureMap,
    /// Image-to-input scale and the padded input size.
    pub scale: f64,
    pub input_h: usize,
    pub input_w: usize,
}

pub fn layer_gradient(
    det: &Detector,
    store: &ParamStore,
    img: &FeatureMap,
    short_edge: usize,
    layer: CamLayer,
    target: &CamTarget,
) -> Result<LayerGradient> {
    let (_, h, w) = img.shape();
    if h == 0 || w == 0 {
        return Err(Error::EmptyMap("gradcam"));
    }
    let (s, ih, iw) = input_geometry(h, w, short_edge);
    let x = normalize(&scale_and_pad(img, s, ih, iw, mean_pixel(img)));
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xn = g.constant(x);
    let n = det.forward_nodes(&mut g, &p, xn)?;
    let y = seg_target_scalar(&mut g, n.prob, target)?;
    let grads = g.backward(y)?;
    let a = layer.node(&n);
    Ok(LayerGradient {
        gradient: grads.get_or_zeros(a, g.value(a)),
        activation: g.take_value(a),
        scale: s,
        input_h: ih,
        input_w: iw,
    })
}

/// One forward and backward pass, then the weighted map resampled onto the
/// original image.
pub fn compute_gradcam(
    det: &Detector,
    store: &ParamStore,
    img: &FeatureMap,
    short_edge: usize,
    layer: CamLayer,
    target: &CamTarget,
) -> Result<GradCam> {
    let lg = layer_gradient(det, store, img, short_edge, layer, target)?;
    let alpha = gradcam_weights(&lg.gradient);
    let raw = gradcam_heatmap(&alpha, &lg.activation)?;
    // output pixel -> network input (times s) -> layer grid
    let (lh, lw) = (raw.height() as f64, raw.width() as f64);
    let to_layer = Affine::scale(lg.scale * lw / lg.input_w as f64, lg.scale * lh / lg.input_h as f64);
    let (_, h, w) = img.shape();
    let heat = warp(&normalize_heatmap(&raw), h, w, &to_layer, [0.0; 3]).map(|v| v.clamp(0.0, 1.0));
    Ok(GradCam { layer, alpha, raw, heat })
}

/// Viridis colours of `heat` blended at 50% over `img`.
pub fn overlay(img: &FeatureMap, heat: &FeatureMap) -> Result<RgbImage> {
    let (_, h, w) = img.shape();
    if heat.shape() != (1, h, w) {
        return Err(Error::Shape {
            op: "overlay",
            detail: format!("heat {:?} for image {h}x{w}", heat.shape()),
        });
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let c = colorous::VIRIDIS.eval_continuous(heat.get(0, y, x).clamp(0.0, 1.0));
        let mix = |k: usize, v: u8| (0.5 * img.get(k, y, x).clamp(0.0, 1.0) * 255.0 + 0.5 * v as f64).round() as u8;
        Rgb([mix(0, c.r), mix(1, c.g), mix(2, c.b)])
    }))
}

/// One row per line, comma separated, full precision.
pub fn heatmap_csv(m: &FeatureMap) -> String {
    let mut s = String::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if x > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", m.get(0, y, x));
        }
        s.push('\n');
    }
    s
}
