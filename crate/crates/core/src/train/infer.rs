//! Whole-image inference: resize, pad, forward, post-process, map back.

use serde::{Deserialize, Serialize};

use super::imaging::{mean_pixel, normalize, scale_and_pad};
use crate::error::{Error, Result};
use crate::geometry::clip_to_canvas;
use crate::network::Detector;
use crate::nn::ParamStore;
use crate::postprocess::{detect, Detection, PostprocessConfig};
use crate::tensor::FeatureMap;

pub const DEFAULT_SHORT_EDGE: usize = 736;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    /// Target length of the shorter image side before padding.
    pub short_edge: usize,
    pub post: PostprocessConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            short_edge: DEFAULT_SHORT_EDGE,
            post: PostprocessConfig::default(),
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.post;
        let mut bad = Vec::new();
        if self.short_edge == 0 {
            bad.push("infer.short_edge must be positive".to_string());
        }
        if !(p.bin_thresh > 0.0 && p.bin_thresh < 1.0) {
            bad.push(format!("infer.bin_thresh = {} outside (0, 1)", p.bin_thresh));
        }
        if !(0.0..=1.0).contains(&p.min_score) {
            bad.push(format!("infer.min_score = {} outside [0, 1]", p.min_score));
        }
        if !(p.min_area >= 0.0) {
            bad.push(format!("infer.min_area = {} must be non-negative", p.min_area));
        }
        let d = p.unclip.distance(100.0, 40.0);
        if !(d.is_finite() && d >= 0.0) {
            bad.push(format!("infer.unclip = {:?} gives no usable offset", p.unclip));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Scale factor and padded network input size for an `h x w` image: the
/// short side becomes `short_edge`, then both sides round up to a multiple
/// of 32.
pub fn input_geometry(h: usize, w: usize, short_edge: usize) -> (f64, usize, usize) {
    let s = short_edge as f64 / h.min(w) as f64;
    let up = |n: usize| ((n as f64 * s).round() as usize).max(1).div_ceil(32) * 32;
    (s, up(h), up(w))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    pub width: usize,
    pub height: usize,
    pub input_width: usize,
    pub input_height: usize,
    pub scale: f64,
    pub detections: Vec<Detection>,
}

/// The padded, normalised tensor the network sees, and the scale used.
pub fn prepare_input(img: &FeatureMap, short_edge: usize) -> (FeatureMap, f64) {
    let (_, h, w) = img.shape();
    let (s, ih, iw) = input_geometry(h, w, short_edge);
    (normalize(&scale_and_pad(img, s, ih, iw, mean_pixel(img))), s)
}

/// Runs the detector on an RGB image in `[0, 1]`; polygons come back in
/// original pixel coordinates, clipped to the image.
pub fn infer(det: &Detector, store: &ParamStore, img: &FeatureMap, cfg: &InferConfig) -> Result<InferResult> {
    cfg.validate()?;
    let (_, h, w) = img.shape();
    if h == 0 || w == 0 {
        return Err(Error::EmptyMap("infer"));
    }
    let (x, s) = prepare_input(img, cfg.short_edge);
    let out = det.forward(store, &x)?;
    // back to image pixels; whatever unclip pushed past the image (or into
    // the padding) is cut off
    let detections = detect(&out.prob, &cfg.post)?
        .into_iter()
        .filter_map(|d| {
            clip_to_canvas(&d.polygon.scale(1.0 / s), w as f64, h as f64).map(|polygon| Detection {
                polygon,
                score: d.score,
            })
        })
        .collect();
    Ok(InferResult {
        width: w,
        height: h,
        input_width: x.width(),
        input_height: x.height(),
        scale: s,
        detections,
    })
}
