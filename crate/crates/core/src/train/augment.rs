//! Random flip, rotation and crop, applied identically to pixels and polygons,
//! then an aspect-preserving resize padded to a square.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::imaging::{mean_pixel, warp, Affine};
use crate::error::{Error, Result};
use crate::geometry::clip_to_canvas;
use crate::labels::TextAnnotation;
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    /// Lower bound on the crop side as a fraction of the image side.
    pub min_crop_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
            min_crop_scale: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("augment.flip_prob = {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= 180.0) {
            return Err(Error::Config(format!(
                "augment.max_rotation_deg = {} outside [0, 180]",
                self.max_rotation_deg
            )));
        }
        if !(self.min_crop_scale > 0.0 && self.min_crop_scale <= 1.0) {
            return Err(Error::Config(format!("augment.min_crop_scale = {} outside (0, 1]", self.min_crop_scale)));
        }
        Ok(())
    }
}

/// One realisation of the random transforms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Radians, about the image centre.
    pub angle: f64,
    /// `[x0, y0, width, height]` in rotated-image coordinates.
    pub crop: [f64; 4],
}

impl AugmentDraw {
    pub fn identity(w: usize, h: usize) -> Self {
        Self {
            flip: false,
            angle: 0.0,
            crop: [0.0, 0.0, w as f64, h as f64],
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig, w: usize, h: usize) -> Self {
        let flip = rng.random_bool(cfg.flip_prob);
        let max = cfg.max_rotation_deg.to_radians();
        let angle = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
        let (w, h) = (w as f64, h as f64);
        let side = |rng: &mut R, full: f64| {
            if cfg.min_crop_scale < 1.0 {
                full * rng.random_range(cfg.min_crop_scale..=1.0)
            } else {
                full
            }
        };
        let (cw, ch) = (side(rng, w), side(rng, h));
        let x0 = if cw < w { rng.random_range(0.0..=w - cw) } else { 0.0 };
        let y0 = if ch < h { rng.random_range(0.0..=h - ch) } else { 0.0 };
        Self {
            flip,
            angle,
            crop: [x0, y0, cw, ch],
        }
    }

    /// Source-to-output map for a square `out x out` canvas, and the extent
    /// of the valid (unpadded) region.
    pub fn transform(&self, w: usize, h: usize, out: usize) -> (Affine, [f64; 2]) {
        let (wf, hf) = (w as f64, h as f64);
        let mut f = Affine::IDENTITY;
        if self.flip {
            f = Affine::flip_horizontal(wf);
        }
        if self.angle != 0.0 {
            f = Affine::rotate(self.angle, [wf / 2.0, hf / 2.0]).then_after(&f);
        }
        let [x0, y0, cw, ch] = self.crop;
        if x0 != 0.0 || y0 != 0.0 {
            f = Affine::translate(-x0, -y0).then_after(&f);
        }
        let s = out as f64 / cw.max(ch);
        if s != 1.0 {
            f = Affine::scale(s, s).then_after(&f);
        }
        (f, [cw * s, ch * s])
    }
}

/// Applies `draw` and returns an `out x out` image. Annotations are mapped,
/// clipped to the valid region, and dropped when nothing is left.
pub fn apply(
    img: &FeatureMap,
    annots: &[TextAnnotation],
    draw: &AugmentDraw,
    out: usize,
) -> Result<(FeatureMap, Vec<TextAnnotation>)> {
    let (_, h, w) = img.shape();
    let (fwd, [vw, vh]) = draw.transform(w, h, out);
    let fill = mean_pixel(img);
    let mut res = warp(img, out, out, &fwd.inverse()?, fill);
    for y in 0..out {
        for x in 0..out {
            if x as f64 + 0.5 > vw || y as f64 + 0.5 > vh {
                for (c, &f) in fill.iter().enumerate() {
                    res.set(c, y, x, f);
                }
            }
        }
    }
    let mapped = annots
        .iter()
        .filter_map(|a| {
            let p = fwd.apply_polygon(&a.polygon);
            clip_to_canvas(&p, vw, vh).map(|p| TextAnnotation::new(p, a.ignore))
        })
        .collect();
    Ok((res, mapped))
}

/// Random draw then [`apply`]; a disabled config only resizes and pads.
pub fn augment<R: Rng + ?Sized>(
    img: &FeatureMap,
    annots: &[TextAnnotation],
    cfg: &AugmentConfig,
    out: usize,
    rng: &mut R,
) -> Result<(FeatureMap, Vec<TextAnnotation>, AugmentDraw)> {
    let (_, h, w) = img.shape();
    let draw = if cfg.enabled {
        AugmentDraw::sample(rng, cfg, w, h)
    } else {
        AugmentDraw::identity(w, h)
    };
    let (i, a) = apply(img, annots, &draw, out)?;
    Ok((i, a, draw))
}
