//! Supervision maps from polygon annotations, and the per-image annotation
//! text format.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_to_canvas, dilate_polygon, offset_distance, rasterize, rasterize_into, shrink_polygon, Polygon};
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextAnnotation {
    pub polygon: Polygon,
    pub ignore: bool,
}

impl TextAnnotation {
    pub fn new(polygon: Polygon, ignore: bool) -> Self {
        Self { polygon, ignore }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelConfig {
    pub shrink_ratio: f64,
    pub thresh_min: f64,
    pub thresh_max: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            shrink_ratio: 0.4,
            thresh_min: 0.3,
            thresh_max: 0.7,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrink_ratio > 0.0 && self.shrink_ratio < 1.0) {
            return Err(Error::Config(format!("labels.shrink_ratio = {} outside (0, 1)", self.shrink_ratio)));
        }
        if !(0.0 <= self.thresh_min && self.thresh_min < self.thresh_max && self.thresh_max <= 1.0) {
            return Err(Error::Config(format!(
                "labels.thresh_min/max = {}/{} must satisfy 0 <= min < max <= 1",
                self.thresh_min, self.thresh_max
            )));
        }
        Ok(())
    }
}

/// All maps are `1 x H x W`; masks hold 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMaps {
    pub prob_gt: FeatureMap,
    pub prob_mask: FeatureMap,
    pub thresh_gt: FeatureMap,
    pub thresh_mask: FeatureMap,
}

pub fn gen_label_maps(annots: &[TextAnnotation], h: usize, w: usize, cfg: &LabelConfig) -> Result<LabelMaps> {
    cfg.validate()?;
    let mut prob_gt = FeatureMap::zeros(1, h, w);
    let mut prob_mask = FeatureMap::filled(1, h, w, 1.0);
    let mut thresh_mask = FeatureMap::zeros(1, h, w);
    // per-pixel max of 1 - clamp(dist / D) over instances
    let mut closeness = vec![0.0f64; h * w];

    for a in annots {
        let Some(poly) = clip_to_canvas(&a.polygon, w as f64, h as f64) else {
            continue;
        };
        let d = offset_distance(&poly, cfg.shrink_ratio).ok();
        let shrunk = match d {
            Some(d) if !a.ignore && poly.is_simple() => shrink_polygon(&poly, d)?,
            _ => None,
        };
        match shrunk {
            Some(s) => rasterize_into(&s, h, w, |i| prob_gt.data_mut()[i] = 1.0),
            None => {
                rasterize_into(&poly, h, w, |i| prob_mask.data_mut()[i] = 0.0);
                continue;
            }
        }
        let d = d.expect("shrunk implies an offset distance");
        let dilated = dilate_polygon(&poly, d)?;
        let inside = rasterize(&dilated, h, w);
        for (i, _) in inside.iter().enumerate().filter(|(_, &v)| v) {
            thresh_mask.data_mut()[i] = 1.0;
            let p = [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5];
            let c = 1.0 - (poly.boundary_distance(p) / d).clamp(0.0, 1.0);
            if c > closeness[i] {
                closeness[i] = c;
            }
        }
    }
    let span = cfg.thresh_max - cfg.thresh_min;
    let thresh_gt = FeatureMap::from_vec(1, h, w, closeness.iter().map(|c| cfg.thresh_min + span * c).collect())?;
    Ok(LabelMaps {
        prob_gt,
        prob_mask,
        thresh_gt,
        thresh_mask,
    })
}

/// Parses one annotation file: `x1,y1,...,xn,yn,flag` per line. A flag of
/// `###` or `1` marks the instance as ignored, `0` as a normal instance; any
/// other trailing text is a transcription and leaves the instance active.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<TextAnnotation>> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: ln + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let mut coords = Vec::new();
        let mut rest: Option<String> = None;
        for (i, f) in fields.iter().enumerate() {
            match f.parse::<f64>() {
                Ok(v) if v.is_finite() && rest.is_none() => coords.push(v),
                _ => {
                    rest = Some(fields[i..].join(","));
                    break;
                }
            }
        }
        let ignore = match rest.as_deref() {
            Some("###") => true,
            Some(_) => false,
            None => {
                // all-numeric: an odd count means the last number is the flag
                if coords.len() % 2 == 1 {
                    match coords.pop() {
                        Some(1.0) => true,
                        Some(0.0) => false,
                        Some(f) => return Err(err(format!("ignore flag {f} is neither 0 nor 1"))),
                        None => unreachable!(),
                    }
                } else {
                    false
                }
            }
        };
        if coords.len() % 2 != 0 {
            return Err(err("odd number of coordinates".into()));
        }
        if coords.len() < 6 {
            return Err(err(format!("polygon needs at least 3 vertices, got {}", coords.len() / 2)));
        }
        let points = coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        out.push(TextAnnotation::new(Polygon::new(points), ignore));
    }
    Ok(out)
}

pub fn format_annotations(annots: &[TextAnnotation]) -> String {
    let mut s = String::new();
    for a in annots {
        for p in &a.polygon.points {
            let _ = write!(s, "{},{},", p[0], p[1]);
        }
        s.push_str(if a.ignore { "###" } else { "0" });
        s.push('\n');
    }
    s
}

pub fn read_annotations(path: &Path) -> Result<Vec<TextAnnotation>> {
    parse_annotations(&std::fs::read_to_string(path)?, path)
}

pub fn write_annotations(path: &Path, annots: &[TextAnnotation]) -> Result<()> {
    std::fs::write(path, format_annotations(annots))?;
    Ok(())
}
