//! Probability map to detection polygons.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dilate_polygon, dilate_polygon_mitered, min_area_rect, Point, Polygon};
use crate::tensor::FeatureMap;

pub const DEFAULT_BIN_THRESH: f64 = 0.3;
pub const DEFAULT_UNCLIP_RATIO: f64 = 1.5;
pub const DEFAULT_MIN_SCORE: f64 = 0.5;
pub const DEFAULT_MIN_AREA: f64 = 16.0;

/// How far a shrunk component is pushed back out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum Unclip {
    /// `D' = A * ratio / L` of the traced contour.
    Ratio(f64),
    /// Undo a label shrink with this ratio exactly, assuming a rectangle.
    /// Dilates with mitered corners.
    InverseShrink(f64),
}

impl Unclip {
    pub fn distance(&self, area: f64, perimeter: f64) -> f64 {
        match *self {
            Unclip::Ratio(r) => {
                if perimeter > 0.0 {
                    area * r / perimeter
                } else {
                    0.0
                }
            }
            Unclip::InverseShrink(r) => inverse_shrink_distance(area, perimeter, r),
        }
    }
}

/// Offset `D` that a rectangle of the given shrunk area and perimeter was
/// shrunk by: the positive root of `4(1+r^2) D^2 + r^2 L D - (1-r^2) A = 0`.
pub fn inverse_shrink_distance(area: f64, perimeter: f64, r: f64) -> f64 {
    let (r2, k) = (r * r, 4.0);
    let a = k * (1.0 + r2);
    let b = r2 * perimeter;
    let c = -(1.0 - r2) * area;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    // stable form of (-b + sqrt(disc)) / 2a
    let d = -2.0 * c / (b + disc.sqrt());
    if d.is_finite() {
        d.max(0.0)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub bin_thresh: f64,
    pub unclip: Unclip,
    pub min_score: f64,
    /// Minimum contour area in pixels before unclipping.
    pub min_area: f64,
    /// Emit minimum-area rotated rectangles instead of free polygons.
    pub min_rect: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            bin_thresh: DEFAULT_BIN_THRESH,
            unclip: Unclip::Ratio(DEFAULT_UNCLIP_RATIO),
            min_score: DEFAULT_MIN_SCORE,
            min_area: DEFAULT_MIN_AREA,
            min_rect: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub polygon: Polygon,
    pub score: f64,
}

/// `P >= t` per pixel.
pub fn binarize(p: &FeatureMap, t: f64) -> Vec<bool> {
    p.data().iter().map(|&v| v >= t).collect()
}

/// 4-connected components in raster order of their first pixel. Each
/// component lists its pixel indices in ascending order.
pub fn connected_components(bitmap: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    assert_eq!(bitmap.len(), h * w, "bitmap size");
    let mut label = vec![usize::MAX; h * w];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !bitmap[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut pix = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            pix.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if bitmap[j] && label[j] == usize::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        pix.sort_unstable();
        comps.push(pix);
    }
    comps
}

// Unit steps in image coordinates (y down), clockwise on screen.
const DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

/// Outer boundary of a 4-connected pixel set, traced along pixel edges.
/// Holes are filled; diagonal-only contacts pinch the outline at a vertex.
pub fn trace_outer_contour(pixels: &[usize], h: usize, w: usize) -> Polygon {
    let inside = |x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && pixels.binary_search(&(y as usize * w + x as usize)).is_ok()
    };
    // Directed boundary edge leaving corner (x, y) in direction d exists when
    // the pixel on its right is inside and the one on its left is not.
    let right_pixel = |x: i64, y: i64, d: usize| -> (i64, i64) {
        match d {
            0 => (x, y),
            1 => (x - 1, y),
            2 => (x - 1, y - 1),
            _ => (x, y - 1),
        }
    };
    let left_pixel = |x: i64, y: i64, d: usize| -> (i64, i64) {
        match d {
            0 => (x, y - 1),
            1 => (x, y),
            2 => (x - 1, y),
            _ => (x - 1, y - 1),
        }
    };
    let is_edge = |x: i64, y: i64, d: usize| {
        let (rx, ry) = right_pixel(x, y, d);
        let (lx, ly) = left_pixel(x, y, d);
        inside(rx, ry) && !inside(lx, ly)
    };
    let first = pixels[0];
    let (sx, sy) = ((first % w) as i64, (first / w) as i64);
    // topmost-leftmost pixel: its top edge lies on the outer boundary
    let (mut x, mut y, mut d) = (sx, sy, 0usize);
    let mut pts: Vec<Point> = vec![[x as f64, y as f64]];
    loop {
        x += DIRS[d].0;
        y += DIRS[d].1;
        if (x, y) == (sx, sy) {
            break;
        }
        // prefer right turn, then straight, then left
        let nd = [(d + 1) % 4, d, (d + 3) % 4]
            .into_iter()
            .find(|&c| is_edge(x, y, c))
            .expect("boundary is closed");
        if nd != d {
            pts.push([x as f64, y as f64]);
        }
        d = nd;
    }
    Polygon::new(pts)
}

/// Components of `bitmap` turned into scored, unclipped polygons.
pub fn extract_boxes(bitmap: &[bool], p: &FeatureMap, cfg: &PostprocessConfig) -> Result<Vec<Detection>> {
    let (c, h, w) = p.shape();
    if c != 1 || bitmap.len() != h * w {
        return Err(Error::Shape {
            op: "extract_boxes",
            detail: format!("bitmap of {} pixels vs map {c}x{h}x{w}", bitmap.len()),
        });
    }
    let mut out = Vec::new();
    for comp in connected_components(bitmap, h, w) {
        let contour = trace_outer_contour(&comp, h, w);
        let area = contour.area();
        if area < cfg.min_area {
            continue;
        }
        let score = comp.iter().map(|&i| p.data()[i]).sum::<f64>() / comp.len() as f64;
        if score < cfg.min_score {
            continue;
        }
        let d = cfg.unclip.distance(area, contour.perimeter());
        let mut poly = match cfg.unclip {
            _ if d <= 0.0 => contour,
            Unclip::Ratio(_) => dilate_polygon(&contour, d)?,
            Unclip::InverseShrink(_) => dilate_polygon_mitered(&contour, d)?,
        };
        if cfg.min_rect {
            if let Some(r) = min_area_rect(&poly) {
                poly = r;
            }
        }
        out.push(Detection { polygon: poly, score });
    }
    Ok(out)
}

/// Binarize then extract.
pub fn detect(p: &FeatureMap, cfg: &PostprocessConfig) -> Result<Vec<Detection>> {
    extract_boxes(&binarize(p, cfg.bin_thresh), p, cfg)
}

/// One detection per line: `x1,y1,...,xn,yn,score`.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        for p in &d.polygon.points {
            let _ = write!(s, "{:.3},{:.3},", p[0], p[1]);
        }
        let _ = writeln!(s, "{:.6}", d.score);
    }
    s
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<Detection>> {
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
        let nums = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(e.to_string()))?;
        if nums.len() < 7 || nums.len() % 2 == 0 {
            return Err(err(format!("expected 2n coordinates plus a score, got {} numbers", nums.len())));
        }
        let (coords, score) = nums.split_at(nums.len() - 1);
        out.push(Detection {
            polygon: Polygon::new(coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect()),
            score: score[0],
        });
    }
    Ok(out)
}
