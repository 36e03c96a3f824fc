//! Seeded synthetic scenes: glyph-like text blocks on a textured background,
//! with exact polygons. Each scene can carry tightly spaced block pairs and
//! very elongated blocks, the two layouts that split or merge detections.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use toml::Value;

use super::flat::{self, as_bool, as_f64, as_usize, float, int};
use crate::error::{Error, Result};
use crate::geometry::{polygon_gap, Point, Polygon};
use crate::labels::TextAnnotation;
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Block height range in pixels.
    pub min_height: f64,
    pub max_height: f64,
    /// Length / height range for ordinary blocks.
    pub min_aspect: f64,
    pub max_aspect: f64,
    /// Gap inside adjacency pairs.
    pub spacing: f64,
    /// Minimum gap between unrelated blocks.
    pub margin: f64,
    pub adjacent_pairs: usize,
    /// Aspect of one extra-long block; 0 disables it.
    pub extreme_aspect: f64,
    pub max_rotation_deg: f64,
    pub curved: bool,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            min_instances: 2,
            max_instances: 4,
            min_height: 12.0,
            max_height: 20.0,
            min_aspect: 1.5,
            max_aspect: 4.0,
            spacing: 3.0,
            margin: 6.0,
            adjacent_pairs: 1,
            extreme_aspect: 7.0,
            max_rotation_deg: 10.0,
            curved: false,
        }
    }
}

const ATTEMPTS: usize = 400;

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("canvas must be non-empty".into());
        }
        if self.min_instances > self.max_instances {
            return bad(format!("min_instances {} > max_instances {}", self.min_instances, self.max_instances));
        }
        if !(self.min_height > 0.0 && self.min_height <= self.max_height) {
            return bad("need 0 < min_height <= max_height".into());
        }
        if !(self.min_aspect >= 1.0 && self.min_aspect <= self.max_aspect) {
            return bad("need 1 <= min_aspect <= max_aspect".into());
        }
        if !(self.spacing >= 0.0 && self.margin >= 0.0) {
            return bad("spacing and margin must be non-negative".into());
        }
        if self.extreme_aspect != 0.0 && self.extreme_aspect < 1.0 {
            return bad("extreme_aspect must be 0 or at least 1".into());
        }
        Ok(())
    }

    /// Rejects specs whose required blocks cannot fit, before any sampling.
    fn check_capacity(&self) -> Result<()> {
        let (w, h) = (self.width as f64, self.height as f64);
        let need_pairs = 2 * self.adjacent_pairs;
        if need_pairs > self.max_instances {
            return Err(Error::Unsatisfiable(format!(
                "{} adjacency pairs need {need_pairs} instances, max_instances is {}",
                self.adjacent_pairs, self.max_instances
            )));
        }
        let hmin = self.min_height;
        let mut lengths = vec![hmin * self.min_aspect; self.min_instances];
        if self.extreme_aspect > 0.0 && self.min_instances > 0 {
            lengths[0] = hmin * self.extreme_aspect;
        }
        let longest = lengths.iter().copied().fold(0.0, f64::max);
        if longest > w.max(h) - 2.0 || (self.min_instances > 0 && hmin > w.min(h) - 2.0) {
            return Err(Error::Unsatisfiable(format!("a {longest:.1} x {hmin:.1} block does not fit the canvas")));
        }
        let area: f64 = lengths.iter().map(|l| (l + self.margin) * (hmin + self.margin)).sum();
        if area > w * h {
            return Err(Error::Unsatisfiable(format!(
                "{} blocks need at least {area:.0} px^2, canvas has {:.0}",
                self.min_instances,
                w * h
            )));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, Value)> {
        vec![
            ("width", int(self.width)),
            ("height", int(self.height)),
            ("min_instances", int(self.min_instances)),
            ("max_instances", int(self.max_instances)),
            ("min_height", float(self.min_height)),
            ("max_height", float(self.max_height)),
            ("min_aspect", float(self.min_aspect)),
            ("max_aspect", float(self.max_aspect)),
            ("spacing", float(self.spacing)),
            ("margin", float(self.margin)),
            ("adjacent_pairs", int(self.adjacent_pairs)),
            ("extreme_aspect", float(self.extreme_aspect)),
            ("max_rotation_deg", float(self.max_rotation_deg)),
            ("curved", Value::Boolean(self.curved)),
        ]
    }

    pub fn to_flat_string(&self) -> String {
        flat::render(&self.entries())
    }

    pub fn from_flat_str(text: &str) -> Result<Self> {
        let mut s = Self::default();
        let map = flat::parse(text)?;
        let mut unknown = Vec::new();
        for (k, v) in &map {
            match k.as_str() {
                "width" => s.width = as_usize(k, v)?,
                "height" => s.height = as_usize(k, v)?,
                "min_instances" => s.min_instances = as_usize(k, v)?,
                "max_instances" => s.max_instances = as_usize(k, v)?,
                "min_height" => s.min_height = as_f64(k, v)?,
                "max_height" => s.max_height = as_f64(k, v)?,
                "min_aspect" => s.min_aspect = as_f64(k, v)?,
                "max_aspect" => s.max_aspect = as_f64(k, v)?,
                "spacing" => s.spacing = as_f64(k, v)?,
                "margin" => s.margin = as_f64(k, v)?,
                "adjacent_pairs" => s.adjacent_pairs = as_usize(k, v)?,
                "extreme_aspect" => s.extreme_aspect = as_f64(k, v)?,
                "max_rotation_deg" => s.max_rotation_deg = as_f64(k, v)?,
                "curved" => s.curved = as_bool(k, v)?,
                _ => unknown.push(k.clone()),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_flat_str(&std::fs::read_to_string(path)?)
    }
}

/// A text block in its own frame: `u` runs along the text, `v` across it.
#[derive(Clone, Debug, PartialEq)]
enum Block {
    Straight {
        centre: Point,
        length: f64,
        height: f64,
        angle: f64,
    },
    /// Band of the given height around a circular arc of radius `radius`.
    Arc {
        centre: Point,
        radius: f64,
        height: f64,
        start: f64,
        span: f64,
    },
}

const ARC_SEGMENTS: usize = 8;

impl Block {
    fn height(&self) -> f64 {
        match self {
            Block::Straight { height, .. } | Block::Arc { height, .. } => *height,
        }
    }

    fn polygon(&self) -> Polygon {
        match *self {
            Block::Straight {
                centre,
                length,
                height,
                angle,
            } => Polygon::rect(centre[0] - length / 2.0, centre[1] - height / 2.0, centre[0] + length / 2.0, centre[1] + height / 2.0)
                .rotate(angle, centre),
            Block::Arc {
                centre,
                radius,
                height,
                start,
                span,
            } => {
                let at = |r: f64, t: f64| [centre[0] + r * t.cos(), centre[1] + r * t.sin()];
                let (ro, ri) = (radius + height / 2.0, radius - height / 2.0);
                let mut pts: Vec<Point> = (0..=ARC_SEGMENTS)
                    .map(|i| at(ro, start + span * i as f64 / ARC_SEGMENTS as f64))
                    .collect();
                pts.extend((0..=ARC_SEGMENTS).rev().map(|i| at(ri, start + span * i as f64 / ARC_SEGMENTS as f64)));
                Polygon::new(pts)
            }
        }
    }

    /// `(u, v)` of image point `p`, both measured from the block's corner.
    fn local(&self, p: Point) -> (f64, f64) {
        match *self {
            Block::Straight {
                centre,
                length,
                height,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (p[0] - centre[0], p[1] - centre[1]);
                (c * dx + s * dy + length / 2.0, -s * dx + c * dy + height / 2.0)
            }
            Block::Arc {
                centre,
                radius,
                height,
                start,
                ..
            } => {
                let (dx, dy) = (p[0] - centre[0], p[1] - centre[1]);
                let mut t = dy.atan2(dx) - start;
                while t < -PI {
                    t += 2.0 * PI;
                }
                while t > PI {
                    t -= 2.0 * PI;
                }
                (t * radius, radius + height / 2.0 - dx.hypot(dy))
            }
        }
    }
}

/// 3x5 glyph bitmaps, one per character cell.
fn glyph_bits<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<u16> {
    (0..count)
        .map(|_| loop {
            let b: u16 = rng.random_range(0..1 << 15);
            if b.count_ones() >= 6 {
                break b;
            }
        })
        .collect()
}

fn ink_at(u: f64, v: f64, h: f64, glyphs: &[u16]) -> bool {
    let (cell, glyph_w, pad) = (0.8 * h, 0.6 * h, 0.12 * h);
    if u < 0.0 || v < pad || v >= h - pad {
        return false;
    }
    let idx = (u / cell) as usize;
    let off = u - idx as f64 * cell - 0.1 * h;
    if idx >= glyphs.len() || !(0.0..glyph_w).contains(&off) {
        return false;
    }
    let gx = ((off / glyph_w) * 3.0) as usize;
    let gy = (((v - pad) / (h - 2.0 * pad)) * 5.0) as usize;
    glyphs[idx] >> (gy.min(4) * 3 + gx.min(2)) & 1 == 1
}

fn in_canvas(p: &Polygon, w: f64, h: f64) -> bool {
    p.points.iter().all(|q| q[0] >= 1.0 && q[1] >= 1.0 && q[0] <= w - 1.0 && q[1] <= h - 1.0)
}

/// One seeded scene. Fails with `Unsatisfiable` when the required blocks
/// cannot be placed.
pub fn gen_synth_sample<R: Rng + ?Sized>(spec: &SynthSceneSpec, rng: &mut R) -> Result<(FeatureMap, Vec<TextAnnotation>)> {
    spec.validate()?;
    spec.check_capacity()?;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let n = rng.random_range(spec.min_instances..=spec.max_instances);
    let rot = spec.max_rotation_deg.to_radians();
    let mut placed: Vec<(Block, Polygon, Option<usize>)> = Vec::new();

    let fits = |poly: &Polygon, placed: &[(Block, Polygon, Option<usize>)], partner: Option<usize>| {
        in_canvas(poly, w, h)
            && poly.is_simple()
            && placed.iter().enumerate().all(|(i, (_, q, _))| {
                let gap = polygon_gap(poly, q);
                if Some(i) == partner {
                    gap > 0.0
                } else {
                    gap >= spec.margin
                }
            })
    };

    let mut k = 0;
    while k < n {
        let paired = k + 1 < n && k / 2 < spec.adjacent_pairs && (k % 2 == 0);
        let extreme = k == 0 && spec.extreme_aspect > 0.0 && spec.adjacent_pairs == 0
            || (spec.extreme_aspect > 0.0 && spec.adjacent_pairs > 0 && k == 2 * spec.adjacent_pairs && k < n);
        let mut ok = false;
        for _ in 0..ATTEMPTS {
            let height = rng.random_range(spec.min_height..=spec.max_height);
            let height = if extreme { spec.min_height } else { height };
            let aspect = if extreme {
                spec.extreme_aspect
            } else {
                rng.random_range(spec.min_aspect..=spec.max_aspect)
            };
            let angle = if rot > 0.0 { rng.random_range(-rot..=rot) } else { 0.0 };
            let curved = spec.curved && !paired && !extreme && rng.random_bool(0.5);
            let length = height * aspect;
            let centre = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
            let block = if curved {
                let radius = rng.random_range(length * 0.5..=length * 1.2).max(height);
                let span = length / radius;
                let mid = rng.random_range(-PI..PI);
                Block::Arc {
                    centre: [centre[0] - radius * mid.cos(), centre[1] - radius * mid.sin()],
                    radius,
                    height,
                    start: mid - span / 2.0,
                    span,
                }
            } else {
                Block::Straight {
                    centre,
                    length,
                    height,
                    angle,
                }
            };
            let poly = block.polygon();
            if !fits(&poly, &placed, None) {
                continue;
            }
            if paired {
                // same line, next to the first block with a narrow gap
                let l2 = height * rng.random_range(spec.min_aspect..=spec.max_aspect);
                let d = length / 2.0 + spec.spacing + l2 / 2.0;
                let c2 = [centre[0] + d * angle.cos(), centre[1] + d * angle.sin()];
                let b2 = Block::Straight {
                    centre: c2,
                    length: l2,
                    height,
                    angle,
                };
                let p2 = b2.polygon();
                let mut with_first = placed.clone();
                with_first.push((block.clone(), poly.clone(), None));
                if !fits(&p2, &placed, None) || !fits(&p2, &with_first, Some(placed.len())) {
                    continue;
                }
                let i = placed.len();
                placed.push((block, poly, Some(i + 1)));
                placed.push((b2, p2, Some(i)));
            } else {
                placed.push((block, poly, None));
            }
            ok = true;
            break;
        }
        if !ok {
            if k < spec.min_instances {
                return Err(Error::Unsatisfiable(format!(
                    "placed {k} of at least {} blocks in {ATTEMPTS} attempts",
                    spec.min_instances
                )));
            }
            break;
        }
        k += if paired { 2 } else { 1 };
    }

    let img = render(spec, &placed.iter().map(|p| p.0.clone()).collect::<Vec<_>>(), rng);
    let annots = placed.into_iter().map(|(_, p, _)| TextAnnotation::new(p, false)).collect();
    Ok((img, annots))
}

fn render<R: Rng + ?Sized>(spec: &SynthSceneSpec, blocks: &[Block], rng: &mut R) -> FeatureMap {
    let (w, h) = (spec.width, spec.height);
    let dark_bg = rng.random_bool(0.3);
    let base: [f64; 3] = std::array::from_fn(|_| {
        if dark_bg {
            rng.random_range(0.05..0.3)
        } else {
            rng.random_range(0.6..0.95)
        }
    });
    let (fx, fy, ph) = (rng.random_range(0.02..0.15), rng.random_range(0.02..0.15), rng.random_range(0.0..2.0 * PI));
    let mut img = FeatureMap::from_fn(3, h, w, |c, y, x| {
        let wave = 0.06 * ((x as f64 * fx + y as f64 * fy + ph + c as f64).sin());
        base[c] + wave + rng.random_range(-0.03..0.03)
    });
    for b in blocks {
        let poly = b.polygon();
        let glyph_count = match b {
            Block::Straight { length, height, .. } => (length / (0.8 * height)).floor().max(1.0) as usize,
            Block::Arc { radius, span, height, .. } => (radius * span / (0.8 * height)).floor().max(1.0) as usize,
        };
        let glyphs = glyph_bits(rng, glyph_count);
        let ink: [f64; 3] = std::array::from_fn(|c| if dark_bg { (base[c] + 0.6).min(1.0) } else { (base[c] - 0.55).max(0.0) });
        let hgt = b.height();
        let Some((x0, y0, x1, y1)) = poly.bbox() else { continue };
        for y in (y0.floor().max(0.0) as usize)..(y1.ceil() as usize).min(h) {
            for x in (x0.floor().max(0.0) as usize)..(x1.ceil() as usize).min(w) {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                if !poly.contains(p) {
                    continue;
                }
                let (u, v) = b.local(p);
                if ink_at(u, v, hgt, &glyphs) {
                    for (c, &iv) in ink.iter().enumerate() {
                        img.set(c, y, x, iv);
                    }
                }
            }
        }
    }
    img.map(|v| v.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::stream_rng;

    #[test]
    fn same_seed_same_scene() {
        let spec = SynthSceneSpec::default();
        let a = gen_synth_sample(&spec, &mut stream_rng(5, 3)).unwrap();
        let b = gen_synth_sample(&spec, &mut stream_rng(5, 3)).unwrap();
        assert_eq!(a, b);
        let c = gen_synth_sample(&spec, &mut stream_rng(5, 4)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn zero_instances_gives_background() {
        let spec = SynthSceneSpec {
            min_instances: 0,
            max_instances: 0,
            adjacent_pairs: 0,
            ..Default::default()
        };
        let (img, annots) = gen_synth_sample(&spec, &mut stream_rng(1, 0)).unwrap();
        assert!(annots.is_empty());
        assert_eq!(img.shape(), (3, 128, 128));
    }

    #[test]
    fn polygons_are_simple_and_inside() {
        for curved in [false, true] {
            let spec = SynthSceneSpec {
                curved,
                max_instances: 5,
                ..Default::default()
            };
            for s in 0..40 {
                let (_, annots) = gen_synth_sample(&spec, &mut stream_rng(9, s)).unwrap();
                assert!(annots.len() >= spec.min_instances);
                for a in &annots {
                    assert!(a.polygon.is_simple());
                    for p in &a.polygon.points {
                        assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= 128.0 && p[1] <= 128.0);
                    }
                }
            }
        }
    }

    #[test]
    fn stress_layouts_are_present() {
        let spec = SynthSceneSpec::default();
        let (_, annots) = gen_synth_sample(&spec, &mut stream_rng(2, 0)).unwrap();
        let gap = polygon_gap(&annots[0].polygon, &annots[1].polygon);
        assert!((gap - spec.spacing).abs() < 1e-6, "pair gap {gap}");
        if annots.len() > 2 {
            let p = &annots[2].polygon;
            let e: Vec<f64> = p.edges().map(|(a, b)| ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()).collect();
            assert!((e[0] / e[1] - spec.extreme_aspect).abs() < 1e-6);
        }
    }

    #[test]
    fn blocks_contain_ink() {
        let spec = SynthSceneSpec::default();
        let (img, annots) = gen_synth_sample(&spec, &mut stream_rng(3, 0)).unwrap();
        let r = crate::geometry::rasterize(&annots[0].polygon, 128, 128);
        let vals: Vec<f64> = r.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| img.data()[i]).collect();
        let (lo, hi) = vals.iter().fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi - lo > 0.4, "contrast {lo}..{hi}");
    }

    #[test]
    fn overfull_spec_is_unsatisfiable() {
        let spec = SynthSceneSpec {
            min_instances: 40,
            max_instances: 40,
            ..Default::default()
        };
        assert!(matches!(gen_synth_sample(&spec, &mut stream_rng(0, 0)), Err(Error::Unsatisfiable(_))));
        let spec = SynthSceneSpec {
            extreme_aspect: 20.0,
            ..Default::default()
        };
        assert!(matches!(gen_synth_sample(&spec, &mut stream_rng(0, 0)), Err(Error::Unsatisfiable(_))));
        let spec = SynthSceneSpec {
            adjacent_pairs: 3,
            ..Default::default()
        };
        assert!(matches!(gen_synth_sample(&spec, &mut stream_rng(0, 0)), Err(Error::Unsatisfiable(_))));
    }

    #[test]
    fn spec_text_round_trips() {
        let s = SynthSceneSpec {
            curved: true,
            spacing: 2.5,
            ..Default::default()
        };
        assert_eq!(SynthSceneSpec::from_flat_str(&s.to_flat_string()).unwrap(), s);
        assert!(matches!(SynthSceneSpec::from_flat_str("widht = 3"), Err(Error::UnknownKeys(_))));
    }
}
