//! Planar polygon helpers in pixel coordinates.
//!
//! Pixel `(x, y)` covers the square `[x, x+1) x [y, y+1)`; its centre is at
//! `(x + 0.5, y + 0.5)`.

use rand::Rng;
use geo::algorithm::buffer::{BufferStyle, LineJoin};
use geo::{Area, BooleanOps, Buffer, Coord, LineString, MinimumRotatedRect, MultiPolygon};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Closed ring stored without repeating the first vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub points: Vec<Point>,
}

impl Polygon {
    pub fn new(points: Vec<Point>) -> Self {
        let mut points = points;
        if points.len() > 1 && points.first() == points.last() {
            points.pop();
        }
        Self { points }
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.points.len();
        (0..n).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }

    /// Shoelace area; positive for counter-clockwise rings in a y-up frame.
    pub fn signed_area(&self) -> f64 {
        self.edges().map(|(a, b)| a[0] * b[1] - b[0] * a[1]).sum::<f64>() / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| dist(a, b)).sum()
    }

    pub fn bbox(&self) -> Option<(f64, f64, f64, f64)> {
        let first = self.points.first()?;
        Some(self.points.iter().fold((first[0], first[1], first[0], first[1]), |(x0, y0, x1, y1), p| {
            (x0.min(p[0]), y0.min(p[1]), x1.max(p[0]), y1.max(p[1]))
        }))
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: Point) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Distance from `p` to the nearest point of the boundary.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// At least three vertices, non-zero area and no two non-adjacent edges
    /// touching.
    pub fn is_simple(&self) -> bool {
        let n = self.points.len();
        if n < 3 || self.area() <= 0.0 || self.points.iter().flatten().any(|v| !v.is_finite()) {
            return false;
        }
        let e: Vec<(Point, Point)> = self.edges().collect();
        for i in 0..n {
            if e[i].0 == e[i].1 {
                return false;
            }
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    // adjacent edges may only share their common vertex
                    let (shared, p, q) = if j == i + 1 { (e[i].1, e[i].0, e[j].1) } else { (e[i].0, e[i].1, e[j].0) };
                    if cross(shared, p, q) == 0.0 && dot(sub(p, shared), sub(q, shared)) > 0.0 {
                        return false;
                    }
                } else if segments_intersect(e[i].0, e[i].1, e[j].0, e[j].1) {
                    return false;
                }
            }
        }
        true
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        self.map(|p| [p[0] + dx, p[1] + dy])
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|p| [p[0] * s, p[1] * s])
    }

    /// Rotation by `theta` radians about `centre`.
    pub fn rotate(&self, theta: f64, centre: Point) -> Self {
        let (s, c) = theta.sin_cos();
        self.map(|p| {
            let (x, y) = (p[0] - centre[0], p[1] - centre[1]);
            [centre[0] + c * x - s * y, centre[1] + s * x + c * y]
        })
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn to_geo(&self) -> geo::Polygon<f64> {
        let ring: Vec<Coord<f64>> = self.points.iter().map(|p| Coord { x: p[0], y: p[1] }).collect();
        geo::Polygon::new(LineString::from(ring), vec![])
    }

    pub fn from_geo(p: &geo::Polygon<f64>) -> Self {
        Self::new(p.exterior().0.iter().map(|c| [c.x, c.y]).collect())
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Z component of `(p - o) x (q - o)`.
fn cross(o: Point, p: Point, q: Point) -> f64 {
    (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0])
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Closed-segment intersection test, collinear overlaps included.
pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(a, c, d))
        || (d2 == 0.0 && on_segment(b, c, d))
        || (d3 == 0.0 && on_segment(c, a, b))
        || (d4 == 0.0 && on_segment(d, a, b))
}

/// Smallest distance between two polygons; 0 when they touch, cross or nest.
pub fn polygon_gap(a: &Polygon, b: &Polygon) -> f64 {
    for (p, q) in a.edges() {
        for (r, t) in b.edges() {
            if segments_intersect(p, q, r, t) {
                return 0.0;
            }
        }
    }
    if a.points.first().is_some_and(|&p| b.contains(p)) || b.points.first().is_some_and(|&p| a.contains(p)) {
        return 0.0;
    }
    let one = |x: &Polygon, y: &Polygon| {
        x.points
            .iter()
            .map(|&p| y.boundary_distance(p))
            .fold(f64::INFINITY, f64::min)
    };
    one(a, b).min(one(b, a))
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// `Area * (1 - r^2) / Perimeter`.
pub fn offset_distance(poly: &Polygon, r: f64) -> Result<f64> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Geometry(format!("shrink ratio {r} outside (0, 1)")));
    }
    let perimeter = poly.perimeter();
    if !(perimeter > 0.0) {
        return Err(Error::Geometry("polygon has zero perimeter".into()));
    }
    Ok(poly.area() * (1.0 - r * r) / perimeter)
}

fn largest(mp: MultiPolygon<f64>) -> Option<Polygon> {
    mp.0.iter()
        .filter(|p| p.exterior().0.len() >= 4)
        .max_by(|a, b| a.unsigned_area().total_cmp(&b.unsigned_area()))
        .map(Polygon::from_geo)
        .filter(|p| p.area() > 0.0)
}

/// Offsets the boundary by `d` (outward when positive) with round joins.
/// Returns the largest resulting component, or `None` when nothing is left.
pub fn offset_polygon(poly: &Polygon, d: f64) -> Option<Polygon> {
    if d == 0.0 {
        return Some(poly.clone());
    }
    largest(poly.to_geo().buffer(d))
}

/// Outward offset with sharp (mitered) corners.
pub fn dilate_polygon_mitered(poly: &Polygon, d: f64) -> Result<Polygon> {
    if !(d >= 0.0) {
        return Err(Error::Geometry(format!("offset distance {d} must be non-negative")));
    }
    if d == 0.0 {
        return Ok(poly.clone());
    }
    let style = BufferStyle::new(d).line_join(LineJoin::Miter(0.05));
    largest(poly.to_geo().buffer_with_style(style))
        .ok_or_else(|| Error::Geometry("dilation produced an empty polygon".into()))
}

pub fn shrink_polygon(poly: &Polygon, d: f64) -> Result<Option<Polygon>> {
    if !(d >= 0.0) {
        return Err(Error::Geometry(format!("offset distance {d} must be non-negative")));
    }
    Ok(offset_polygon(poly, -d))
}

pub fn dilate_polygon(poly: &Polygon, d: f64) -> Result<Polygon> {
    if !(d >= 0.0) {
        return Err(Error::Geometry(format!("offset distance {d} must be non-negative")));
    }
    offset_polygon(poly, d).ok_or_else(|| Error::Geometry("dilation produced an empty polygon".into()))
}

/// Intersection over union; 0 when either polygon has no area.
pub fn polygon_iou(a: &Polygon, b: &Polygon) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if !(aa > 0.0 && ab > 0.0) {
        return 0.0;
    }
    let (ga, gb) = (a.to_geo(), b.to_geo());
    let inter = ga.intersection(&gb).unsigned_area();
    let union = aa + ab - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn min_area_rect(poly: &Polygon) -> Option<Polygon> {
    poly.to_geo().minimum_rotated_rect().map(|r| Polygon::from_geo(&r))
}

/// Sutherland-Hodgman clip against the axis-aligned box `[0, w] x [0, h]`.
pub fn clip_to_canvas(poly: &Polygon, w: f64, h: f64) -> Option<Polygon> {
    type Inside = fn(Point, f64) -> bool;
    type Cut = fn(Point, Point, f64) -> Point;
    let planes: [(Inside, Cut, f64); 4] = [
        (|p, v| p[0] >= v, |a, b, v| lerp_x(a, b, v), 0.0),
        (|p, v| p[0] <= v, |a, b, v| lerp_x(a, b, v), w),
        (|p, v| p[1] >= v, |a, b, v| lerp_y(a, b, v), 0.0),
        (|p, v| p[1] <= v, |a, b, v| lerp_y(a, b, v), h),
    ];
    let mut pts = poly.points.clone();
    for (inside, cut, v) in planes {
        if pts.is_empty() {
            break;
        }
        let mut out = Vec::with_capacity(pts.len() + 2);
        for i in 0..pts.len() {
            let cur = pts[i];
            let prev = pts[(i + pts.len() - 1) % pts.len()];
            match (inside(cur, v), inside(prev, v)) {
                (true, true) => out.push(cur),
                (true, false) => {
                    out.push(cut(prev, cur, v));
                    out.push(cur);
                }
                (false, true) => out.push(cut(prev, cur, v)),
                (false, false) => {}
            }
        }
        pts = out;
    }
    pts.dedup();
    let p = Polygon::new(pts);
    (p.len() >= 3 && p.area() > 1e-9).then_some(p)
}

fn lerp_x(a: Point, b: Point, x: f64) -> Point {
    let t = (x - a[0]) / (b[0] - a[0]);
    [x, a[1] + t * (b[1] - a[1])]
}

fn lerp_y(a: Point, b: Point, y: f64) -> Point {
    let t = (y - a[1]) / (b[1] - a[1]);
    [a[0] + t * (b[0] - a[0]), y]
}

/// Pixels of an `h x w` grid whose centres lie inside `poly` (even-odd),
/// row-major.
pub fn rasterize(poly: &Polygon, h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    rasterize_into(poly, h, w, |i| mask[i] = true);
    mask
}

/// Calls `hit` with the row-major index of every covered pixel.
pub fn rasterize_into(poly: &Polygon, h: usize, w: usize, mut hit: impl FnMut(usize)) {
    let Some((_, y0, _, y1)) = poly.bbox() else { return };
    let ys = (y0 - 0.5).ceil().max(0.0) as usize;
    let ye = ((y1 - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
    if ye < 0.0 {
        return;
    }
    let mut xs = Vec::new();
    for y in ys..=ye as usize {
        let cy = y as f64 + 0.5;
        xs.clear();
        for (a, b) in poly.edges() {
            if (a[1] > cy) != (b[1] > cy) {
                xs.push(a[0] + (cy - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // centres in [left, right) are inside, as in `contains`
            let from = (pair[0] - 0.5).ceil().max(0.0);
            let to = (pair[1] - 0.5).ceil().min(w as f64);
            let (from, to) = (from as isize, to as isize);
            for x in from..to {
                hit(y * w + x as usize);
            }
        }
    }
}

/// Polygon star-shaped around `(cx, cy)`, `n >= 3`. Angles are redrawn
/// until no gap between neighbours reaches pi; a wider gap would let the
/// closing edges cross.
pub fn random_star<R: Rng + ?Sized>(rng: &mut R, n: usize, cx: f64, cy: f64, rmin: f64, rmax: f64) -> Polygon {
    use std::f64::consts::{PI, TAU};
    let n = n.max(3);
    let angles = loop {
        let mut a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
        a.sort_by(f64::total_cmp);
        a.dedup_by(|x, y| (*x - *y).abs() < 1e-3);
        let wrap = a[0] + TAU - a[a.len() - 1];
        if a.len() >= 3 && a.windows(2).map(|w| w[1] - w[0]).chain([wrap]).all(|g| g < PI - 1e-3) {
            break a;
        }
    };
    Polygon::new(
        angles
            .iter()
            .map(|&t| {
                let r = rng.random_range(rmin..rmax);
                [cx + r * t.cos(), cy + r * t.sin()]
            })
            .collect(),
    )
}
