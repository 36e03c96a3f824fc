//! RGB images as `3 x H x W` maps in `[0, 1]`, affine resampling and PNG I/O.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::{Point, Polygon};
use crate::tensor::FeatureMap;

/// Per-channel normalisation applied before the backbone.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Row-major 2x3 affine map `p -> A p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [f64; 6],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    };

    pub fn translate(dx: f64, dy: f64) -> Self {
        Self {
            m: [1.0, 0.0, dx, 0.0, 1.0, dy],
        }
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Self {
            m: [sx, 0.0, 0.0, 0.0, sy, 0.0],
        }
    }

    /// Rotation by `theta` about `c`, in image coordinates.
    pub fn rotate(theta: f64, c: Point) -> Self {
        let (s, co) = theta.sin_cos();
        Self {
            m: [co, -s, c[0] - co * c[0] + s * c[1], s, co, c[1] - s * c[0] - co * c[1]],
        }
    }

    /// `x -> w - x`.
    pub fn flip_horizontal(w: f64) -> Self {
        Self {
            m: [-1.0, 0.0, w, 0.0, 1.0, 0.0],
        }
    }

    /// `self` applied after `first`.
    pub fn then_after(&self, first: &Affine) -> Affine {
        let a = &self.m;
        let b = &first.m;
        Affine {
            m: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        [m[0] * p[0] + m[1] * p[1] + m[2], m[3] * p[0] + m[4] * p[1] + m[5]]
    }

    pub fn inverse(&self) -> Result<Affine> {
        let m = &self.m;
        let det = m[0] * m[4] - m[1] * m[3];
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Invalid("singular affine map".into()));
        }
        let (a, b, c, d) = (m[4] / det, -m[1] / det, -m[3] / det, m[0] / det);
        Ok(Affine {
            m: [a, b, -(a * m[2] + b * m[5]), c, d, -(c * m[2] + d * m[5])],
        })
    }

    pub fn apply_polygon(&self, poly: &Polygon) -> Polygon {
        poly.map(|p| self.apply(p))
    }
}

pub fn mean_pixel(img: &FeatureMap) -> [f64; 3] {
    let mut m = [0.0; 3];
    let n = img.plane().max(1) as f64;
    for (c, v) in m.iter_mut().enumerate() {
        *v = img.channel(c).iter().sum::<f64>() / n;
    }
    m
}

/// Resamples `img` onto an `out_h x out_w` grid. `to_src` maps output
/// coordinates to source coordinates; pixel centres sit at `+0.5`. Samples
/// inside the source extent clamp to the border pixels, samples outside it
/// take `fill`.
pub fn warp(img: &FeatureMap, out_h: usize, out_w: usize, to_src: &Affine, fill: [f64; 3]) -> FeatureMap {
    let (c, h, w) = img.shape();
    let mut out = FeatureMap::zeros(c, out_h, out_w);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let s = to_src.apply([ox as f64 + 0.5, oy as f64 + 0.5]);
            if !(s[0] >= 0.0 && s[1] >= 0.0 && s[0] <= w as f64 && s[1] <= h as f64) {
                for ch in 0..c {
                    out.set(ch, oy, ox, fill[ch.min(2)]);
                }
                continue;
            }
            let (fx, fy) = (s[0] - 0.5, s[1] - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
            let (xa, xb) = (clamp(x0, w), clamp(x0 + 1.0, w));
            let (ya, yb) = (clamp(y0, h), clamp(y0 + 1.0, h));
            for ch in 0..c {
                let mut v = 0.0;
                for (y, wy) in [(ya, 1.0 - ay), (yb, ay)] {
                    for (x, wx) in [(xa, 1.0 - ax), (xb, ax)] {
                        let wgt = wx * wy;
                        if wgt != 0.0 {
                            v += wgt * img.get(ch, y, x);
                        }
                    }
                }
                out.set(ch, oy, ox, v);
            }
        }
    }
    out
}

/// Scales by `s` then pads right/bottom with `fill` up to `out_h x out_w`.
pub fn scale_and_pad(img: &FeatureMap, s: f64, out_h: usize, out_w: usize, fill: [f64; 3]) -> FeatureMap {
    let (_, h, w) = img.shape();
    let (sh, sw) = ((h as f64 * s).round() as usize, (w as f64 * s).round() as usize);
    let to_src = Affine::scale(w as f64 / sw as f64, h as f64 / sh as f64);
    let scaled = warp(img, sh, sw, &to_src, fill);
    let mut out = FeatureMap::from_fn(3, out_h, out_w, |c, _, _| fill[c]);
    for c in 0..3 {
        for y in 0..sh.min(out_h) {
            for x in 0..sw.min(out_w) {
                out.set(c, y, x, scaled.get(c, y, x));
            }
        }
    }
    out
}

/// `(v - mean) / std` per value.
pub fn normalize(img: &FeatureMap) -> FeatureMap {
    img.map(|v| (v - INPUT_MEAN) / INPUT_STD)
}

pub fn load_rgb(path: &Path) -> Result<FeatureMap> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(FeatureMap::from_fn(3, h as usize, w as usize, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn to_rgb8(img: &FeatureMap) -> RgbImage {
    let (_, h, w) = img.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |c: usize| (img.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

pub fn save_rgb(img: &FeatureMap, path: &Path) -> Result<()> {
    to_rgb8(img).save(path)?;
    Ok(())
}

/// Values round-tripped through 8-bit storage.
pub fn quantize(img: &FeatureMap) -> FeatureMap {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_img(seed: u64, h: usize, w: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(3, h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = random_img(1, 7, 9);
        assert_eq!(warp(&img, 7, 9, &Affine::IDENTITY, [0.0; 3]), img);
    }

    #[test]
    fn affine_algebra() {
        let r = Affine::rotate(0.3, [4.0, 2.0]);
        let t = Affine::translate(1.0, -2.0).then_after(&r);
        let p = [3.0, 7.0];
        let q = t.apply(p);
        let back = t.inverse().unwrap().apply(q);
        assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
        let c = r.apply([4.0, 2.0]);
        assert!((c[0] - 4.0).abs() < 1e-12 && (c[1] - 2.0).abs() < 1e-12);
        let f = Affine::flip_horizontal(10.0);
        assert_eq!(f.then_after(&f).apply(p), p);
    }

    #[test]
    fn flip_warp_mirrors_pixels() {
        let img = random_img(2, 4, 5);
        let f = Affine::flip_horizontal(5.0);
        let out = warp(&img, 4, 5, &f, [0.0; 3]);
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(out.get(1, y, x), img.get(1, y, 4 - x));
            }
        }
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = random_img(3, 6, 4);
        save_rgb(&img, &path).unwrap();
        let back = load_rgb(&path).unwrap();
        assert_eq!(back, quantize(&img));
    }

    #[test]
    fn scale_and_pad_fills() {
        let img = FeatureMap::filled(3, 4, 6, 0.25);
        let out = scale_and_pad(&img, 2.0, 10, 16, [0.5, 0.5, 0.5]);
        assert_eq!(out.shape(), (3, 10, 16));
        assert_eq!(out.get(0, 7, 11), 0.25);
        assert_eq!(out.get(0, 9, 15), 0.5);
        assert_eq!(out.get(0, 2, 13), 0.5);
    }
}
