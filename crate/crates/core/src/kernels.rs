//! Numeric kernels shared by the tape ops: convolution via im2col + GEMM,
//! stride-equals-kernel transposed convolution, bilinear warping and resizing.
//!
//! Every kernel has a forward and a matching backward; the tape in
//! [`crate::graph`] wires them together.

use crate::tensor::FeatureMap;

/// `c = a * b + beta * c` for row/column-strided `f64` matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    /// Padding `kernel / 2` with the given stride.
    pub fn strided(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            ..Self::same(in_channels, out_channels, kernel)
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < self.kernel || wp < self.kernel {
            return None;
        }
        Some((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(x: &FeatureMap, g: &ConvGeom, ho: usize, wo: usize) -> Vec<f64> {
    let (c, h, w) = x.shape();
    let k = g.kernel;
    let n = ho * wo;
    let mut cols = vec![0.0; c * k * k * n];
    let xd = x.data();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xd[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut FeatureMap, ho: usize, wo: usize) {
    let (c, h, w) = dx.shape();
    let k = g.kernel;
    let n = ho * wo;
    let dd = dx.data_mut();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &dcols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dd[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cached lowering of a convolution input, reused by the backward pass.
pub struct ConvCache {
    cols: Option<Vec<f64>>,
    ho: usize,
    wo: usize,
}

pub fn conv2d_forward(
    x: &FeatureMap,
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> (FeatureMap, ConvCache) {
    let (_, h, w) = x.shape();
    let (ho, wo) = g.output_size(h, w).expect("conv output size checked by caller");
    let n = ho * wo;
    let ckk = g.in_channels * g.kernel * g.kernel;
    let mut y = FeatureMap::zeros(g.out_channels, ho, wo);
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            y.channel_mut(o).fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    let cols = if g.is_pointwise() {
        gemm(
            g.out_channels,
            ckk,
            n,
            weight,
            (ckk, 1),
            x.data(),
            (n, 1),
            beta,
            y.data_mut(),
        );
        None
    } else {
        let cols = im2col(x, g, ho, wo);
        gemm(
            g.out_channels,
            ckk,
            n,
            weight,
            (ckk, 1),
            &cols,
            (n, 1),
            beta,
            y.data_mut(),
        );
        Some(cols)
    };
    (y, ConvCache { cols, ho, wo })
}

/// Returns `(dx, dweight, dbias)` given the upstream gradient `dy`.
pub fn conv2d_backward(
    x: &FeatureMap,
    weight: &[f64],
    g: &ConvGeom,
    cache: &ConvCache,
    dy: &FeatureMap,
    need_dx: bool,
) -> (Option<FeatureMap>, Vec<f64>, Vec<f64>) {
    let n = cache.ho * cache.wo;
    let ckk = g.in_channels * g.kernel * g.kernel;
    let cols: &[f64] = cache.cols.as_deref().unwrap_or_else(|| x.data());
    let mut dw = vec![0.0; g.weight_len()];
    gemm(
        g.out_channels,
        n,
        ckk,
        dy.data(),
        (n, 1),
        cols,
        (1, n),
        0.0,
        &mut dw,
    );
    let db = (0..g.out_channels)
        .map(|o| dy.channel(o).iter().sum())
        .collect();
    let dx = need_dx.then(|| {
        let (c, h, w) = x.shape();
        if g.is_pointwise() {
            let mut dx = FeatureMap::zeros(c, h, w);
            gemm(
                ckk,
                g.out_channels,
                n,
                weight,
                (1, ckk),
                dy.data(),
                (n, 1),
                0.0,
                dx.data_mut(),
            );
            dx
        } else {
            let mut dcols = vec![0.0; ckk * n];
            gemm(
                ckk,
                g.out_channels,
                n,
                weight,
                (1, ckk),
                dy.data(),
                (n, 1),
                0.0,
                &mut dcols,
            );
            let mut dx = FeatureMap::zeros(c, h, w);
            col2im(&dcols, g, &mut dx, cache.ho, cache.wo);
            dx
        }
    });
    (dx, dw, db)
}

/// Transposed convolution whose stride equals its kernel size (no overlap),
/// weight layout `[in][out][k][k]`. Upsamples by exactly `k`.
pub fn conv_transpose_forward(
    x: &FeatureMap,
    weight: &[f64],
    bias: Option<&[f64]>,
    out_channels: usize,
    k: usize,
) -> FeatureMap {
    let (cin, h, w) = x.shape();
    let n = h * w;
    let okk = out_channels * k * k;
    let mut z = vec![0.0; okk * n];
    gemm(okk, cin, n, weight, (1, okk), x.data(), (n, 1), 0.0, &mut z);
    let mut y = FeatureMap::zeros(out_channels, h * k, w * k);
    let (yw, yh) = (w * k, h * k);
    let yd = y.data_mut();
    for o in 0..out_channels {
        let b = bias.map_or(0.0, |b| b[o]);
        for a in 0..k {
            for bb in 0..k {
                let row = &z[((o * k + a) * k + bb) * n..][..n];
                for iy in 0..h {
                    let dst = (o * yh + iy * k + a) * yw;
                    for ix in 0..w {
                        yd[dst + ix * k + bb] = row[iy * w + ix] + b;
                    }
                }
            }
        }
    }
    y
}

pub fn conv_transpose_backward(
    x: &FeatureMap,
    weight: &[f64],
    out_channels: usize,
    k: usize,
    dy: &FeatureMap,
    need_dx: bool,
) -> (Option<FeatureMap>, Vec<f64>, Vec<f64>) {
    let (cin, h, w) = x.shape();
    let n = h * w;
    let okk = out_channels * k * k;
    let (yw, yh) = (w * k, h * k);
    let mut dz = vec![0.0; okk * n];
    let dyd = dy.data();
    for o in 0..out_channels {
        for a in 0..k {
            for bb in 0..k {
                let row = &mut dz[((o * k + a) * k + bb) * n..][..n];
                for iy in 0..h {
                    let src = (o * yh + iy * k + a) * yw;
                    for ix in 0..w {
                        row[iy * w + ix] = dyd[src + ix * k + bb];
                    }
                }
            }
        }
    }
    let mut dw = vec![0.0; cin * okk];
    gemm(cin, n, okk, x.data(), (n, 1), &dz, (1, n), 0.0, &mut dw);
    let db = (0..out_channels)
        .map(|o| dy.channel(o).iter().sum())
        .collect();
    let dx = need_dx.then(|| {
        let mut dx = FeatureMap::zeros(cin, h, w);
        gemm(cin, okk, n, weight, (okk, 1), &dz, (n, 1), 0.0, dx.data_mut());
        dx
    });
    (dx, dw, db)
}

/// Bilinear corner lookup for one warped target, after border clamping.
#[derive(Clone, Copy, Debug)]
pub struct SampleTap {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    pub clamped_x: bool,
    pub clamped_y: bool,
}

impl SampleTap {
    pub fn new(tx: f64, ty: f64, h: usize, w: usize) -> Self {
        let max_x = (w - 1) as f64;
        let max_y = (h - 1) as f64;
        let clamped_x = !(0.0..=max_x).contains(&tx);
        let clamped_y = !(0.0..=max_y).contains(&ty);
        let cx = tx.clamp(0.0, max_x);
        let cy = ty.clamp(0.0, max_y);
        let x0 = (cx.floor() as usize).min(w - 1);
        let y0 = (cy.floor() as usize).min(h - 1);
        Self {
            x0,
            x1: (x0 + 1).min(w - 1),
            y0,
            y1: (y0 + 1).min(h - 1),
            fx: cx - x0 as f64,
            fy: cy - y0 as f64,
            clamped_x,
            clamped_y,
        }
    }

    #[inline]
    pub fn interpolate(&self, plane: &[f64], w: usize) -> f64 {
        let a = plane[self.y0 * w + self.x0];
        let b = plane[self.y0 * w + self.x1];
        let c = plane[self.y1 * w + self.x0];
        let d = plane[self.y1 * w + self.x1];
        let top = (1.0 - self.fx) * a + self.fx * b;
        let bottom = (1.0 - self.fx) * c + self.fx * d;
        (1.0 - self.fy) * top + self.fy * bottom
    }
}

/// Warps `x` by `flow` (`2 x H x W`, channel 0 = dx, 1 = dy): the output at
/// `p` is the bilinear interpolation of `x` at `p + flow(p)`, clamped to the
/// border.
pub fn warp_forward(x: &FeatureMap, flow: &FeatureMap) -> (FeatureMap, Vec<SampleTap>) {
    let (c, h, w) = x.shape();
    let taps: Vec<SampleTap> = (0..h * w)
        .map(|i| {
            let (py, px) = (i / w, i % w);
            let tx = px as f64 + flow.data()[i];
            let ty = py as f64 + flow.data()[h * w + i];
            SampleTap::new(tx, ty, h, w)
        })
        .collect();
    let mut out = FeatureMap::zeros(c, h, w);
    for ci in 0..c {
        let plane = x.channel(ci);
        let dst = out.channel_mut(ci);
        for (d, t) in dst.iter_mut().zip(&taps) {
            *d = t.interpolate(plane, w);
        }
    }
    (out, taps)
}

pub fn warp_backward(
    x: &FeatureMap,
    taps: &[SampleTap],
    dy: &FeatureMap,
) -> (FeatureMap, FeatureMap) {
    let (c, h, w) = x.shape();
    let mut dx = FeatureMap::zeros(c, h, w);
    let mut dflow = FeatureMap::zeros(2, h, w);
    for ci in 0..c {
        let plane = x.channel(ci);
        let g = dy.channel(ci);
        let mut ddx_acc = vec![0.0; h * w];
        let mut ddy_acc = vec![0.0; h * w];
        {
            let dplane = dx.channel_mut(ci);
            for (i, t) in taps.iter().enumerate() {
                let gi = g[i];
                if gi == 0.0 {
                    continue;
                }
                let (wx0, wx1) = (1.0 - t.fx, t.fx);
                let (wy0, wy1) = (1.0 - t.fy, t.fy);
                dplane[t.y0 * w + t.x0] += gi * wx0 * wy0;
                dplane[t.y0 * w + t.x1] += gi * wx1 * wy0;
                dplane[t.y1 * w + t.x0] += gi * wx0 * wy1;
                dplane[t.y1 * w + t.x1] += gi * wx1 * wy1;
                let a = plane[t.y0 * w + t.x0];
                let b = plane[t.y0 * w + t.x1];
                let cc = plane[t.y1 * w + t.x0];
                let d = plane[t.y1 * w + t.x1];
                if !t.clamped_x {
                    ddx_acc[i] += gi * (wy0 * (b - a) + wy1 * (d - cc));
                }
                if !t.clamped_y {
                    ddy_acc[i] += gi * (wx0 * (cc - a) + wx1 * (d - b));
                }
            }
        }
        dflow.channel_mut(0).iter_mut().zip(&ddx_acc).for_each(|(a, b)| *a += b);
        dflow.channel_mut(1).iter_mut().zip(&ddy_acc).for_each(|(a, b)| *a += b);
    }
    (dx, dflow)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    /// Half-pixel-centre bilinear interpolation (`align_corners = false`).
    Bilinear,
    Nearest,
}

/// One output coordinate's source taps along an axis.
#[derive(Clone, Copy, Debug)]
struct AxisTap {
    i0: usize,
    i1: usize,
    f: f64,
}

fn axis_taps(input: usize, output: usize, mode: ResizeMode) -> Vec<AxisTap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| match mode {
            ResizeMode::Nearest => {
                let i = ((o as f64 * scale).floor() as usize).min(input - 1);
                AxisTap { i0: i, i1: i, f: 0.0 }
            }
            ResizeMode::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let f = if i1 == i0 { 0.0 } else { src - i0 as f64 };
                AxisTap { i0, i1, f }
            }
        })
        .collect()
}

pub fn resize_forward(x: &FeatureMap, out_h: usize, out_w: usize, mode: ResizeMode) -> FeatureMap {
    let (c, h, w) = x.shape();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = axis_taps(h, out_h, mode);
    let tx = axis_taps(w, out_w, mode);
    let mut out = FeatureMap::zeros(c, out_h, out_w);
    for ci in 0..c {
        let src = x.channel(ci);
        let dst = out.channel_mut(ci);
        for (oy, ay) in ty.iter().enumerate() {
            let r0 = &src[ay.i0 * w..(ay.i0 + 1) * w];
            let r1 = &src[ay.i1 * w..(ay.i1 + 1) * w];
            for (ox, ax) in tx.iter().enumerate() {
                let top = (1.0 - ax.f) * r0[ax.i0] + ax.f * r0[ax.i1];
                let bot = (1.0 - ax.f) * r1[ax.i0] + ax.f * r1[ax.i1];
                dst[oy * out_w + ox] = (1.0 - ay.f) * top + ay.f * bot;
            }
        }
    }
    out
}

pub fn resize_backward(
    in_shape: (usize, usize, usize),
    dy: &FeatureMap,
    mode: ResizeMode,
) -> FeatureMap {
    let (c, h, w) = in_shape;
    let (_, out_h, out_w) = dy.shape();
    if (h, w) == (out_h, out_w) {
        return dy.clone();
    }
    let ty = axis_taps(h, out_h, mode);
    let tx = axis_taps(w, out_w, mode);
    let mut dx = FeatureMap::zeros(c, h, w);
    for ci in 0..c {
        let g = dy.channel(ci);
        let dst = dx.channel_mut(ci);
        for (oy, ay) in ty.iter().enumerate() {
            for (ox, ax) in tx.iter().enumerate() {
                let gv = g[oy * out_w + ox];
                dst[ay.i0 * w + ax.i0] += gv * (1.0 - ay.f) * (1.0 - ax.f);
                dst[ay.i0 * w + ax.i1] += gv * (1.0 - ay.f) * ax.f;
                dst[ay.i1 * w + ax.i0] += gv * ay.f * (1.0 - ax.f);
                dst[ay.i1 * w + ax.i1] += gv * ay.f * ax.f;
            }
        }
    }
    dx
}
