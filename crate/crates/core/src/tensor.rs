//! Dense activation grids.
//!
//! [`FeatureMap`] is a channel-major `C x H x W` grid of `f64`. Vectors (pooled
//! descriptors, attention weights) are represented as `C x 1 x 1` maps and
//! scalars as `1 x 1 x 1` maps so that every node of the autodiff tape carries
//! the same value type.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err(
                "FeatureMap::from_vec",
                format!(
                    "{} values for shape {}x{}x{}",
                    data.len(),
                    channels,
                    height,
                    width
                ),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// A `len x 1 x 1` map holding a vector.
    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            channels: values.len(),
            height: 1,
            width: 1,
            data: values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(vec![value])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// Value of a scalar (or the first element of any map).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &FeatureMap, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &FeatureMap, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Accumulates `other` into `self` element-wise.
    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn reshape(self, channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::from_vec(channels, height, width, self.data)
    }

    /// Copies channels `[start, start + count)` into a new map.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.channels {
            return Err(shape_err(
                "slice_channels",
                format!("{}..{} of {} channels", start, start + count, self.channels),
            ));
        }
        let p = self.plane();
        Ok(Self {
            channels: count,
            height: self.height,
            width: self.width,
            data: self.data[start * p..(start + count) * p].to_vec(),
        })
    }
}

/// Per-pixel 2-vector offsets `(dx, dy)` in pixel units; `x` is the column
/// and `y` the row. Stored as a two-channel map (channel 0 = dx, 1 = dy).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(FeatureMap);

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(FeatureMap::zeros(2, height, width))
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        Self(FeatureMap::from_fn(2, height, width, |c, _, _| {
            if c == 0 {
                dx
            } else {
                dy
            }
        }))
    }

    pub fn from_map(map: FeatureMap) -> Result<Self> {
        if map.channels() != 2 {
            return Err(shape_err(
                "FlowField",
                format!("expected 2 channels, got {}", map.channels()),
            ));
        }
        Ok(Self(map))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn dx(&self, y: usize, x: usize) -> f64 {
        self.0.get(0, y, x)
    }

    pub fn dy(&self, y: usize, x: usize) -> f64 {
        self.0.get(1, y, x)
    }

    pub fn as_map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn into_map(self) -> FeatureMap {
        self.0
    }
}
