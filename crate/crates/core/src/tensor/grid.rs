use std::fmt;

use crate::error::{dim_err, Result};

/// Dense `channels × height × width` field of `f64`, stored row-major with
/// the channel as the slowest axis.
///
/// Images, feature maps, transmission maps and their gradients all travel as
/// grids.
#[derive(Clone, PartialEq)]
pub struct Grid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(
            channels > 0 && height > 0 && width > 0,
            "grid dimensions must be positive, got {channels}x{height}x{width}"
        );
        Grid {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(dim_err!(
                "grid dimensions must be positive, got {channels}x{height}x{width}"
            ));
        }
        if data.len() != channels * height * width {
            return Err(dim_err!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            ));
        }
        Ok(Grid {
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
        let mut g = Grid::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    g.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        g
    }

    /// A grid with the same shape as `self`, filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Grid::zeros(self.channels, self.height, self.width)
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

    pub fn plane_len(&self) -> usize {
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

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copy of a single channel as a 1-channel grid.
    pub fn channel(&self, c: usize) -> Grid {
        Grid {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.plane(c).to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Elementwise combination of two same-shaped grids.
    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Grid {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Grid, scale: f64) -> Result<()> {
        self.ensure_same_shape(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn dot(&self, other: &Grid) -> Result<f64> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Grid) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack grids of identical spatial size along the channel axis.
    pub fn concat_channels(parts: &[Grid]) -> Result<Grid> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("cannot concatenate zero grids"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(dim_err!(
                    "concat: spatial size {}x{} differs from {h}x{w}",
                    p.height,
                    p.width
                ));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Grid::from_vec(channels, h, w, data)
    }

    /// Inverse of [`Grid::concat_channels`]: split into consecutive groups of
    /// the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Result<Vec<Grid>> {
        let total: usize = counts.iter().sum();
        if total != self.channels {
            return Err(dim_err!(
                "split: channel counts sum to {total}, grid has {}",
                self.channels
            ));
        }
        let n = self.plane_len();
        let mut out = Vec::with_capacity(counts.len());
        let mut start = 0;
        for &c in counts {
            out.push(Grid::from_vec(
                c,
                self.height,
                self.width,
                self.data[start * n..(start + c) * n].to_vec(),
            )?);
            start += c;
        }
        Ok(out)
    }

    pub fn ensure_same_shape(&self, other: &Grid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(dim_err!(
                "{what}: shape {:?} does not match {:?} (channels, height, width)",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }

    /// Same shape as `self`, new contents.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Grid> {
        Grid::from_vec(self.channels, self.height, self.width, data)
    }
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Grid({}x{}x{}",
            self.channels, self.height, self.width
        )?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}
