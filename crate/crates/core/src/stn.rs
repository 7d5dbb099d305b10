//! Projective spatial transformer: an 8-parameter homography predicted by a
//! small localization network, a projective sampling-grid generator, and a
//! differentiable bilinear sampler. The affine transformer is the special
//! case `θ31 = θ32 = 0`.
//!
//! Coordinates are normalized to `[-1, 1]` with corner pixels at exactly
//! `±1`; samples falling outside the input read zeros.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::params::join_name;
use crate::tensor::{
    activation, activation_backward, conv2d, conv2d_backward, dense, dense_backward, Activation, ConvParams,
    DenseParams, Grid, ParamSet,
};

/// Smallest admissible projective denominator `z` on a target grid.
pub const Z_MIN: f64 = 1e-3;

/// Identity parameters `(θ11, θ12, θ13, θ21, θ22, θ23, θ31, θ32)`.
pub const IDENTITY_THETA: [f64; 8] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

/// Output channels of the two localization convolutions.
pub const LOC_CHANNELS: [usize; 2] = [8, 16];

/// Bound on each perspective term emitted by the localization network,
/// applied as `P tanh(raw / P)`. With `|θ31| + |θ32| <= 2P = 0.8` the
/// denominator stays at least 0.2 over the normalized square, so a trained
/// localizer cannot reach the horizon.
pub const PERSPECTIVE_BOUND: f64 = 0.4;

/// Pixel coordinates closer than this to an integer are snapped onto it, so
/// that grids reproducing the pixel lattice up to rounding sample exactly.
const SNAP_TOL: f64 = 1e-10;

/// Projective map with the bottom-right matrix entry fixed to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    theta: [f64; 8],
}

impl Default for Homography {
    fn default() -> Self {
        Homography::identity()
    }
}

impl Homography {
    pub fn new(theta: [f64; 8]) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("homography parameters must be finite, got {theta:?}")));
        }
        Ok(Homography { theta })
    }

    pub fn identity() -> Self {
        Homography { theta: IDENTITY_THETA }
    }

    /// Embed affine parameters `(θ11, θ12, θ13, θ21, θ22, θ23)`.
    pub fn from_affine(theta6: [f64; 6]) -> Result<Self> {
        let [a, b, c, d, e, f] = theta6;
        Homography::new([a, b, c, d, e, f, 0.0, 0.0])
    }

    pub fn theta(&self) -> [f64; 8] {
        self.theta
    }

    pub fn is_affine(&self) -> bool {
        self.theta[6] == 0.0 && self.theta[7] == 0.0
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let t = &self.theta;
        [[t[0], t[1], t[2]], [t[3], t[4], t[5]], [t[6], t[7], 1.0]]
    }

    /// Divide a 3×3 matrix by its bottom-right entry, which must be at
    /// least [`Z_MIN`].
    pub fn normalize(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        if !(s >= Z_MIN) {
            return Err(Error::SingularTransform(format!(
                "bottom-right matrix entry {s} is below {Z_MIN}; cannot fix it to 1"
            )));
        }
        Homography::new([
            m[0][0] / s,
            m[0][1] / s,
            m[0][2] / s,
            m[1][0] / s,
            m[1][1] / s,
            m[1][2] / s,
            m[2][0] / s,
            m[2][1] / s,
        ])
    }

    pub fn det(&self) -> f64 {
        let m = self.matrix();
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// `normalize(self · other)`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        let a = self.matrix();
        let b = other.matrix();
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Homography::normalize(m)
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        if det.abs() < 1e-12 {
            return Err(Error::SingularTransform(format!("homography determinant {det:e} is zero")));
        }
        let m = self.matrix();
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        Homography::normalize(adj.map(|row| row.map(|v| v / det)))
    }

    /// Map one normalized point, or fail if its denominator is below
    /// [`Z_MIN`].
    pub fn apply(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let (xs, ys, z) = self.project(x, y);
        if !(z >= Z_MIN) {
            return Err(Error::SingularTransform(format!(
                "projective denominator {z} < {Z_MIN} at ({x}, {y})"
            )));
        }
        Ok((xs / z, ys / z))
    }

    fn project(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let t = &self.theta;
        (t[0] * x + t[1] * y + t[2], t[3] * x + t[4] * y + t[5], t[6] * x + t[7] * y + 1.0)
    }

    /// Random homography within `spread` of the identity in every entry,
    /// resampled until it and its inverse both keep `z >= 0.2` over
    /// `[-1, 1]²`. Used by property tests and acceptance checks.
    pub fn random_guarded<R: Rng + ?Sized>(rng: &mut R, spread: f64) -> Self {
        loop {
            let mut theta = IDENTITY_THETA;
            for v in &mut theta {
                *v += rng.gen_range(-spread..=spread);
            }
            let h = Homography { theta };
            let corners_ok = |h: &Homography| {
                [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
                    .iter()
                    .all(|&(x, y)| h.project(x, y).2 >= 0.2)
            };
            // z is affine in (x, y), so checking corners covers the square.
            if h.det().abs() > 0.1 && corners_ok(&h) && h.inverse().is_ok_and(|inv| corners_ok(&inv)) {
                return h;
            }
        }
    }
}

/// Normalized coordinate of pixel `i` on an axis of `n` pixels.
pub fn target_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Source coordinates `(x_s, y_s)` for every target pixel, row-major and
/// interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    height: usize,
    width: usize,
    coords: Vec<f64>,
}

impl SamplingGrid {
    pub fn new(height: usize, width: usize, coords: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || coords.len() != 2 * height * width {
            return Err(dim_err!(
                "sampling grid {height}x{width} needs {} coordinates, got {}",
                2 * height * width,
                coords.len()
            ));
        }
        Ok(SamplingGrid { height, width, coords })
    }

    /// The regular target lattice (what the identity transform produces).
    pub fn identity(height: usize, width: usize) -> Result<Self> {
        make_grid(&Homography::identity(), height, width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = 2 * (y * self.width + x);
        (self.coords[i], self.coords[i + 1])
    }
}

fn check_out_size(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(dim_err!("sampling grid must be at least 1x1, got {out_h}x{out_w}"));
    }
    Ok(())
}

/// Projective sampling grid: each target pixel `(x_t, y_t)` maps to
/// `(x/z, y/z)` where `(x, y, z) = Θ (x_t, y_t, 1)`.
pub fn make_grid(h: &Homography, out_h: usize, out_w: usize) -> Result<SamplingGrid> {
    check_out_size(out_h, out_w)?;
    let mut coords = Vec::with_capacity(2 * out_h * out_w);
    for i in 0..out_h {
        let yt = target_coord(i, out_h);
        for j in 0..out_w {
            let xt = target_coord(j, out_w);
            let (x, y, z) = h.project(xt, yt);
            if !(z >= Z_MIN) {
                return Err(Error::SingularTransform(format!(
                    "projective denominator {z:.3e} < {Z_MIN} at target ({xt:.4}, {yt:.4}); the transform crosses the horizon"
                )));
            }
            coords.push(x / z);
            coords.push(y / z);
        }
    }
    Ok(SamplingGrid {
        height: out_h,
        width: out_w,
        coords,
    })
}

/// Affine sampling grid; identical, bit for bit, to [`make_grid`] on the
/// embedded homography.
pub fn affine_grid(theta6: [f64; 6], out_h: usize, out_w: usize) -> Result<SamplingGrid> {
    check_out_size(out_h, out_w)?;
    let h = Homography::from_affine(theta6)?;
    let mut coords = Vec::with_capacity(2 * out_h * out_w);
    for i in 0..out_h {
        let yt = target_coord(i, out_h);
        for j in 0..out_w {
            let xt = target_coord(j, out_w);
            // z is exactly 1 here, and x / 1.0 == x in IEEE arithmetic.
            let (x, y, _) = h.project(xt, yt);
            coords.push(x);
            coords.push(y);
        }
    }
    Ok(SamplingGrid {
        height: out_h,
        width: out_w,
        coords,
    })
}

/// Gradient of a scalar w.r.t. θ given its gradient w.r.t. the grid
/// coordinates produced by [`make_grid`].
pub fn make_grid_backward(h: &Homography, out_h: usize, out_w: usize, grad_coords: &[f64]) -> Result<[f64; 8]> {
    check_out_size(out_h, out_w)?;
    if grad_coords.len() != 2 * out_h * out_w {
        return Err(dim_err!(
            "grid gradient has {} entries, expected {}",
            grad_coords.len(),
            2 * out_h * out_w
        ));
    }
    let mut g = [0.0; 8];
    for i in 0..out_h {
        let yt = target_coord(i, out_h);
        for j in 0..out_w {
            let xt = target_coord(j, out_w);
            let (x, y, z) = h.project(xt, yt);
            let k = 2 * (i * out_w + j);
            let (gx, gy) = (grad_coords[k] / z, grad_coords[k + 1] / z);
            let (xs, ys) = (x / z, y / z);
            g[0] += gx * xt;
            g[1] += gx * yt;
            g[2] += gx;
            g[3] += gy * xt;
            g[4] += gy * yt;
            g[5] += gy;
            let gz = -(gx * xs + gy * ys);
            g[6] += gz * xt;
            g[7] += gz * yt;
        }
    }
    Ok(g)
}

fn to_pixel(v: f64, n: usize) -> f64 {
    let p = (v + 1.0) * 0.5 * (n as f64 - 1.0);
    let r = p.round();
    if (p - r).abs() < SNAP_TOL {
        r
    } else {
        p
    }
}

/// The four bilinear neighbours of a pixel-space point: `(x0, y0)` and
/// fractional offsets. `None` when no neighbour can be in bounds.
fn corners(px: f64, py: f64, h: usize, w: usize) -> Option<(i64, i64, f64, f64)> {
    if px <= -1.0 || py <= -1.0 || px >= w as f64 || py >= h as f64 {
        return None;
    }
    let x0 = px.floor();
    let y0 = py.floor();
    Some((x0 as i64, y0 as i64, px - x0, py - y0))
}

fn check_grid(grid: &SamplingGrid) -> Result<()> {
    if let Some(v) = grid.coords.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("sampling grid contains a non-finite coordinate ({v})")));
    }
    Ok(())
}

/// Bilinear sampling of every channel of `input` at the grid's source
/// coordinates, with zero padding outside the input.
pub fn bilinear_sample(input: &Grid, grid: &SamplingGrid) -> Result<Grid> {
    check_grid(grid)?;
    let (c, h, w) = input.shape();
    let mut out = Grid::zeros(c, grid.height, grid.width);
    let at = |plane: &[f64], x: i64, y: i64| -> f64 {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            plane[y as usize * w + x as usize]
        } else {
            0.0
        }
    };
    for k in 0..grid.height * grid.width {
        let px = to_pixel(grid.coords[2 * k], w);
        let py = to_pixel(grid.coords[2 * k + 1], h);
        let Some((x0, y0, fx, fy)) = corners(px, py, h, w) else {
            continue;
        };
        for ch in 0..c {
            let plane = input.plane(ch);
            let v = (1.0 - fx) * (1.0 - fy) * at(plane, x0, y0)
                + fx * (1.0 - fy) * at(plane, x0 + 1, y0)
                + (1.0 - fx) * fy * at(plane, x0, y0 + 1)
                + fx * fy * at(plane, x0 + 1, y0 + 1);
            out.plane_mut(ch)[k] = v;
        }
    }
    Ok(out)
}

/// Gradients of [`bilinear_sample`] w.r.t. the input values and the grid
/// coordinates (interleaved like [`SamplingGrid::coords`]).
pub fn bilinear_sample_backward(input: &Grid, grid: &SamplingGrid, grad_out: &Grid) -> Result<(Grid, Vec<f64>)> {
    check_grid(grid)?;
    let (c, h, w) = input.shape();
    if grad_out.shape() != (c, grid.height, grid.width) {
        return Err(dim_err!(
            "sampler gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            (c, grid.height, grid.width)
        ));
    }
    let mut g_in = input.zeros_like();
    let mut g_grid = vec![0.0; grid.coords.len()];
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h;
    let sx = 0.5 * (w as f64 - 1.0);
    let sy = 0.5 * (h as f64 - 1.0);
    for k in 0..grid.height * grid.width {
        let px = to_pixel(grid.coords[2 * k], w);
        let py = to_pixel(grid.coords[2 * k + 1], h);
        let Some((x0, y0, fx, fy)) = corners(px, py, h, w) else {
            continue;
        };
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ];
        let (mut gpx, mut gpy) = (0.0, 0.0);
        for ch in 0..c {
            let g = grad_out.plane(ch)[k];
            if g == 0.0 {
                continue;
            }
            let plane = input.plane(ch);
            let v = |x: i64, y: i64| if inside(x, y) { plane[y as usize * w + x as usize] } else { 0.0 };
            let (v00, v10, v01, v11) = (v(x0, y0), v(x0 + 1, y0), v(x0, y0 + 1), v(x0 + 1, y0 + 1));
            gpx += g * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
            gpy += g * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
            let gplane = g_in.plane_mut(ch);
            for &(x, y, wt) in &taps {
                if inside(x, y) {
                    gplane[y as usize * w + x as usize] += g * wt;
                }
            }
        }
        g_grid[2 * k] = gpx * sx;
        g_grid[2 * k + 1] = gpy * sy;
    }
    Ok((g_in, g_grid))
}

/// Whether the localization head may use the perspective terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StnMode {
    #[default]
    Perspective,
    /// θ31 and θ32 are forced to zero: the classical affine transformer.
    Affine,
}

/// Localization network: two stride-2 3×3 convolutions with relu and a
/// fully connected layer emitting the eight homography parameters. The two
/// perspective outputs pass through a [`PERSPECTIVE_BOUND`]-scaled tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct LocParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub fc: DenseParams,
    pub mode: StnMode,
}

impl LocParams {
    /// He-initialized convolutions and an identity-initialized head (zero
    /// weights, bias equal to the identity θ), sized for `height × width`
    /// feature maps with `in_channels` channels.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        height: usize,
        width: usize,
        mode: StnMode,
        rng: &mut R,
    ) -> Result<Self> {
        check_loc_input(height, width)?;
        let conv1 = ConvParams::same(LOC_CHANNELS[0], in_channels, 3, 2)?.randomize(rng, 1.0);
        let conv2 = ConvParams::same(LOC_CHANNELS[1], LOC_CHANNELS[0], 3, 2)?.randomize(rng, 1.0);
        let (h1, w1) = conv1.output_size(height, width)?;
        let (h2, w2) = conv2.output_size(h1, w1)?;
        let mut fc = DenseParams::zeros(8, LOC_CHANNELS[1] * h2 * w2);
        fc.bias = IDENTITY_THETA.to_vec();
        Ok(LocParams { conv1, conv2, fc, mode })
    }

    pub fn validate(&self) -> Result<()> {
        if self.fc.out_features != 8 {
            return Err(dim_err!("localization head must emit 8 parameters, emits {}", self.fc.out_features));
        }
        if self.conv2.in_channels != self.conv1.out_channels {
            return Err(dim_err!(
                "localization convs disagree: {} outputs feed {} inputs",
                self.conv1.out_channels,
                self.conv2.in_channels
            ));
        }
        Ok(())
    }
}

impl ParamSet for LocParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.conv1.visit(&join_name(prefix, "conv1"), f);
        self.conv2.visit(&join_name(prefix, "conv2"), f);
        self.fc.visit(&join_name(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.fc.visit_mut(f);
    }
}

fn check_loc_input(height: usize, width: usize) -> Result<()> {
    if height < 4 || width < 4 {
        return Err(dim_err!("localization needs feature maps of at least 4x4, got {height}x{width}"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LocCache {
    input: Grid,
    pre1: Grid,
    act1: Grid,
    pre2: Grid,
    act2: Grid,
    raw: [f64; 8],
}

pub fn localize_forward(feat: &Grid, params: &LocParams) -> Result<(Homography, LocCache)> {
    check_loc_input(feat.height(), feat.width())?;
    params.validate()?;
    let pre1 = conv2d(feat, &params.conv1)?;
    let act1 = activation(&pre1, Activation::Relu);
    let pre2 = conv2d(&act1, &params.conv2)?;
    let act2 = activation(&pre2, Activation::Relu);
    let out = dense(act2.data(), &params.fc)?;
    let raw: [f64; 8] = out.try_into().expect("fc emits 8 values");
    let mut theta = raw;
    for k in 6..8 {
        theta[k] = match params.mode {
            StnMode::Affine => 0.0,
            StnMode::Perspective => PERSPECTIVE_BOUND * (raw[k] / PERSPECTIVE_BOUND).tanh(),
        };
    }
    let h = Homography::new(theta)?;
    Ok((
        h,
        LocCache {
            input: feat.clone(),
            pre1,
            act1,
            pre2,
            act2,
            raw,
        },
    ))
}

/// Homography predicted from a feature map.
pub fn localize(feat: &Grid, params: &LocParams) -> Result<Homography> {
    Ok(localize_forward(feat, params)?.0)
}

/// Parameter gradients and feature gradient given `∂L/∂θ`.
pub fn localize_backward(params: &LocParams, cache: &LocCache, grad_theta: &[f64; 8]) -> Result<(LocParams, Grid)> {
    let mut g_theta = *grad_theta;
    for k in 6..8 {
        g_theta[k] *= match params.mode {
            StnMode::Affine => 0.0,
            StnMode::Perspective => 1.0 - (cache.raw[k] / PERSPECTIVE_BOUND).tanh().powi(2),
        };
    }
    let fg = dense_backward(cache.act2.data(), &params.fc, &g_theta)?;
    let g_act2 = cache.act2.with_data(fg.input)?;
    let g_pre2 = activation_backward(&cache.pre2, Activation::Relu, &g_act2)?;
    let c2 = conv2d_backward(&cache.act1, &params.conv2, &g_pre2)?;
    let g_pre1 = activation_backward(&cache.pre1, Activation::Relu, &c2.input)?;
    let c1 = conv2d_backward(&cache.input, &params.conv1, &g_pre1)?;
    let mut grads = crate::tensor::params::zeros_like(params);
    grads.conv1.weights = c1.weights;
    grads.conv1.bias = c1.bias;
    grads.conv2.weights = c2.weights;
    grads.conv2.bias = c2.bias;
    grads.fc.weights = fg.weights;
    grads.fc.bias = fg.bias;
    Ok((grads, c1.input))
}

#[derive(Debug, Clone)]
pub struct StnCache {
    loc: LocCache,
    homography: Homography,
    grid: SamplingGrid,
}

impl StnCache {
    pub fn homography(&self) -> &Homography {
        &self.homography
    }
}

pub fn stn_forward_cached(feat: &Grid, params: &LocParams) -> Result<(Grid, StnCache)> {
    let (homography, loc) = localize_forward(feat, params)?;
    let grid = make_grid(&homography, feat.height(), feat.width())?;
    let out = bilinear_sample(feat, &grid)?;
    Ok((out, StnCache { loc, homography, grid }))
}

/// Warp `feat` by the homography its own localization network predicts.
/// The output has the input's shape.
pub fn stn_forward(feat: &Grid, params: &LocParams) -> Result<Grid> {
    Ok(stn_forward_cached(feat, params)?.0)
}

/// Gradients w.r.t. the localization parameters and the input features
/// (through both the sampled values and the predicted transform).
pub fn stn_backward(params: &LocParams, cache: &StnCache, grad_out: &Grid) -> Result<(LocParams, Grid)> {
    let feat = &cache.loc.input;
    let (mut g_feat, g_grid) = bilinear_sample_backward(feat, &cache.grid, grad_out)?;
    let g_theta = make_grid_backward(&cache.homography, cache.grid.height, cache.grid.width, &g_grid)?;
    let (grads, g_loc) = localize_backward(params, &cache.loc, &g_theta)?;
    g_feat.add_scaled(&g_loc, 1.0)?;
    Ok((grads, g_feat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::params::{flatten, load_flat};
    use crate::tensor::{finite_diff_check, finite_diff_check_coords, random_grid, sample_coords, vector_grid};
    use proptest::prelude::*;
    use rand::Rng;

    fn coord_map(h: &Homography, out_h: usize, out_w: usize) -> Vec<(f64, f64)> {
        let mut v = Vec::new();
        for i in 0..out_h {
            for j in 0..out_w {
                v.push(h.apply(target_coord(j, out_w), target_coord(i, out_h)).unwrap());
            }
        }
        v
    }

    #[test]
    fn identity_grid_is_the_target_lattice() {
        let g = make_grid(&Homography::identity(), 5, 7).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                assert_eq!(g.get(i, j), (target_coord(j, 7), target_coord(i, 5)));
            }
        }
        assert_eq!(g.get(0, 0), (-1.0, -1.0));
        assert_eq!(g.get(4, 6), (1.0, 1.0));
    }

    #[test]
    fn translation_and_perspective_hand_values() {
        let mut t = IDENTITY_THETA;
        t[2] = 0.5;
        let g = make_grid(&Homography::new(t).unwrap(), 3, 3).unwrap();
        assert_eq!(g.get(1, 1), (0.5, 0.0));

        let mut t = IDENTITY_THETA;
        t[6] = 0.5;
        let g = make_grid(&Homography::new(t).unwrap(), 3, 3).unwrap();
        let (x, y) = g.get(1, 2);
        assert!((x - 1.0 / 1.5).abs() < 1e-15 && y == 0.0);
        assert!((x - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn horizon_crossing_is_singular() {
        let mut t = IDENTITY_THETA;
        t[6] = 2.0;
        match make_grid(&Homography::new(t).unwrap(), 4, 4) {
            Err(Error::SingularTransform(msg)) => assert!(msg.contains("denominator")),
            other => panic!("expected singular transform, got {other:?}"),
        }
        assert!(matches!(make_grid(&Homography::identity(), 0, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn affine_grid_cases() {
        let id = affine_grid([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 4, 6).unwrap();
        assert_eq!(id, SamplingGrid::identity(4, 6).unwrap());
        let half = affine_grid([0.5, 0.0, 0.0, 0.0, 0.5, 0.0], 3, 3).unwrap();
        assert_eq!(half.get(2, 2), (0.5, 0.5));
    }

    #[test]
    fn bilinear_hand_value_and_identity() {
        let img = Grid::from_vec(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        // pixel-space (0.5, 0.5) is the normalized origin for a 2×2 input
        let g = SamplingGrid::new(1, 1, vec![0.0, 0.0]).unwrap();
        assert_eq!(bilinear_sample(&img, &g).unwrap().data(), &[1.5]);

        let mut rng = seeded(3);
        let x = random_grid(&mut rng, 3, 7, 9, -1.0, 1.0);
        let out = bilinear_sample(&x, &SamplingGrid::identity(7, 9).unwrap()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn far_outside_reads_zero() {
        let mut rng = seeded(4);
        let x = random_grid(&mut rng, 2, 5, 5, 0.5, 1.0);
        let margin = 2.0 / 4.0 + 0.01;
        let coords: Vec<f64> = (0..2 * 9)
            .map(|i| if i % 2 == 0 { 1.0 + margin + i as f64 * 0.1 } else { -1.0 - margin })
            .collect();
        let out = bilinear_sample(&x, &SamplingGrid::new(3, 3, coords).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let bad = SamplingGrid::new(1, 1, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(bilinear_sample(&x, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn sampler_matches_tent_kernel_oracle() {
        let mut rng = seeded(5);
        let x = random_grid(&mut rng, 2, 6, 5, -1.0, 1.0);
        let coords: Vec<f64> = (0..2 * 40).map(|_| rng.gen_range(-1.3..1.3)).collect();
        let grid = SamplingGrid::new(5, 8, coords).unwrap();
        let out = bilinear_sample(&x, &grid).unwrap();
        for k in 0..40 {
            let px = (grid.coords[2 * k] + 1.0) * 0.5 * 4.0;
            let py = (grid.coords[2 * k + 1] + 1.0) * 0.5 * 5.0;
            for c in 0..2 {
                let mut want = 0.0;
                for yy in 0..6 {
                    for xx in 0..5 {
                        let w = (1.0 - (px - xx as f64).abs()).max(0.0) * (1.0 - (py - yy as f64).abs()).max(0.0);
                        want += w * x.get(c, yy, xx);
                    }
                }
                assert!((out.plane(c)[k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampler_gradients() {
        let mut rng = seeded(6);
        let x = random_grid(&mut rng, 2, 5, 6, -1.0, 1.0);
        let coords: Vec<f64> = (0..2 * 12).map(|_| rng.gen_range(-1.2..1.2)).collect();
        let grid = SamplingGrid::new(3, 4, coords.clone()).unwrap();
        let r = random_grid(&mut rng, 2, 3, 4, -1.0, 1.0);
        let (gx, gg) = bilinear_sample_backward(&x, &grid, &r).unwrap();
        let ex = finite_diff_check(|v| bilinear_sample(v, &grid).unwrap().dot(&r).unwrap(), &x, &gx, 1e-5).unwrap();
        let eg = finite_diff_check(
            |v| {
                let g = SamplingGrid::new(3, 4, v.data().to_vec()).unwrap();
                bilinear_sample(&x, &g).unwrap().dot(&r).unwrap()
            },
            &vector_grid(&coords),
            &vector_grid(&gg),
            1e-5,
        )
        .unwrap();
        assert!(ex < 1e-8 && eg < 1e-6, "{ex} {eg}");
    }

    #[test]
    fn grid_gradient_wrt_theta() {
        let mut rng = seeded(7);
        let h = Homography::random_guarded(&mut rng, 0.2);
        let r: Vec<f64> = (0..2 * 20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = make_grid_backward(&h, 4, 5, &r).unwrap();
        let f = |v: &Grid| {
            let hh = Homography::new(v.data().try_into().unwrap()).unwrap();
            make_grid(&hh, 4, 5).unwrap().coords.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let err = finite_diff_check(f, &vector_grid(&h.theta()), &vector_grid(&g), 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn identity_initialized_localizer() {
        let mut rng = seeded(8);
        let p = LocParams::new(2, 6, 6, StnMode::Perspective, &mut rng).unwrap();
        for s in 0..3 {
            let x = random_grid(&mut seeded(s), 2, 6, 6, -1.0, 1.0);
            assert_eq!(localize(&x, &p).unwrap(), Homography::identity());
            let out = stn_forward(&x, &p).unwrap();
            assert!(out.max_abs_diff(&x).unwrap() < 1e-12);
        }
        assert!(matches!(
            localize(&Grid::zeros(2, 3, 6), &p),
            Err(Error::Dimension(_))
        ));
        assert!(LocParams::new(2, 3, 8, StnMode::Perspective, &mut rng).is_err());
    }

    #[test]
    fn affine_mode_drops_perspective_terms() {
        let mut rng = seeded(9);
        let mut p = LocParams::new(1, 8, 8, StnMode::Affine, &mut rng).unwrap();
        p.fc.bias[6] = 0.3;
        p.fc.bias[7] = -0.2;
        let h = localize(&random_grid(&mut rng, 1, 8, 8, 0.0, 1.0), &p).unwrap();
        assert!(h.is_affine());
    }

    #[test]
    fn perspective_terms_are_bounded() {
        let mut rng = seeded(12);
        let mut p = LocParams::new(1, 8, 8, StnMode::Perspective, &mut rng).unwrap();
        p.fc.bias[6] = 50.0;
        p.fc.bias[7] = -50.0;
        let h = localize(&random_grid(&mut rng, 1, 8, 8, 0.0, 1.0), &p).unwrap();
        let t = h.theta();
        assert!(t[6] <= PERSPECTIVE_BOUND && t[7] >= -PERSPECTIVE_BOUND);
        assert!(make_grid(&h, 8, 8).is_ok());
        p.fc.bias[6] = 0.1;
        let small = localize(&Grid::zeros(1, 8, 8), &p).unwrap().theta()[6];
        assert!((small - 0.1).abs() < 3e-3);
    }

    fn generic_loc(rng: &mut crate::rng::SeededRng, mode: StnMode) -> LocParams {
        let mut p = LocParams::new(2, 6, 6, mode, rng).unwrap();
        p.fc = p.fc.clone().randomize(rng, 0.05);
        p.conv1.bias.iter_mut().for_each(|b| *b = rng.gen_range(0.0..0.2));
        p.conv2.bias.iter_mut().for_each(|b| *b = rng.gen_range(0.0..0.2));
        p
    }

    #[test]
    fn full_stn_gradient_check() {
        for (seed, mode) in [(10, StnMode::Perspective), (11, StnMode::Affine)] {
            let mut rng = seeded(seed);
            let p = generic_loc(&mut rng, mode);
            let x = random_grid(&mut rng, 2, 6, 6, -1.0, 1.0);
            let r = random_grid(&mut rng, 2, 6, 6, -1.0, 1.0);
            let (out, cache) = stn_forward_cached(&x, &p).unwrap();
            assert_eq!(out.shape(), x.shape());
            let (gp, gx) = stn_backward(&p, &cache, &r).unwrap();
            let ex = finite_diff_check(|v| stn_forward(v, &p).unwrap().dot(&r).unwrap(), &x, &gx, 1e-5).unwrap();
            let flat = flatten(&p);
            let coords = sample_coords(&mut rng, flat.len(), 400);
            let ep = finite_diff_check_coords(
                |v| {
                    let mut q = p.clone();
                    load_flat(&mut q, v.data()).unwrap();
                    stn_forward(&x, &q).unwrap().dot(&r).unwrap()
                },
                &vector_grid(&flat),
                &vector_grid(&flatten(&gp)),
                1e-5,
                &coords,
            )
            .unwrap();
            assert!(ex < 1e-4 && ep < 1e-4, "{mode:?}: input {ex}, params {ep}");
        }
    }

    #[test]
    fn inverse_and_normalize_errors() {
        let flat = Homography::new([1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(flat.inverse(), Err(Error::SingularTransform(_))));
        let m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(Homography::normalize(m).is_err());
        assert!(Homography::new([f64::NAN; 8]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn composition_matches_sequential_maps(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let h1 = Homography::random_guarded(&mut rng, 0.25);
            let h2 = Homography::random_guarded(&mut rng, 0.25);
            let composed = h1.compose(&h2).unwrap();
            let direct = make_grid(&composed, 6, 5).unwrap();
            let inner = coord_map(&h2, 6, 5);
            for (k, &(x, y)) in inner.iter().enumerate() {
                let (x2, y2) = h1.apply(x, y).unwrap();
                prop_assert!((direct.coords[2 * k] - x2).abs() < 1e-10);
                prop_assert!((direct.coords[2 * k + 1] - y2).abs() < 1e-10);
            }
        }

        #[test]
        fn inverse_round_trips(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let h = Homography::random_guarded(&mut rng, 0.25);
            let inv = h.inverse().unwrap();
            for (i, &(x, y)) in coord_map(&h, 7, 7).iter().enumerate() {
                let (bx, by) = inv.apply(x, y).unwrap();
                let (tx, ty) = (target_coord(i % 7, 7), target_coord(i / 7, 7));
                prop_assert!((bx - tx).abs() < 1e-8 && (by - ty).abs() < 1e-8);
            }
        }

        #[test]
        fn affine_embedding_is_bitwise(t in prop::array::uniform6(-2.0f64..2.0), h in 1usize..6, w in 1usize..6) {
            let a = affine_grid(t, h, w).unwrap();
            let m = make_grid(&Homography::from_affine(t).unwrap(), h, w).unwrap();
            prop_assert!(a.coords.iter().zip(&m.coords).all(|(p, q)| p.to_bits() == q.to_bits()));
        }

        #[test]
        fn constant_input_stays_constant_in_bounds(v in -5.0f64..5.0, seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let x = Grid::filled(1, 5, 6, v);
            let coords: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let out = bilinear_sample(&x, &SamplingGrid::new(4, 4, coords).unwrap()).unwrap();
            prop_assert!(out.data().iter().all(|&o| (o - v).abs() <= 1e-12 * v.abs().max(1.0)));
        }
    }
}
