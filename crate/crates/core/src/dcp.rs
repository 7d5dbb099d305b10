//! Dark channel prior: dark channel extraction, background-light and
//! transmission estimation, the `B(x)` reparameterization and the prior used
//! as a training loss.

use crate::error::{dim_err, Error, Result};
use crate::imaging::{BackgroundLight, HazyImage, TransmissionMap, T_MIN};
use crate::tensor::Grid;

/// Lower bound on `|I - 1|` when forming the `B(x)` quotient.
pub const B_DENOM_FLOOR: f64 = 1e-3;

/// Per-pixel minimum over channels and a square neighbourhood; 1 channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DarkChannel(Grid);

impl DarkChannel {
    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

/// The per-pixel quantity `B` with `J = B I - B + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BMap(Grid);

impl BMap {
    pub fn new(grid: Grid) -> Result<Self> {
        if !grid.all_finite() {
            return Err(Error::Domain("B map contains non-finite values".into()));
        }
        Ok(BMap(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

fn check_patch(patch: usize) -> Result<()> {
    if patch == 0 || patch % 2 == 0 {
        return Err(Error::Parameter(format!("patch size must be odd and positive, got {patch}")));
    }
    Ok(())
}

/// Sliding-window minimum over `[i - r, i + r]` clipped to the row. Clipping
/// is the same as replicate padding for a minimum.
fn min_filter_1d(src: &[f64], dst: &mut [f64], r: usize) {
    let n = src.len();
    for i in 0..n {
        let lo = i.saturating_sub(r);
        let hi = (i + r + 1).min(n);
        dst[i] = src[lo..hi].iter().copied().fold(f64::INFINITY, f64::min);
    }
}

/// Dark channel with a `patch × patch` window and replicate padding.
pub fn dark_channel(image: &Grid, patch: usize) -> Result<DarkChannel> {
    check_patch(patch)?;
    let (c, h, w) = image.shape();
    let mut min_c = image.plane(0).to_vec();
    for ch in 1..c {
        for (m, &v) in min_c.iter_mut().zip(image.plane(ch)) {
            *m = m.min(v);
        }
    }
    let r = patch / 2;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        min_filter_1d(&min_c[y * w..(y + 1) * w], &mut rows[y * w..(y + 1) * w], r);
    }
    let mut col_src = vec![0.0; h];
    let mut col_dst = vec![0.0; h];
    let mut out = Grid::zeros(1, h, w);
    for x in 0..w {
        for y in 0..h {
            col_src[y] = rows[y * w + x];
        }
        min_filter_1d(&col_src, &mut col_dst, r);
        for y in 0..h {
            out.set(0, y, x, col_dst[y]);
        }
    }
    Ok(DarkChannel(out))
}

/// Dark channel together with, for every pixel, the flat grid index of the
/// element that attains it. Ties go to the lowest flat (channel, row, column)
/// index.
pub fn dark_channel_argmin(image: &Grid, patch: usize) -> Result<(DarkChannel, Vec<usize>)> {
    check_patch(patch)?;
    let (c, h, w) = image.shape();
    let r = patch / 2;
    let mut out = Grid::zeros(1, h, w);
    let mut arg = vec![0usize; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let mut best = f64::INFINITY;
            let mut best_idx = usize::MAX;
            // Scanning in flat-index order with strict `<` keeps the lowest index on ties.
            for ch in 0..c {
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let idx = image.index(ch, yy, xx);
                        let v = image.data()[idx];
                        if v < best || best_idx == usize::MAX {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
            }
            out.set(0, y, x, best);
            arg[y * w + x] = best_idx;
        }
    }
    Ok((DarkChannel(out), arg))
}

/// Robust background light: among the brightest `ceil(fraction · H · W)`
/// dark-channel pixels, take the input pixel with the largest channel sum.
pub fn estimate_background_light(image: &Grid, patch: usize, fraction: f64) -> Result<BackgroundLight> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let dark = dark_channel(image, patch)?;
    let (c, h, w) = image.shape();
    let n = h * w;
    let count = ((fraction * n as f64).ceil() as usize).clamp(1, n);

    let mut order: Vec<usize> = (0..n).collect();
    // Descending dark value, ascending index on ties.
    order.sort_by(|&p, &q| {
        dark.0.data()[q]
            .total_cmp(&dark.0.data()[p])
            .then(p.cmp(&q))
    });
    let channel_sum = |p: usize| (0..c).map(|ch| image.plane(ch)[p]).sum::<f64>();
    let mut best = order[0];
    let mut best_sum = channel_sum(best);
    for &p in &order[1..count] {
        let s = channel_sum(p);
        if s > best_sum || (s == best_sum && p < best) {
            best = p;
            best_sum = s;
        }
    }
    BackgroundLight::new((0..c).map(|ch| image.plane(ch)[best]).collect())
}

/// `t = 1 - ω · dark_channel(I / A)`, clamped to `[T_MIN, 1]`.
pub fn estimate_transmission_dcp(
    image: &Grid,
    a: &BackgroundLight,
    patch: usize,
    omega: f64,
) -> Result<TransmissionMap> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::Parameter(format!("omega must lie in (0, 1], got {omega}")));
    }
    if a.channels() != image.channels() {
        return Err(dim_err!(
            "background light has {} channels, image has {}",
            a.channels(),
            image.channels()
        ));
    }
    if let Some(v) = a.values().iter().find(|&&v| v <= 0.0) {
        return Err(Error::Domain(format!(
            "background light component {v} must be positive to normalize the image"
        )));
    }
    let mut normalized = image.clone();
    for (ch, &av) in a.values().iter().enumerate() {
        normalized.plane_mut(ch).iter_mut().for_each(|v| *v /= av);
    }
    let dark = dark_channel(&normalized, patch)?;
    TransmissionMap::new(dark.0.map(|d| (1.0 - omega * d).clamp(T_MIN, 1.0)))
}

/// `B = ((I - A) / t + (A - 1)) / (I - 1)`, with `|I - 1|` floored at
/// [`B_DENOM_FLOOR`].
pub fn compute_b(hazy: &HazyImage, t: &TransmissionMap, a: &BackgroundLight) -> Result<BMap> {
    let i = hazy.grid();
    let tg = t.grid();
    if (tg.height(), tg.width()) != (i.height(), i.width())
        || (tg.channels() != 1 && tg.channels() != i.channels())
    {
        return Err(dim_err!(
            "compute_b: transmission shape {:?} incompatible with image {:?}",
            tg.shape(),
            i.shape()
        ));
    }
    if a.channels() != i.channels() {
        return Err(dim_err!(
            "compute_b: background light has {} channels, image has {}",
            a.channels(),
            i.channels()
        ));
    }
    let tmin = t.min_value();
    if tmin < T_MIN {
        return Err(Error::Domain(format!(
            "compute_b: transmission {tmin} below floor {T_MIN}"
        )));
    }
    let mut b = i.zeros_like();
    for ch in 0..i.channels() {
        let tp = tg.plane(if tg.channels() == 1 { 0 } else { ch });
        let av = a.values()[ch];
        for ((o, &iv), &tv) in b.plane_mut(ch).iter_mut().zip(i.plane(ch)).zip(tp) {
            let d = iv - 1.0;
            let denom = if d.abs() < B_DENOM_FLOOR {
                if d > 0.0 {
                    B_DENOM_FLOOR
                } else {
                    -B_DENOM_FLOOR
                }
            } else {
                d
            };
            *o = ((iv - av) / tv + (av - 1.0)) / denom;
        }
    }
    BMap::new(b)
}

/// `J = B I - B + 1`.
pub fn recover_clear(b: &Grid, hazy: &Grid) -> Result<Grid> {
    b.ensure_same_shape(hazy, "recover_clear")?;
    b.zip_map(hazy, |bv, iv| bv * iv - bv + 1.0)
}

/// Gradients of [`recover_clear`]: `∂J/∂B = I - 1`, `∂J/∂I = B`.
pub fn recover_clear_backward(b: &Grid, hazy: &Grid, grad_out: &Grid) -> Result<(Grid, Grid)> {
    b.ensure_same_shape(hazy, "recover_clear backward")?;
    b.ensure_same_shape(grad_out, "recover_clear backward")?;
    let g_b = hazy.zip_map(grad_out, |iv, g| g * (iv - 1.0))?;
    let g_i = b.zip_map(grad_out, |bv, g| g * bv)?;
    Ok((g_b, g_i))
}

/// Dark channel prior loss: mean absolute dark channel of the prediction,
/// with its subgradient routed to each pixel's arg-min element.
pub fn dcp_loss(j_pred: &Grid, patch: usize) -> Result<(f64, Grid)> {
    let (dark, arg) = dark_channel_argmin(j_pred, patch)?;
    let n = dark.0.len() as f64;
    let mut grad = j_pred.zeros_like();
    let mut loss = 0.0;
    for (&d, &idx) in dark.0.data().iter().zip(&arg) {
        loss += d.abs();
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.data_mut()[idx] += s / n;
    }
    Ok((loss / n, grad))
}
