use super::Grid;
use crate::error::{Error, Result};

/// Source coordinate and the two neighbours for one output index of an
/// align-corners resize.
#[inline]
fn taps(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len == 1 || in_len == 1 {
        return (0, 0, 0.0);
    }
    let src = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

// Written as a + (b - a) t so equal endpoints reproduce exactly.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Align-corners bilinear resize: output corners coincide with input corners.
pub fn bilinear_upsample(input: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter(format!(
            "bilinear_upsample: output size {out_h}x{out_w} must be at least 1x1"
        )));
    }
    let (c, h, w) = input.shape();
    let ytaps: Vec<_> = (0..out_h).map(|o| taps(o, out_h, h)).collect();
    let xtaps: Vec<_> = (0..out_w).map(|o| taps(o, out_w, w)).collect();
    let mut out = Grid::zeros(c, out_h, out_w);
    for ch in 0..c {
        let src = input.plane(ch);
        let dst = out.plane_mut(ch);
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
                let bot = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
                dst[oy * out_w + ox] = lerp(top, bot, fy);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_upsample`]: scatters each output gradient onto the
/// four source pixels with the forward interpolation weights.
pub fn bilinear_upsample_backward(in_shape: (usize, usize, usize), grad_out: &Grid) -> Result<Grid> {
    let (c, h, w) = in_shape;
    let (gc, out_h, out_w) = grad_out.shape();
    if gc != c {
        return Err(crate::error::dim_err!(
            "bilinear_upsample backward: gradient has {gc} channels, input had {c}"
        ));
    }
    let ytaps: Vec<_> = (0..out_h).map(|o| taps(o, out_h, h)).collect();
    let xtaps: Vec<_> = (0..out_w).map(|o| taps(o, out_w, w)).collect();
    let mut g_in = Grid::zeros(c, h, w);
    for ch in 0..c {
        let go = grad_out.plane(ch);
        let gi = g_in.plane_mut(ch);
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let g = go[oy * out_w + ox];
                gi[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gi[y0 * w + x1] += g * (1.0 - fy) * fx;
                gi[y1 * w + x0] += g * fy * (1.0 - fx);
                gi[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    Ok(g_in)
}
