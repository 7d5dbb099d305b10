//! Numeric substrate: grids, the differentiable primitives the networks are
//! built from, Adam, and a finite-difference gradient checker.
//!
//! Every primitive comes as a forward function plus an explicit backward
//! function that maps an output gradient to input (and parameter) gradients.

mod adam;
mod conv;
mod dense;
mod grid;
pub mod params;
mod resample;

pub use adam::{adam_step, adam_step_scaled, AdamState};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams};
pub use dense::{dense, dense_backward, DenseGrads, DenseParams};
pub use grid::Grid;
pub use params::{ParamSet, Trainable};
pub use resample::{bilinear_upsample, bilinear_upsample_backward};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn activation(input: &Grid, kind: Activation) -> Grid {
    match kind {
        Activation::Relu => input.map(|v| v.max(0.0)),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

/// Backward of [`activation`]. Takes the forward input; relu's derivative at
/// exactly zero is taken as 0.
pub fn activation_backward(input: &Grid, kind: Activation, grad_out: &Grid) -> Result<Grid> {
    match kind {
        Activation::Relu => input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 }),
        Activation::Sigmoid => input.zip_map(grad_out, |x, g| {
            let s = sigmoid(x);
            g * s * (1.0 - s)
        }),
    }
}

/// Per-element multipliers for inverted dropout: `0` for dropped elements,
/// `1 / (1 - rate)` for survivors. Identical `(len, rate, seed)` yield
/// identical masks.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Inverted dropout. Inference mode (and rate 0) is the identity.
pub fn dropout(input: &Grid, rate: f64, seed: u64, training: bool) -> Result<Grid> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.len(), rate, seed)?;
    input.with_data(input.data().iter().zip(&mask).map(|(v, m)| v * m).collect())
}

/// Backward of [`dropout`]; the mask is regenerated from the seed.
pub fn dropout_backward(grad_out: &Grid, rate: f64, seed: u64, training: bool) -> Result<Grid> {
    dropout(grad_out, rate, seed, training)
}

/// Largest relative disagreement between `analytic_grad` and central
/// differences of `f` around `point`.
///
/// Per coordinate the error is `|a - n| / max(|a|, |n|, 1e-8)` with
/// `n = (f(x + h) - f(x - h)) / 2h`.
pub fn finite_diff_check(
    f: impl Fn(&Grid) -> f64,
    point: &Grid,
    analytic_grad: &Grid,
    h: f64,
) -> Result<f64> {
    let all: Vec<usize> = (0..point.len()).collect();
    finite_diff_check_coords(f, point, analytic_grad, h, &all)
}

/// [`finite_diff_check`] restricted to the listed flat coordinates, for
/// parameter vectors too long to sweep exhaustively.
pub fn finite_diff_check_coords(
    f: impl Fn(&Grid) -> f64,
    point: &Grid,
    analytic_grad: &Grid,
    h: f64,
    coords: &[usize],
) -> Result<f64> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    point.ensure_same_shape(analytic_grad, "finite_diff_check")?;
    let mut x = point.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        if i >= x.len() {
            return Err(crate::error::dim_err!("coordinate {i} out of range for {} entries", x.len()));
        }
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let fp = f(&x);
        x.data_mut()[i] = orig - h;
        let fm = f(&x);
        x.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Evaluation(format!(
                "function is not finite near coordinate {i} (f(x+h)={fp}, f(x-h)={fm})"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = analytic_grad.data()[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

/// `count` distinct coordinates out of `len`, drawn with `rng` and sorted
/// (all of them when `count >= len`).
pub fn sample_coords<R: Rng + ?Sized>(rng: &mut R, len: usize, count: usize) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    let mut v = rand::seq::index::sample(rng, len, count).into_vec();
    v.sort_unstable();
    v
}

/// Grid with entries uniform in `[lo, hi)`.
pub fn random_grid<R: Rng + ?Sized>(
    rng: &mut R,
    channels: usize,
    height: usize,
    width: usize,
    lo: f64,
    hi: f64,
) -> Grid {
    Grid::from_fn(channels, height, width, |_, _, _| rng.gen_range(lo..hi))
}

/// Flat slice viewed as a `1 × 1 × n` grid, for gradient-checking parameter
/// vectors.
pub fn vector_grid(values: &[f64]) -> Grid {
    Grid::from_vec(1, 1, values.len(), values.to_vec()).expect("non-empty vector")
}
