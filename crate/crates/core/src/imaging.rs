//! Haze formation `I(x) = J(x) t(x) + A (1 - t(x))` with `t(x) = exp(-β d(x))`,
//! its exact algebraic inversion, and the differentiable re-synthesis used
//! by the self-supervised loss.
//!
//! A transmission map carries either one plane (shared by every colour
//! channel) or one plane per channel (wavelength-dependent attenuation).

use crate::error::{dim_err, Error, Result};
use crate::tensor::Grid;

/// Floor for transmission wherever the model is inverted.
pub const T_MIN: f64 = 0.1;

fn check_unit_range(grid: &Grid, what: &str) -> Result<()> {
    match grid.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::Domain(format!(
            "{what}: value {} at flat index {i} outside [0, 1]",
            grid.data()[i]
        ))),
        None => Ok(()),
    }
}

fn check_image_channels(grid: &Grid, what: &str) -> Result<()> {
    if grid.channels() != 1 && grid.channels() != 3 {
        return Err(dim_err!("{what}: expected 1 or 3 channels, got {}", grid.channels()));
    }
    Ok(())
}

/// Haze-free radiance `J`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClearImage(Grid);

impl ClearImage {
    pub fn new(grid: Grid) -> Result<Self> {
        check_image_channels(&grid, "clear image")?;
        check_unit_range(&grid, "clear image")?;
        Ok(ClearImage(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

/// Observed underwater image `I`.
#[derive(Debug, Clone, PartialEq)]
pub struct HazyImage(Grid);

impl HazyImage {
    pub fn new(grid: Grid) -> Result<Self> {
        check_image_channels(&grid, "hazy image")?;
        check_unit_range(&grid, "hazy image")?;
        Ok(HazyImage(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

/// Scene depth `d(x) ≥ 0`, single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(Grid);

impl DepthMap {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(dim_err!("depth map: expected 1 channel, got {}", grid.channels()));
        }
        if let Some(i) = grid.data().iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!(
                "depth map: negative or non-finite depth {} at flat index {i}",
                grid.data()[i]
            )));
        }
        Ok(DepthMap(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }
}

/// Per-channel attenuation coefficients `β ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttenuationCoeff(Vec<f64>);

impl AttenuationCoeff {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Parameter("attenuation needs at least one coefficient".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b >= 0.0) || !b.is_finite()) {
            return Err(Error::Domain(format!("attenuation coefficient {b} is negative or non-finite")));
        }
        Ok(AttenuationCoeff(beta))
    }

    /// Same β for every one of `channels` channels.
    pub fn scalar(beta: f64, channels: usize) -> Result<Self> {
        Self::new(vec![beta; channels])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Transmission `t(x)` in `(0, 1]`; one plane, or one plane per image channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap(Grid);

impl TransmissionMap {
    pub fn new(grid: Grid) -> Result<Self> {
        if let Some(i) = grid.data().iter().position(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::Domain(format!(
                "transmission {} at flat index {i} outside (0, 1]",
                grid.data()[i]
            )));
        }
        Ok(TransmissionMap(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    /// Raise every value to at least `floor`.
    pub fn clamped(&self, floor: f64) -> TransmissionMap {
        TransmissionMap(self.0.map(|v| v.max(floor)))
    }

    pub fn min_value(&self) -> f64 {
        self.0.min_value()
    }

    /// Mean transmission of each plane.
    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.0.channels())
            .map(|c| self.0.plane(c).iter().sum::<f64>() / self.0.plane_len() as f64)
            .collect()
    }
}

/// Ambient water colour `A`, one value per channel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundLight(Vec<f64>);

impl BackgroundLight {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter("background light needs at least one channel".into()));
        }
        if let Some(a) = values.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Domain(format!("background light component {a} outside [0, 1]")));
        }
        Ok(BackgroundLight(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.len()
    }
}

/// `t = exp(-β d)` for a single coefficient.
pub fn transmission_from_depth(depth: &DepthMap, beta: f64) -> Result<TransmissionMap> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Domain(format!("attenuation coefficient {beta} is negative or non-finite")));
    }
    // exp(-β d) underflows to 0 for huge β d; keep the (0, 1] contract.
    Ok(TransmissionMap(
        depth.grid().map(|d| (-beta * d).exp().max(f64::MIN_POSITIVE)),
    ))
}

/// One transmission plane per channel of `beta`.
pub fn transmission_per_channel(depth: &DepthMap, beta: &AttenuationCoeff) -> Result<TransmissionMap> {
    let planes = beta
        .values()
        .iter()
        .map(|&b| transmission_from_depth(depth, b).map(TransmissionMap::into_grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(TransmissionMap(Grid::concat_channels(&planes)?))
}

fn check_compat(image: &Grid, t: &Grid, a: &[f64], what: &str) -> Result<()> {
    if (t.height(), t.width()) != (image.height(), image.width()) {
        return Err(dim_err!(
            "{what}: transmission is {}x{} (height x width), image is {}x{}",
            t.height(),
            t.width(),
            image.height(),
            image.width()
        ));
    }
    if t.channels() != 1 && t.channels() != image.channels() {
        return Err(dim_err!(
            "{what}: transmission has {} channels, expected 1 or {}",
            t.channels(),
            image.channels()
        ));
    }
    if a.len() != image.channels() {
        return Err(dim_err!(
            "{what}: background light has {} channels, image has {}",
            a.len(),
            image.channels()
        ));
    }
    Ok(())
}

#[inline]
fn t_plane(t: &Grid, c: usize) -> &[f64] {
    t.plane(if t.channels() == 1 { 0 } else { c })
}

fn compose(j: &Grid, t: &Grid, a: &[f64]) -> Grid {
    let mut out = j.zeros_like();
    for c in 0..j.channels() {
        let tp = t_plane(t, c);
        for ((o, &jv), &tv) in out.plane_mut(c).iter_mut().zip(j.plane(c)).zip(tp) {
            *o = jv * tv + a[c] * (1.0 - tv);
        }
    }
    out
}

/// Forward haze model.
pub fn synthesize_hazy(clear: &ClearImage, t: &TransmissionMap, a: &BackgroundLight) -> Result<HazyImage> {
    check_compat(clear.grid(), t.grid(), a.values(), "synthesize_hazy")?;
    // A convex combination of values in [0, 1] can still overshoot by an ulp.
    let out = compose(clear.grid(), t.grid(), a.values()).map(|v| v.clamp(0.0, 1.0));
    Ok(HazyImage(out))
}

/// Whether [`invert_direct`] clamps its result for viewing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InversionMode {
    /// Exact algebraic inverse; values may leave `[0, 1]`.
    #[default]
    Oracle,
    /// Clamp to `[0, 1]` for writing to an image file.
    Display,
}

/// `J = (I - A (1 - t)) / t`. Fails if any transmission is below [`T_MIN`].
pub fn invert_direct(
    hazy: &HazyImage,
    t: &TransmissionMap,
    a: &BackgroundLight,
    mode: InversionMode,
) -> Result<Grid> {
    let i = hazy.grid();
    check_compat(i, t.grid(), a.values(), "invert_direct")?;
    let tmin = t.min_value();
    if tmin < T_MIN {
        return Err(Error::Domain(format!(
            "invert_direct: transmission {tmin} below floor {T_MIN}; inversion is ill-conditioned"
        )));
    }
    let mut out = i.zeros_like();
    for c in 0..i.channels() {
        let tp = t_plane(t.grid(), c);
        for ((o, &iv), &tv) in out.plane_mut(c).iter_mut().zip(i.plane(c)).zip(tp) {
            *o = (iv - a.values()[c] * (1.0 - tv)) / tv;
        }
    }
    if mode == InversionMode::Display {
        out = out.map(|v| v.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Re-synthesize the hazy image from predicted `J` and `t`.
///
/// Same arithmetic as [`synthesize_hazy`] but on raw network outputs: the
/// predicted clear image is not range-checked and nothing is clamped, so the
/// map stays differentiable everywhere.
pub fn reconstruct_hazy(j_pred: &Grid, t_pred: &Grid, a: &BackgroundLight) -> Result<Grid> {
    check_compat(j_pred, t_pred, a.values(), "reconstruct_hazy")?;
    Ok(compose(j_pred, t_pred, a.values()))
}

/// Gradients of [`reconstruct_hazy`] w.r.t. `j_pred` and `t_pred`.
///
/// `∂I/∂J = t`, `∂I/∂t = J - A`; a single-plane `t` accumulates over channels.
pub fn reconstruct_hazy_backward(
    j_pred: &Grid,
    t_pred: &Grid,
    a: &BackgroundLight,
    grad_out: &Grid,
) -> Result<(Grid, Grid)> {
    check_compat(j_pred, t_pred, a.values(), "reconstruct_hazy backward")?;
    j_pred.ensure_same_shape(grad_out, "reconstruct_hazy backward")?;
    let mut g_j = j_pred.zeros_like();
    let mut g_t = t_pred.zeros_like();
    let shared = t_pred.channels() == 1;
    for c in 0..j_pred.channels() {
        let tp = t_plane(t_pred, c).to_vec();
        let ac = a.values()[c];
        for (k, ((gj, &g), &jv)) in g_j
            .plane_mut(c)
            .iter_mut()
            .zip(grad_out.plane(c))
            .zip(j_pred.plane(c))
            .enumerate()
        {
            *gj = g * tp[k];
            let tc = if shared { 0 } else { c };
            g_t.plane_mut(tc)[k] += g * (jv - ac);
        }
    }
    Ok((g_j, g_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::{finite_diff_check, random_grid};
    use rand::Rng;

    fn constant_clear(v: f64) -> ClearImage {
        ClearImage::new(Grid::filled(3, 4, 4, v)).unwrap()
    }

    #[test]
    fn zero_depth_or_zero_beta_is_fully_transmissive() {
        let d = DepthMap::new(random_grid(&mut seeded(1), 1, 4, 4, 0.0, 3.0)).unwrap();
        assert!(transmission_from_depth(&d, 0.0).unwrap().grid().data().iter().all(|&t| t == 1.0));
        let zero = DepthMap::new(Grid::zeros(1, 4, 4)).unwrap();
        assert!(transmission_from_depth(&zero, 0.7).unwrap().grid().data().iter().all(|&t| t == 1.0));
    }

    #[test]
    fn transmission_hand_value() {
        let d = DepthMap::new(Grid::filled(1, 2, 2, 2.0)).unwrap();
        let t = transmission_from_depth(&d, 0.5).unwrap();
        assert!((t.grid().get(0, 0, 0) - 0.367879441171).abs() < 1e-11);
    }

    #[test]
    fn negative_depth_is_domain_error() {
        let g = Grid::from_vec(1, 1, 2, vec![1.0, -0.1]).unwrap();
        assert!(matches!(DepthMap::new(g), Err(Error::Domain(_))));
        let d = DepthMap::new(Grid::zeros(1, 1, 1)).unwrap();
        assert!(matches!(transmission_from_depth(&d, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn extreme_attenuation_stays_positive() {
        let d = DepthMap::new(Grid::filled(1, 1, 1, 1e6)).unwrap();
        let t = transmission_from_depth(&d, 10.0).unwrap();
        assert!(t.grid().data()[0] > 0.0);
        assert!(TransmissionMap::new(t.into_grid()).is_ok());
    }

    #[test]
    fn synthesis_endpoints() {
        let j = ClearImage::new(random_grid(&mut seeded(2), 3, 4, 4, 0.0, 1.0)).unwrap();
        let a = BackgroundLight::new(vec![0.2, 0.7, 0.9]).unwrap();
        let ones = TransmissionMap::new(Grid::filled(1, 4, 4, 1.0)).unwrap();
        assert_eq!(synthesize_hazy(&j, &ones, &a).unwrap().grid(), j.grid());

        let tiny = TransmissionMap(Grid::zeros(1, 4, 4));
        let i = synthesize_hazy(&j, &tiny, &a).unwrap();
        for c in 0..3 {
            assert!(i.grid().plane(c).iter().all(|&v| v == a.values()[c]));
        }
    }

    #[test]
    fn synthesis_hand_value() {
        let j = ClearImage::new(Grid::filled(1, 1, 1, 0.8)).unwrap();
        let t = TransmissionMap::new(Grid::filled(1, 1, 1, 0.5)).unwrap();
        let a = BackgroundLight::new(vec![0.2]).unwrap();
        let i = synthesize_hazy(&j, &t, &a).unwrap();
        assert!((i.grid().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inversion_hand_value_and_identity() {
        let i = HazyImage::new(Grid::filled(1, 1, 1, 0.5)).unwrap();
        let t = TransmissionMap::new(Grid::filled(1, 1, 1, 0.5)).unwrap();
        let a = BackgroundLight::new(vec![0.8]).unwrap();
        let j = invert_direct(&i, &t, &a, InversionMode::Oracle).unwrap();
        assert!((j.data()[0] - 0.2).abs() < 1e-15);

        let i = HazyImage::new(random_grid(&mut seeded(3), 3, 3, 3, 0.0, 1.0)).unwrap();
        let ones = TransmissionMap::new(Grid::filled(1, 3, 3, 1.0)).unwrap();
        let a = BackgroundLight::new(vec![0.3, 0.5, 0.6]).unwrap();
        assert_eq!(&invert_direct(&i, &ones, &a, InversionMode::Oracle).unwrap(), i.grid());
    }

    #[test]
    fn inversion_rejects_low_transmission() {
        let i = HazyImage::new(Grid::filled(1, 1, 2, 0.5)).unwrap();
        let t = TransmissionMap::new(Grid::from_vec(1, 1, 2, vec![0.5, 0.05]).unwrap()).unwrap();
        let a = BackgroundLight::new(vec![0.8]).unwrap();
        assert!(matches!(invert_direct(&i, &t, &a, InversionMode::Oracle), Err(Error::Domain(_))));
    }

    #[test]
    fn display_mode_clamps_oracle_does_not() {
        // I=0.1, t=0.2, A=0.9  =>  J = (0.1 - 0.72) / 0.2 = -3.1
        let i = HazyImage::new(Grid::filled(1, 1, 1, 0.1)).unwrap();
        let t = TransmissionMap::new(Grid::filled(1, 1, 1, 0.2)).unwrap();
        let a = BackgroundLight::new(vec![0.9]).unwrap();
        let oracle = invert_direct(&i, &t, &a, InversionMode::Oracle).unwrap();
        assert!((oracle.data()[0] + 3.1).abs() < 1e-12);
        let display = invert_direct(&i, &t, &a, InversionMode::Display).unwrap();
        assert_eq!(display.data()[0], 0.0);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let j = constant_clear(0.5);
        let t = TransmissionMap::new(Grid::filled(1, 3, 4, 0.5)).unwrap();
        let a = BackgroundLight::new(vec![0.5; 3]).unwrap();
        assert!(matches!(synthesize_hazy(&j, &t, &a), Err(Error::Dimension(_))));
        let a2 = BackgroundLight::new(vec![0.5; 2]).unwrap();
        let t = TransmissionMap::new(Grid::filled(1, 4, 4, 0.5)).unwrap();
        assert!(matches!(synthesize_hazy(&j, &t, &a2), Err(Error::Dimension(_))));
    }

    #[test]
    fn per_channel_transmission_round_trip() {
        let mut rng = seeded(4);
        let d = DepthMap::new(random_grid(&mut rng, 1, 6, 6, 0.0, 2.0)).unwrap();
        let beta = AttenuationCoeff::new(vec![0.9, 0.4, 0.2]).unwrap();
        let t = transmission_per_channel(&d, &beta).unwrap().clamped(T_MIN);
        assert_eq!(t.grid().channels(), 3);
        let j = ClearImage::new(random_grid(&mut rng, 3, 6, 6, 0.0, 1.0)).unwrap();
        let a = BackgroundLight::new(vec![0.6, 0.8, 0.85]).unwrap();
        let i = synthesize_hazy(&j, &t, &a).unwrap();
        let back = invert_direct(&i, &t, &a, InversionMode::Oracle).unwrap();
        assert!(back.max_abs_diff(j.grid()).unwrap() < 1e-12);
    }

    #[test]
    fn reconstruction_gradients() {
        let mut rng = seeded(5);
        let a = BackgroundLight::new(vec![0.7, 0.8, 0.6]).unwrap();
        let j = random_grid(&mut rng, 3, 5, 5, -0.2, 1.2);
        let r = random_grid(&mut rng, 3, 5, 5, -1.0, 1.0);
        for tc in [1, 3] {
            let t = random_grid(&mut rng, tc, 5, 5, 0.1, 1.0);
            let (gj, gt) = reconstruct_hazy_backward(&j, &t, &a, &r).unwrap();
            let loss = |jj: &Grid, tt: &Grid| reconstruct_hazy(jj, tt, &a).unwrap().dot(&r).unwrap();
            let ej = finite_diff_check(|x| loss(x, &t), &j, &gj, 1e-5).unwrap();
            let et = finite_diff_check(|x| loss(&j, x), &t, &gt, 1e-5).unwrap();
            assert!(ej < 1e-6 && et < 1e-6, "t channels {tc}: {ej} {et}");
        }
    }

    #[test]
    fn reconstruction_matches_synthesis() {
        let mut rng = seeded(6);
        let j = ClearImage::new(random_grid(&mut rng, 3, 4, 4, 0.0, 1.0)).unwrap();
        let t = TransmissionMap::new(random_grid(&mut rng, 1, 4, 4, 0.1, 1.0)).unwrap();
        let a = BackgroundLight::new(vec![rng.gen(), rng.gen(), rng.gen()]).unwrap();
        let via_synth = synthesize_hazy(&j, &t, &a).unwrap();
        let via_rec = reconstruct_hazy(j.grid(), t.grid(), &a).unwrap();
        assert!(via_rec.max_abs_diff(via_synth.grid()).unwrap() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn unit() -> impl Strategy<Value = f64> {
            0.0f64..=1.0
        }

        proptest! {
            #[test]
            fn convex_combination_bound(j in unit(), t in unit(), a in unit()) {
                let jj = ClearImage::new(Grid::filled(1, 1, 1, j)).unwrap();
                let tt = TransmissionMap(Grid::filled(1, 1, 1, t));
                let aa = BackgroundLight::new(vec![a]).unwrap();
                let i = synthesize_hazy(&jj, &tt, &aa).unwrap().grid().data()[0];
                prop_assert!(i >= j.min(a) - 1e-15 && i <= j.max(a) + 1e-15);
            }

            #[test]
            fn round_trip(j in unit(), t in 0.1f64..=1.0, a in unit()) {
                let jj = ClearImage::new(Grid::filled(1, 1, 1, j)).unwrap();
                let tt = TransmissionMap::new(Grid::filled(1, 1, 1, t)).unwrap();
                let aa = BackgroundLight::new(vec![a]).unwrap();
                let i = synthesize_hazy(&jj, &tt, &aa).unwrap();
                let back = invert_direct(&i, &tt, &aa, InversionMode::Oracle).unwrap();
                prop_assert!((back.data()[0] - j).abs() < 1e-12);
            }

            #[test]
            fn more_transmission_moves_toward_clear(j in unit(), t1 in unit(), dt in 0.0f64..=1.0, a in unit()) {
                let t2 = (t1 + dt).min(1.0);
                let jj = ClearImage::new(Grid::filled(1, 1, 1, j)).unwrap();
                let aa = BackgroundLight::new(vec![a]).unwrap();
                let i1 = synthesize_hazy(&jj, &TransmissionMap(Grid::filled(1, 1, 1, t1)), &aa).unwrap().grid().data()[0];
                let i2 = synthesize_hazy(&jj, &TransmissionMap(Grid::filled(1, 1, 1, t2)), &aa).unwrap().grid().data()[0];
                prop_assert!((i2 - j).abs() <= (i1 - j).abs() + 1e-15);
                prop_assert!((i2 - a).abs() >= (i1 - a).abs() - 1e-15);
            }

            #[test]
            fn transmission_antitone(d1 in 0.0f64..5.0, dd in 0.0f64..5.0, b1 in 0.0f64..2.0, db in 0.0f64..2.0) {
                let t = |d: f64, b: f64| {
                    let dm = DepthMap::new(Grid::filled(1, 1, 1, d)).unwrap();
                    transmission_from_depth(&dm, b).unwrap().grid().data()[0]
                };
                prop_assert!(t(d1 + dd, b1) <= t(d1, b1));
                prop_assert!(t(d1, b1 + db) <= t(d1, b1));
            }
        }
    }
}
