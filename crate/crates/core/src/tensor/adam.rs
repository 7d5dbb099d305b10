use crate::error::{dim_err, Result};

/// Moment estimates and hyperparameters for one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments with the usual defaults (0.9, 0.999, 1e-8).
    pub fn new(len: usize) -> Self {
        Self::with_hyper(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    adam_update(params, grads, state, |_| lr)
}

/// [`adam_step`] with the learning rate multiplied per element by
/// `lr_scale`.
pub fn adam_step_scaled(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    lr_scale: &[f64],
) -> Result<()> {
    if lr_scale.len() != params.len() {
        return Err(dim_err!(
            "adam: {} learning-rate multipliers for {} parameters",
            lr_scale.len(),
            params.len()
        ));
    }
    adam_update(params, grads, state, |i| lr * lr_scale[i])
}

fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: impl Fn(usize) -> f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(dim_err!(
            "adam: params ({}), grads ({}) and moments ({}, {}) must have equal length",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        ));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (i, (((p, &g), m), v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
        .enumerate()
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr(i) * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_step_matches_plain_step_per_element() {
        let g = [0.5, -2.0];
        let mut a = vec![1.0, 1.0];
        let mut b = vec![1.0, 1.0];
        let (mut sa, mut sb) = (AdamState::new(2), AdamState::new(2));
        adam_step(&mut a, &g, &mut sa, 0.01).unwrap();
        adam_step_scaled(&mut b, &g, &mut sb, 0.1, &[0.1, 0.0]).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-15);
        assert_eq!(b[1], 1.0);
        assert!(adam_step_scaled(&mut b, &g, &mut sb, 0.1, &[1.0]).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.3, -1.2, 4.0];
        let before = p.clone();
        let mut st = AdamState::new(3);
        for _ in 0..50 {
            adam_step(&mut p, &[0.0; 3], &mut st, 0.1).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 50);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        // m_hat = 1, v_hat = 1  =>  delta = -lr / (1 + 1e-8)
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, 0.001).unwrap();
        assert!((p[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn minimizes_square() {
        let mut x = vec![1.0];
        let mut st = AdamState::new(1);
        for _ in 0..2000 {
            let g = 2.0 * x[0];
            adam_step(&mut x, &[g], &mut st, 0.01).unwrap();
        }
        assert!(x[0].abs() < 1e-3, "{}", x[0]);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut p = vec![0.5, 0.25];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[3.0, -2.0], &mut st, 0.0).unwrap();
        assert_eq!(p, vec![0.5, 0.25]);
    }

    #[test]
    fn length_mismatch() {
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut p, &[1.0], &mut st, 0.1).is_err());
    }
}
