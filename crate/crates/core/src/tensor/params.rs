use super::{adam_step_scaled, AdamState, ConvParams, DenseParams};
use crate::error::{dim_err, Result};

/// A collection of named, shaped parameter arrays.
///
/// Gradients are stored in a value of the same type, so a network's
/// parameters and its gradients share one layout; [`flatten`] and
/// [`load_flat`] walk that layout in a fixed order.
pub trait ParamSet {
    /// Visit every array as `(name, dims, values)` in a fixed order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64]));

    /// Mutable visit in the same order as [`ParamSet::visit`].
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));
}

impl ParamSet for ConvParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        f(
            join_name(prefix, "weight"),
            vec![self.out_channels, self.in_channels, self.kernel_h, self.kernel_w],
            &self.weights,
        );
        f(join_name(prefix, "bias"), vec![self.out_channels], &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.weights);
        f(&mut self.bias);
    }
}

impl ParamSet for DenseParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        f(join_name(prefix, "weight"), vec![self.out_features, self.in_features], &self.weights);
        f(join_name(prefix, "bias"), vec![self.out_features], &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.weights);
        f(&mut self.bias);
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join_name(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for p in self {
            p.visit_mut(f);
        }
    }
}

/// `prefix.name`, or just `name` at the top level.
pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn param_count(p: &impl ParamSet) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, v| n += v.len());
    n
}

pub fn flatten(p: &impl ParamSet) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, v| out.extend_from_slice(v));
    out
}

/// Overwrite every array from a flat vector produced by [`flatten`].
pub fn load_flat(p: &mut impl ParamSet, flat: &[f64]) -> Result<()> {
    let n = param_count(p);
    if n != flat.len() {
        return Err(dim_err!("parameter vector has {} entries, model has {n}", flat.len()));
    }
    let mut offset = 0;
    p.visit_mut(&mut |v| {
        v.copy_from_slice(&flat[offset..offset + v.len()]);
        offset += v.len();
    });
    Ok(())
}

/// Same layout as `p`, all zeros.
pub fn zeros_like<P: ParamSet + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut(&mut |v| v.fill(0.0));
    z
}

/// `acc += g`, arraywise. Both must share a layout.
pub fn accumulate<P: ParamSet>(acc: &mut P, g: &P) -> Result<()> {
    let flat = flatten(g);
    if flat.len() != param_count(acc) {
        return Err(dim_err!("gradient layout does not match parameter layout"));
    }
    let mut offset = 0;
    acc.visit_mut(&mut |v| {
        for (a, b) in v.iter_mut().zip(&flat[offset..]) {
            *a += b;
        }
        offset += v.len();
    });
    Ok(())
}

pub fn scale<P: ParamSet>(p: &mut P, s: f64) {
    p.visit_mut(&mut |v| v.iter_mut().for_each(|x| *x *= s));
}

/// Parameters of one network plus the Adam moments that update them.
#[derive(Debug, Clone)]
pub struct Trainable<P> {
    pub params: P,
    pub adam: AdamState,
    /// Per-element learning-rate multipliers, when not uniform.
    lr_scale: Option<Vec<f64>>,
}

impl<P: ParamSet> Trainable<P> {
    pub fn new(params: P) -> Self {
        let n = param_count(&params);
        Trainable {
            params,
            adam: AdamState::new(n),
            lr_scale: None,
        }
    }

    /// Multiply the learning rate of every array by `scale(name)`.
    pub fn with_lr_scale(mut self, scale: impl Fn(&str) -> f64) -> Self {
        let mut s = Vec::with_capacity(self.adam.m.len());
        self.params.visit("", &mut |name, _, v| s.extend(std::iter::repeat(scale(&name)).take(v.len())));
        self.lr_scale = Some(s);
        self
    }

    /// One Adam step along `grads`.
    pub fn step(&mut self, grads: &P, lr: f64) -> Result<()> {
        let mut flat = flatten(&self.params);
        match &self.lr_scale {
            Some(s) => adam_step_scaled(&mut flat, &flatten(grads), &mut self.adam, lr, s)?,
            None => super::adam_step(&mut flat, &flatten(grads), &mut self.adam, lr)?,
        }
        load_flat(&mut self.params, &flat)
    }
}
