use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Result};

/// Fully connected layer `y = W x + b`, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub out_features: usize,
    pub in_features: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(out_features: usize, in_features: usize) -> Self {
        DenseParams {
            out_features,
            in_features,
            weights: vec![0.0; out_features * in_features],
            bias: vec![0.0; out_features],
        }
    }

    /// Normal weights with std `gain / sqrt(in_features)`.
    pub fn randomize<R: Rng + ?Sized>(mut self, rng: &mut R, gain: f64) -> Self {
        let std = gain / (self.in_features as f64).sqrt();
        for w in &mut self.weights {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
        self
    }

    fn check(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.in_features {
            return Err(dim_err!(
                "dense: input has {} features, layer expects {}",
                input.len(),
                self.in_features
            ));
        }
        if self.weights.len() != self.in_features * self.out_features || self.bias.len() != self.out_features {
            return Err(dim_err!("dense: weight/bias length inconsistent with {}x{}", self.out_features, self.in_features));
        }
        Ok(())
    }
}

pub fn dense(input: &[f64], params: &DenseParams) -> Result<Vec<f64>> {
    params.check(input)?;
    Ok(params
        .weights
        .chunks_exact(params.in_features)
        .zip(&params.bias)
        .map(|(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
        .collect())
}

pub fn dense_backward(input: &[f64], params: &DenseParams, grad_out: &[f64]) -> Result<DenseGrads> {
    params.check(input)?;
    if grad_out.len() != params.out_features {
        return Err(dim_err!(
            "dense backward: gradient has {} entries, layer has {} outputs",
            grad_out.len(),
            params.out_features
        ));
    }
    let mut g_in = vec![0.0; params.in_features];
    let mut g_w = vec![0.0; params.weights.len()];
    for (o, &g) in grad_out.iter().enumerate() {
        let row = &params.weights[o * params.in_features..(o + 1) * params.in_features];
        let g_row = &mut g_w[o * params.in_features..(o + 1) * params.in_features];
        for ((gi, gw), (&w, &x)) in g_in.iter_mut().zip(g_row.iter_mut()).zip(row.iter().zip(input)) {
            *gi += g * w;
            *gw = g * x;
        }
    }
    Ok(DenseGrads {
        input: g_in,
        weights: g_w,
        bias: grad_out.to_vec(),
    })
}
