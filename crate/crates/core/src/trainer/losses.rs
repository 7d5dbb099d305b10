use crate::dcp::dcp_loss;
use crate::error::{Error, Result};
use crate::imaging::{reconstruct_hazy, reconstruct_hazy_backward, BackgroundLight};
use crate::tensor::Grid;

/// PSNR values are capped here when the error vanishes.
pub const PSNR_CAP: f64 = 100.0;

/// Reconstruction mismatch between a re-synthesized and an observed image.
#[derive(Debug, Clone)]
pub struct ReconstructionLoss {
    /// Frobenius norm of the difference over all channels: the reported metric.
    pub norm: f64,
    /// Mean squared difference: the optimized surrogate.
    pub mse: f64,
    /// Gradient of `mse` w.r.t. the reconstruction.
    pub grad: Grid,
}

/// The norm is not differentiable at zero difference, so training follows
/// the mean squared error while the norm is kept for reporting.
pub fn reconstruction_loss(rec: &Grid, original: &Grid) -> Result<ReconstructionLoss> {
    rec.ensure_same_shape(original, "reconstruction loss")?;
    let diff = rec.zip_map(original, |a, b| a - b)?;
    let sq: f64 = diff.data().iter().map(|d| d * d).sum();
    let n = diff.len() as f64;
    Ok(ReconstructionLoss {
        norm: sq.sqrt(),
        mse: sq / n,
        grad: diff.map(|d| 2.0 * d / n),
    })
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub rec_norm: f64,
    pub rec_mse: f64,
    pub dcp: f64,
    /// `rec_mse + lambda_dcp * dcp`, the optimized objective.
    pub total: f64,
    pub grad_j: Grid,
    pub grad_t: Grid,
}

/// Self-supervised objective: re-synthesize the hazy image from predicted
/// `J` and `t` and penalize the mismatch, plus a weighted dark channel
/// penalty on `J`.
pub fn total_loss(
    original: &Grid,
    j_pred: &Grid,
    t_pred: &Grid,
    a: &BackgroundLight,
    lambda_dcp: f64,
    patch: usize,
) -> Result<TotalLoss> {
    if !(lambda_dcp >= 0.0) {
        return Err(Error::Parameter(format!("lambda_dcp must be >= 0, got {lambda_dcp}")));
    }
    let rec = reconstruct_hazy(j_pred, t_pred, a)?;
    let rl = reconstruction_loss(&rec, original)?;
    let (mut grad_j, grad_t) = reconstruct_hazy_backward(j_pred, t_pred, a, &rl.grad)?;
    let (dcp, total) = if lambda_dcp > 0.0 {
        let (d, gd) = dcp_loss(j_pred, patch)?;
        grad_j.add_scaled(&gd, lambda_dcp)?;
        (d, rl.mse + lambda_dcp * d)
    } else {
        (dcp_loss(j_pred, patch)?.0, rl.mse)
    };
    Ok(TotalLoss {
        rec_norm: rl.norm,
        rec_mse: rl.mse,
        dcp,
        total,
        grad_j,
        grad_t,
    })
}

/// Peak signal-to-noise ratio for unit peak, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Grid, truth: &Grid) -> Result<f64> {
    pred.ensure_same_shape(truth, "psnr")?;
    let mse = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean softmax cross-entropy of `logits` against class `label`, and its
/// gradient.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(crate::error::dim_err!("label {label} out of range for {} classes", logits.len()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + m - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
