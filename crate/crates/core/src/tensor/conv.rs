use rand::Rng;
use rand_distr::StandardNormal;

use super::Grid;
use crate::error::{dim_err, Error, Result};

/// Weights and geometry of a 2-D convolution layer.
///
/// Weights are laid out `[out][in][kh][kw]`. Convolution is cross-correlation
/// (no kernel flip) with symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub padding: usize,
    pub stride: usize,
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Grid,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    /// Zero weights and bias. `padding` is explicit; see [`ConvParams::same`]
    /// for the size-preserving variant.
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        padding: usize,
        stride: usize,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::Parameter(format!(
                "conv dimensions must be positive, got out={out_channels} in={in_channels} \
                 kernel={kernel_h}x{kernel_w}"
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv stride must be positive".into()));
        }
        Ok(ConvParams {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights: vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
            bias: vec![0.0; out_channels],
            padding,
            stride,
        })
    }

    /// Square odd kernel with `(k - 1) / 2` zero padding, so stride 1 keeps
    /// the spatial size.
    pub fn same(out_channels: usize, in_channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Parameter(format!(
                "'same' padding needs an odd kernel, got {kernel}"
            )));
        }
        Self::zeros(out_channels, in_channels, kernel, kernel, kernel / 2, stride)
    }

    /// He-normal weights (std `sqrt(2 / fan_in)` times `gain`), zero bias.
    pub fn randomize<R: Rng + ?Sized>(mut self, rng: &mut R, gain: f64) -> Self {
        let fan_in = (self.in_channels * self.kernel_h * self.kernel_w) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        for w in &mut self.weights {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
        self
    }

    pub fn with_bias(mut self, bias: f64) -> Self {
        self.bias.iter_mut().for_each(|b| *b = bias);
        self
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(dim_err!(
                "conv: padded input {ph}x{pw} (height x width) smaller than kernel {}x{}",
                self.kernel_h,
                self.kernel_w
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    fn check_input(&self, input: &Grid) -> Result<(usize, usize)> {
        if input.channels() != self.in_channels {
            return Err(dim_err!(
                "conv: input has {} channels, layer expects {}",
                input.channels(),
                self.in_channels
            ));
        }
        if self.weights.len() != self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
            || self.bias.len() != self.out_channels
        {
            return Err(dim_err!(
                "conv: weight/bias length ({}, {}) inconsistent with layer geometry",
                self.weights.len(),
                self.bias.len()
            ));
        }
        self.output_size(input.height(), input.width())
    }
}

/// Range of output columns `ox` for which `ox * stride + k - pad` lands in
/// `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    // smallest ox with ox*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest ox with ox*stride + k - pad <= len - 1
    let limit = len + pad - 1;
    if k > limit {
        return (0, 0);
    }
    let hi = ((limit - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv2d(input: &Grid, params: &ConvParams) -> Result<Grid> {
    let (oh, ow) = params.check_input(input)?;
    let (h, w) = (input.height(), input.width());
    let (p, s) = (params.padding, params.stride);
    let mut out = Grid::zeros(params.out_channels, oh, ow);

    for o in 0..params.out_channels {
        let out_plane = out.plane_mut(o);
        out_plane.iter_mut().for_each(|v| *v = params.bias[o]);
        for i in 0..params.in_channels {
            let in_plane = input.plane(i);
            for ky in 0..params.kernel_h {
                let (oy0, oy1) = valid_range(h, oh, ky, p, s);
                for kx in 0..params.kernel_w {
                    let wv = params.weights[params.widx(o, i, ky, kx)];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(w, ow, kx, p, s);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        if s == 1 {
                            let ix0 = ox0 + kx - p;
                            let n = ox1 - ox0;
                            for (ov, iv) in out_row[ox0..ox1].iter_mut().zip(&in_row[ix0..ix0 + n]) {
                                *ov += wv * iv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                out_row[ox] += wv * in_row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss w.r.t. input, weights and bias, given the loss
/// gradient w.r.t. the convolution output.
pub fn conv2d_backward(input: &Grid, params: &ConvParams, grad_out: &Grid) -> Result<ConvGrads> {
    let (oh, ow) = params.check_input(input)?;
    if grad_out.shape() != (params.out_channels, oh, ow) {
        return Err(dim_err!(
            "conv backward: output gradient {:?} does not match output shape {:?}",
            grad_out.shape(),
            (params.out_channels, oh, ow)
        ));
    }
    let (h, w) = (input.height(), input.width());
    let (p, s) = (params.padding, params.stride);
    let mut g_in = input.zeros_like();
    let mut g_w = vec![0.0; params.weights.len()];
    let g_b: Vec<f64> = (0..params.out_channels).map(|o| grad_out.plane(o).iter().sum()).collect();

    for o in 0..params.out_channels {
        let go_plane = grad_out.plane(o);
        for i in 0..params.in_channels {
            let in_plane = input.plane(i);
            let gi_plane = g_in.plane_mut(i);
            for ky in 0..params.kernel_h {
                let (oy0, oy1) = valid_range(h, oh, ky, p, s);
                for kx in 0..params.kernel_w {
                    let widx = params.widx(o, i, ky, kx);
                    let wv = params.weights[widx];
                    let (ox0, ox1) = valid_range(w, ow, kx, p, s);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let go_row = &go_plane[oy * ow..(oy + 1) * ow];
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        let gi_row = &mut gi_plane[iy * w..(iy + 1) * w];
                        if s == 1 {
                            let ix0 = ox0 + kx - p;
                            let n = ox1 - ox0;
                            for ((g, x), gi) in go_row[ox0..ox1]
                                .iter()
                                .zip(&in_row[ix0..ix0 + n])
                                .zip(&mut gi_row[ix0..ix0 + n])
                            {
                                acc += g * x;
                                *gi += wv * g;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * s + kx - p;
                                acc += go_row[ox] * in_row[ix];
                                gi_row[ix] += wv * go_row[ox];
                            }
                        }
                    }
                    g_w[widx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: g_in,
        weights: g_w,
        bias: g_b,
    })
}
