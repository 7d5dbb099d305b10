//! Transmission prediction branch: a stride-2 convolutional encoder, four
//! resize-convolution decoder stages, and a 1×1 head squashed into
//! `[T_MIN, 1]`.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::imaging::{TransmissionMap, T_MIN};
use crate::tensor::params::join_name;
use crate::tensor::{
    activation, activation_backward, bilinear_upsample, bilinear_upsample_backward, conv2d,
    conv2d_backward, sigmoid, Activation, ConvParams, Grid, ParamSet,
};

/// Encoder output channels, one stride-2 level each.
pub const ENCODER_CHANNELS: [usize; 4] = [8, 16, 32, 32];
/// Decoder output channels, one ×2 upsampling stage each.
pub const DECODER_CHANNELS: [usize; 4] = [32, 16, 8, 4];
/// Total downsampling of the encoder; inputs must be divisible by it.
pub const DOWNSAMPLE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TransNetParams {
    pub encoder: Vec<ConvParams>,
    pub decoder: Vec<ConvParams>,
    pub head: ConvParams,
}

impl TransNetParams {
    /// He-initialized encoder/decoder, zero head weights and head bias
    /// `head_bias`, so the initial map is the constant
    /// `T_MIN + (1 - T_MIN) sigmoid(head_bias)`.
    pub fn new<R: Rng + ?Sized>(in_channels: usize, head_bias: f64, rng: &mut R) -> Result<Self> {
        let mut encoder = Vec::new();
        let mut c = in_channels;
        for &oc in &ENCODER_CHANNELS {
            encoder.push(ConvParams::same(oc, c, 3, 2)?.randomize(rng, 1.0));
            c = oc;
        }
        let mut decoder = Vec::new();
        for &oc in &DECODER_CHANNELS {
            decoder.push(ConvParams::same(oc, c, 3, 1)?.randomize(rng, 1.0));
            c = oc;
        }
        let head = ConvParams::same(1, c, 1, 1)?.with_bias(head_bias);
        let p = TransNetParams { encoder, decoder, head };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.len() != 4 || self.decoder.len() != 4 {
            return Err(dim_err!(
                "transmission net needs 4 encoder and 4 decoder stages, got {} and {}",
                self.encoder.len(),
                self.decoder.len()
            ));
        }
        if self.encoder.iter().any(|l| l.stride != 2) || self.decoder.iter().any(|l| l.stride != 1) {
            return Err(dim_err!(
                "encoder layers must downsample by 2 and decoder layers keep size, so output resolution equals input"
            ));
        }
        if self.head.out_channels != 1 {
            return Err(dim_err!("transmission head must emit 1 channel, got {}", self.head.out_channels));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.encoder[0].in_channels
    }
}

impl ParamSet for TransNetParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.encoder.visit(&join_name(prefix, "encoder"), f);
        self.decoder.visit(&join_name(prefix, "decoder"), f);
        self.head.visit(&join_name(prefix, "head"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TransCache {
    input: Grid,
    /// Input to each encoder conv (after the previous relu).
    enc_in: Vec<Grid>,
    /// Pre-activation of each encoder conv.
    enc_pre: Vec<Grid>,
    /// Input to each decoder upsample.
    dec_in: Vec<Grid>,
    /// Upsampled input to each decoder conv.
    dec_up: Vec<Grid>,
    dec_pre: Vec<Grid>,
    head_in: Grid,
    head_pre: Grid,
}

fn check_resolution(image: &Grid) -> Result<()> {
    if image.height() % DOWNSAMPLE != 0 || image.width() % DOWNSAMPLE != 0 {
        return Err(dim_err!(
            "transmission branch needs height and width divisible by {DOWNSAMPLE} (four halvings), got {}x{}",
            image.height(),
            image.width()
        ));
    }
    Ok(())
}

/// Forward pass returning the raw transmission grid and the cache.
pub fn predict_transmission_forward(image: &Grid, params: &TransNetParams) -> Result<(Grid, TransCache)> {
    check_resolution(image)?;
    params.validate()?;
    let mut x = image.clone();
    let mut enc_in = Vec::with_capacity(4);
    let mut enc_pre = Vec::with_capacity(4);
    for layer in &params.encoder {
        let pre = conv2d(&x, layer)?;
        enc_in.push(x);
        x = activation(&pre, Activation::Relu);
        enc_pre.push(pre);
    }
    let mut dec_in = Vec::with_capacity(4);
    let mut dec_up = Vec::with_capacity(4);
    let mut dec_pre = Vec::with_capacity(4);
    for layer in &params.decoder {
        let up = bilinear_upsample(&x, x.height() * 2, x.width() * 2)?;
        let pre = conv2d(&up, layer)?;
        dec_in.push(x);
        x = activation(&pre, Activation::Relu);
        dec_up.push(up);
        dec_pre.push(pre);
    }
    let head_pre = conv2d(&x, &params.head)?;
    let t = head_pre.map(|v| T_MIN + (1.0 - T_MIN) * sigmoid(v));
    Ok((
        t,
        TransCache {
            input: image.clone(),
            enc_in,
            enc_pre,
            dec_in,
            dec_up,
            dec_pre,
            head_in: x,
            head_pre,
        },
    ))
}

/// Predicted transmission map at input resolution, within `[T_MIN, 1]`.
pub fn predict_transmission(image: &Grid, params: &TransNetParams) -> Result<TransmissionMap> {
    let (t, _) = predict_transmission_forward(image, params)?;
    TransmissionMap::new(t)
}

/// Parameter gradients (same layout as the parameters) and the gradient
/// w.r.t. the input image.
pub fn predict_transmission_backward(
    params: &TransNetParams,
    cache: &TransCache,
    grad_t: &Grid,
) -> Result<(TransNetParams, Grid)> {
    cache.head_pre.ensure_same_shape(grad_t, "transmission backward")?;
    let mut grads = crate::tensor::params::zeros_like(params);

    let g_pre = cache.head_pre.zip_map(grad_t, |v, g| {
        let s = sigmoid(v);
        g * (1.0 - T_MIN) * s * (1.0 - s)
    })?;
    let hg = conv2d_backward(&cache.head_in, &params.head, &g_pre)?;
    grads.head.weights = hg.weights;
    grads.head.bias = hg.bias;
    let mut g = hg.input;

    for k in (0..4).rev() {
        let g_pre = activation_backward(&cache.dec_pre[k], Activation::Relu, &g)?;
        let cg = conv2d_backward(&cache.dec_up[k], &params.decoder[k], &g_pre)?;
        grads.decoder[k].weights = cg.weights;
        grads.decoder[k].bias = cg.bias;
        g = bilinear_upsample_backward(cache.dec_in[k].shape(), &cg.input)?;
    }
    for k in (0..4).rev() {
        let g_pre = activation_backward(&cache.enc_pre[k], Activation::Relu, &g)?;
        let cg = conv2d_backward(&cache.enc_in[k], &params.encoder[k], &g_pre)?;
        grads.encoder[k].weights = cg.weights;
        grads.encoder[k].bias = cg.bias;
        g = cg.input;
    }
    debug_assert_eq!(g.shape(), cache.input.shape());
    Ok((grads, g))
}
