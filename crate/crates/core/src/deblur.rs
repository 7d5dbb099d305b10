//! Clean image reconstruction branch.
//!
//! Shared features are reduced by a 1×1 convolution and bilinearly enlarged
//! to image size (upsampling submodule), passed through four parallel
//! same-padded convolutions with kernels 1, 3, 5, 7 and 4 channels each whose
//! outputs are concatenated and fused by a 3×3 convolution into `B(x)`
//! (multiscale mapping submodule), and finally turned into the clear image
//! with `J = B I - B + 1` (image generation submodule).

use rand::Rng;

use crate::dcp::{recover_clear, recover_clear_backward, BMap};
use crate::error::{dim_err, Result};
use crate::tensor::params::join_name;
use crate::tensor::{
    bilinear_upsample, bilinear_upsample_backward, conv2d, conv2d_backward, ConvParams, Grid, ParamSet,
};

pub const SCALE_KERNELS: [usize; 4] = [1, 3, 5, 7];
pub const SCALE_CHANNELS: usize = 4;
pub const FUSED_CHANNELS: usize = SCALE_CHANNELS * SCALE_KERNELS.len();

#[derive(Debug, Clone, PartialEq)]
pub struct DeblurParams {
    pub reduce: ConvParams,
    pub scales: Vec<ConvParams>,
    pub fuse: ConvParams,
}

impl DeblurParams {
    /// Small random weights and a fuse bias of 1, so `B ≈ 1` and the branch
    /// starts close to the identity on the hazy image.
    pub fn new<R: Rng + ?Sized>(
        feature_channels: usize,
        reduced_channels: usize,
        image_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let reduce = ConvParams::same(reduced_channels, feature_channels, 1, 1)?.randomize(rng, 1.0);
        let scales = SCALE_KERNELS
            .iter()
            .map(|&k| Ok(ConvParams::same(SCALE_CHANNELS, reduced_channels, k, 1)?.randomize(rng, 1.0)))
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvParams::same(image_channels, FUSED_CHANNELS, 3, 1)?
            .randomize(rng, 0.05)
            .with_bias(1.0);
        let p = DeblurParams { reduce, scales, fuse };
        p.validate()?;
        Ok(p)
    }

    /// Enforce the fixed layer configuration.
    pub fn validate(&self) -> Result<()> {
        if self.reduce.kernel_h != 1 || self.reduce.kernel_w != 1 {
            return Err(dim_err!("reduce layer must be 1x1, got {}x{}", self.reduce.kernel_h, self.reduce.kernel_w));
        }
        if self.scales.len() != SCALE_KERNELS.len() {
            return Err(dim_err!("multiscale mapping needs {} parallel convolutions, got {}", SCALE_KERNELS.len(), self.scales.len()));
        }
        for (layer, &k) in self.scales.iter().zip(&SCALE_KERNELS) {
            if layer.kernel_h != k || layer.kernel_w != k || layer.padding != k / 2 || layer.stride != 1 {
                return Err(dim_err!(
                    "scale conv expected same-padded {k}x{k}, got {}x{} padding {} stride {}",
                    layer.kernel_h,
                    layer.kernel_w,
                    layer.padding,
                    layer.stride
                ));
            }
            if layer.out_channels != SCALE_CHANNELS {
                return Err(dim_err!("scale conv must have {SCALE_CHANNELS} output channels, got {}", layer.out_channels));
            }
            if layer.in_channels != self.reduce.out_channels {
                return Err(dim_err!(
                    "scale conv takes {} channels but reduce emits {}",
                    layer.in_channels,
                    self.reduce.out_channels
                ));
            }
        }
        if self.fuse.in_channels != FUSED_CHANNELS || self.fuse.kernel_h != 3 || self.fuse.kernel_w != 3 || self.fuse.padding != 1 {
            return Err(dim_err!(
                "fuse conv must be a same-padded 3x3 over {FUSED_CHANNELS} channels, got {}x{} over {}",
                self.fuse.kernel_h,
                self.fuse.kernel_w,
                self.fuse.in_channels
            ));
        }
        Ok(())
    }
}

impl ParamSet for DeblurParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.reduce.visit(&join_name(prefix, "reduce"), f);
        self.scales.visit(&join_name(prefix, "scales"), f);
        self.fuse.visit(&join_name(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.reduce.visit_mut(f);
        self.scales.visit_mut(f);
        self.fuse.visit_mut(f);
    }
}

/// Output of the shared feature extractor that feeds this branch.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedFeatures(Grid);

impl SharedFeatures {
    /// Wrap features for an image of size `image_h × image_w`; the feature
    /// grid's spatial dimensions must divide the image's.
    pub fn new(grid: Grid, image_h: usize, image_w: usize) -> Result<Self> {
        if image_h % grid.height() != 0 || image_w % grid.width() != 0 {
            return Err(dim_err!(
                "feature map {}x{} does not divide image size {image_h}x{image_w}",
                grid.height(),
                grid.width()
            ));
        }
        Ok(SharedFeatures(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }
}

/// 1×1 reduction followed by align-corners upsampling to `out_h × out_w`.
pub fn upsample_features(feat: &Grid, reduce: &ConvParams, out_h: usize, out_w: usize) -> Result<Grid> {
    let reduced = conv2d(feat, reduce)?;
    bilinear_upsample(&reduced, out_h, out_w)
}

/// Returns `(grad_feat, grad_reduce)`.
pub fn upsample_features_backward(
    feat: &Grid,
    reduce: &ConvParams,
    grad_out: &Grid,
) -> Result<(Grid, ConvParams)> {
    let reduced_shape = (reduce.out_channels, feat.height(), feat.width());
    let g_reduced = bilinear_upsample_backward(reduced_shape, grad_out)?;
    let cg = conv2d_backward(feat, reduce, &g_reduced)?;
    let mut g = reduce.clone();
    g.weights = cg.weights;
    g.bias = cg.bias;
    Ok((cg.input, g))
}

/// Four parallel convolutions, concatenated in kernel order 1, 3, 5, 7, then
/// the 3×3 fuse convolution. No output activation: `B` may exceed `[0, 1]`.
pub fn multiscale_b(upsampled: &Grid, scales: &[ConvParams], fuse: &ConvParams) -> Result<BMap> {
    let (b, _) = multiscale_b_forward(upsampled, scales, fuse)?;
    BMap::new(b)
}

fn multiscale_b_forward(upsampled: &Grid, scales: &[ConvParams], fuse: &ConvParams) -> Result<(Grid, Grid)> {
    let parts = scales
        .iter()
        .map(|s| conv2d(upsampled, s))
        .collect::<Result<Vec<_>>>()?;
    let cat = Grid::concat_channels(&parts)?;
    let b = conv2d(&cat, fuse)?;
    Ok((b, cat))
}

/// Returns `(grad_upsampled, grad_scales, grad_fuse)`.
pub fn multiscale_b_backward(
    upsampled: &Grid,
    concat: &Grid,
    scales: &[ConvParams],
    fuse: &ConvParams,
    grad_b: &Grid,
) -> Result<(Grid, Vec<ConvParams>, ConvParams)> {
    let fg = conv2d_backward(concat, fuse, grad_b)?;
    let mut g_fuse = fuse.clone();
    g_fuse.weights = fg.weights;
    g_fuse.bias = fg.bias;
    let counts: Vec<usize> = scales.iter().map(|s| s.out_channels).collect();
    let g_parts = fg.input.split_channels(&counts)?;
    let mut g_up = upsampled.zeros_like();
    let mut g_scales = Vec::with_capacity(scales.len());
    for (s, gp) in scales.iter().zip(&g_parts) {
        let cg = conv2d_backward(upsampled, s, gp)?;
        g_up.add_scaled(&cg.input, 1.0)?;
        let mut gs = s.clone();
        gs.weights = cg.weights;
        gs.bias = cg.bias;
        g_scales.push(gs);
    }
    Ok((g_up, g_scales, g_fuse))
}

/// Image generation: `J = B I - B + 1`.
pub fn generate_clear(b: &BMap, hazy: &Grid) -> Result<Grid> {
    recover_clear(b.grid(), hazy)
}

#[derive(Debug, Clone)]
pub struct DeblurCache {
    feat: Grid,
    hazy: Grid,
    upsampled: Grid,
    concat: Grid,
    b: Grid,
}

impl DeblurCache {
    pub fn b(&self) -> &Grid {
        &self.b
    }
}

/// Full branch; returns the predicted clear image and the backward cache.
pub fn deblur_forward(hazy: &Grid, feat: &SharedFeatures, params: &DeblurParams) -> Result<(Grid, DeblurCache)> {
    params.validate()?;
    if params.fuse.out_channels != hazy.channels() {
        return Err(dim_err!(
            "fuse conv emits {} channels but the image has {}",
            params.fuse.out_channels,
            hazy.channels()
        ));
    }
    let upsampled = upsample_features(feat.grid(), &params.reduce, hazy.height(), hazy.width())?;
    let (b, concat) = multiscale_b_forward(&upsampled, &params.scales, &params.fuse)?;
    let j = recover_clear(&b, hazy)?;
    Ok((
        j,
        DeblurCache {
            feat: feat.grid().clone(),
            hazy: hazy.clone(),
            upsampled,
            concat,
            b,
        },
    ))
}

/// Gradients w.r.t. every branch parameter and w.r.t. the shared features.
pub fn deblur_backward(params: &DeblurParams, cache: &DeblurCache, grad_j: &Grid) -> Result<(DeblurParams, Grid)> {
    let (g_b, _) = recover_clear_backward(&cache.b, &cache.hazy, grad_j)?;
    let (g_up, g_scales, g_fuse) =
        multiscale_b_backward(&cache.upsampled, &cache.concat, &params.scales, &params.fuse, &g_b)?;
    let (g_feat, g_reduce) = upsample_features_backward(&cache.feat, &params.reduce, &g_up)?;
    Ok((
        DeblurParams {
            reduce: g_reduce,
            scales: g_scales,
            fuse: g_fuse,
        },
        g_feat,
    ))
}
