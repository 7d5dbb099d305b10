use rand::Rng;

use crate::error::{dim_err, Result};
use crate::tensor::{activation, activation_backward, conv2d, conv2d_backward, Activation, ConvParams, Grid, ParamSet};

/// Output channels of the three extractor stages.
pub const EXTRACTOR_CHANNELS: [usize; 3] = [8, 16, 32];
/// Stride of each stage; the deepest features are at 1/4 resolution.
pub const EXTRACTOR_STRIDES: [usize; 3] = [1, 2, 2];

/// Feature extractor shared by the branches: three 3×3 convolutions with
/// relu.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedExtractor {
    pub layers: Vec<ConvParams>,
}

impl SharedExtractor {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(3);
        let mut c = in_channels;
        for (&oc, &s) in EXTRACTOR_CHANNELS.iter().zip(&EXTRACTOR_STRIDES) {
            layers.push(ConvParams::same(oc, c, 3, s)?.randomize(rng, 1.0));
            c = oc;
        }
        Ok(SharedExtractor { layers })
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Total spatial reduction factor.
    pub fn reduction(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }
}

impl ParamSet for SharedExtractor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.layers.visit(prefix, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct ExtractorCache {
    inputs: Vec<Grid>,
    pre: Vec<Grid>,
}

pub fn extract_forward(image: &Grid, params: &SharedExtractor) -> Result<(Grid, ExtractorCache)> {
    if params.layers.is_empty() {
        return Err(dim_err!("feature extractor has no layers"));
    }
    let mut x = image.clone();
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let p = conv2d(&x, layer)?;
        inputs.push(x);
        x = activation(&p, Activation::Relu);
        pre.push(p);
    }
    Ok((x, ExtractorCache { inputs, pre }))
}

pub fn extract_backward(params: &SharedExtractor, cache: &ExtractorCache, grad_out: &Grid) -> Result<(SharedExtractor, Grid)> {
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut g = grad_out.clone();
    for k in (0..params.layers.len()).rev() {
        let gp = activation_backward(&cache.pre[k], Activation::Relu, &g)?;
        let cg = conv2d_backward(&cache.inputs[k], &params.layers[k], &gp)?;
        let mut lg = params.layers[k].clone();
        lg.weights = cg.weights;
        lg.bias = cg.bias;
        grads.push(lg);
        g = cg.input;
    }
    grads.reverse();
    Ok((SharedExtractor { layers: grads }, g))
}
