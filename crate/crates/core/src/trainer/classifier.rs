//! Viewpoint-invariance experiment: a small shape classifier with an
//! optional spatial transformer between its first convolution and its head.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::datasets::{gen_shapes_dataset, ShapeSample};
use super::losses::softmax_cross_entropy;
use super::metrics::{EpochRecord, Metrics};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::rng::derived;
use crate::stn::{stn_backward, stn_forward_cached, LocParams, StnCache, StnMode};
use crate::tensor::params::{accumulate, join_name, scale, zeros_like};
use crate::tensor::{
    activation, activation_backward, conv2d, conv2d_backward, dense, dense_backward, dropout, dropout_backward,
    Activation, ConvParams, DenseParams, Grid, ParamSet, Trainable,
};

pub const NUM_CLASSES: usize = 3;
/// Channels of the stem and head convolutions.
pub const CLASSIFIER_CHANNELS: usize = 8;

/// Learning-rate multiplier of the localization network; a full-rate
/// localizer destabilizes the warp early in training.
pub const LOC_LR_SCALE: f64 = 0.1;

const MODEL_STREAM: u64 = 3 << 32;
const SHUFFLE_STREAM: u64 = 4 << 32;
const DROPOUT_STREAM: u64 = 5 << 32;
/// Held-out data uses its own seed so no test image appears in training.
const TEST_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Which transformer, if any, sits before the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierMode {
    None,
    Affine,
    Perspective,
}

impl ClassifierMode {
    pub const ALL: [ClassifierMode; 3] = [ClassifierMode::None, ClassifierMode::Affine, ClassifierMode::Perspective];

    fn stn_mode(self) -> Option<StnMode> {
        match self {
            ClassifierMode::None => None,
            ClassifierMode::Affine => Some(StnMode::Affine),
            ClassifierMode::Perspective => Some(StnMode::Perspective),
        }
    }
}

impl fmt::Display for ClassifierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierMode::None => "none",
            ClassifierMode::Affine => "affine",
            ClassifierMode::Perspective => "perspective",
        })
    }
}

impl FromStr for ClassifierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ClassifierMode::None),
            "affine" => Ok(ClassifierMode::Affine),
            "perspective" => Ok(ClassifierMode::Perspective),
            other => Err(Error::Parameter(format!(
                "unknown mode '{other}', expected none, affine or perspective"
            ))),
        }
    }
}

/// Stem convolution, optional transformer, then a stride-2 convolution and a
/// fully connected layer over the flattened result.
#[derive(Debug, Clone, PartialEq)]
pub struct StnClassifier {
    pub stem: ConvParams,
    pub loc: Option<LocParams>,
    pub head: ConvParams,
    pub fc: DenseParams,
}

impl ParamSet for StnClassifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.stem.visit(&join_name(prefix, "stem"), f);
        if let Some(loc) = &self.loc {
            loc.visit(&join_name(prefix, "loc"), f);
        }
        self.head.visit(&join_name(prefix, "head"), f);
        self.fc.visit(&join_name(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.stem.visit_mut(f);
        if let Some(loc) = &mut self.loc {
            loc.visit_mut(f);
        }
        self.head.visit_mut(f);
        self.fc.visit_mut(f);
    }
}

pub fn init_classifier(mode: ClassifierMode, config: &TrainConfig) -> Result<StnClassifier> {
    let mut rng = derived(config.seed, MODEL_STREAM);
    let size = config.image_size;
    let stem = ConvParams::same(CLASSIFIER_CHANNELS, 1, 3, 1)?.randomize(&mut rng, 1.0);
    let loc = mode
        .stn_mode()
        .map(|m| LocParams::new(CLASSIFIER_CHANNELS, size, size, m, &mut rng))
        .transpose()?;
    let head = ConvParams::same(CLASSIFIER_CHANNELS, CLASSIFIER_CHANNELS, 3, 2)?.randomize(&mut rng, 1.0);
    let (h, w) = head.output_size(size, size)?;
    let fc = DenseParams::zeros(NUM_CLASSES, CLASSIFIER_CHANNELS * h * w).randomize(&mut rng, 1.0);
    Ok(StnClassifier { stem, loc, head, fc })
}

pub struct ClassifierPass {
    pub logits: Vec<f64>,
    input: Grid,
    stem_pre: Grid,
    stem_act: Grid,
    stn: Option<StnCache>,
    warped: Grid,
    head_pre: Grid,
    dropped: Grid,
    dropout_seed: u64,
    training: bool,
}

/// Forward pass. `dropout_seed` fixes the dropout mask when `training`.
pub fn classifier_forward(
    image: &Grid,
    model: &StnClassifier,
    dropout_rate: f64,
    dropout_seed: u64,
    training: bool,
) -> Result<ClassifierPass> {
    let stem_pre = conv2d(image, &model.stem)?;
    let stem_act = activation(&stem_pre, Activation::Relu);
    let (warped, stn) = match &model.loc {
        Some(loc) => {
            let (w, c) = stn_forward_cached(&stem_act, loc)?;
            (w, Some(c))
        }
        None => (stem_act.clone(), None),
    };
    let head_pre = conv2d(&warped, &model.head)?;
    let head_act = activation(&head_pre, Activation::Relu);
    let dropped = dropout(&head_act, dropout_rate, dropout_seed, training)?;
    let logits = dense(dropped.data(), &model.fc)?;
    Ok(ClassifierPass {
        logits,
        input: image.clone(),
        stem_pre,
        stem_act,
        stn,
        warped,
        head_pre,
        dropped,
        dropout_seed,
        training,
    })
}

pub fn classifier_backward(
    model: &StnClassifier,
    pass: &ClassifierPass,
    dropout_rate: f64,
    grad_logits: &[f64],
) -> Result<StnClassifier> {
    let fg = dense_backward(pass.dropped.data(), &model.fc, grad_logits)?;
    let g_dropped = pass.dropped.with_data(fg.input)?;
    let g_act = dropout_backward(&g_dropped, dropout_rate, pass.dropout_seed, pass.training)?;
    let g_head_pre = activation_backward(&pass.head_pre, Activation::Relu, &g_act)?;
    let hg = conv2d_backward(&pass.warped, &model.head, &g_head_pre)?;
    let (g_loc, g_stem_act) = match (&model.loc, &pass.stn) {
        (Some(loc), Some(cache)) => {
            let (gl, gx) = stn_backward(loc, cache, &hg.input)?;
            (Some(gl), gx)
        }
        _ => (None, hg.input),
    };
    let g_stem_pre = activation_backward(&pass.stem_pre, Activation::Relu, &g_stem_act)?;
    let sg = conv2d_backward(&pass.input, &model.stem, &g_stem_pre)?;
    debug_assert_eq!(pass.stem_act.shape(), g_stem_act.shape());
    let mut grads = zeros_like(model);
    grads.stem.weights = sg.weights;
    grads.stem.bias = sg.bias;
    grads.loc = g_loc;
    grads.head.weights = hg.weights;
    grads.head.bias = hg.bias;
    grads.fc.weights = fg.weights;
    grads.fc.bias = fg.bias;
    Ok(grads)
}

fn predict(image: &Grid, model: &StnClassifier) -> Result<usize> {
    let pass = classifier_forward(image, model, 0.0, 0, false)?;
    Ok(pass
        .logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i))
}

/// Fraction of `data` classified correctly.
pub fn accuracy(data: &[ShapeSample], model: &StnClassifier) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for s in data {
        if predict(&s.image, model)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Train on distorted (or undistorted, with `distort = false`) shapes and
/// report held-out accuracy every epoch.
pub fn train_stn_classifier_on(
    mode: ClassifierMode,
    config: &TrainConfig,
    distort: bool,
) -> Result<(Trainable<StnClassifier>, Metrics)> {
    config.validate()?;
    let train = gen_shapes_dataset(config.n_images, config.image_size, distort, config.seed)?;
    let test = gen_shapes_dataset(
        config.n_images,
        config.image_size,
        distort,
        config.seed.wrapping_add(TEST_SEED_OFFSET),
    )?;
    let mut model =
        Trainable::new(init_classifier(mode, config)?).with_lr_scale(|name| if name.starts_with("loc.") { LOC_LR_SCALE } else { 1.0 });
    let mut metrics = Metrics::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut draw = 0u64;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut derived(config.seed, SHUFFLE_STREAM + epoch as u64));
        let mut total = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = zeros_like(&model.params);
            for &i in batch {
                draw += 1;
                let seed = config.seed.rotate_left(17).wrapping_add(DROPOUT_STREAM + draw);
                let pass = classifier_forward(&train[i].image, &model.params, config.dropout_rate, seed, true)?;
                let (loss, g_logits) = softmax_cross_entropy(&pass.logits, train[i].label)?;
                if !loss.is_finite() {
                    return Err(Error::Evaluation(format!(
                        "non-finite loss at epoch {epoch}, step {}, image {i}",
                        step + 1
                    )));
                }
                total += loss;
                let g = classifier_backward(&model.params, &pass, config.dropout_rate, &g_logits)?;
                accumulate(&mut grads, &g)?;
            }
            scale(&mut grads, 1.0 / batch.len() as f64);
            model.step(&grads, config.learning_rate)?;
        }
        metrics.records.push(EpochRecord {
            epoch,
            loss_rec: None,
            loss_dcp: None,
            loss_total: total / train.len().max(1) as f64,
            psnr_pred: None,
            psnr_hazy: None,
            accuracy: Some(accuracy(&test, &model.params)?),
        });
    }
    Ok((model, metrics))
}

/// The benchmark: train and test on perspective-distorted shapes.
pub fn train_stn_classifier(mode: ClassifierMode, config: &TrainConfig) -> Result<(Trainable<StnClassifier>, Metrics)> {
    train_stn_classifier_on(mode, config, true)
}
