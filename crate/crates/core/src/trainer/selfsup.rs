//! Self-supervised training of the clear-image branch: predicted `J` and
//! `t` re-synthesize the hazy input, and the mismatch (plus a dark channel
//! penalty) is the only training signal. Ground truth is read solely to
//! report PSNR.

use rand::seq::SliceRandom;

use super::datasets::{gen_underwater_dataset, UnderwaterSample};
use super::extractor::{extract_backward, extract_forward, ExtractorCache, SharedExtractor};
use super::losses::{median, psnr, total_loss, TotalLoss};
use super::metrics::{EpochRecord, Metrics};
use super::TrainConfig;
use crate::dcp::estimate_background_light;
use crate::deblur::{deblur_backward, deblur_forward, DeblurCache, DeblurParams, SharedFeatures};
use crate::error::{Error, Result};
use crate::imaging::BackgroundLight;
use crate::rng::derived;
use crate::tensor::params::{accumulate, join_name, scale, zeros_like};
use crate::tensor::{Grid, ParamSet, Trainable};
use crate::transmission::{predict_transmission_backward, predict_transmission_forward, TransCache, TransNetParams};

/// Channels the deblur branch reduces the shared features to.
pub const REDUCED_CHANNELS: usize = 8;
/// Fraction of brightest dark-channel pixels searched for the background light.
pub const LIGHT_FRACTION: f64 = 0.001;
/// Dark-channel patch for background-light estimation. Wider than the loss
/// patch so bright scene texture is not mistaken for the light.
pub const LIGHT_PATCH: usize = 15;
/// Initial head bias of the transmission branch: `t ≈ 0.76` everywhere.
pub const TRANS_HEAD_BIAS: f64 = 1.0;

const MODEL_STREAM: u64 = 1 << 32;
const SHUFFLE_STREAM: u64 = 2 << 32;

/// Everything the self-supervised experiment learns.
#[derive(Debug, Clone, PartialEq)]
pub struct DeblurModel {
    pub shared: SharedExtractor,
    pub trans: TransNetParams,
    pub deblur: DeblurParams,
}

impl ParamSet for DeblurModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.shared.visit(&join_name(prefix, "shared"), f);
        self.trans.visit(&join_name(prefix, "trans"), f);
        self.deblur.visit(&join_name(prefix, "deblur"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.shared.visit_mut(f);
        self.trans.visit_mut(f);
        self.deblur.visit_mut(f);
    }
}

/// Deterministic initialization from the config seed.
pub fn init_deblur_model(config: &TrainConfig) -> Result<DeblurModel> {
    let mut rng = derived(config.seed, MODEL_STREAM);
    let shared = SharedExtractor::new(3, &mut rng)?;
    let trans = TransNetParams::new(3, TRANS_HEAD_BIAS, &mut rng)?;
    let deblur = DeblurParams::new(shared.out_channels(), REDUCED_CHANNELS, 3, &mut rng)?;
    Ok(DeblurModel { shared, trans, deblur })
}

pub struct DeblurPass {
    pub j_pred: Grid,
    pub t_pred: Grid,
    shared: ExtractorCache,
    deblur: DeblurCache,
    trans: TransCache,
}

/// Both branches on one hazy image.
pub fn deblur_model_forward(hazy: &Grid, model: &DeblurModel) -> Result<DeblurPass> {
    let (feat, shared) = extract_forward(hazy, &model.shared)?;
    let feat = SharedFeatures::new(feat, hazy.height(), hazy.width())?;
    let (j_pred, deblur) = deblur_forward(hazy, &feat, &model.deblur)?;
    let (t_pred, trans) = predict_transmission_forward(hazy, &model.trans)?;
    Ok(DeblurPass {
        j_pred,
        t_pred,
        shared,
        deblur,
        trans,
    })
}

/// Parameter gradients given loss gradients w.r.t. `J` and `t`.
pub fn deblur_model_backward(model: &DeblurModel, pass: &DeblurPass, grad_j: &Grid, grad_t: &Grid) -> Result<DeblurModel> {
    let (g_deblur, g_feat) = deblur_backward(&model.deblur, &pass.deblur, grad_j)?;
    let (g_shared, _) = extract_backward(&model.shared, &pass.shared, &g_feat)?;
    let (g_trans, _) = predict_transmission_backward(&model.trans, &pass.trans, grad_t)?;
    Ok(DeblurModel {
        shared: g_shared,
        trans: g_trans,
        deblur: g_deblur,
    })
}

/// Forward pass and objective for one image.
pub fn deblur_loss(hazy: &Grid, light: &BackgroundLight, model: &DeblurModel, config: &TrainConfig) -> Result<(DeblurPass, TotalLoss)> {
    let pass = deblur_model_forward(hazy, model)?;
    let loss = total_loss(hazy, &pass.j_pred, &pass.t_pred, light, config.lambda_dcp, config.patch)?;
    Ok((pass, loss))
}

/// Background light of every hazy image, estimated (not learned) from its
/// dark channel.
pub fn estimate_lights(data: &[UnderwaterSample]) -> Result<Vec<BackgroundLight>> {
    data.iter()
        .map(|s| estimate_background_light(s.hazy.grid(), LIGHT_PATCH, LIGHT_FRACTION))
        .collect()
}

/// Generate the dataset described by `config` and train on it.
pub fn train_selfsup_deblur(config: &TrainConfig) -> Result<(Trainable<DeblurModel>, Metrics)> {
    config.validate()?;
    let data = gen_underwater_dataset(config.n_images, config.image_size, config.seed)?;
    train_selfsup_on(config, &data)
}

/// Train on a given dataset. Only the hazy images enter the loss; the clear
/// images are used for the PSNR columns of the metrics.
pub fn train_selfsup_on(config: &TrainConfig, data: &[UnderwaterSample]) -> Result<(Trainable<DeblurModel>, Metrics)> {
    config.validate()?;
    let lights = estimate_lights(data)?;
    let mut model = Trainable::new(init_deblur_model(config)?);
    let psnr_hazy = median(
        &data
            .iter()
            .map(|s| psnr(s.hazy.grid(), s.clear.grid()))
            .collect::<Result<Vec<_>>>()?,
    );
    let mut metrics = Metrics::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut derived(config.seed, SHUFFLE_STREAM + epoch as u64));
        let (mut rec, mut dcp, mut total) = (0.0, 0.0, 0.0);
        let mut psnrs = Vec::with_capacity(data.len());
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = zeros_like(&model.params);
            for &i in batch {
                let hazy = data[i].hazy.grid();
                let (pass, loss) = deblur_loss(hazy, &lights[i], &model.params, config)?;
                if !loss.total.is_finite() {
                    return Err(Error::Evaluation(format!(
                        "non-finite loss at epoch {epoch}, step {}, image {i}",
                        step + 1
                    )));
                }
                rec += loss.rec_norm;
                dcp += loss.dcp;
                total += loss.total;
                psnrs.push(psnr(&pass.j_pred.map(|v| v.clamp(0.0, 1.0)), data[i].clear.grid())?);
                let g = deblur_model_backward(&model.params, &pass, &loss.grad_j, &loss.grad_t)?;
                accumulate(&mut grads, &g)?;
            }
            scale(&mut grads, 1.0 / batch.len() as f64);
            model.step(&grads, config.learning_rate)?;
        }
        let n = data.len().max(1) as f64;
        metrics.records.push(EpochRecord {
            epoch,
            loss_rec: Some(rec / n),
            loss_dcp: Some(dcp / n),
            loss_total: total / n,
            psnr_pred: Some(median(&psnrs)),
            psnr_hazy: Some(psnr_hazy),
            accuracy: None,
        });
    }
    Ok((model, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            image_size: 16,
            n_images: 4,
            batch_size: 2,
            epochs: 2,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig { epochs: 0, ..tiny() };
        let (m, metrics) = train_selfsup_deblur(&cfg).unwrap();
        assert!(metrics.records.is_empty());
        assert_eq!(m.params, init_deblur_model(&cfg).unwrap());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            batch_size: 4,
            ..tiny()
        };
        let data = gen_underwater_dataset(cfg.n_images, cfg.image_size, cfg.seed).unwrap();
        let (m, metrics) = train_selfsup_on(&cfg, &data).unwrap();
        let init = init_deblur_model(&cfg).unwrap();
        assert_eq!(m.params, init);
        let lights = estimate_lights(&data).unwrap();
        let mean: f64 = data
            .iter()
            .zip(&lights)
            .map(|(s, a)| deblur_loss(s.hazy.grid(), a, &init, &cfg).unwrap().1.total)
            .sum::<f64>()
            / data.len() as f64;
        assert!((metrics.records[0].loss_total - mean).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_blind_to_ground_truth() {
        let cfg = tiny();
        let data = gen_underwater_dataset(cfg.n_images, cfg.image_size, cfg.seed).unwrap();
        let (a, ma) = train_selfsup_on(&cfg, &data).unwrap();
        let (b, mb) = train_selfsup_on(&cfg, &data).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ma.to_csv(), mb.to_csv());

        let mut altered = data.clone();
        for s in &mut altered {
            s.clear = crate::imaging::ClearImage::new(s.clear.grid().map(|v| 1.0 - v)).unwrap();
        }
        let (c, mc) = train_selfsup_on(&cfg, &altered).unwrap();
        assert_eq!(a.params, c.params);
        assert_ne!(ma.records[0].psnr_pred, mc.records[0].psnr_pred);
        assert_eq!(ma.records[1].loss_total, mc.records[1].loss_total);
    }

    #[test]
    fn weight_names_cover_every_branch() {
        let m = init_deblur_model(&tiny()).unwrap();
        let mut names = Vec::new();
        m.visit("", &mut |n, _, _| names.push(n));
        assert!(names.iter().any(|n| n.starts_with("shared.0.")));
        assert!(names.iter().any(|n| n.starts_with("trans.head.")));
        assert!(names.iter().any(|n| n.starts_with("deblur.fuse.")));
    }
}
