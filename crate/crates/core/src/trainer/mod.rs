//! Training: losses, the shared feature extractor, seeded synthetic data,
//! the self-supervised deblurring loop, the transformer classification
//! experiment, and per-epoch metrics.

mod classifier;
mod config;
mod datasets;
mod extractor;
mod losses;
mod metrics;
mod selfsup;

pub use classifier::{
    accuracy, classifier_backward, classifier_forward, init_classifier, train_stn_classifier,
    train_stn_classifier_on, ClassifierMode, ClassifierPass, StnClassifier, CLASSIFIER_CHANNELS, NUM_CLASSES,
};
pub use config::TrainConfig;
pub use datasets::{
    gen_shapes_dataset, gen_underwater_dataset, random_distortion, Shape, ShapeSample, UnderwaterSample, MAX_DEPTH,
};
pub use extractor::{extract_backward, extract_forward, ExtractorCache, SharedExtractor, EXTRACTOR_CHANNELS};
pub use losses::{
    median, psnr, reconstruction_loss, softmax_cross_entropy, total_loss, ReconstructionLoss, TotalLoss, PSNR_CAP,
};
pub use metrics::{EpochRecord, Metrics, CSV_HEADER};
pub use selfsup::{
    deblur_loss, deblur_model_backward, deblur_model_forward, estimate_lights, init_deblur_model,
    train_selfsup_deblur, train_selfsup_on, DeblurModel, DeblurPass, LIGHT_FRACTION, LIGHT_PATCH, REDUCED_CHANNELS,
};
