//! Per-orientation classification with unsupervised adaptation.
//!
//! Phase 1 trains the head on labeled source features. Its argmax predictions
//! on the target become fixed pseudo-labels. Phase 2 minimizes
//! `CE_src + CE_tgt + lambda * MMD` where the MMD (Gaussian kernel, biased
//! estimator) compares the post-ReLU 256-wide head activations of paired
//! source and target mini-batches, either per shared class or globally.
//! Cross-entropies are batch means; `lambda` applies at that scale.

mod config;
mod loss;
mod model;
mod train;

pub use config::{AdaptConfig, Bandwidth, MmdMode};
pub use loss::{
    alignment_loss_with_grad, classwise_mmd, cross_entropy, mean_cross_entropy,
    median_heuristic_sigma, median_sigma, mmd_squared, mmd_squared_with_grad, one_hot, total_loss,
    FeatureBatch, LossComponents, PROB_EPS,
};
pub use model::{
    build_classifier, ClassifierHead, ClassifierModel, EncodedSet, Phase, ALIGNMENT_DIM,
    CLASSIFIER_ARCHITECTURE, HEAD_WIDTHS,
};
pub use train::{
    evaluate_target, generate_pseudo_labels, head_seed, parse_log_rows, predicted_classes,
    pseudo_label_accuracy, run_orientation_pipeline, train_phase1, train_phase2, EpochRecord,
    OrientationData, PipelineOutcome, PseudoLabel, PseudoLabelSet, TrainingLog, LOG_HEADER,
    PSEUDO_HEADER,
};
