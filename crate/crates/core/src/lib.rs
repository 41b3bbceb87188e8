//! Uncertainty-aware tumor-cellularity estimation via label distribution
//! learning, built from scratch: codec between scalar scores and discrete
//! Gaussian label distributions, a small dense neural network with exact
//! reverse-mode gradients and Adam, a deterministic synthetic patch
//! generator with bit-exact persistence, the agreement-metric suite, and the
//! multi-branch model with its two-stage trainer.
//!
//! The crate has one overarching contract: every random decision flows from
//! an explicit seed, so datasets, training runs, predictions, and evaluation
//! reports are bit-reproducible.

pub mod data;
pub mod error;
pub mod label_dist;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;

pub use data::{
    apply_norm, compute_norm_stats, generate, load_dataset, read_labels_csv, save_dataset, split,
    write_labels_csv, Dataset, GeneratorConfig, NormStats, Patch, Sample,
};
pub use error::{Result, UltraError};
pub use label_dist::{
    decode_argmax, decode_expectation, encode, gaussian_kernel, joint_loss, kl_divergence,
    kl_divergence_directed, kl_softmax_grad, kl_softmax_grad_directed, make_grid, mse_loss,
    softmax, EncoderConfig, KlDirection, LabelDistribution, ScoreGrid, TcScore,
    DEFAULT_EPSILON_FLOOR, DEFAULT_N_LABELS, DEFAULT_SIGMA,
};
pub use metrics::{
    bootstrap_ci, cohen_kappa, evaluate, icc, mse, paired_t_test, student_t_cdf,
    student_t_two_sided_p, EvalPairs, EvalReport, IccForm, KappaConfig, KappaWeighting,
};
pub use model::{
    augment, fuse, two_stage_train, AugmentationSpec, BatchGradients, BestSnapshot,
    BranchFeatures, EnhancedFeatures, EpochRecord, LossMode, Prediction, TrainConfig, TrainStage,
    Trainer, UltraConfig, UltraModel,
};
pub use nn::{
    adam_step, backward, forward, grad_check, init_mlp, lr_schedule, rel_error, Activation,
    AdamState, DenseLayer, GradCheckReport, GradientTape, Mlp, GRAD_CHECK_STEP,
};
pub use rng::derive_seed;
