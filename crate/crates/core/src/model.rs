//! The multi-branch tumor-cellularity network and its two-stage trainer.
//!
//! One shared backbone feeds `N` branch heads, each branch seeing its own
//! randomly augmented copy of the input patch. Branch features are fused by
//! a weighted average; the fused vector doubles as the logits of the label
//! distribution and as the input of a small sigmoid regression head. The
//! scalar prediction averages the argmax-decoded distribution score and the
//! regression score.
//!
//! Every random decision (initialization, augmentation draws, epoch
//! shuffles, validation-time augmentation) flows from explicit seeds through
//! [`derive_seed`], which is what makes checkpoint resume bit-exact.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{apply_norm, Dataset, NormStats, Patch, Sample};
use crate::error::{Result, UltraError};
use crate::label_dist::{
    decode_argmax, encode, kl_divergence_directed, kl_softmax_grad_directed, make_grid, softmax,
    EncoderConfig, KlDirection, LabelDistribution, ScoreGrid, TcScore, DEFAULT_EPSILON_FLOOR,
    DEFAULT_N_LABELS, DEFAULT_SIGMA,
};
use crate::metrics::{cohen_kappa, icc, mse as pairs_mse, EvalPairs, IccForm, KappaConfig};
use crate::nn::{
    adam_step, backward, forward, init_mlp, lr_schedule, Activation, AdamState, Mlp,
};
use crate::rng::derive_seed;

// Seed-stream tags. Keeping them distinct guarantees that initialization,
// augmentation, shuffling, and validation evaluation never share a ChaCha
// stream even under equal base seeds.
const STREAM_INIT: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_VAL_EVAL: u64 = 4;

/// Stochastic input transforms applied per branch, each with its own
/// probability. A zero spec is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSpec {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rot90_prob: f64,
    pub noise_prob: f64,
    pub noise_std: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rot90_prob: 0.5,
            noise_prob: 0.5,
            noise_std: 0.02,
        }
    }
}

impl AugmentationSpec {
    /// All probabilities zero: `augment` becomes the identity.
    pub fn identity() -> Self {
        AugmentationSpec {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rot90_prob: 0.0,
            noise_prob: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hflip_prob", self.hflip_prob),
            ("vflip_prob", self.vflip_prob),
            ("rot90_prob", self.rot90_prob),
            ("noise_prob", self.noise_prob),
        ] {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(UltraError::invalid(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(UltraError::invalid(format!(
                "noise_std must be nonnegative and finite, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Applies each enabled transform independently with its probability, in a
/// fixed order: horizontal flip, vertical flip, quarter-turn rotation,
/// additive Gaussian pixel noise (clamped back to `[0, 1]`).
///
/// All gate decisions and the turn count are drawn unconditionally so the
/// random stream layout never depends on earlier outcomes; only the
/// per-pixel noise draws are conditional, and they come last.
pub fn augment(patch: &Patch, spec: &AugmentationSpec, rng_seed: u64) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let do_h = rng.random::<f64>() < spec.hflip_prob;
    let do_v = rng.random::<f64>() < spec.vflip_prob;
    let do_r = rng.random::<f64>() < spec.rot90_prob;
    let quarter_turns: u32 = rng.random_range(1..=3);
    let do_n = rng.random::<f64>() < spec.noise_prob;

    let mut out = patch.clone();
    if do_h {
        out = out.flipped_horizontal();
    }
    if do_v {
        out = out.flipped_vertical();
    }
    if do_r {
        for _ in 0..quarter_turns {
            out = out.rotated_90cw();
        }
    }
    if do_n && spec.noise_std > 0.0 {
        let pixels: Vec<f32> = out
            .pixels()
            .iter()
            .map(|&p| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (f64::from(p) + z * spec.noise_std).clamp(0.0, 1.0) as f32
            })
            .collect();
        out = Patch::new(out.height(), out.width(), pixels)
            .expect("noising a valid patch preserves its invariants");
    }
    out
}

/// Which terms of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Distribution KL plus `alpha` times squared regression error.
    Joint,
    /// Distribution KL alone; the regression head receives no gradient.
    KlOnly,
    /// `alpha` times squared regression error alone; the distribution
    /// pathway receives no gradient.
    MseOnly,
}

impl Default for LossMode {
    fn default() -> Self {
        LossMode::Joint
    }
}

/// Everything that fixes the network architecture and objective.
#[derive(Debug, Clone, PartialEq)]
pub struct UltraConfig {
    pub n_branches: usize,
    pub branch_weights: Vec<f64>,
    pub sigma: f64,
    pub alpha: f64,
    pub n_labels: usize,
    /// Flattened patch length; patches of any height x width with this many
    /// pixels are accepted.
    pub input_dim: usize,
    /// Hidden widths of the shared backbone; its output width is `n_labels`.
    pub backbone_dims: Vec<usize>,
    /// Hidden widths of each branch head; heads map `n_labels -> n_labels`.
    pub head_dims: Vec<usize>,
    pub seed: u64,
    pub kl_direction: KlDirection,
    pub epsilon_floor: f64,
    pub loss_mode: LossMode,
    pub augmentation: AugmentationSpec,
}

impl Default for UltraConfig {
    fn default() -> Self {
        UltraConfig {
            n_branches: 3,
            branch_weights: vec![1.0; 3],
            sigma: DEFAULT_SIGMA,
            alpha: 1.0,
            n_labels: DEFAULT_N_LABELS,
            input_dim: 256,
            backbone_dims: vec![64, 32],
            head_dims: vec![64, 32],
            seed: 42,
            kl_direction: KlDirection::default(),
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
            loss_mode: LossMode::default(),
            augmentation: AugmentationSpec::default(),
        }
    }
}

impl UltraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_branches == 0 {
            return Err(UltraError::invalid("n_branches must be at least 1"));
        }
        if self.branch_weights.len() != self.n_branches {
            return Err(UltraError::mismatch(
                "branch weights",
                self.n_branches,
                self.branch_weights.len(),
            ));
        }
        if self.branch_weights.iter().any(|w| !w.is_finite()) {
            return Err(UltraError::NonFinite {
                what: "branch weight".into(),
            });
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(UltraError::invalid(format!(
                "alpha must be nonnegative and finite, got {}",
                self.alpha
            )));
        }
        if self.n_labels < 2 {
            return Err(UltraError::invalid(format!(
                "n_labels must be at least 2, got {}",
                self.n_labels
            )));
        }
        if self.input_dim == 0 {
            return Err(UltraError::invalid("input_dim must be nonzero"));
        }
        if self.backbone_dims.iter().any(|&d| d == 0) || self.head_dims.iter().any(|&d| d == 0) {
            return Err(UltraError::invalid("layer widths must be nonzero"));
        }
        // Sigma and floor share the encoder's validation rules.
        EncoderConfig::new(self.sigma, self.epsilon_floor)?;
        self.augmentation.validate()
    }
}

/// Feature vector produced by one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFeatures(Vec<f64>);

impl BranchFeatures {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(UltraError::empty("branch features"));
        }
        Ok(BranchFeatures(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor requires at least one entry
    }
}

/// Weighted-average fusion of branch features; doubles as the logits of the
/// predicted label distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedFeatures(Vec<f64>);

impl EnhancedFeatures {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `f_enhanced = (1/N) * sum_k W_k * f^k`.
pub fn fuse(features: &[BranchFeatures], weights: &[f64]) -> Result<EnhancedFeatures> {
    if features.is_empty() {
        return Err(UltraError::empty("branch features"));
    }
    if features.len() != weights.len() {
        return Err(UltraError::mismatch(
            "branch weights",
            features.len(),
            weights.len(),
        ));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(UltraError::invalid(
            "branch features must share one dimension",
        ));
    }
    let n = features.len() as f64;
    let mut fused = vec![0.0; dim];
    for (f, &w) in features.iter().zip(weights) {
        for (acc, &v) in fused.iter_mut().zip(f.values()) {
            *acc += w * v;
        }
    }
    for v in &mut fused {
        *v /= n;
        if !v.is_finite() {
            return Err(UltraError::NonFinite {
                what: "fused features".into(),
            });
        }
    }
    Ok(EnhancedFeatures(fused))
}

/// Full model output for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub distribution: LabelDistribution,
    /// Grid value of the distribution's argmax.
    pub ldl_score: TcScore,
    /// Sigmoid regression head output.
    pub reg_score: TcScore,
    /// Mean of the two scores.
    pub final_score: TcScore,
}

/// Which parameters a training step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    /// Backbone plus regression head under plain squared error; branch
    /// heads receive exactly zero gradient.
    Backbone,
    /// The whole network under the configured loss mode.
    Full,
}

/// Mean loss and flat parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    /// Model-enumeration order: backbone, branch heads ascending, then the
    /// regression head.
    pub grads: Vec<f64>,
    /// Mean L2 norm of the distribution-loss gradient at the fused logits;
    /// structurally zero in the backbone stage and under `MseOnly`.
    pub kl_grad_norm: f64,
}

/// The network: shared backbone, `N` branch heads, regression head, plus the
/// frozen normalization statistics and codec configuration it was built
/// with.
#[derive(Debug, Clone, PartialEq)]
pub struct UltraModel {
    config: UltraConfig,
    norm: NormStats,
    backbone: Mlp,
    heads: Vec<Mlp>,
    reg_head: Mlp,
    grid: ScoreGrid,
    encoder: EncoderConfig,
}

impl UltraModel {
    /// Freshly initialized model. Each sub-network draws from its own seed
    /// stream, so branch heads differ from one another at initialization.
    pub fn new(config: UltraConfig, norm: NormStats) -> Result<Self> {
        config.validate()?;
        let grid = make_grid(config.n_labels)?;
        let encoder = EncoderConfig::new(config.sigma, config.epsilon_floor)?;

        let mut backbone_dims = Vec::with_capacity(config.backbone_dims.len() + 2);
        backbone_dims.push(config.input_dim);
        backbone_dims.extend_from_slice(&config.backbone_dims);
        backbone_dims.push(config.n_labels);
        let backbone_acts = vec![Activation::Relu; backbone_dims.len() - 1];
        let backbone = init_mlp(
            &backbone_dims,
            &backbone_acts,
            derive_seed(config.seed, &[STREAM_INIT, 0]),
        )?;

        let mut head_dims = Vec::with_capacity(config.head_dims.len() + 2);
        head_dims.push(config.n_labels);
        head_dims.extend_from_slice(&config.head_dims);
        head_dims.push(config.n_labels);
        let mut head_acts = vec![Activation::Relu; head_dims.len() - 1];
        *head_acts.last_mut().expect("at least one layer") = Activation::Identity;
        let heads = (0..config.n_branches)
            .map(|k| {
                init_mlp(
                    &head_dims,
                    &head_acts,
                    derive_seed(config.seed, &[STREAM_INIT, 1 + k as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let reg_head = init_mlp(
            &[config.n_labels, 1],
            &[Activation::Sigmoid],
            derive_seed(config.seed, &[STREAM_INIT, 1 + config.n_branches as u64]),
        )?;

        Ok(UltraModel {
            config,
            norm,
            backbone,
            heads,
            reg_head,
            grid,
            encoder,
        })
    }

    pub fn config(&self) -> &UltraConfig {
        &self.config
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn grid(&self) -> &ScoreGrid {
        &self.grid
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count()
            + self.heads.iter().map(Mlp::param_count).sum::<usize>()
            + self.reg_head.param_count()
    }

    /// Flat parameter vector: backbone, branch heads ascending, regression
    /// head. This enumeration order is the checkpoint contract.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.backbone.write_params(&mut out);
        for head in &self.heads {
            head.write_params(&mut out);
        }
        self.reg_head.write_params(&mut out);
        out
    }

    /// Overwrites every parameter from a flat vector in enumeration order.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(UltraError::mismatch(
                "model parameters",
                self.param_count(),
                flat.len(),
            ));
        }
        let mut pos = self.backbone.read_params(flat)?;
        for head in &mut self.heads {
            pos += head.read_params(&flat[pos..])?;
        }
        self.reg_head.read_params(&flat[pos..])?;
        Ok(())
    }

    fn check_patch(&self, patch: &Patch) -> Result<()> {
        let got = patch.height() * patch.width();
        if got != self.config.input_dim {
            return Err(UltraError::mismatch(
                "patch pixels",
                self.config.input_dim,
                got,
            ));
        }
        Ok(())
    }

    /// One branch's features: augment with this branch's seed, normalize,
    /// run the shared backbone, then the branch head.
    pub fn branch_forward(&self, patch: &Patch, k: usize, rng_seed: u64) -> Result<BranchFeatures> {
        if k >= self.config.n_branches {
            return Err(UltraError::invalid(format!(
                "branch index {k} out of range (n_branches {})",
                self.config.n_branches
            )));
        }
        self.check_patch(patch)?;
        let augmented = augment(patch, &self.config.augmentation, rng_seed);
        let x = apply_norm(&augmented, &self.norm);
        let (features, _) = forward(&self.backbone, &x)?;
        let (out, _) = forward(&self.heads[k], &features)?;
        BranchFeatures::new(out)
    }

    /// Full multi-branch prediction with test-time augmentation: every
    /// branch sees a fresh draw derived from `rng_seed`, so a fixed seed
    /// gives a bit-identical result.
    pub fn predict(&self, patch: &Patch, rng_seed: u64) -> Result<Prediction> {
        let features = (0..self.config.n_branches)
            .map(|k| self.branch_forward(patch, k, derive_seed(rng_seed, &[k as u64])))
            .collect::<Result<Vec<_>>>()?;
        let fused = fuse(&features, &self.config.branch_weights)?;
        let distribution = softmax(fused.values())?;
        let ldl_score = decode_argmax(&distribution, &self.grid)?;
        let (reg_out, _) = forward(&self.reg_head, fused.values())?;
        let reg_score = TcScore::new(reg_out[0])?;
        let final_score = TcScore::new((ldl_score.value() + reg_score.value()) / 2.0)?;
        Ok(Prediction {
            distribution,
            ldl_score,
            reg_score,
            final_score,
        })
    }

    /// Deterministic regression-only pathway: no augmentation, regression
    /// head applied directly to backbone features. This is the quantity the
    /// backbone stage trains and validates.
    pub fn predict_regression(&self, patch: &Patch) -> Result<TcScore> {
        self.check_patch(patch)?;
        let x = apply_norm(patch, &self.norm);
        let (features, _) = forward(&self.backbone, &x)?;
        let (reg_out, _) = forward(&self.reg_head, &features)?;
        TcScore::new(reg_out[0])
    }

    /// Mean loss over a batch; `aug_seeds` holds one base seed per sample,
    /// from which per-branch draws derive. Pure in the parameters, which is
    /// what the finite-difference tests rely on.
    pub fn batch_loss(
        &self,
        batch: &[Sample],
        aug_seeds: &[u64],
        stage: TrainStage,
    ) -> Result<f64> {
        self.batch_eval(batch, aug_seeds, stage, false)
            .map(|b| b.loss)
    }

    /// Mean loss and mean parameter gradients over a batch, reduced in
    /// fixed order (samples ascending, branches ascending within each).
    pub fn batch_gradients(
        &self,
        batch: &[Sample],
        aug_seeds: &[u64],
        stage: TrainStage,
    ) -> Result<BatchGradients> {
        self.batch_eval(batch, aug_seeds, stage, true)
    }

    fn batch_eval(
        &self,
        batch: &[Sample],
        aug_seeds: &[u64],
        stage: TrainStage,
        want_grads: bool,
    ) -> Result<BatchGradients> {
        if batch.is_empty() {
            return Err(UltraError::empty("batch"));
        }
        if batch.len() != aug_seeds.len() {
            return Err(UltraError::mismatch(
                "augmentation seeds",
                batch.len(),
                aug_seeds.len(),
            ));
        }
        let mut loss_sum = 0.0;
        let mut kl_norm_sum = 0.0;
        let mut grads = vec![0.0; if want_grads { self.param_count() } else { 0 }];
        for (sample, &seed) in batch.iter().zip(aug_seeds) {
            let (loss, kl_norm) = match stage {
                TrainStage::Backbone => {
                    self.sample_eval_backbone(sample, seed, want_grads.then_some(&mut grads))?
                }
                TrainStage::Full => {
                    self.sample_eval_full(sample, seed, want_grads.then_some(&mut grads))?
                }
            };
            loss_sum += loss;
            kl_norm_sum += kl_norm;
        }
        let m = batch.len() as f64;
        for g in &mut grads {
            *g /= m;
        }
        Ok(BatchGradients {
            loss: loss_sum / m,
            grads,
            kl_grad_norm: kl_norm_sum / m,
        })
    }

    /// Backbone-stage term for one sample: plain squared error of the
    /// regression head applied to backbone features. Branch heads are not
    /// evaluated, so their gradient entries stay exactly zero.
    fn sample_eval_backbone(
        &self,
        sample: &Sample,
        seed: u64,
        grads: Option<&mut Vec<f64>>,
    ) -> Result<(f64, f64)> {
        self.check_patch(&sample.patch)?;
        let augmented = augment(
            &sample.patch,
            &self.config.augmentation,
            derive_seed(seed, &[0]),
        );
        let x = apply_norm(&augmented, &self.norm);
        let (features, backbone_tape) = forward(&self.backbone, &x)?;
        let (reg_out, reg_tape) = forward(&self.reg_head, &features)?;
        let r = reg_out[0];
        let t = sample.label.value();
        let loss = (r - t) * (r - t);
        if let Some(grads) = grads {
            let (reg_grads, g_features) = backward(&self.reg_head, &reg_tape, &[2.0 * (r - t)])?;
            let (backbone_grads, _) = backward(&self.backbone, &backbone_tape, &g_features)?;
            let backbone_n = self.backbone.param_count();
            let reg_offset = self.param_count() - self.reg_head.param_count();
            accumulate(&mut grads[..backbone_n], &backbone_grads);
            accumulate(&mut grads[reg_offset..], &reg_grads);
        }
        Ok((loss, 0.0))
    }

    /// Full-stage term for one sample under the configured loss mode.
    fn sample_eval_full(
        &self,
        sample: &Sample,
        seed: u64,
        grads: Option<&mut Vec<f64>>,
    ) -> Result<(f64, f64)> {
        self.check_patch(&sample.patch)?;
        let n = self.config.n_branches;
        let use_kl = self.config.loss_mode != LossMode::MseOnly;
        let use_reg = self.config.loss_mode != LossMode::KlOnly;

        // Forward: every branch augments independently and re-runs the
        // shared backbone, so backbone gradients accumulate across branches.
        let mut branch_tapes = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n);
        for k in 0..n {
            let augmented = augment(
                &sample.patch,
                &self.config.augmentation,
                derive_seed(seed, &[k as u64]),
            );
            let x = apply_norm(&augmented, &self.norm);
            let (backbone_out, backbone_tape) = forward(&self.backbone, &x)?;
            let (head_out, head_tape) = forward(&self.heads[k], &backbone_out)?;
            branch_tapes.push((backbone_tape, head_tape));
            features.push(BranchFeatures::new(head_out)?);
        }
        let fused = fuse(&features, &self.config.branch_weights)?;
        let target = encode(sample.label, &self.grid, &self.encoder)?;

        let kl = if use_kl {
            let p = softmax(fused.values())?;
            kl_divergence_directed(&p, &target, self.config.kl_direction, &self.encoder)?
        } else {
            0.0
        };
        let (reg_out, reg_tape) = forward(&self.reg_head, fused.values())?;
        let r = reg_out[0];
        let t = sample.label.value();
        let sq = (r - t) * (r - t);
        let loss = match self.config.loss_mode {
            LossMode::Joint => kl + self.config.alpha * sq,
            LossMode::KlOnly => kl,
            LossMode::MseOnly => self.config.alpha * sq,
        };

        let mut kl_norm = 0.0;
        if let Some(grads) = grads {
            // Gradient at the fused logits: distribution term plus whatever
            // flows back through the regression head.
            let mut g_fused = if use_kl {
                let g = kl_softmax_grad_directed(
                    fused.values(),
                    &target,
                    self.config.kl_direction,
                    &self.encoder,
                )?;
                kl_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                g
            } else {
                vec![0.0; fused.len()]
            };
            let backbone_n = self.backbone.param_count();
            let head_n = self.heads[0].param_count();
            let reg_offset = self.param_count() - self.reg_head.param_count();
            if use_reg {
                let d_r = 2.0 * self.config.alpha * (r - t);
                let (reg_grads, g_reg_input) = backward(&self.reg_head, &reg_tape, &[d_r])?;
                accumulate(&mut grads[reg_offset..], &reg_grads);
                accumulate(&mut g_fused, &g_reg_input);
            }
            for (k, (backbone_tape, head_tape)) in branch_tapes.iter().enumerate() {
                let scale = self.config.branch_weights[k] / n as f64;
                let g_branch: Vec<f64> = g_fused.iter().map(|g| g * scale).collect();
                let (head_grads, g_backbone_out) = backward(&self.heads[k], head_tape, &g_branch)?;
                let offset = backbone_n + k * head_n;
                accumulate(&mut grads[offset..offset + head_n], &head_grads);
                let (backbone_grads, _) = backward(&self.backbone, backbone_tape, &g_backbone_out)?;
                accumulate(&mut grads[..backbone_n], &backbone_grads);
            }
        } else if use_kl {
            let g = kl_softmax_grad_directed(
                fused.values(),
                &target,
                self.config.kl_direction,
                &self.encoder,
            )?;
            kl_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        Ok((loss, kl_norm))
    }
}

fn accumulate(acc: &mut [f64], src: &[f64]) {
    debug_assert!(acc.len() >= src.len());
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

/// Optimization schedule knobs for the two-stage protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Drives shuffling, training augmentation, and validation-time
    /// augmentation; independent of the model's init seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            batch_size: 8,
            epochs_stage1: 50,
            epochs_stage2: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return Err(UltraError::invalid(format!(
                "base_lr must be nonnegative and finite, got {}",
                self.base_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(UltraError::invalid("batch_size must be at least 1"));
        }
        if self.epochs_stage1 + self.epochs_stage2 == 0 {
            return Err(UltraError::invalid("total epoch count must be at least 1"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_stage1 + self.epochs_stage2
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// 1 while only the backbone and regression head train, 2 afterwards.
    pub stage: u8,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mse: f64,
    /// NaN when the validation ICC is undefined (degenerate variance).
    pub val_icc: f64,
    pub val_kappa: f64,
    /// Mean distribution-loss gradient norm at the logits; zero whenever
    /// the KL pathway is inactive.
    pub kl_grad_norm: f64,
}

/// The lowest-validation-MSE state seen so far; a complete resume point.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    /// Epoch whose validation pass produced this snapshot.
    pub epoch: usize,
    pub val_mse: f64,
    pub params: Vec<f64>,
    pub adam: AdamState,
}

/// Drives the two-stage protocol one epoch at a time.
///
/// The stage boundary resets the optimizer: stage 2 starts from fresh Adam
/// moments rather than inheriting stage 1's statistics for parameters whose
/// loss surface just changed. The reset fires when the boundary epoch is
/// processed, so resuming from a checkpoint crosses it identically.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: UltraModel,
    adam: AdamState,
    tcfg: TrainConfig,
    epoch: usize,
    best: Option<BestSnapshot>,
}

impl Trainer {
    pub fn new(model: UltraModel, tcfg: TrainConfig) -> Result<Self> {
        tcfg.validate()?;
        let adam = AdamState::with_hyperparams(
            model.param_count(),
            tcfg.base_lr,
            tcfg.beta1,
            tcfg.beta2,
            tcfg.adam_eps,
        )?;
        Ok(Trainer {
            model,
            adam,
            tcfg,
            epoch: 0,
            best: None,
        })
    }

    /// Rebuilds a trainer mid-run (checkpoint resume). `epoch` is the next
    /// epoch to process.
    pub fn from_state(
        model: UltraModel,
        adam: AdamState,
        epoch: usize,
        tcfg: TrainConfig,
    ) -> Result<Self> {
        tcfg.validate()?;
        if adam.param_count() != model.param_count() {
            return Err(UltraError::mismatch(
                "optimizer state",
                model.param_count(),
                adam.param_count(),
            ));
        }
        Ok(Trainer {
            model,
            adam,
            tcfg,
            epoch,
            best: None,
        })
    }

    pub fn model(&self) -> &UltraModel {
        &self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.tcfg
    }

    /// Next epoch to process.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best(&self) -> Option<&BestSnapshot> {
        self.best.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.tcfg.total_epochs()
    }

    /// Runs one epoch: shuffle, batched gradient steps, then a full
    /// validation pass. Returns the log row.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<EpochRecord> {
        if self.is_finished() {
            return Err(UltraError::invalid(format!(
                "training already finished after {} epochs",
                self.tcfg.total_epochs()
            )));
        }
        if train.is_empty() {
            return Err(UltraError::empty("training set"));
        }
        if val.is_empty() {
            return Err(UltraError::empty("validation set"));
        }
        let epoch = self.epoch;
        let stage1 = self.tcfg.epochs_stage1;
        let stage = if epoch < stage1 {
            TrainStage::Backbone
        } else {
            TrainStage::Full
        };
        if epoch == stage1 {
            // Stage boundary: fresh optimizer for the new objective.
            self.adam = AdamState::with_hyperparams(
                self.model.param_count(),
                self.tcfg.base_lr,
                self.tcfg.beta1,
                self.tcfg.beta2,
                self.tcfg.adam_eps,
            )?;
        }
        let lr = lr_schedule(self.tcfg.base_lr, epoch);
        self.adam.set_lr(lr);

        let mut indices: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.tcfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        indices.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut kl_norm_sum = 0.0;
        let mut params = self.model.params();
        for (step, chunk) in indices.chunks(self.tcfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train.samples[i].clone()).collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|j| {
                    derive_seed(
                        self.tcfg.seed,
                        &[STREAM_AUGMENT, epoch as u64, step as u64, j as u64],
                    )
                })
                .collect();
            let out = self.model.batch_gradients(&batch, &seeds, stage)?;
            if !out.loss.is_finite() {
                return Err(UltraError::NonFiniteLoss { epoch, step });
            }
            adam_step(&mut params, &out.grads, &mut self.adam)?;
            self.model.set_params(&params)?;
            loss_sum += out.loss * batch.len() as f64;
            kl_norm_sum += out.kl_grad_norm * batch.len() as f64;
        }
        let n_train = train.len() as f64;

        let (val_mse, val_icc, val_kappa) = self.validate_pass(val, epoch, stage)?;

        let record = EpochRecord {
            epoch,
            stage: if stage == TrainStage::Backbone { 1 } else { 2 },
            lr,
            train_loss: loss_sum / n_train,
            val_mse,
            val_icc,
            val_kappa,
            kl_grad_norm: kl_norm_sum / n_train,
        };

        let best_key = self
            .best
            .as_ref()
            .map(|b| if b.val_mse.is_nan() { f64::INFINITY } else { b.val_mse })
            .unwrap_or(f64::INFINITY);
        let this_key = if val_mse.is_nan() { f64::INFINITY } else { val_mse };
        if self.best.is_none() || this_key < best_key {
            self.best = Some(BestSnapshot {
                epoch,
                val_mse,
                params: self.model.params(),
                adam: self.adam.clone(),
            });
        }
        self.epoch += 1;
        Ok(record)
    }

    fn validate_pass(
        &self,
        val: &Dataset,
        epoch: usize,
        stage: TrainStage,
    ) -> Result<(f64, f64, f64)> {
        let mut preds = Vec::with_capacity(val.len());
        let mut targets = Vec::with_capacity(val.len());
        for (i, sample) in val.samples.iter().enumerate() {
            // The backbone stage is scored on the only pathway it trains;
            // everything after it is scored with the standard fused readout
            // regardless of loss mode.
            let score = match stage {
                TrainStage::Backbone => self.model.predict_regression(&sample.patch)?,
                TrainStage::Full => {
                    let seed =
                        derive_seed(self.tcfg.seed, &[STREAM_VAL_EVAL, epoch as u64, i as u64]);
                    self.model.predict(&sample.patch, seed)?.final_score
                }
            };
            preds.push(score.value());
            targets.push(sample.label.value());
        }
        let pairs = EvalPairs::new(preds, targets)?;
        let val_mse = pairs_mse(&pairs);
        let val_icc = icc(&pairs, IccForm::TwoWayRandomSingle).unwrap_or(f64::NAN);
        let val_kappa = cohen_kappa(&pairs, &KappaConfig::default());
        Ok((val_mse, val_icc, val_kappa))
    }
}

/// Runs the whole two-stage protocol and returns the trainer (holding the
/// final model and the best snapshot) plus the per-epoch log.
pub fn two_stage_train(
    model: UltraModel,
    train: &Dataset,
    val: &Dataset,
    tcfg: TrainConfig,
) -> Result<(Trainer, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(model, tcfg)?;
    let mut log = Vec::with_capacity(trainer.tcfg.total_epochs());
    while !trainer.is_finished() {
        log.push(trainer.run_epoch(train, val)?);
    }
    Ok((trainer, log))
}
