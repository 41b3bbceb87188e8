//! Label-distribution codec.
//!
//! Converts a scalar tumor-cellularity score in `[0, 1]` into a discrete
//! probability distribution over a fixed score grid and back, and provides
//! the losses defined on those distributions: softmax, KL divergence, squared
//! error, and the joint objective used for training. Everything here is pure
//! and deterministic.

use crate::error::{Result, UltraError};

/// Default kernel width for encoding scores as distributions.
pub const DEFAULT_SIGMA: f64 = 0.04;
/// Default lower clamp applied to target probabilities inside logs.
pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-12;
/// Default number of grid points (label channels).
pub const DEFAULT_N_LABELS: usize = 100;

/// A tumor-cellularity score, guaranteed finite and in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TcScore(f64);

impl TcScore {
    /// Rejects NaN, infinities, and anything outside `[0, 1]`.
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(UltraError::invalid(format!(
                "TC score must be a finite value in [0, 1], got {value}"
            )));
        }
        Ok(TcScore(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Clamp-construct from a finite value that may have drifted slightly
    /// outside `[0, 1]` (e.g. a float expectation over a valid distribution).
    pub(crate) fn clamped(value: f64) -> Self {
        debug_assert!(value.is_finite());
        TcScore(value.clamp(0.0, 1.0))
    }
}

/// Strictly increasing grid of candidate scores spanning `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    values: Vec<f64>,
}

impl ScoreGrid {
    /// Validates an explicit grid: at least two points, strictly increasing,
    /// first exactly 0 and last exactly 1.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(UltraError::invalid(format!(
                "score grid needs at least 2 points, got {}",
                values.len()
            )));
        }
        if values[0] != 0.0 || *values.last().unwrap() != 1.0 {
            return Err(UltraError::invalid(
                "score grid must start at 0 and end at 1",
            ));
        }
        if values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(UltraError::invalid("score grid must be strictly increasing"));
        }
        Ok(ScoreGrid { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor requires >= 2 points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Largest gap between adjacent grid points.
    pub fn max_spacing(&self) -> f64 {
        self.values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

/// Uniform grid of `n` points: `t_i = i / (n - 1)` for `i = 0..n`.
/// Endpoint-inclusive, so both 0 and 1 are always candidates.
pub fn make_grid(n: usize) -> Result<ScoreGrid> {
    if n < 2 {
        return Err(UltraError::invalid(format!(
            "grid size must be at least 2, got {n}"
        )));
    }
    let d = (n - 1) as f64;
    ScoreGrid::new((0..n).map(|i| i as f64 / d).collect())
}

/// Discrete probability distribution over a score grid.
///
/// Invariants: non-empty, every entry finite in `[0, 1]`, entries sum to 1
/// within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(UltraError::empty("label distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(UltraError::invalid(
                "label distribution entries must be finite values in [0, 1]",
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(UltraError::invalid(format!(
                "label distribution must sum to 1 within 1e-9, got {sum}"
            )));
        }
        Ok(LabelDistribution { probs })
    }

    /// All mass on one channel.
    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if n == 0 {
            return Err(UltraError::empty("label distribution"));
        }
        if index >= n {
            return Err(UltraError::invalid(format!(
                "one-hot index {index} out of range for {n} channels"
            )));
        }
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Ok(LabelDistribution { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(UltraError::empty("label distribution"));
        }
        Ok(LabelDistribution {
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor requires >= 1 entry
    }
}

/// Encoding parameters: kernel width and the probability floor used when a
/// target distribution appears inside a logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    sigma: f64,
    epsilon_floor: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            sigma: DEFAULT_SIGMA,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
        }
    }
}

impl EncoderConfig {
    /// `sigma` must be positive and finite; `epsilon_floor` must sit in
    /// `(0, 1e-6]` so it can never visibly distort a real probability.
    pub fn new(sigma: f64, epsilon_floor: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(UltraError::invalid(format!(
                "sigma must be positive and finite, got {sigma}"
            )));
        }
        if !epsilon_floor.is_finite() || epsilon_floor <= 0.0 || epsilon_floor > 1e-6 {
            return Err(UltraError::invalid(format!(
                "epsilon floor must lie in (0, 1e-6], got {epsilon_floor}"
            )));
        }
        Ok(EncoderConfig {
            sigma,
            epsilon_floor,
        })
    }

    pub fn with_sigma(sigma: f64) -> Result<Self> {
        EncoderConfig::new(sigma, DEFAULT_EPSILON_FLOOR)
    }

    pub fn sigma(self) -> f64 {
        self.sigma
    }

    pub fn epsilon_floor(self) -> f64 {
        self.epsilon_floor
    }
}

/// Which way the KL divergence reads in the joint loss.
///
/// The training objective is written with the prediction as the left
/// argument, KL(p ‖ y), and that is the default. `TargetPred` gives the more
/// common label-distribution-learning form KL(y ‖ p).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    PredTarget,
    TargetPred,
}

impl Default for KlDirection {
    fn default() -> Self {
        KlDirection::PredTarget
    }
}

/// Gaussian density at `t` centered on the score `s`:
/// `exp(-(t - s)^2 / (2 sigma^2)) / (sqrt(2 pi) sigma)`.
pub fn gaussian_kernel(t: f64, s: TcScore, sigma: f64) -> Result<f64> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(UltraError::invalid(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    let d = t - s.value();
    let norm = (2.0 * std::f64::consts::PI).sqrt() * sigma;
    Ok((-(d * d) / (2.0 * sigma * sigma)).exp() / norm)
}

/// Encodes a score as a normalized Gaussian over the grid:
/// `y_i = G(t_i | s, sigma) / sum_k G(t_k | s, sigma)`.
///
/// Computed with the largest exponent factored out, which is algebraically
/// identical (the density prefactor cancels in the ratio) but cannot
/// underflow to an all-zero vector even for very small `sigma`.
pub fn encode(s: TcScore, grid: &ScoreGrid, cfg: &EncoderConfig) -> Result<LabelDistribution> {
    let sigma = cfg.sigma();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let exponents: Vec<f64> = grid
        .values()
        .iter()
        .map(|&t| {
            let d = t - s.value();
            -(d * d) * inv
        })
        .collect();
    let m = exponents.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut probs: Vec<f64> = exponents.iter().map(|&e| (e - m).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    // One more pass tightens the sum to within a few ulps of 1.
    let sum2: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum2;
    }
    LabelDistribution::new(probs)
}

/// Decodes a distribution to the grid score with the highest probability.
/// Ties resolve to the lowest index.
pub fn decode_argmax(dist: &LabelDistribution, grid: &ScoreGrid) -> Result<TcScore> {
    if dist.len() != grid.len() {
        return Err(UltraError::mismatch(
            "distribution vs grid",
            grid.len(),
            dist.len(),
        ));
    }
    let probs = dist.probs();
    let mut best = 0;
    for i in 1..probs.len() {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    TcScore::new(grid.value(best))
}

/// Decodes a distribution to its expected score `sum_i p_i t_i`, clamped to
/// `[0, 1]` to absorb float round-off.
pub fn decode_expectation(dist: &LabelDistribution, grid: &ScoreGrid) -> Result<TcScore> {
    if dist.len() != grid.len() {
        return Err(UltraError::mismatch(
            "distribution vs grid",
            grid.len(),
            dist.len(),
        ));
    }
    let e: f64 = dist
        .probs()
        .iter()
        .zip(grid.values())
        .map(|(p, t)| p * t)
        .sum();
    Ok(TcScore::clamped(e))
}

/// Numerically stable softmax: subtracts the max logit before
/// exponentiating. Rejects empty and non-finite input.
pub fn softmax(logits: &[f64]) -> Result<LabelDistribution> {
    if logits.is_empty() {
        return Err(UltraError::empty("softmax input"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(UltraError::NonFinite {
            what: "softmax input".into(),
        });
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut probs: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    LabelDistribution::new(probs)
}

/// KL divergence `KL(p ‖ y) = sum_i p_i ln(p_i / y_i)`.
///
/// Uses the convention `0 ln 0 = 0`; `y` entries are clamped below by the
/// epsilon floor before the log. The mathematical value is nonnegative for
/// any two distributions, so float residue below zero (at most ~1e-9 from
/// the sum-to-one slack) is clamped away to honor the signature.
pub fn kl_divergence(
    p: &LabelDistribution,
    y: &LabelDistribution,
    cfg: &EncoderConfig,
) -> Result<f64> {
    if p.len() != y.len() {
        return Err(UltraError::mismatch("KL arguments", p.len(), y.len()));
    }
    let eps = cfg.epsilon_floor();
    let mut sum = 0.0;
    for (&pi, &yi) in p.probs().iter().zip(y.probs()) {
        if pi > 0.0 {
            sum += pi * (pi / yi.max(eps)).ln();
        }
    }
    Ok(sum.max(0.0))
}

/// KL divergence in the requested direction; the left argument of the log
/// ratio is never clamped, the right one is floored at epsilon.
pub fn kl_divergence_directed(
    p: &LabelDistribution,
    y: &LabelDistribution,
    direction: KlDirection,
    cfg: &EncoderConfig,
) -> Result<f64> {
    match direction {
        KlDirection::PredTarget => kl_divergence(p, y, cfg),
        KlDirection::TargetPred => kl_divergence(y, p, cfg),
    }
}

/// Gradient of `KL(softmax(logits) ‖ y)` with respect to the logits:
/// `g_j = p_j (ln(p_j / y_j) - L)` where `p = softmax(logits)` and `L` is
/// the divergence itself. The entries always sum to zero because the loss is
/// invariant to a constant shift of the logits.
pub fn kl_softmax_grad(
    logits: &[f64],
    y: &LabelDistribution,
    cfg: &EncoderConfig,
) -> Result<Vec<f64>> {
    let p = softmax(logits)?;
    if p.len() != y.len() {
        return Err(UltraError::mismatch(
            "softmax output vs target",
            y.len(),
            p.len(),
        ));
    }
    let l = kl_divergence(&p, y, cfg)?;
    let eps = cfg.epsilon_floor();
    Ok(p.probs()
        .iter()
        .zip(y.probs())
        .map(|(&pj, &yj)| {
            if pj > 0.0 {
                pj * ((pj / yj.max(eps)).ln() - l)
            } else {
                0.0
            }
        })
        .collect())
}

/// Logit gradient of the KL term in the requested direction.
///
/// For `TargetPred` the composition with softmax collapses to the classic
/// `p - y`.
pub fn kl_softmax_grad_directed(
    logits: &[f64],
    y: &LabelDistribution,
    direction: KlDirection,
    cfg: &EncoderConfig,
) -> Result<Vec<f64>> {
    match direction {
        KlDirection::PredTarget => kl_softmax_grad(logits, y, cfg),
        KlDirection::TargetPred => {
            let p = softmax(logits)?;
            if p.len() != y.len() {
                return Err(UltraError::mismatch(
                    "softmax output vs target",
                    y.len(),
                    p.len(),
                ));
            }
            Ok(p.probs()
                .iter()
                .zip(y.probs())
                .map(|(&pj, &yj)| pj - yj)
                .collect())
        }
    }
}

/// Squared error between two scores. Range safety is enforced by the
/// `TcScore` type, so this cannot see out-of-range input.
pub fn mse_loss(pred: TcScore, target: TcScore) -> f64 {
    let d = pred.value() - target.value();
    d * d
}

/// Joint objective `KL(p ‖ y) + alpha * (pred - target)^2`.
pub fn joint_loss(
    p: &LabelDistribution,
    y: &LabelDistribution,
    pred: TcScore,
    target: TcScore,
    alpha: f64,
    cfg: &EncoderConfig,
) -> Result<f64> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(UltraError::invalid(format!(
            "alpha must be nonnegative and finite, got {alpha}"
        )));
    }
    Ok(kl_divergence(p, y, cfg)? + alpha * mse_loss(pred, target))
}
