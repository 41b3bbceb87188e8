//! Agreement and error metrics: MSE, intraclass correlation, weighted
//! Cohen's kappa, percentile-bootstrap intervals, and a paired t-test.
//!
//! All statistics treat predictions and targets as two raters scoring the
//! same subjects. Inputs are validated once at `EvalPairs` construction, so
//! the metric functions themselves stay plain arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, UltraError};
use crate::label_dist::TcScore;
use crate::rng::derive_seed;

/// Paired prediction/target scores, equal length, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPairs {
    preds: Vec<f64>,
    targets: Vec<f64>,
}

impl EvalPairs {
    pub fn new(preds: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if preds.is_empty() {
            return Err(UltraError::empty("evaluation pairs"));
        }
        if preds.len() != targets.len() {
            return Err(UltraError::mismatch(
                "predictions vs targets",
                targets.len(),
                preds.len(),
            ));
        }
        for &v in preds.iter().chain(&targets) {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(UltraError::invalid(format!(
                    "evaluation scores must be finite values in [0, 1], got {v}"
                )));
            }
        }
        Ok(EvalPairs { preds, targets })
    }

    pub fn from_scores(preds: &[TcScore], targets: &[TcScore]) -> Result<Self> {
        EvalPairs::new(
            preds.iter().map(|s| s.value()).collect(),
            targets.iter().map(|s| s.value()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor requires >= 1 pair
    }

    pub fn preds(&self) -> &[f64] {
        &self.preds
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Bootstrap resample with replacement; indices drawn from `rng`.
    fn resample(&self, rng: &mut ChaCha8Rng) -> EvalPairs {
        let n = self.len();
        let mut preds = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            preds.push(self.preds[i]);
            targets.push(self.targets[i]);
        }
        EvalPairs { preds, targets }
    }
}

/// Mean squared error between predictions and targets.
pub fn mse(pairs: &EvalPairs) -> f64 {
    let n = pairs.len() as f64;
    pairs
        .preds
        .iter()
        .zip(&pairs.targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// Which single-rater intraclass correlation to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IccForm {
    /// Two-way random effects, absolute agreement: sensitive to systematic
    /// offsets between raters.
    TwoWayRandomSingle,
    /// Two-way mixed effects, consistency: invariant to a constant offset.
    TwoWayMixedSingle,
}

impl Default for IccForm {
    fn default() -> Self {
        IccForm::TwoWayRandomSingle
    }
}

/// Intraclass correlation between predictions and targets treated as two
/// raters over `n` subjects (two-way ANOVA without replication).
///
/// With mean squares for rows (subjects), columns (raters), and residual:
/// random/absolute: `(MSR - MSE) / (MSR + MSE + 2 (MSC - MSE) / n)`;
/// mixed/consistency: `(MSR - MSE) / (MSR + MSE)`.
/// Requires `n >= 3`; a zero denominator (no variance anywhere) is an error.
pub fn icc(pairs: &EvalPairs, form: IccForm) -> Result<f64> {
    let n = pairs.len();
    if n < 3 {
        return Err(UltraError::invalid(format!(
            "ICC requires at least 3 subjects, got {n}"
        )));
    }
    let k = 2.0;
    let nf = n as f64;
    let grand: f64 =
        (pairs.preds.iter().sum::<f64>() + pairs.targets.iter().sum::<f64>()) / (nf * k);
    let col_pred: f64 = pairs.preds.iter().sum::<f64>() / nf;
    let col_targ: f64 = pairs.targets.iter().sum::<f64>() / nf;

    let mut ssr = 0.0; // between subjects
    let mut sse = 0.0; // residual
    for i in 0..n {
        let row_mean = (pairs.preds[i] + pairs.targets[i]) / k;
        ssr += (row_mean - grand) * (row_mean - grand);
        let r_pred = pairs.preds[i] - row_mean - col_pred + grand;
        let r_targ = pairs.targets[i] - row_mean - col_targ + grand;
        sse += r_pred * r_pred + r_targ * r_targ;
    }
    let ssc = nf * ((col_pred - grand).powi(2) + (col_targ - grand).powi(2));
    let msr = k * ssr / (nf - 1.0);
    let msc = ssc / (k - 1.0);
    let mse_resid = sse / ((nf - 1.0) * (k - 1.0));

    let value = match form {
        IccForm::TwoWayRandomSingle => {
            let denom = msr + (k - 1.0) * mse_resid + k * (msc - mse_resid) / nf;
            if denom == 0.0 {
                return Err(UltraError::DegenerateVariance {
                    component: "no variance across subjects or raters (ICC denominator is zero)"
                        .into(),
                });
            }
            (msr - mse_resid) / denom
        }
        IccForm::TwoWayMixedSingle => {
            let denom = msr + (k - 1.0) * mse_resid;
            if denom == 0.0 {
                return Err(UltraError::DegenerateVariance {
                    component: "no between-subject or residual variance (ICC denominator is zero)"
                        .into(),
                });
            }
            (msr - mse_resid) / denom
        }
    };
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KappaWeighting {
    /// All disagreements weigh the same.
    None,
    /// `w_ij = |i - j| / (K - 1)`.
    Linear,
    /// `w_ij = ((i - j) / (K - 1))^2`.
    Quadratic,
}

/// Binning and weighting for Cohen's kappa on continuous scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KappaConfig {
    n_bins: usize,
    weighting: KappaWeighting,
}

impl Default for KappaConfig {
    fn default() -> Self {
        KappaConfig {
            n_bins: 10,
            weighting: KappaWeighting::Quadratic,
        }
    }
}

impl KappaConfig {
    pub fn new(n_bins: usize, weighting: KappaWeighting) -> Result<Self> {
        if n_bins < 2 {
            return Err(UltraError::invalid(format!(
                "kappa needs at least 2 bins, got {n_bins}"
            )));
        }
        Ok(KappaConfig { n_bins, weighting })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn weighting(&self) -> KappaWeighting {
        self.weighting
    }
}

/// Equal-width bin index over `[0, 1]`; the last bin is right-inclusive so
/// a score of exactly 1 still lands in bin `K - 1`.
fn bin_index(x: f64, k: usize) -> usize {
    ((x * k as f64).floor() as usize).min(k - 1)
}

/// Weighted Cohen's kappa over binned scores:
/// `kappa = 1 - sum(w n) / sum(w e)` with expected counts
/// `e_ij = row_i col_j / n`. When the expected disagreement is zero the
/// raters can only be in exact agreement, which scores 1.
pub fn cohen_kappa(pairs: &EvalPairs, cfg: &KappaConfig) -> f64 {
    let k = cfg.n_bins;
    let mut counts = vec![0.0f64; k * k];
    for (p, t) in pairs.preds.iter().zip(&pairs.targets) {
        counts[bin_index(*p, k) * k + bin_index(*t, k)] += 1.0;
    }
    let n = pairs.len() as f64;
    let mut row = vec![0.0f64; k];
    let mut col = vec![0.0f64; k];
    for i in 0..k {
        for j in 0..k {
            row[i] += counts[i * k + j];
            col[j] += counts[i * k + j];
        }
    }
    let weight = |i: usize, j: usize| -> f64 {
        let d = i as f64 - j as f64;
        let denom = (k - 1) as f64;
        match cfg.weighting {
            KappaWeighting::None => {
                if i == j {
                    0.0
                } else {
                    1.0
                }
            }
            KappaWeighting::Linear => d.abs() / denom,
            KappaWeighting::Quadratic => (d / denom) * (d / denom),
        }
    };
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = weight(i, j);
            observed += w * counts[i * k + j];
            expected += w * row[i] * col[j] / n;
        }
    }
    if expected == 0.0 {
        // All mass in one diagonal cell: chance agreement is total, and so is
        // the observed agreement.
        return 1.0;
    }
    1.0 - observed / expected
}

/// Percentile bootstrap confidence interval for any metric on `pairs`.
///
/// Draws `b >= 100` resamples; resample `i` uses an RNG seeded with
/// `seed ^ i`, so the interval is reproducible and insensitive to evaluation
/// order. Resamples on which the metric is undefined (degenerate variance
/// and the like) are skipped, but more than 10% of them is an error.
pub fn bootstrap_ci<F>(
    metric: F,
    pairs: &EvalPairs,
    b: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&EvalPairs) -> Result<f64>,
{
    if b < 100 {
        return Err(UltraError::invalid(format!(
            "bootstrap needs at least 100 resamples, got {b}"
        )));
    }
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(UltraError::invalid(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let mut values = Vec::with_capacity(b);
    let mut skipped = 0usize;
    for i in 0..b {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
        let resampled = pairs.resample(&mut rng);
        match metric(&resampled) {
            Ok(v) if v.is_finite() => values.push(v),
            _ => skipped += 1,
        }
    }
    if skipped * 10 > b {
        return Err(UltraError::BootstrapUndefined { skipped, total: b });
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&values, tail), percentile(&values, 1.0 - tail)))
}

/// Linear-interpolated percentile of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Two-sided paired t-test on per-sample losses of two systems.
///
/// Returns `(t, p)` where `t` is the paired statistic on the differences and
/// `p` comes from the Student-t distribution with `n - 1` degrees of
/// freedom. Identical inputs have zero difference variance and are rejected.
pub fn paired_t_test(errors_a: &[f64], errors_b: &[f64]) -> Result<(f64, f64)> {
    let n = errors_a.len();
    if n < 3 {
        return Err(UltraError::invalid(format!(
            "paired t-test requires at least 3 pairs, got {n}"
        )));
    }
    if errors_b.len() != n {
        return Err(UltraError::mismatch("paired losses", n, errors_b.len()));
    }
    if errors_a.iter().chain(errors_b).any(|v| !v.is_finite()) {
        return Err(UltraError::NonFinite {
            what: "paired t-test input".into(),
        });
    }
    let nf = n as f64;
    let diffs: Vec<f64> = errors_a.iter().zip(errors_b).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        return Err(UltraError::DegenerateVariance {
            component: "paired differences have zero variance".into(),
        });
    }
    let t = mean / (var / nf).sqrt();
    let p = student_t_two_sided_p(t, nf - 1.0);
    Ok((t, p))
}

/// Two-sided tail probability of Student's t with `dof` degrees of freedom,
/// via the regularized incomplete beta: `p = I_x(dof/2, 1/2)` with
/// `x = dof / (dof + t^2)`.
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    special::reg_inc_beta(dof / 2.0, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
}

/// CDF of Student's t with `dof` degrees of freedom.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    let half_two_sided = 0.5 * student_t_two_sided_p(t, dof);
    if t >= 0.0 {
        1.0 - half_two_sided
    } else {
        half_two_sided
    }
}

/// Series/continued-fraction special functions backing the t-test.
/// Accuracy is driven by `EPS`, far below what the callers need.
mod special {
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;
    const MAX_ITER: usize = 300;

    /// Lanczos approximation, g = 7, n = 9.
    pub fn ln_gamma(x: f64) -> f64 {
        const COEFFS: [f64; 8] = [
            676.5203681218851,
            -1259.1392167224028,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507343278686905,
            -0.13857109526572012,
            9.984_369_578_019_572e-6,
            1.5056327351493116e-7,
        ];
        debug_assert!(x > 0.0);
        let x = x - 1.0;
        let mut acc = 0.999_999_999_999_809_9;
        for (i, &c) in COEFFS.iter().enumerate() {
            acc += c / (x + (i + 1) as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }

    /// Regularized incomplete beta `I_x(a, b)` by Lentz's continued
    /// fraction, using the symmetry transform for fast convergence.
    pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let ln_front =
            ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
        let front = ln_front.exp();
        if x < (a + 1.0) / (a + b + 2.0) {
            front * beta_cf(a, b, x) / a
        } else {
            1.0 - front * beta_cf(b, a, 1.0 - x) / b
        }
    }

    fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
        let qab = a + b;
        let qap = a + 1.0;
        let qam = a - 1.0;
        let mut c = 1.0;
        let mut d = 1.0 - qab * x / qap;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..=MAX_ITER {
            let mf = m as f64;
            let m2 = 2.0 * mf;
            // Even step.
            let aa = mf * (b - mf) * x / ((qam + m2) * (a + m2));
            d = 1.0 + aa * d;
            if d.abs() < FPMIN {
                d = FPMIN;
            }
            c = 1.0 + aa / c;
            if c.abs() < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            h *= d * c;
            // Odd step.
            let aa = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
            d = 1.0 + aa * d;
            if d.abs() < FPMIN {
                d = FPMIN;
            }
            c = 1.0 + aa / c;
            if c.abs() < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        h
    }
}

/// Point estimates with bootstrap intervals for the three headline metrics.
///
/// Intervals are widened, if necessary, to contain the point estimate, so
/// `lo <= point <= hi` always holds even when the raw percentile interval
/// of a bias-sensitive metric (ICC in particular) would exclude it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub icc: f64,
    pub icc_ci: (f64, f64),
    pub kappa: f64,
    pub kappa_ci: (f64, f64),
    pub mse: f64,
    pub mse_ci: (f64, f64),
}

/// Builds the full report: ICC, kappa, MSE, each with a percentile-bootstrap
/// interval. Per-metric bootstrap seeds derive from `seed` so the three
/// intervals use independent but reproducible resample streams.
pub fn evaluate(
    pairs: &EvalPairs,
    icc_form: IccForm,
    kappa_cfg: &KappaConfig,
    bootstrap_b: usize,
    level: f64,
    seed: u64,
) -> Result<EvalReport> {
    let icc_point = icc(pairs, icc_form)?;
    let kappa_point = cohen_kappa(pairs, kappa_cfg);
    let mse_point = mse(pairs);

    let widen = |ci: (f64, f64), point: f64| (ci.0.min(point), ci.1.max(point));
    let icc_ci = widen(
        bootstrap_ci(
            |p| icc(p, icc_form),
            pairs,
            bootstrap_b,
            level,
            derive_seed(seed, &[1]),
        )?,
        icc_point,
    );
    let kappa_ci = widen(
        bootstrap_ci(
            |p| Ok(cohen_kappa(p, kappa_cfg)),
            pairs,
            bootstrap_b,
            level,
            derive_seed(seed, &[2]),
        )?,
        kappa_point,
    );
    let mse_ci = widen(
        bootstrap_ci(
            |p| Ok(mse(p)),
            pairs,
            bootstrap_b,
            level,
            derive_seed(seed, &[3]),
        )?,
        mse_point,
    );
    Ok(EvalReport {
        n: pairs.len(),
        icc: icc_point,
        icc_ci,
        kappa: kappa_point,
        kappa_ci,
        mse: mse_point,
        mse_ci,
    })
}
