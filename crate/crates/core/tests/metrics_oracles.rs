//! Independent oracles for the evaluation metrics. Each oracle walks a
//! different algebraic route than the implementation: raw-score sums of
//! squares instead of deviation form for ICC, the similarity-weighted
//! agreement form for kappa, and both a third-party distribution and direct
//! quadrature of the density for the t-test p-value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use ultra_core::{
    cohen_kappa, icc, mse, paired_t_test, student_t_two_sided_p, EvalPairs, IccForm, KappaConfig,
    KappaWeighting,
};

fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> EvalPairs {
    // Correlated pairs so agreement metrics land in interesting ranges.
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    let preds: Vec<f64> = targets
        .iter()
        .map(|t| (t + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0))
        .collect();
    EvalPairs::new(preds, targets).unwrap()
}

/// Raw-score two-way ANOVA: sums of squares from score totals and a
/// correction term, no deviation arithmetic.
fn icc_oracle(pairs: &EvalPairs, form: IccForm) -> f64 {
    let n = pairs.len() as f64;
    let k = 2.0;
    let all: Vec<f64> = pairs
        .preds()
        .iter()
        .chain(pairs.targets())
        .copied()
        .collect();
    let total: f64 = all.iter().sum();
    let c = total * total / (n * k);
    let sst: f64 = all.iter().map(|x| x * x).sum::<f64>() - c;
    let ssr: f64 = pairs
        .preds()
        .iter()
        .zip(pairs.targets())
        .map(|(p, t)| (p + t) * (p + t))
        .sum::<f64>()
        / k
        - c;
    let col_p: f64 = pairs.preds().iter().sum();
    let col_t: f64 = pairs.targets().iter().sum();
    let ssc = (col_p * col_p + col_t * col_t) / n - c;
    let sse = sst - ssr - ssc;
    let msr = ssr / (n - 1.0);
    let msc = ssc / (k - 1.0);
    let mse = sse / ((n - 1.0) * (k - 1.0));
    match form {
        IccForm::TwoWayRandomSingle => {
            (msr - mse) / (msr + (k - 1.0) * mse + k * (msc - mse) / n)
        }
        IccForm::TwoWayMixedSingle => (msr - mse) / (msr + (k - 1.0) * mse),
    }
}

#[test]
fn icc_matches_raw_score_anova_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for i in 0..100 {
        let n = rng.random_range(3..=50);
        let pairs = random_pairs(&mut rng, n);
        for form in [IccForm::TwoWayRandomSingle, IccForm::TwoWayMixedSingle] {
            let ours = icc(&pairs, form).unwrap();
            let oracle = icc_oracle(&pairs, form);
            assert!(
                (ours - oracle).abs() < 1e-10,
                "instance {i} ({form:?}): {ours} vs oracle {oracle}"
            );
        }
    }
}

#[test]
fn icc_six_subject_hand_table() {
    // Two raters over six subjects, worked through the raw-score oracle.
    let pairs = EvalPairs::new(
        vec![0.90, 0.55, 0.40, 0.75, 0.20, 0.65],
        vec![0.85, 0.60, 0.35, 0.80, 0.30, 0.60],
    )
    .unwrap();
    for form in [IccForm::TwoWayRandomSingle, IccForm::TwoWayMixedSingle] {
        let ours = icc(&pairs, form).unwrap();
        let oracle = icc_oracle(&pairs, form);
        assert!((ours - oracle).abs() < 1e-12, "{ours} vs {oracle}");
        assert!(ours > 0.8, "hand table is high-agreement, got {ours}");
    }
}

/// Similarity-weighted agreement form: with v = 1 - w,
/// kappa = (po_v - pe_v) / (1 - pe_v).
fn kappa_oracle(pairs: &EvalPairs, n_bins: usize, weighting: KappaWeighting) -> f64 {
    let bin = |x: f64| ((x * n_bins as f64).floor() as usize).min(n_bins - 1);
    let mut counts = vec![vec![0.0f64; n_bins]; n_bins];
    for (p, t) in pairs.preds().iter().zip(pairs.targets()) {
        counts[bin(*p)][bin(*t)] += 1.0;
    }
    let total = pairs.len() as f64;
    let rows: Vec<f64> = counts.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..n_bins).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    let sim = |i: usize, j: usize| {
        let d = (i as f64 - j as f64) / (n_bins - 1) as f64;
        match weighting {
            KappaWeighting::None => {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            }
            KappaWeighting::Linear => 1.0 - d.abs(),
            KappaWeighting::Quadratic => 1.0 - d * d,
        }
    };
    let mut po = 0.0;
    let mut pe = 0.0;
    for i in 0..n_bins {
        for j in 0..n_bins {
            po += sim(i, j) * counts[i][j] / total;
            pe += sim(i, j) * rows[i] * cols[j] / (total * total);
        }
    }
    if pe == 1.0 {
        return 1.0;
    }
    (po - pe) / (1.0 - pe)
}

#[test]
fn kappa_matches_similarity_form_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let weightings = [
        KappaWeighting::None,
        KappaWeighting::Linear,
        KappaWeighting::Quadratic,
    ];
    for i in 0..100 {
        let n = rng.random_range(5..=200);
        let pairs = random_pairs(&mut rng, n);
        let n_bins = rng.random_range(2..=12);
        for &weighting in &weightings {
            let cfg = KappaConfig::new(n_bins, weighting).unwrap();
            let ours = cohen_kappa(&pairs, &cfg);
            let oracle = kappa_oracle(&pairs, n_bins, weighting);
            assert!(
                (ours - oracle).abs() < 1e-10,
                "instance {i} bins {n_bins} {weighting:?}: {ours} vs {oracle}"
            );
        }
    }
}

#[test]
fn perfect_agreement_pins_every_metric() {
    let vals = vec![0.1, 0.35, 0.62, 0.88, 0.45, 0.72];
    let pairs = EvalPairs::new(vals.clone(), vals).unwrap();
    assert_eq!(mse(&pairs), 0.0);
    for form in [IccForm::TwoWayRandomSingle, IccForm::TwoWayMixedSingle] {
        assert!((icc(&pairs, form).unwrap() - 1.0).abs() < 1e-12);
    }
    for weighting in [
        KappaWeighting::None,
        KappaWeighting::Linear,
        KappaWeighting::Quadratic,
    ] {
        let cfg = KappaConfig::new(10, weighting).unwrap();
        assert!((cohen_kappa(&pairs, &cfg) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mse_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for _ in 0..100 {
        let n = rng.random_range(1..=100);
        let pairs = random_pairs(&mut rng, n);
        let mut acc = 0.0;
        for i in 0..pairs.len() {
            let d = pairs.preds()[i] - pairs.targets()[i];
            acc += d * d;
        }
        assert!((mse(&pairs) - acc / n as f64).abs() < 1e-12);
    }
}

/// Adaptive Simpson quadrature of the Student-t density over the upper
/// tail, mapped to a finite interval by x = t/u. Exercises none of the
/// implementation's special-function code except a third-party ln-gamma
/// for the normalizing constant.
fn t_two_sided_by_quadrature(t: f64, dof: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let t = t.abs().max(1e-12);
    let ln_const = ln_gamma((dof + 1.0) / 2.0)
        - ln_gamma(dof / 2.0)
        - 0.5 * (dof * std::f64::consts::PI).ln();
    let pdf = |x: f64| (ln_const - 0.5 * (dof + 1.0) * (1.0 + x * x / dof).ln()).exp();
    // Tail integral: substitute x = t/u, dx = -(t/u^2) du, u in (0, 1].
    let g = |u: f64| {
        if u <= 0.0 {
            0.0
        } else {
            pdf(t / u) * t / (u * u)
        }
    };
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fb: f64, fm: f64, eps: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() < 15.0 * eps {
            left + right + (left + right - whole) / 15.0
        } else {
            simpson(f, a, m, fa, fm, flm, eps / 2.0, depth - 1)
                + simpson(f, m, b, fm, fb, frm, eps / 2.0, depth - 1)
        }
    }
    let (a, b) = (0.0, 1.0);
    let (fa, fb, fm) = (g(a), g(b), g(0.5 * (a + b)));
    let tail = simpson(&g, a, b, fa, fb, fm, 1e-14, 40);
    2.0 * tail
}

#[test]
fn t_statistic_matches_direct_formula_and_p_matches_two_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for i in 0..100 {
        let n = rng.random_range(3..=30);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|v| (v + rng.random_range(-0.1..0.15)).max(0.0))
            .collect();
        let (t, p) = paired_t_test(&a, &b).unwrap();

        // Straight-line t statistic.
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let nf = n as f64;
        let mean = d.iter().sum::<f64>() / nf;
        let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0);
        let t_direct = mean / (var / nf).sqrt();
        assert!((t - t_direct).abs() < 1e-10, "instance {i}: t {t} vs {t_direct}");

        // Third-party distribution.
        let dist = StudentsT::new(0.0, 1.0, nf - 1.0).unwrap();
        let p_statrs = 2.0 * (1.0 - dist.cdf(t.abs()));
        assert!(
            (p - p_statrs).abs() < 1e-10,
            "instance {i}: p {p} vs statrs {p_statrs}"
        );

        // Direct quadrature of the density.
        let p_quad = t_two_sided_by_quadrature(t, nf - 1.0);
        assert!(
            (p - p_quad).abs() < 1e-9,
            "instance {i}: p {p} vs quadrature {p_quad}"
        );
    }
}

#[test]
fn location_shift_drives_p_toward_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let base: Vec<f64> = (0..20).map(|_| rng.random_range(0.2..0.4)).collect();
    let mut last_p = 1.1;
    for shift in [0.001, 0.01, 0.05, 0.2] {
        let shifted: Vec<f64> = base
            .iter()
            .map(|v| v + shift + rng.random_range(-1e-4..1e-4))
            .collect();
        let (_, p) = paired_t_test(&shifted, &base).unwrap();
        assert!(p < last_p, "shift {shift}: p {p} did not decrease");
        last_p = p;
    }
    assert!(last_p < 1e-10);
}

#[test]
fn cdf_agrees_with_third_party_across_the_range() {
    for dof in [1.0, 2.0, 5.0, 10.0, 50.0] {
        let dist = StudentsT::new(0.0, 1.0, dof).unwrap();
        for t in [-6.0, -2.5, -1.0, -0.3, 0.0, 0.4, 1.7, 3.0, 8.0] {
            let ours = ultra_core::student_t_cdf(t, dof);
            let theirs = dist.cdf(t);
            assert!(
                (ours - theirs).abs() < 1e-10,
                "t {t} dof {dof}: {ours} vs {theirs}"
            );
        }
    }
    // Two-sided helper is consistent with the CDF.
    let p = student_t_two_sided_p(1.3, 7.0);
    let dist = StudentsT::new(0.0, 1.0, 7.0).unwrap();
    assert!((p - 2.0 * (1.0 - dist.cdf(1.3))).abs() < 1e-12);
}
