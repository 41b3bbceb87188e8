//! Shared fixtures for the criterion benchmarks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ultra_core::{
    compute_norm_stats, generate, Dataset, EvalPairs, GeneratorConfig, UltraConfig, UltraModel,
};

/// Synthetic 16x16 patches from the default generator.
pub fn patches(count: usize, seed: u64) -> Dataset {
    let cfg = GeneratorConfig {
        seed,
        ..GeneratorConfig::default()
    };
    generate(&cfg, count).expect("generator fixture")
}

/// A freshly initialised model in the shipped shape, plus a batch to feed it.
pub fn shipped_model(batch: usize) -> (UltraModel, Dataset) {
    let data = patches(batch.max(1), 9);
    let norm = compute_norm_stats(&data).expect("norm fixture");
    let model = UltraModel::new(UltraConfig::default(), norm).expect("model fixture");
    (model, data)
}

/// Correlated prediction/target pairs with uniform targets and bounded noise.
pub fn scored_pairs(count: usize, seed: u64) -> EvalPairs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preds = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for _ in 0..count {
        let t: f64 = rng.random_range(0.0..=1.0);
        let p = (t + rng.random_range(-0.1..=0.1)).clamp(0.0, 1.0);
        targets.push(t);
        preds.push(p);
    }
    EvalPairs::new(preds, targets).expect("pairs fixture")
}
