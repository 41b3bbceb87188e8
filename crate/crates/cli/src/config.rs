//! Flat key=value run configuration: one file drives every command.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! skipped. Unknown and duplicate keys are errors (with 1-based line
//! numbers) so a typo can never silently fall back to a default. Every key
//! has a default, so a config file only needs the keys it overrides.

use std::fmt;
use std::path::PathBuf;

use ultra_core::{
    AugmentationSpec, GeneratorConfig, KlDirection, LossMode, TrainConfig, UltraConfig,
};

/// Every tunable across the pipeline, in one flat struct.
///
/// `dataset_path` switches the data source: when set, commands load that
/// file instead of generating from the `gen_*` keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // dataset
    pub n_samples: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub split_seed: u64,
    pub dataset_path: Option<PathBuf>,
    // generator
    pub gen_height: usize,
    pub gen_width: usize,
    pub gen_cells_min: usize,
    pub gen_cells_max: usize,
    pub gen_malignant_lo: f64,
    pub gen_malignant_hi: f64,
    pub gen_benign_lo: f64,
    pub gen_benign_hi: f64,
    pub gen_radius_min: f64,
    pub gen_radius_max: f64,
    pub gen_noise_std: f64,
    pub gen_label_zero_prob: f64,
    pub gen_label_one_prob: f64,
    pub gen_seed: u64,
    // model
    pub n_branches: usize,
    pub branch_weights: Vec<f64>,
    pub n_labels: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub epsilon_floor: f64,
    pub kl_direction: KlDirection,
    pub loss: LossMode,
    pub input_dim: usize,
    pub backbone_dims: Vec<usize>,
    pub head_dims: Vec<usize>,
    pub model_seed: u64,
    // augmentation
    pub aug_hflip_prob: f64,
    pub aug_vflip_prob: f64,
    pub aug_rot90_prob: f64,
    pub aug_noise_prob: f64,
    pub aug_noise_std: f64,
    // training
    pub base_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub train_seed: u64,
    // outputs
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GeneratorConfig::default();
        let ultra = UltraConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            n_samples: 2500,
            split_train: 0.8,
            split_val: 0.2,
            split_test: 0.0,
            split_seed: 7,
            dataset_path: None,
            gen_height: gen.height,
            gen_width: gen.width,
            gen_cells_min: gen.cells_min,
            gen_cells_max: gen.cells_max,
            gen_malignant_lo: gen.malignant_intensity.0,
            gen_malignant_hi: gen.malignant_intensity.1,
            gen_benign_lo: gen.benign_intensity.0,
            gen_benign_hi: gen.benign_intensity.1,
            gen_radius_min: gen.cell_radius.0,
            gen_radius_max: gen.cell_radius.1,
            gen_noise_std: gen.noise_std,
            gen_label_zero_prob: gen.label_zero_prob,
            gen_label_one_prob: gen.label_one_prob,
            gen_seed: gen.seed,
            n_branches: ultra.n_branches,
            branch_weights: ultra.branch_weights,
            n_labels: ultra.n_labels,
            sigma: ultra.sigma,
            alpha: ultra.alpha,
            epsilon_floor: ultra.epsilon_floor,
            kl_direction: ultra.kl_direction,
            loss: ultra.loss_mode,
            input_dim: ultra.input_dim,
            backbone_dims: ultra.backbone_dims,
            head_dims: ultra.head_dims,
            model_seed: ultra.seed,
            aug_hflip_prob: ultra.augmentation.hflip_prob,
            aug_vflip_prob: ultra.augmentation.vflip_prob,
            aug_rot90_prob: ultra.augmentation.rot90_prob,
            aug_noise_prob: ultra.augmentation.noise_prob,
            aug_noise_std: ultra.augmentation.noise_std,
            base_lr: train.base_lr,
            adam_beta1: train.beta1,
            adam_beta2: train.beta2,
            adam_eps: train.adam_eps,
            batch_size: train.batch_size,
            epochs_stage1: 20,
            epochs_stage2: 40,
            train_seed: train.seed,
            checkpoint_path: PathBuf::from("model.ultc"),
            log_path: PathBuf::from("train_log.csv"),
        }
    }
}

/// Parse failure with the 1-based line it occurred on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigParseError {
    pub line: usize,
    pub what: String,
}

impl fmt::Display for ConfigParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.what)
    }
}

impl std::error::Error for ConfigParseError {}

fn err(line: usize, what: impl Into<String>) -> ConfigParseError {
    ConfigParseError {
        line,
        what: what.into(),
    }
}

fn parse_usize(v: &str, line: usize, key: &str) -> Result<usize, ConfigParseError> {
    v.parse()
        .map_err(|_| err(line, format!("{key}: expected a nonnegative integer, got `{v}`")))
}

fn parse_u64(v: &str, line: usize, key: &str) -> Result<u64, ConfigParseError> {
    v.parse()
        .map_err(|_| err(line, format!("{key}: expected an unsigned integer, got `{v}`")))
}

fn parse_f64(v: &str, line: usize, key: &str) -> Result<f64, ConfigParseError> {
    let x: f64 = v
        .parse()
        .map_err(|_| err(line, format!("{key}: expected a number, got `{v}`")))?;
    if !x.is_finite() {
        return Err(err(line, format!("{key}: must be finite, got `{v}`")));
    }
    Ok(x)
}

fn parse_f64_list(v: &str, line: usize, key: &str) -> Result<Vec<f64>, ConfigParseError> {
    v.split(',')
        .map(|item| parse_f64(item.trim(), line, key))
        .collect()
}

fn parse_usize_list(v: &str, line: usize, key: &str) -> Result<Vec<usize>, ConfigParseError> {
    v.split(',')
        .map(|item| parse_usize(item.trim(), line, key))
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Parse config text, applying overrides on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigParseError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `key = value`, got `{trimmed}`")))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(line, format!("duplicate key `{key}`")));
            }
            cfg.apply(key, value, line)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str, line: usize) -> Result<(), ConfigParseError> {
        match key {
            "n_samples" => self.n_samples = parse_usize(v, line, key)?,
            "split_train" => self.split_train = parse_f64(v, line, key)?,
            "split_val" => self.split_val = parse_f64(v, line, key)?,
            "split_test" => self.split_test = parse_f64(v, line, key)?,
            "split_seed" => self.split_seed = parse_u64(v, line, key)?,
            "dataset_path" => {
                self.dataset_path = if v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "gen_height" => self.gen_height = parse_usize(v, line, key)?,
            "gen_width" => self.gen_width = parse_usize(v, line, key)?,
            "gen_cells_min" => self.gen_cells_min = parse_usize(v, line, key)?,
            "gen_cells_max" => self.gen_cells_max = parse_usize(v, line, key)?,
            "gen_malignant_lo" => self.gen_malignant_lo = parse_f64(v, line, key)?,
            "gen_malignant_hi" => self.gen_malignant_hi = parse_f64(v, line, key)?,
            "gen_benign_lo" => self.gen_benign_lo = parse_f64(v, line, key)?,
            "gen_benign_hi" => self.gen_benign_hi = parse_f64(v, line, key)?,
            "gen_radius_min" => self.gen_radius_min = parse_f64(v, line, key)?,
            "gen_radius_max" => self.gen_radius_max = parse_f64(v, line, key)?,
            "gen_noise_std" => self.gen_noise_std = parse_f64(v, line, key)?,
            "gen_label_zero_prob" => self.gen_label_zero_prob = parse_f64(v, line, key)?,
            "gen_label_one_prob" => self.gen_label_one_prob = parse_f64(v, line, key)?,
            "gen_seed" => self.gen_seed = parse_u64(v, line, key)?,
            "n_branches" => self.n_branches = parse_usize(v, line, key)?,
            "branch_weights" => self.branch_weights = parse_f64_list(v, line, key)?,
            "n_labels" => self.n_labels = parse_usize(v, line, key)?,
            "sigma" => self.sigma = parse_f64(v, line, key)?,
            "alpha" => self.alpha = parse_f64(v, line, key)?,
            "epsilon_floor" => self.epsilon_floor = parse_f64(v, line, key)?,
            "kl_direction" => {
                self.kl_direction = match v {
                    "pred_target" => KlDirection::PredTarget,
                    "target_pred" => KlDirection::TargetPred,
                    _ => {
                        return Err(err(
                            line,
                            format!("{key}: expected `pred_target` or `target_pred`, got `{v}`"),
                        ))
                    }
                }
            }
            "loss" => {
                self.loss = match v {
                    "joint" => LossMode::Joint,
                    "kl_only" => LossMode::KlOnly,
                    "mse_only" => LossMode::MseOnly,
                    _ => {
                        return Err(err(
                            line,
                            format!("{key}: expected `joint`, `kl_only`, or `mse_only`, got `{v}`"),
                        ))
                    }
                }
            }
            "input_dim" => self.input_dim = parse_usize(v, line, key)?,
            "backbone_dims" => self.backbone_dims = parse_usize_list(v, line, key)?,
            "head_dims" => self.head_dims = parse_usize_list(v, line, key)?,
            "model_seed" => self.model_seed = parse_u64(v, line, key)?,
            "aug_hflip_prob" => self.aug_hflip_prob = parse_f64(v, line, key)?,
            "aug_vflip_prob" => self.aug_vflip_prob = parse_f64(v, line, key)?,
            "aug_rot90_prob" => self.aug_rot90_prob = parse_f64(v, line, key)?,
            "aug_noise_prob" => self.aug_noise_prob = parse_f64(v, line, key)?,
            "aug_noise_std" => self.aug_noise_std = parse_f64(v, line, key)?,
            "base_lr" => self.base_lr = parse_f64(v, line, key)?,
            "adam_beta1" => self.adam_beta1 = parse_f64(v, line, key)?,
            "adam_beta2" => self.adam_beta2 = parse_f64(v, line, key)?,
            "adam_eps" => self.adam_eps = parse_f64(v, line, key)?,
            "batch_size" => self.batch_size = parse_usize(v, line, key)?,
            "epochs_stage1" => self.epochs_stage1 = parse_usize(v, line, key)?,
            "epochs_stage2" => self.epochs_stage2 = parse_usize(v, line, key)?,
            "train_seed" => self.train_seed = parse_u64(v, line, key)?,
            "checkpoint_path" => self.checkpoint_path = PathBuf::from(v),
            "log_path" => self.log_path = PathBuf::from(v),
            _ => return Err(err(line, format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical serialization: every key, fixed order. `parse` of the
    /// result reproduces the config exactly (floats print in Rust's
    /// shortest round-trip form).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("n_samples", self.n_samples.to_string());
        kv("split_train", self.split_train.to_string());
        kv("split_val", self.split_val.to_string());
        kv("split_test", self.split_test.to_string());
        kv("split_seed", self.split_seed.to_string());
        kv(
            "dataset_path",
            self.dataset_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("gen_height", self.gen_height.to_string());
        kv("gen_width", self.gen_width.to_string());
        kv("gen_cells_min", self.gen_cells_min.to_string());
        kv("gen_cells_max", self.gen_cells_max.to_string());
        kv("gen_malignant_lo", self.gen_malignant_lo.to_string());
        kv("gen_malignant_hi", self.gen_malignant_hi.to_string());
        kv("gen_benign_lo", self.gen_benign_lo.to_string());
        kv("gen_benign_hi", self.gen_benign_hi.to_string());
        kv("gen_radius_min", self.gen_radius_min.to_string());
        kv("gen_radius_max", self.gen_radius_max.to_string());
        kv("gen_noise_std", self.gen_noise_std.to_string());
        kv("gen_label_zero_prob", self.gen_label_zero_prob.to_string());
        kv("gen_label_one_prob", self.gen_label_one_prob.to_string());
        kv("gen_seed", self.gen_seed.to_string());
        kv("n_branches", self.n_branches.to_string());
        kv("branch_weights", join(&self.branch_weights));
        kv("n_labels", self.n_labels.to_string());
        kv("sigma", self.sigma.to_string());
        kv("alpha", self.alpha.to_string());
        kv("epsilon_floor", self.epsilon_floor.to_string());
        kv(
            "kl_direction",
            match self.kl_direction {
                KlDirection::PredTarget => "pred_target".to_string(),
                KlDirection::TargetPred => "target_pred".to_string(),
            },
        );
        kv(
            "loss",
            match self.loss {
                LossMode::Joint => "joint".to_string(),
                LossMode::KlOnly => "kl_only".to_string(),
                LossMode::MseOnly => "mse_only".to_string(),
            },
        );
        kv("input_dim", self.input_dim.to_string());
        kv("backbone_dims", join(&self.backbone_dims));
        kv("head_dims", join(&self.head_dims));
        kv("model_seed", self.model_seed.to_string());
        kv("aug_hflip_prob", self.aug_hflip_prob.to_string());
        kv("aug_vflip_prob", self.aug_vflip_prob.to_string());
        kv("aug_rot90_prob", self.aug_rot90_prob.to_string());
        kv("aug_noise_prob", self.aug_noise_prob.to_string());
        kv("aug_noise_std", self.aug_noise_std.to_string());
        kv("base_lr", self.base_lr.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs_stage1", self.epochs_stage1.to_string());
        kv("epochs_stage2", self.epochs_stage2.to_string());
        kv("train_seed", self.train_seed.to_string());
        kv(
            "checkpoint_path",
            self.checkpoint_path.display().to_string(),
        );
        kv("log_path", self.log_path.display().to_string());
        s
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            height: self.gen_height,
            width: self.gen_width,
            cells_min: self.gen_cells_min,
            cells_max: self.gen_cells_max,
            malignant_intensity: (self.gen_malignant_lo, self.gen_malignant_hi),
            benign_intensity: (self.gen_benign_lo, self.gen_benign_hi),
            cell_radius: (self.gen_radius_min, self.gen_radius_max),
            noise_std: self.gen_noise_std,
            label_zero_prob: self.gen_label_zero_prob,
            label_one_prob: self.gen_label_one_prob,
            seed: self.gen_seed,
        }
    }

    pub fn ultra(&self) -> UltraConfig {
        UltraConfig {
            n_branches: self.n_branches,
            branch_weights: self.branch_weights.clone(),
            sigma: self.sigma,
            alpha: self.alpha,
            n_labels: self.n_labels,
            input_dim: self.input_dim,
            backbone_dims: self.backbone_dims.clone(),
            head_dims: self.head_dims.clone(),
            seed: self.model_seed,
            kl_direction: self.kl_direction,
            epsilon_floor: self.epsilon_floor,
            loss_mode: self.loss,
            augmentation: AugmentationSpec {
                hflip_prob: self.aug_hflip_prob,
                vflip_prob: self.aug_vflip_prob,
                rot90_prob: self.aug_rot90_prob,
                noise_prob: self.aug_noise_prob,
                noise_std: self.aug_noise_std,
            },
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            batch_size: self.batch_size,
            epochs_stage1: self.epochs_stage1,
            epochs_stage2: self.epochs_stage2,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: self.train_seed,
        }
    }

    /// Check everything before any work starts: each derived config's own
    /// preconditions plus the cross-cutting rules.
    pub fn validate(&self) -> Result<(), String> {
        self.generator().validate().map_err(|e| e.to_string())?;
        self.ultra().validate().map_err(|e| e.to_string())?;
        self.train().validate().map_err(|e| e.to_string())?;
        for (name, f) in [
            ("split_train", self.split_train),
            ("split_val", self.split_val),
            ("split_test", self.split_test),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(format!("{name} must lie in [0, 1], got {f}"));
            }
        }
        let sum = self.split_train + self.split_val + self.split_test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("split fractions must sum to 1, got {sum}"));
        }
        if self.dataset_path.is_none() {
            if self.n_samples == 0 {
                return Err("n_samples must be at least 1 when generating".to_string());
            }
            let expected = self.gen_height * self.gen_width;
            if self.input_dim != expected {
                return Err(format!(
                    "input_dim {} does not match gen_height*gen_width = {expected}",
                    self.input_dim
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_round_trip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.n_samples = 123;
        cfg.sigma = 0.0625;
        cfg.base_lr = 3.5e-4;
        cfg.branch_weights = vec![0.5, 1.5, 1.0];
        cfg.backbone_dims = vec![10, 20, 30];
        cfg.dataset_path = Some(PathBuf::from("/tmp/data.ulds"));
        cfg.loss = LossMode::KlOnly;
        cfg.kl_direction = KlDirection::TargetPred;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_an_error_with_its_line_number() {
        let e = RunConfig::parse("n_samples = 10\nn_sample = 10\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.what.contains("unknown key `n_sample`"), "{}", e.what);
    }

    #[test]
    fn duplicate_key_is_an_error() {
        let e = RunConfig::parse("sigma = 0.04\n\nsigma = 0.05\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.what.contains("duplicate key `sigma`"));
    }

    #[test]
    fn missing_equals_is_an_error() {
        let e = RunConfig::parse("# fine\nsigma 0.04\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.what.contains("key = value"));
    }

    #[test]
    fn bad_values_name_the_key_and_line() {
        let e = RunConfig::parse("batch_size = eight\n").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(e.what.contains("batch_size"));

        let e = RunConfig::parse("\nsigma = inf\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.what.contains("finite"));

        let e = RunConfig::parse("loss = both\n").unwrap_err();
        assert!(e.what.contains("joint"));
    }

    #[test]
    fn comments_blanks_and_whitespace_are_tolerated() {
        let cfg = RunConfig::parse("  # header\n\n  n_samples =  42  \n# trailer\n").unwrap();
        assert_eq!(cfg.n_samples, 42);
    }

    #[test]
    fn empty_dataset_path_means_generate() {
        let cfg = RunConfig::parse("dataset_path =\n").unwrap();
        assert_eq!(cfg.dataset_path, None);
        let cfg = RunConfig::parse("dataset_path = d.ulds\n").unwrap();
        assert_eq!(cfg.dataset_path, Some(PathBuf::from("d.ulds")));
    }

    #[test]
    fn lists_parse_with_spaces() {
        let cfg = RunConfig::parse("branch_weights = 1, 0.5 ,2\nhead_dims = 8,4\n").unwrap();
        assert_eq!(cfg.branch_weights, vec![1.0, 0.5, 2.0]);
        assert_eq!(cfg.head_dims, vec![8, 4]);
    }

    #[test]
    fn validate_accepts_the_defaults() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn validate_rejects_cross_field_inconsistencies() {
        let mut cfg = RunConfig::default();
        cfg.input_dim = 100;
        assert!(cfg.validate().unwrap_err().contains("input_dim"));

        let mut cfg = RunConfig::default();
        cfg.split_val = 0.3;
        assert!(cfg.validate().unwrap_err().contains("sum to 1"));

        let mut cfg = RunConfig::default();
        cfg.branch_weights = vec![1.0];
        assert!(cfg.validate().is_err());
    }
}
