//! The six subcommands. Each is a plain function so the acceptance and
//! integration suites can drive the same code paths the binary does.
//!
//! Output discipline: machine-readable CSV goes to stdout, human progress
//! and summaries go to stderr. Reruns with the same config produce
//! byte-identical files and stdout.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::CliError;
use ultra_core::{
    cohen_kappa, compute_norm_stats, derive_seed, encode, evaluate, generate, icc, load_dataset,
    make_grid, mse, save_dataset, split, write_labels_csv, Dataset, EncoderConfig, EpochRecord,
    EvalPairs, IccForm, KappaConfig, LossMode, NormStats, TcScore, Trainer, UltraError,
    UltraModel, DEFAULT_EPSILON_FLOOR,
};

/// Which hyperparameter a sweep walks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Sigma,
    Branches,
}

pub fn read_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg = RunConfig::parse(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn load_ulds(path: &Path) -> Result<Dataset, CliError> {
    load_dataset(path).map_err(|e| match e {
        UltraError::VersionMismatch { .. } => {
            CliError::VersionMismatch(format!("{}: {e}", path.display()))
        }
        other => CliError::Io(format!("{}: {other}", path.display())),
    })
}

/// Load the configured dataset file, or generate one in memory.
pub fn obtain_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.dataset_path {
        Some(path) => load_ulds(path),
        None => generate(&cfg.generator(), cfg.n_samples)
            .map_err(|e| CliError::Config(e.to_string())),
    }
}

/// Dataset splits plus normalization stats computed from the training split.
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub norm: NormStats,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData, CliError> {
    let data = obtain_dataset(cfg)?;
    let (train, val, test) = split(
        &data,
        (cfg.split_train, cfg.split_val, cfg.split_test),
        cfg.split_seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let norm = compute_norm_stats(&train).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(PreparedData {
        train,
        val,
        test,
        norm,
    })
}

/// Deployed-score predictions over a dataset, one fresh augmentation draw
/// per branch per sample, seeded per sample index. Every model is scored
/// with the same fused readout, whatever loss it was trained under.
pub fn predict_pairs(model: &UltraModel, ds: &Dataset, seed: u64) -> Result<EvalPairs, CliError> {
    let mut preds = Vec::with_capacity(ds.len());
    let mut targets = Vec::with_capacity(ds.len());
    for (i, sample) in ds.samples.iter().enumerate() {
        let p = model
            .predict(&sample.patch, derive_seed(seed, &[i as u64]))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        preds.push(p.final_score);
        targets.push(sample.label);
    }
    EvalPairs::from_scores(&preds, &targets).map_err(|e| CliError::Runtime(e.to_string()))
}

fn csv_record(rec: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        rec.epoch, rec.stage, rec.lr, rec.train_loss, rec.val_mse, rec.val_icc, rec.val_kappa
    )
}

pub const LOG_HEADER: &str = "epoch,stage,lr,train_loss,val_mse,val_icc,val_kappa\n";

pub fn cmd_generate(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = read_run_config(config_path)?;
    let ds = generate(&cfg.generator(), cfg.n_samples)
        .map_err(|e| CliError::Config(e.to_string()))?;
    save_dataset(&ds, out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let csv = out.with_extension("csv");
    write_labels_csv(&ds, &csv).map_err(|e| CliError::Io(format!("{}: {e}", csv.display())))?;

    let mut bins = [0usize; 10];
    for s in &ds.samples {
        let b = ((s.label.value() * 10.0).floor() as usize).min(9);
        bins[b] += 1;
    }
    println!("samples: {}", ds.len());
    println!("label histogram (10 equal bins, last right-inclusive):");
    for (i, count) in bins.iter().enumerate() {
        let close = if i == 9 { ']' } else { ')' };
        println!(
            "  [{:.1},{:.1}{close} {count}",
            i as f64 / 10.0,
            (i + 1) as f64 / 10.0
        );
    }
    Ok(())
}

fn trainer_checkpoint(cfg: &RunConfig, trainer: &Trainer) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        norm: *trainer.model().norm(),
        params: trainer.model().params(),
        adam: trainer.adam().clone(),
        epoch: trainer.epoch() as u32,
    }
}

pub fn cmd_train(config_path: &Path) -> Result<(), CliError> {
    let cfg = read_run_config(config_path)?;
    let data = prepare_data(&cfg)?;
    let model = UltraModel::new(cfg.ultra(), data.norm)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut trainer =
        Trainer::new(model, cfg.train()).map_err(|e| CliError::Config(e.to_string()))?;

    let mut log = fs::File::create(&cfg.log_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", cfg.log_path.display())))?;
    let log_io = |e: std::io::Error| CliError::Io(format!("{}: {e}", cfg.log_path.display()));
    log.write_all(LOG_HEADER.as_bytes()).map_err(log_io)?;

    let total = cfg.train().total_epochs();
    while !trainer.is_finished() {
        match trainer.run_epoch(&data.train, &data.val) {
            Ok(rec) => {
                log.write_all(csv_record(&rec).as_bytes()).map_err(log_io)?;
                log.flush().map_err(log_io)?;
                save_checkpoint(&cfg.checkpoint_path, &trainer_checkpoint(&cfg, &trainer))?;
                eprintln!(
                    "epoch {}/{} stage {} lr {} train_loss {:.6} val_mse {:.6} val_icc {:.4}",
                    rec.epoch + 1,
                    total,
                    rec.stage,
                    rec.lr,
                    rec.train_loss,
                    rec.val_mse,
                    rec.val_icc
                );
            }
            // Overflowed parameters can surface as a non-finite loss or as
            // non-finite values hit during a forward pass; either way the
            // checkpoint on disk stays at the last completed epoch.
            Err(e @ (UltraError::NonFiniteLoss { .. } | UltraError::NonFinite { .. })) => {
                return Err(CliError::NonFiniteLoss(format!(
                    "training diverged: {e}; the checkpoint at {} is from the last completed epoch",
                    cfg.checkpoint_path.display()
                )));
            }
            Err(e) => return Err(CliError::Runtime(e.to_string())),
        }
    }
    if let Some(best) = trainer.best() {
        eprintln!(
            "done: best val_mse {:.6} at epoch {}; checkpoint {}",
            best.val_mse,
            best.epoch + 1,
            cfg.checkpoint_path.display()
        );
    }
    Ok(())
}

/// Arguments for `cmd_eval`, mirroring the flag set.
pub struct EvalArgs {
    pub icc_form: IccForm,
    pub kappa_bins: usize,
    pub kappa_weighting: ultra_core::KappaWeighting,
    pub bootstrap_b: usize,
    pub seed: u64,
}

pub fn cmd_eval(checkpoint: &Path, dataset: &Path, args: &EvalArgs) -> Result<(), CliError> {
    let cp = crate::checkpoint::load_checkpoint(checkpoint)?;
    let model = crate::checkpoint::rebuild_model(&cp)?;
    let ds = load_ulds(dataset)?;
    let pairs = predict_pairs(&model, &ds, args.seed)?;
    let kappa_cfg = KappaConfig::new(args.kappa_bins, args.kappa_weighting)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let report = evaluate(
        &pairs,
        args.icc_form,
        &kappa_cfg,
        args.bootstrap_b,
        0.95,
        args.seed,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    eprintln!("n = {}", report.n);
    eprintln!("{:<8} {:>10} {:>24}", "metric", "point", "95% interval");
    for (name, point, ci) in [
        ("icc", report.icc, report.icc_ci),
        ("kappa", report.kappa, report.kappa_ci),
        ("mse", report.mse, report.mse_ci),
    ] {
        eprintln!(
            "{name:<8} {point:>10.4} [{:>10.4}, {:>10.4}]",
            ci.0, ci.1
        );
    }

    let mut out = String::from("metric,point,lo,hi\n");
    for (name, point, ci) in [
        ("icc", report.icc, report.icc_ci),
        ("kappa", report.kappa, report.kappa_ci),
        ("mse", report.mse, report.mse_ci),
    ] {
        out.push_str(&format!("{name},{point},{},{}\n", ci.0, ci.1));
    }
    print!("{out}");
    Ok(())
}

pub fn cmd_encode(s: f64, n: usize, sigma: f64) -> Result<(), CliError> {
    let score = TcScore::new(s).map_err(|e| CliError::Config(e.to_string()))?;
    let grid = make_grid(n).map_err(|e| CliError::Config(e.to_string()))?;
    let enc = EncoderConfig::new(sigma, DEFAULT_EPSILON_FLOOR)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let dist = encode(score, &grid, &enc).map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = String::from("value,probability\n");
    for (g, p) in grid.values().iter().zip(dist.probs()) {
        out.push_str(&format!("{g},{p}\n"));
    }
    print!("{out}");
    Ok(())
}

/// Branch-count variants reuse the configured weights when the count
/// matches; any other count gets uniform weights.
fn branch_weights_for(cfg: &RunConfig, n: usize) -> Vec<f64> {
    if n == cfg.n_branches {
        cfg.branch_weights.clone()
    } else {
        vec![1.0; n]
    }
}

/// Train one variant to completion and return (icc, kappa, mse) on the
/// validation split plus the largest per-epoch KL gradient norm seen.
fn run_variant(
    cfg: &RunConfig,
    data: &PreparedData,
) -> Result<(f64, f64, f64, f64), CliError> {
    let model = UltraModel::new(cfg.ultra(), data.norm)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut trainer =
        Trainer::new(model, cfg.train()).map_err(|e| CliError::Config(e.to_string()))?;
    let mut max_kl_norm = 0.0f64;
    while !trainer.is_finished() {
        let rec = trainer.run_epoch(&data.train, &data.val).map_err(|e| match e {
            UltraError::NonFiniteLoss { .. } | UltraError::NonFinite { .. } => {
                CliError::NonFiniteLoss(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        })?;
        max_kl_norm = max_kl_norm.max(rec.kl_grad_norm);
    }
    let pairs = predict_pairs(trainer.model(), &data.val, cfg.train_seed)?;
    let icc_v = icc(&pairs, IccForm::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
    let kappa_v = cohen_kappa(&pairs, &KappaConfig::default());
    let mse_v = mse(&pairs);
    Ok((icc_v, kappa_v, mse_v, max_kl_norm))
}

fn parse_sweep_values(
    axis: SweepAxis,
    values: Option<&str>,
) -> Result<Vec<f64>, CliError> {
    match values {
        None => Ok(match axis {
            // Ten evenly spaced points across the interval the encoder
            // sweep is defined over.
            SweepAxis::Sigma => (0..10).map(|i| 0.01 + 0.01 * i as f64).collect(),
            SweepAxis::Branches => (1..=5).map(|n| n as f64).collect(),
        }),
        Some(list) => {
            let mut out = Vec::new();
            for item in list.split(',') {
                let item = item.trim();
                match axis {
                    SweepAxis::Sigma => {
                        let v: f64 = item.parse().map_err(|_| {
                            CliError::Config(format!("--values: expected a number, got `{item}`"))
                        })?;
                        out.push(v);
                    }
                    SweepAxis::Branches => {
                        let v: usize = item.parse().map_err(|_| {
                            CliError::Config(format!(
                                "--values: expected a branch count, got `{item}`"
                            ))
                        })?;
                        out.push(v as f64);
                    }
                }
            }
            if out.is_empty() {
                return Err(CliError::Config("--values: empty list".to_string()));
            }
            Ok(out)
        }
    }
}

fn sweep_point_config(cfg: &RunConfig, axis: SweepAxis, value: f64) -> RunConfig {
    let mut point = cfg.clone();
    match axis {
        SweepAxis::Sigma => point.sigma = value,
        SweepAxis::Branches => {
            let n = value as usize;
            point.n_branches = n;
            point.branch_weights = branch_weights_for(cfg, n);
        }
    }
    point
}

fn format_sweep_value(axis: SweepAxis, value: f64) -> String {
    match axis {
        SweepAxis::Sigma => value.to_string(),
        SweepAxis::Branches => (value as usize).to_string(),
    }
}

/// One sweep row: the axis value and val-split metrics (NaN on failure).
pub struct SweepRow {
    pub value: f64,
    pub icc: f64,
    pub kappa: f64,
    pub mse: f64,
    pub failed: bool,
}

/// Train and evaluate one point per value over shared data and seeds.
pub fn sweep_rows(
    cfg: &RunConfig,
    data: &PreparedData,
    axis: SweepAxis,
    values: &[f64],
    mut on_row: impl FnMut(&SweepRow),
) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let point = sweep_point_config(cfg, axis, value);
        let row = match point
            .validate()
            .map_err(CliError::Config)
            .and_then(|()| run_variant(&point, data))
        {
            Ok((icc_v, kappa_v, mse_v, _)) => SweepRow {
                value,
                icc: icc_v,
                kappa: kappa_v,
                mse: mse_v,
                failed: false,
            },
            Err(e) => {
                eprintln!("sweep point {}: {e}", format_sweep_value(axis, value));
                SweepRow {
                    value,
                    icc: f64::NAN,
                    kappa: f64::NAN,
                    mse: f64::NAN,
                    failed: true,
                }
            }
        };
        on_row(&row);
        rows.push(row);
    }
    rows
}

pub fn cmd_sweep(
    config_path: &Path,
    axis: SweepAxis,
    values: Option<&str>,
) -> Result<(), CliError> {
    let cfg = read_run_config(config_path)?;
    let values = parse_sweep_values(axis, values)?;
    let data = prepare_data(&cfg)?;

    println!("value,icc,kappa,mse");
    let rows = sweep_rows(&cfg, &data, axis, &values, |row| {
        println!(
            "{},{},{},{}",
            format_sweep_value(axis, row.value),
            row.icc,
            row.kappa,
            row.mse
        );
        let _ = std::io::stdout().flush();
    });
    let failures = rows.iter().filter(|r| r.failed).count();
    if failures > 0 {
        return Err(CliError::Runtime(format!(
            "{failures} sweep point(s) failed; their rows hold NaN"
        )));
    }
    Ok(())
}

/// One ablation row. `table` groups the loss variants apart from the
/// branch-count variants.
pub struct AblationRow {
    pub table: &'static str,
    pub variant: String,
    pub icc: f64,
    pub kappa: f64,
    pub mse: f64,
    pub max_kl_grad_norm: f64,
}

/// The six ablation variants: three losses at the configured branch count,
/// then branch counts 1..3 at the full joint loss. A variant that appears
/// in both groups is trained once and listed twice.
pub fn ablation_rows(cfg: &RunConfig, data: &PreparedData) -> Result<Vec<AblationRow>, CliError> {
    let loss_tag = |m: LossMode| match m {
        LossMode::Joint => 0u8,
        LossMode::KlOnly => 1,
        LossMode::MseOnly => 2,
    };
    let mut cache: HashMap<(u8, usize), (f64, f64, f64, f64)> = HashMap::new();
    let mut rows = Vec::with_capacity(6);

    let variants: [(&'static str, String, LossMode, usize); 6] = [
        ("loss", "full".to_string(), LossMode::Joint, cfg.n_branches),
        ("loss", "kl_only".to_string(), LossMode::KlOnly, cfg.n_branches),
        ("loss", "mse_only".to_string(), LossMode::MseOnly, cfg.n_branches),
        ("branches", "1".to_string(), LossMode::Joint, 1),
        ("branches", "2".to_string(), LossMode::Joint, 2),
        ("branches", "3".to_string(), LossMode::Joint, 3),
    ];

    for (table, variant, mode, n) in variants {
        let key = (loss_tag(mode), n);
        let result = match cache.get(&key) {
            Some(&hit) => hit,
            None => {
                let mut point = cfg.clone();
                point.loss = mode;
                point.n_branches = n;
                point.branch_weights = branch_weights_for(cfg, n);
                point.validate().map_err(CliError::Config)?;
                let r = run_variant(&point, data)?;
                cache.insert(key, r);
                r
            }
        };
        let (icc_v, kappa_v, mse_v, max_kl) = result;
        eprintln!("variant {table}/{variant}: max kl grad norm over training = {max_kl}");
        rows.push(AblationRow {
            table,
            variant,
            icc: icc_v,
            kappa: kappa_v,
            mse: mse_v,
            max_kl_grad_norm: max_kl,
        });
    }
    Ok(rows)
}

pub fn cmd_ablate(config_path: &Path) -> Result<(), CliError> {
    let cfg = read_run_config(config_path)?;
    let data = prepare_data(&cfg)?;
    let rows = ablation_rows(&cfg, &data)?;
    let mut out = String::from("table,variant,icc,kappa,mse\n");
    for row in &rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.table, row.variant, row.icc, row.kappa, row.mse
        ));
    }
    print!("{out}");
    Ok(())
}
