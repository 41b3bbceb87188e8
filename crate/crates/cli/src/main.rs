//! `ultra`: generate synthetic cellularity datasets, train the multi-branch
//! label-distribution model, evaluate checkpoints, sweep hyperparameters,
//! inspect encodings, and run ablations. All behavior is driven by a flat
//! key=value config file; see the README for the key reference.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ultra_cli::commands::{self, EvalArgs, SweepAxis};
use ultra_core::{IccForm, KappaWeighting, DEFAULT_N_LABELS, DEFAULT_SIGMA};

#[derive(Parser)]
#[command(name = "ultra", version, about = "Uncertainty-aware tumor-cellularity estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum IccFormArg {
    /// Two-way random effects, absolute agreement.
    Random,
    /// Two-way mixed effects, consistency.
    Mixed,
}

impl From<IccFormArg> for IccForm {
    fn from(a: IccFormArg) -> IccForm {
        match a {
            IccFormArg::Random => IccForm::TwoWayRandomSingle,
            IccFormArg::Mixed => IccForm::TwoWayMixedSingle,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KappaWeightingArg {
    None,
    Linear,
    Quadratic,
}

impl From<KappaWeightingArg> for KappaWeighting {
    fn from(a: KappaWeightingArg) -> KappaWeighting {
        match a {
            KappaWeightingArg::None => KappaWeighting::None,
            KappaWeightingArg::Linear => KappaWeighting::Linear,
            KappaWeightingArg::Quadratic => KappaWeighting::Quadratic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Sigma,
    Branches,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset file plus its labels CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Dataset output path; the labels CSV lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage training; writes the checkpoint and the training-log CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset file; report to stdout as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "random")]
        icc_form: IccFormArg,
        #[arg(long, default_value_t = 10)]
        kappa_bins: usize,
        #[arg(long, value_enum, default_value = "quadratic")]
        kappa_weighting: KappaWeightingArg,
        /// Bootstrap resample count for the 95% intervals.
        #[arg(long, default_value_t = 1000)]
        bootstrap_b: usize,
        /// Seed for prediction-time augmentation and the bootstrap.
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Train once per axis value; emit a value,icc,kappa,mse CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values; defaults to ten sigmas in
        /// [0.01, 0.1] or branch counts 1..5.
        #[arg(long)]
        values: Option<String>,
    },
    /// Print the label distribution a score encodes to, as CSV.
    Encode {
        /// Score in [0, 1].
        #[arg(long)]
        s: f64,
        /// Grid size.
        #[arg(long, default_value_t = DEFAULT_N_LABELS)]
        n: usize,
        /// Gaussian kernel width.
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
    },
    /// Train the loss and branch-count ablation variants; emit their table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Generate { config, out } => commands::cmd_generate(&config, &out),
        Cmd::Train { config } => commands::cmd_train(&config),
        Cmd::Eval {
            checkpoint,
            dataset,
            icc_form,
            kappa_bins,
            kappa_weighting,
            bootstrap_b,
            seed,
        } => commands::cmd_eval(
            &checkpoint,
            &dataset,
            &EvalArgs {
                icc_form: icc_form.into(),
                kappa_bins,
                kappa_weighting: kappa_weighting.into(),
                bootstrap_b,
                seed,
            },
        ),
        Cmd::Sweep {
            config,
            axis,
            values,
        } => {
            let axis = match axis {
                AxisArg::Sigma => SweepAxis::Sigma,
                AxisArg::Branches => SweepAxis::Branches,
            };
            commands::cmd_sweep(&config, axis, values.as_deref())
        }
        Cmd::Encode { s, n, sigma } => commands::cmd_encode(s, n, sigma),
        Cmd::Ablate { config } => commands::cmd_ablate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
