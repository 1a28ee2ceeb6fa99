//! `relex` — analyze and extrapolate model checkpoint series.
//!
//! Subcommands: `inspect`, `synth`, `diagnose`, `extrapolate`, `sweep`,
//! `align`. Any command's parameters may also come from a JSON file via
//! `--config`; explicit flags override config values. Exit codes: 0 on
//! success, 2 on validation failure, 3 on numerical failure.

mod alloc_track;
mod commands;
mod driver;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use relex_core::diagnostics::DEFAULT_R2_THRESHOLD;
use relex_core::extrapolate::FitKind;

use crate::driver::Method;
use crate::error::{CliError, CliResult};

#[global_allocator]
static ALLOC: alloc_track::TrackingAlloc = alloc_track::TrackingAlloc;

#[derive(Parser)]
#[command(
    name = "relex",
    version,
    about = "Low-rank analysis and extrapolation of model checkpoint series"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Relex,
    Raw,
    Expo,
    Weight,
    Alpharl,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FitArg {
    Linear,
    Poly3,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SpaceArg {
    Svd,
    Raw,
}

/// Optional JSON config; flags override these values.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    series: Option<PathBuf>,
    predicted: Option<PathBuf>,
    actual: Option<PathBuf>,
    out: Option<PathBuf>,
    t_cut: Option<u64>,
    t_cuts: Option<Vec<u64>>,
    targets: Option<Vec<u64>>,
    steps: Option<Vec<u64>>,
    base_step: Option<u64>,
    rank: Option<usize>,
    method: Option<MethodArg>,
    fit: Option<FitArg>,
    space: Option<SpaceArg>,
    alpha: Option<f64>,
    t0: Option<u64>,
    workers: Option<usize>,
    r2_threshold: Option<f64>,
    save_models: Option<bool>,
    no_cache: Option<bool>,
}

impl FileConfig {
    fn load(path: Option<&PathBuf>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::validation(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::validation(format!("bad config: {e}")))
            }
        }
    }
}

fn require<T>(flag: Option<T>, cfg: Option<T>, name: &str) -> CliResult<T> {
    flag.or(cfg).ok_or_else(|| CliError::validation(format!("usage: --{name} is required")))
}

#[derive(Args)]
struct MethodFlags {
    /// Extrapolation method
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Subspace rank for the relex method
    #[arg(long)]
    rank: Option<usize>,
    /// Coefficient fit function
    #[arg(long, value_enum)]
    fit: Option<FitArg>,
    /// Fit in the SVD subspace or on raw per-element values
    #[arg(long, value_enum)]
    space: Option<SpaceArg>,
    /// Amplification factor (expo method)
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// First endpoint step (weight method)
    #[arg(long)]
    t0: Option<u64>,
}

impl MethodFlags {
    fn resolve(&self, cfg: &FileConfig) -> CliResult<Method> {
        let method = self.method.or(cfg.method).unwrap_or(MethodArg::Relex);
        let rank = self.rank.or(cfg.rank).unwrap_or(1);
        let fit = self.fit.or(cfg.fit).unwrap_or(FitArg::Linear);
        let space = self.space.or(cfg.space).unwrap_or(SpaceArg::Svd);
        let fit_kind = match fit {
            FitArg::Linear => FitKind::Linear,
            FitArg::Poly3 => FitKind::Poly(3),
        };
        if rank == 0 {
            return Err(CliError::validation("--rank must be at least 1"));
        }
        match method {
            MethodArg::Relex => {
                if space == SpaceArg::Raw {
                    if rank != 1 || fit != FitArg::Linear {
                        return Err(CliError::validation(
                            "--space raw supports only the per-element linear fit (rank 1, fit linear)",
                        ));
                    }
                    Ok(Method::Raw)
                } else {
                    Ok(Method::Relex { rank, fit: fit_kind })
                }
            }
            MethodArg::Raw => {
                if space == SpaceArg::Svd && self.space.is_some() {
                    return Err(CliError::validation("--method raw operates in raw space"));
                }
                Ok(Method::Raw)
            }
            MethodArg::Expo => {
                let alpha = require(self.alpha, cfg.alpha, "alpha")
                    .map_err(|_| CliError::validation("usage: --method expo requires --alpha"))?;
                Ok(Method::Expo { alpha })
            }
            MethodArg::Weight => {
                let t0 = require(self.t0, cfg.t0, "t0")
                    .map_err(|_| CliError::validation("usage: --method weight requires --t0"))?;
                Ok(Method::Weight { t0 })
            }
            MethodArg::Alpharl => Ok(Method::AlphaRl),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Print a JSON summary of a checkpoint series
    Inspect {
        #[arg(long)]
        series: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic planted series from a JSON plant config
    Synth {
        /// Plant config JSON
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-tensor linearity, explained variance and coefficient reports
    Diagnose {
        #[arg(long)]
        series: Option<PathBuf>,
        #[arg(long)]
        t_cut: Option<u64>,
        /// Number of retained components in the coefficient dumps
        #[arg(long)]
        rank: Option<usize>,
        /// Threshold for the reported fraction of tensors with high R²
        #[arg(long)]
        r2_threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Predict checkpoints at target steps from an observation window
    Extrapolate {
        #[arg(long)]
        series: Option<PathBuf>,
        #[arg(long)]
        t_cut: Option<u64>,
        /// Comma-separated target steps
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<u64>>,
        #[command(flatten)]
        method: MethodFlags,
        #[arg(long)]
        workers: Option<usize>,
        /// Persist fitted rank-1 models under <out>/models
        #[arg(long)]
        save_models: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fill a grid of observation cutoffs × target steps
    Sweep {
        #[arg(long)]
        series: Option<PathBuf>,
        /// Comma-separated observation cutoffs
        #[arg(long, value_delimiter = ',')]
        t_cuts: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<u64>>,
        #[command(flatten)]
        method: MethodFlags,
        #[arg(long)]
        workers: Option<usize>,
        /// Recompute each cell independently instead of reusing Gram prefixes
        #[arg(long)]
        no_cache: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Weight-space alignment of a predicted series against an actual one
    Align {
        #[arg(long)]
        predicted: Option<PathBuf>,
        #[arg(long)]
        actual: Option<PathBuf>,
        /// Step providing the base weights (read from the actual series)
        #[arg(long)]
        base_step: Option<u64>,
        /// Comma-separated steps to compare
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Cmd::Inspect { series, config } => {
            let cfg = FileConfig::load(config.as_ref())?;
            let series = require(series, cfg.series, "series")?;
            commands::inspect(&series)
        }
        Cmd::Synth { config, out } => {
            let out = require(out, None, "out")?;
            commands::synth(&config, &out)
        }
        Cmd::Diagnose { series, t_cut, rank, r2_threshold, out, config } => {
            let cfg = FileConfig::load(config.as_ref())?;
            commands::diagnose(
                &require(series, cfg.series, "series")?,
                require(t_cut, cfg.t_cut, "t-cut")?,
                rank.or(cfg.rank).unwrap_or(1),
                r2_threshold.or(cfg.r2_threshold).unwrap_or(DEFAULT_R2_THRESHOLD),
                &require(out, cfg.out, "out")?,
            )
        }
        Cmd::Extrapolate { series, t_cut, targets, method, workers, save_models, out, config } => {
            let cfg = FileConfig::load(config.as_ref())?;
            let params = commands::ExtrapolateParams {
                series: require(series, cfg.series.clone(), "series")?,
                t_cut: require(t_cut, cfg.t_cut, "t-cut")?,
                targets: require(targets, cfg.targets.clone(), "targets")?,
                method: method.resolve(&cfg)?,
                workers: workers.or(cfg.workers).unwrap_or(1),
                save_models: save_models || cfg.save_models.unwrap_or(false),
                out: require(out, cfg.out.clone(), "out")?,
            };
            commands::extrapolate(&params)
        }
        Cmd::Sweep { series, t_cuts, targets, method, workers, no_cache, out, config } => {
            let cfg = FileConfig::load(config.as_ref())?;
            let params = commands::SweepParams {
                series: require(series, cfg.series.clone(), "series")?,
                t_cuts: require(t_cuts, cfg.t_cuts.clone(), "t-cuts")?,
                targets: require(targets, cfg.targets.clone(), "targets")?,
                method: method.resolve(&cfg)?,
                workers: workers.or(cfg.workers).unwrap_or(1),
                use_cache: !(no_cache || cfg.no_cache.unwrap_or(false)),
                out: require(out, cfg.out.clone(), "out")?,
            };
            commands::sweep(&params)
        }
        Cmd::Align { predicted, actual, base_step, steps, out, config } => {
            let cfg = FileConfig::load(config.as_ref())?;
            commands::align(
                &require(predicted, cfg.predicted, "predicted")?,
                &require(actual, cfg.actual, "actual")?,
                require(base_step, cfg.base_step, "base-step")?,
                &require(steps, cfg.steps, "steps")?,
                &require(out, cfg.out, "out")?,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    };
    alloc_track::report_if_requested();
    ExitCode::from(code as u8)
}
