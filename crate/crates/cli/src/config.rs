//! Command-line flags and the config file they override.
//!
//! The config file is TOML. `seed`, `out` and `threads` sit at the top
//! level; every subcommand reads its own table (`[fit]`, `[transfer]`,
//! ...). Keys use the flag spelling without the leading dashes, so
//! `--lambda-beta 0.5` overrides `lambda-beta = 0.5`. Relative paths in the
//! file are resolved against the file's directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use trans_gcr::sim::{Method, Sweep};
use trans_gcr::PenaltyMode;

#[derive(Debug, Parser)]
#[command(name = "trans-gcr", version, about = "Graph convolutional logistic regression with transfer learning")]
pub struct Cli {
    /// Base random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a single dataset, optionally cross-validating (hops, lambda).
    Fit(FitArgs),
    /// Two-step transfer estimate from pooled sources.
    Transfer(TransferArgs),
    /// Score candidate sources and select the most transferable.
    Detect(DetectArgs),
    /// Run a simulation experiment and write its table.
    Simulate(SimulateArgs),
    /// Score a coefficient file on held-out nodes.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub fit: Option<FitArgs>,
    pub transfer: Option<TransferArgs>,
    pub detect: Option<DetectArgs>,
    pub simulate: Option<SimulateArgs>,
    pub evaluate: Option<EvaluateArgs>,
}

/// Field-wise "flag wins over file" merge.
pub trait Merge {
    fn merge(self, file: Self) -> Self;
    /// Rebases relative paths read from a config file.
    fn rebase(&mut self, base: &Path);
}

fn rebase_path(p: &mut Option<PathBuf>, base: &Path) {
    if let Some(path) = p.as_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn rebase_paths(ps: &mut [PathBuf], base: &Path) {
    for p in ps {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

fn or_vec<T>(a: Vec<T>, b: Vec<T>) -> Vec<T> {
    if a.is_empty() {
        b
    } else {
        a
    }
}

macro_rules! merge_impl {
    ($ty:ty, options: [$($o:ident),*], lists: [$($l:ident),*], paths: [$($p:ident),*], path_lists: [$($pl:ident),*]) => {
        impl Merge for $ty {
            fn merge(self, file: Self) -> Self {
                Self {
                    $($o: self.$o.or(file.$o),)*
                    $($l: or_vec(self.$l, file.$l),)*
                }
            }

            fn rebase(&mut self, base: &Path) {
                $(rebase_path(&mut self.$p, base);)*
                $(rebase_paths(&mut self.$pl, base);)*
            }
        }
    };
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FitArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Propagation hops (ignored when `cv-hops` is given).
    #[arg(long)]
    pub hops: Option<usize>,
    /// Fixed penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Penalty grid for cross-validation, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub cv_lambdas: Vec<f64>,
    /// Hop grid for cross-validation (defaults to `hops`).
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub cv_hops: Vec<usize>,
    /// Folds for cross-validation.
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
}

merge_impl!(FitArgs, options: [dataset, hops, lambda, folds, tol, max_sweeps], lists: [cv_lambdas, cv_hops], paths: [dataset], path_lists: []);

#[derive(Debug, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TransferArgs {
    /// Target dataset manifest.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Source dataset manifests, comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub sources: Vec<PathBuf>,
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub lambda_beta: Option<f64>,
    #[arg(long)]
    pub lambda_delta: Option<f64>,
    #[arg(long)]
    pub penalty_mode: Option<PenaltyMode>,
    /// Pool the target's labels into the source step.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub include_target: Option<bool>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
}

merge_impl!(TransferArgs, options: [target, hops, lambda_beta, lambda_delta, penalty_mode, include_target, tol, max_sweeps], lists: [sources], paths: [target], path_lists: [sources]);

#[derive(Debug, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DetectArgs {
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub sources: Vec<PathBuf>,
    /// Cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Number of sources to select.
    #[arg(long)]
    pub select: Option<usize>,
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub lambda_beta: Option<f64>,
    #[arg(long)]
    pub lambda_delta: Option<f64>,
    #[arg(long)]
    pub penalty_mode: Option<PenaltyMode>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
}

merge_impl!(DetectArgs, options: [target, folds, select, hops, lambda_beta, lambda_delta, penalty_mode, tol, max_sweeps], lists: [sources], paths: [target], path_lists: [sources]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Mse,
    Detection,
    Rate,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub kind: Option<Experiment>,
    /// Scenario file (a scenario or rate configuration, by kind).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Swept parameter of an MSE experiment.
    #[arg(long)]
    pub sweep: Option<Sweep>,
    /// Swept values, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub values: Vec<f64>,
    /// Methods of an MSE experiment (default: all).
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub methods: Vec<Method>,
    /// Candidate source counts of a detection experiment.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub k_values: Vec<usize>,
    /// Folds of a detection experiment.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Overrides the scenario's replicate count.
    #[arg(long)]
    pub replicates: Option<usize>,
}

merge_impl!(SimulateArgs, options: [kind, scenario, sweep, folds, replicates], lists: [values, methods, k_values], paths: [scenario], path_lists: []);

#[derive(Debug, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub coefficients: Option<PathBuf>,
    /// File of test node ids.
    #[arg(long)]
    pub test_nodes: Option<PathBuf>,
    /// Fraction of visible nodes used for training in a seeded split;
    /// the rest are scored.
    #[arg(long)]
    pub train_rate: Option<f64>,
    #[arg(long)]
    pub hops: Option<usize>,
}

merge_impl!(EvaluateArgs, options: [dataset, coefficients, test_nodes, train_rate, hops], lists: [], paths: [dataset, coefficients, test_nodes], path_lists: []);

/// Reads and parses a config file.
pub fn load_file(path: &Path) -> Result<FileConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut cfg: FileConfig = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    if let Some(out) = cfg.out.as_mut() {
        if out.is_relative() {
            *out = base.join(&*out);
        }
    }
    macro_rules! rebase {
        ($($f:ident),*) => { $(if let Some(s) = cfg.$f.as_mut() { s.rebase(base); })* };
    }
    rebase!(fit, transfer, detect, simulate, evaluate);
    Ok(cfg)
}
