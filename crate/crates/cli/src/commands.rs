//! Subcommand implementations. Each validates its merged arguments before
//! touching any data and writes only into the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use trans_gcr::eval::{macro_f1, micro_f1};
use trans_gcr::gcr::predict;
use trans_gcr::io::{
    format_coefficients, format_table, load_coefficients, load_dataset_manifest, load_node_list,
};
use trans_gcr::rng::{derive_seed, rng_from_seed};
use trans_gcr::select::{cv_hyperparams, held_out_nll_features, transferability_scores};
use trans_gcr::sim::{rate_check, run_detection_experiment, run_mse_experiment, Method, RateConfig, ScenarioConfig};
use trans_gcr::solver::fit;
use trans_gcr::transfer::{propagated, trans_gcr};
use trans_gcr::{Dataset, FitConfig, TransferConfig};

use crate::config::{DetectArgs, EvaluateArgs, Experiment, FitArgs, SimulateArgs, TransferArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config values; exit code 2.
    Config(String),
    /// Failure while loading data or computing; exit code 1.
    Run(trans_gcr::Error),
}

impl From<trans_gcr::Error> for CliError {
    fn from(e: trans_gcr::Error) -> Self {
        CliError::Run(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Run(e) => write!(f, "error: {e}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub out: PathBuf,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn required<T>(v: Option<T>, name: &str) -> CliResult<T> {
    v.ok_or_else(|| config_err(format!("missing required setting '{name}'")))
}

fn check_lambda(v: f64, name: &str) -> CliResult<f64> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(config_err(format!("'{name}' must be finite and non-negative, got {v}")))
    }
}

fn check_folds(v: usize) -> CliResult<usize> {
    if v >= 2 {
        Ok(v)
    } else {
        Err(config_err(format!("'folds' must be at least 2, got {v}")))
    }
}

fn solver(tol: Option<f64>, max_sweeps: Option<usize>) -> CliResult<FitConfig> {
    let cfg = FitConfig {
        tol: tol.unwrap_or(1e-6),
        max_outer: max_sweeps.unwrap_or(200),
        ..Default::default()
    };
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(cfg)
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_out(globals: &Globals, name: &str, text: &str) -> CliResult<()> {
    fs::create_dir_all(&globals.out).map_err(|e| trans_gcr::Error::Io {
        path: globals.out.display().to_string(),
        source: e,
    })?;
    let path = globals.out.join(name);
    fs::write(&path, text).map_err(|e| trans_gcr::Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

fn load(path: &Path) -> CliResult<Dataset> {
    Ok(load_dataset_manifest(path)?)
}

pub fn cmd_fit(args: FitArgs, globals: &Globals) -> CliResult<()> {
    let dataset_path = required(args.dataset, "dataset")?;
    let hops = args.hops.unwrap_or(1);
    let solver = solver(args.tol, args.max_sweeps)?;
    let grid: Option<Vec<(usize, f64)>> = if args.cv_lambdas.is_empty() {
        if !args.cv_hops.is_empty() {
            return Err(config_err("'cv-hops' needs 'cv-lambdas'"));
        }
        None
    } else {
        for &l in &args.cv_lambdas {
            check_lambda(l, "cv-lambdas")?;
        }
        let hop_grid = if args.cv_hops.is_empty() { vec![hops] } else { args.cv_hops.clone() };
        Some(
            hop_grid
                .iter()
                .flat_map(|&m| args.cv_lambdas.iter().map(move |&l| (m, l)))
                .collect(),
        )
    };
    let lambda = match (&grid, args.lambda) {
        (Some(_), Some(_)) => return Err(config_err("give either 'lambda' or 'cv-lambdas', not both")),
        (None, None) => return Err(config_err("missing required setting 'lambda' (or 'cv-lambdas')")),
        (None, Some(l)) => Some(check_lambda(l, "lambda")?),
        (Some(_), None) => None,
    };
    let folds = check_folds(args.folds.unwrap_or(5))?;

    let dataset = load(&dataset_path)?;
    let (hops, lambda, cv_note) = match grid {
        None => (hops, lambda.expect("checked"), String::new()),
        Some(grid) => {
            let cv = cv_hyperparams(&dataset, &grid, folds, &solver, derive_seed(globals.seed, &[0]))?;
            let mut note = String::new();
            for cell in &cv.table {
                writeln!(note, "cv hops={} lambda={} mean_nl={}", cell.hops, float(cell.lambda), float(cell.mean)).unwrap();
            }
            (cv.best_hops, cv.best_lambda, note)
        }
    };
    let z = propagated(&dataset, hops)?;
    let result = fit(z.view(), &dataset.labels, &dataset.mask, &FitConfig { lambda, ..solver })?;
    let report = format!(
        "hops = {hops}\nlambda = {}\nobjective = {}\nsparsity = {}\nconverged = {}\nsweeps = {}\n",
        float(lambda),
        float(result.objective()),
        result.coefficients.nnz(),
        result.converged,
        result.sweeps_used
    );
    write_out(globals, "coefficients.csv", &format_coefficients(&result.coefficients))?;
    write_out(globals, "fit_report.txt", &report)?;
    print!("{cv_note}{report}");
    Ok(())
}

fn load_sources(paths: &[PathBuf]) -> CliResult<Vec<Dataset>> {
    paths.iter().map(|p| load(p)).collect()
}

pub fn cmd_transfer(args: TransferArgs, globals: &Globals) -> CliResult<()> {
    let target_path = required(args.target, "target")?;
    let include = args.include_target.unwrap_or(false);
    if args.sources.is_empty() && !include {
        return Err(config_err("no 'sources' given and 'include-target' is off"));
    }
    let config = TransferConfig {
        hops: args.hops.unwrap_or(1),
        lambda_beta: check_lambda(required(args.lambda_beta, "lambda-beta")?, "lambda-beta")?,
        lambda_delta: check_lambda(required(args.lambda_delta, "lambda-delta")?, "lambda-delta")?,
        penalty_mode: args.penalty_mode.unwrap_or_default(),
        include_target_in_pool: include,
        solver: solver(args.tol, args.max_sweeps)?,
    };
    let target = load(&target_path)?;
    let sources = load_sources(&args.sources)?;
    let r = trans_gcr(&target, &sources, &config)?;
    write_out(globals, "beta_source.csv", &format_coefficients(&r.beta_source))?;
    write_out(globals, "delta.csv", &format_coefficients(&r.delta))?;
    write_out(globals, "beta_target.csv", &format_coefficients(&r.beta_target))?;
    let report = format!(
        "source_objective = {}\nsource_converged = {}\ndelta_objective = {}\ndelta_converged = {}\nsparsity_source = {}\nsparsity_delta = {}\nsparsity_target = {}\n",
        float(r.source_fit.objective()),
        r.source_fit.converged,
        float(r.delta_fit.objective()),
        r.delta_fit.converged,
        r.beta_source.nnz(),
        r.delta.nnz(),
        r.beta_target.nnz()
    );
    write_out(globals, "transfer_report.txt", &report)?;
    print!("{report}");
    Ok(())
}

pub fn cmd_detect(args: DetectArgs, globals: &Globals) -> CliResult<()> {
    let target_path = required(args.target, "target")?;
    if args.sources.is_empty() {
        return Err(config_err("no 'sources' given"));
    }
    let l = required(args.select, "select")?;
    if l > args.sources.len() {
        return Err(config_err(format!("'select' = {l} exceeds the {} sources", args.sources.len())));
    }
    let folds = check_folds(args.folds.unwrap_or(3))?;
    let config = TransferConfig {
        hops: args.hops.unwrap_or(1),
        lambda_beta: check_lambda(required(args.lambda_beta, "lambda-beta")?, "lambda-beta")?,
        lambda_delta: check_lambda(required(args.lambda_delta, "lambda-delta")?, "lambda-delta")?,
        penalty_mode: args.penalty_mode.unwrap_or_default(),
        include_target_in_pool: false,
        solver: solver(args.tol, args.max_sweeps)?,
    };
    let target = load(&target_path)?;
    let sources = load_sources(&args.sources)?;
    let report = transferability_scores(&target, &sources, folds, &config, derive_seed(globals.seed, &[0]))?;
    let mut scores = String::from("source,NL\n");
    for (k, s) in report.scores.iter().enumerate() {
        writeln!(scores, "{k},{}", float(*s)).unwrap();
        println!("source {k} ({}): NL = {}", args.sources[k].display(), float(*s));
    }
    let selected = report.select(l);
    let mut sel = String::new();
    for k in &selected {
        writeln!(sel, "{k}").unwrap();
    }
    write_out(globals, "scores.csv", &scores)?;
    write_out(globals, "selected.txt", &sel)?;
    println!(
        "selected: {}",
        selected.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
    );
    Ok(())
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))
        }
    }
}

pub fn cmd_simulate(args: SimulateArgs, globals: &Globals, seed_given: bool) -> CliResult<()> {
    let kind = required(args.kind, "kind")?;
    match kind {
        Experiment::Mse | Experiment::Detection => {
            let mut scenario: ScenarioConfig = read_toml(args.scenario.as_deref())?;
            if seed_given {
                scenario.seed = globals.seed;
            }
            if let Some(r) = args.replicates {
                scenario.replicates = r;
            }
            scenario.validate().map_err(|e| config_err(e.to_string()))?;
            let table = if kind == Experiment::Mse {
                let sweep = required(args.sweep, "sweep")?;
                if args.values.is_empty() {
                    return Err(config_err("missing required setting 'values'"));
                }
                let methods = if args.methods.is_empty() { Method::ALL.to_vec() } else { args.methods.clone() };
                run_mse_experiment(&scenario, sweep, &args.values, &methods)?
            } else {
                if args.k_values.is_empty() {
                    return Err(config_err("missing required setting 'k-values'"));
                }
                let folds = check_folds(args.folds.unwrap_or(3))?;
                run_detection_experiment(&scenario, folds, &args.k_values)?
            };
            write_out(globals, "table.csv", &format_table(&table))?;
            for s in table.summary() {
                println!(
                    "{}={} {} {}: mean {} se {} (n={})",
                    s.scenario_param, s.value, s.method, s.metric, float(s.mean), float(s.std_error), s.count
                );
            }
            for f in &table.failures {
                println!("{}={} replicate {}: {}", f.scenario_param, f.value, f.replicate, f.message);
            }
        }
        Experiment::Rate => {
            let mut rate: RateConfig = read_toml(args.scenario.as_deref())?;
            if seed_given {
                rate.seed = globals.seed;
            }
            if let Some(r) = args.replicates {
                rate.replicates = r;
            }
            rate.validate().map_err(|e| config_err(e.to_string()))?;
            let result = rate_check(&rate)?;
            write_out(globals, "table.csv", &format_table(&result.table))?;
            let mut text = format!("kappa = {}\nslope = {}\n", float(result.kappa), float(result.slope));
            for (n, e) in rate.n_grid.iter().zip(&result.mean_errors) {
                writeln!(text, "n = {n} mean_sq_error = {}", float(*e)).unwrap();
            }
            write_out(globals, "rate.txt", &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

pub fn cmd_evaluate(args: EvaluateArgs, globals: &Globals) -> CliResult<()> {
    let dataset_path = required(args.dataset, "dataset")?;
    let coef_path = required(args.coefficients, "coefficients")?;
    let split = match (args.test_nodes, args.train_rate) {
        (Some(p), None) => Ok(p),
        (None, Some(r)) if (0.0..1.0).contains(&r) => Err(r),
        (None, Some(r)) => return Err(config_err(format!("'train-rate' must lie in [0, 1), got {r}"))),
        (Some(_), Some(_)) => return Err(config_err("give either 'test-nodes' or 'train-rate', not both")),
        (None, None) => return Err(config_err("missing 'test-nodes' or 'train-rate'")),
    };
    let hops = args.hops.unwrap_or(1);
    let dataset = load(&dataset_path)?;
    let beta = load_coefficients(&coef_path)?;
    if beta.num_features() != dataset.num_features() || beta.num_classes() != dataset.num_classes() {
        return Err(CliError::Run(trans_gcr::Error::InvalidArgument(format!(
            "coefficients are {}x{} classes, dataset has {} features and {} classes",
            beta.num_features(),
            beta.num_classes(),
            dataset.num_features(),
            dataset.num_classes()
        ))));
    }
    let test: Vec<usize> = match split {
        Ok(p) => load_node_list(&p, dataset.num_nodes())?,
        Err(rate) => {
            let mut visible: Vec<usize> = (0..dataset.num_nodes()).filter(|&i| dataset.mask[i]).collect();
            visible.shuffle(&mut rng_from_seed(derive_seed(globals.seed, &[0])));
            let train = (rate * visible.len() as f64).round() as usize;
            let mut test = visible.split_off(train);
            test.sort_unstable();
            test
        }
    };
    if test.is_empty() {
        return Err(CliError::Run(trans_gcr::Error::InvalidArgument("no test nodes".into())));
    }
    let z = propagated(&dataset, hops)?;
    let predicted = predict(z.view(), &beta)?;
    let micro = micro_f1(&predicted, &dataset.labels, &test)?;
    let macro_ = macro_f1(&predicted, &dataset.labels, &test)?;
    let nl = held_out_nll_features(z.view(), &dataset.labels, &beta, &test)?;
    let text = format!(
        "test_nodes,micro_f1,macro_f1,nl\n{},{},{},{}\n",
        test.len(),
        float(micro),
        float(macro_),
        float(nl)
    );
    write_out(globals, "metrics.csv", &text)?;
    print!("{text}");
    Ok(())
}
