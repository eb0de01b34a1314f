//! Synthetic transfer-learning scenarios and replicate experiments.
//!
//! Target coefficients are `magnitude_c` on the first `s` features and zero
//! elsewhere. Source `k` shifts every support entry by `h_k`, downwards on
//! even (0-based) columns and upwards on odd ones, so each column moves by
//! exactly `h_k · s` in L1. The first `num_transferable` sources use
//! `h_k = h`, the rest `h_far`.
//!
//! Seeding: the target of replicate `r` uses `derive_seed(seed, [r, 0])`
//! whatever the swept value, so target-only estimates are shared across a
//! sweep. Source `k` uses `derive_seed(seed, [bits(value), r, k])`. Each
//! domain seed is split further into graph, feature and label streams (see
//! [`gen_domain`]). Cells never share generators, so a table is the same
//! whether cells run serially or on any number of threads.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{auc, coef_mse, squared_error};
use crate::gcr::{sample_labels, CoefficientMatrix, Dataset};
use crate::graph::{er_scale, gen_er, gen_graphon, gen_sbm, Graph, Graphon};
use crate::par;
use crate::rng::{derive_seed, float_key, rng_from_seed};
use crate::select::{cv_hyperparams, cv_transfer, transferability_scores};
use crate::solver::{fit, FitConfig, PenaltyMode};
use crate::transfer::{naive_tl_views, propagated, trans_gcr_views, DomainView, TransferConfig};

/// Random-graph model for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase", deny_unknown_fields)]
pub enum GraphSpec {
    Er { p: f64 },
    /// Balanced blocks (sizes differ by at most one).
    Sbm { blocks: usize, within: f64, between: f64 },
    /// Graphon id such as `product:0.8`, see [`Graphon`].
    Graphon { graphon: String },
}

impl GraphSpec {
    pub fn generate(&self, n: usize, seed: u64) -> Result<Graph> {
        match self {
            GraphSpec::Er { p } => gen_er(n, *p, seed),
            GraphSpec::Sbm {
                blocks,
                within,
                between,
            } => {
                if *blocks == 0 || *blocks > n {
                    return Err(Error::InvalidArgument(format!(
                        "cannot split {n} nodes into {blocks} blocks"
                    )));
                }
                let sizes: Vec<usize> = (0..*blocks)
                    .map(|b| n / blocks + usize::from(b < n % blocks))
                    .collect();
                gen_sbm(&sizes, *within, *between, seed)
            }
            GraphSpec::Graphon { graphon } => {
                let w: Graphon = graphon.parse()?;
                gen_graphon(n, |u, v| w.eval(u, v), seed)
            }
        }
    }
}

/// How the penalty strength of a fit on `n` labelled nodes is chosen.
///
/// The objective is a sum over nodes, so `Scaled` uses
/// `λ = κ · sqrt(n · log d)`: the usual `κ · sqrt(log d / n)` per-node
/// level multiplied by `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase", deny_unknown_fields)]
pub enum LambdaRule {
    Fixed { value: f64 },
    Scaled { kappa: f64 },
    /// Pick `κ` by V-fold cross-validation on the target's labels, then
    /// apply it as `Scaled`.
    Cv { kappas: Vec<f64>, folds: usize },
}

impl LambdaRule {
    fn check(&self) -> Result<()> {
        let ok = match self {
            LambdaRule::Fixed { value } => value.is_finite() && *value >= 0.0,
            LambdaRule::Scaled { kappa } => kappa.is_finite() && *kappa >= 0.0,
            LambdaRule::Cv { kappas, folds } => {
                !kappas.is_empty() && kappas.iter().all(|k| k.is_finite() && *k >= 0.0) && *folds >= 2
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid penalty rule {self:?}")))
        }
    }
}

/// `κ · sqrt(n log d)`.
pub fn scaled_lambda(kappa: f64, n: usize, d: usize) -> f64 {
    kappa * (n as f64 * (d.max(2) as f64).ln()).sqrt()
}

/// A penalty rule after any cross-validation has been done.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Penalty {
    Fixed(f64),
    Scaled(f64),
}

impl Penalty {
    fn lambda(self, n: usize, d: usize) -> f64 {
        match self {
            Penalty::Fixed(v) => v,
            Penalty::Scaled(k) => scaled_lambda(k, n, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub classes: usize,
    pub d: usize,
    pub s: usize,
    pub n0: usize,
    /// Number of candidate sources `K`.
    pub num_sources: usize,
    /// Nodes per source.
    pub source_n: usize,
    pub h: f64,
    pub h_far: f64,
    pub num_transferable: usize,
    /// Support magnitude per free class; missing entries follow
    /// `0.4 + 0.1 c` (0-based `c`).
    pub magnitudes: Vec<f64>,
    pub target_graph: GraphSpec,
    pub source_graph: GraphSpec,
    pub hops: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Penalty for the target-only fit and naive pooling.
    pub lambda: LambdaRule,
    /// Penalty for the pooled-source step.
    pub lambda_beta: LambdaRule,
    /// Penalty for the correction step. When either transfer rule is `Cv`,
    /// both are chosen jointly by target cross-validation of the two-step
    /// estimate.
    pub lambda_delta: LambdaRule,
    pub penalty_mode: PenaltyMode,
    pub include_target_in_pool: bool,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for ScenarioConfig {
    /// Desk-scale setting: the full-size design with `d` and `s` shrunk
    /// five-fold.
    fn default() -> Self {
        ScenarioConfig {
            classes: 3,
            d: 100,
            s: 10,
            n0: 200,
            num_sources: 5,
            source_n: 400,
            h: 1.0,
            h_far: 10.0,
            num_transferable: 5,
            magnitudes: vec![0.4, 0.5],
            target_graph: GraphSpec::Er { p: 0.05 },
            source_graph: GraphSpec::Er { p: 0.05 },
            hops: 1,
            replicates: 20,
            seed: 0,
            lambda: LambdaRule::Scaled { kappa: 0.2 },
            lambda_beta: LambdaRule::Scaled { kappa: 0.1 },
            lambda_delta: LambdaRule::Scaled { kappa: 0.2 },
            penalty_mode: PenaltyMode::Delta,
            include_target_in_pool: false,
            tol: 1e-6,
            max_sweeps: 200,
        }
    }
}

impl ScenarioConfig {
    /// Full-size setting (d = 500, s = 50, n = 600).
    pub fn full_scale() -> Self {
        ScenarioConfig {
            d: 500,
            s: 50,
            source_n: 600,
            replicates: 100,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.s > self.d {
            return bad(format!("support size {} exceeds dimension {}", self.s, self.d));
        }
        if self.num_transferable > self.num_sources {
            return bad(format!(
                "num_transferable {} exceeds num_sources {}",
                self.num_transferable, self.num_sources
            ));
        }
        if !(self.h.is_finite() && self.h_far.is_finite()) || self.magnitudes.iter().any(|m| !m.is_finite()) {
            return bad("shifts and magnitudes must be finite".into());
        }
        if self.n0 == 0 || self.source_n == 0 {
            return bad("domains need at least one node".into());
        }
        if !(self.tol > 0.0) || self.max_sweeps == 0 {
            return bad("tol must be positive and max_sweeps at least 1".into());
        }
        self.lambda.check()?;
        self.lambda_beta.check()?;
        self.lambda_delta.check()
    }

    pub fn magnitude(&self, c: usize) -> f64 {
        self.magnitudes
            .get(c)
            .copied()
            .unwrap_or(0.4 + 0.1 * c as f64)
    }

    /// Shift level of source `k` (0-based).
    pub fn shift(&self, k: usize) -> f64 {
        if k < self.num_transferable {
            self.h
        } else {
            self.h_far
        }
    }

    fn solver(&self) -> FitConfig {
        FitConfig {
            tol: self.tol,
            max_outer: self.max_sweeps,
            ..Default::default()
        }
    }
}

/// True coefficients of the target and of each source.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub target: CoefficientMatrix,
    pub sources: Vec<CoefficientMatrix>,
}

pub fn build_truth(config: &ScenarioConfig) -> Result<Truth> {
    config.validate()?;
    let (d, s, classes) = (config.d, config.s, config.classes);
    let column = |c: usize, shift: f64| -> Vec<f64> {
        let signed = if c % 2 == 0 { -shift } else { shift };
        (0..d)
            .map(|j| if j < s { config.magnitude(c) + signed } else { 0.0 })
            .collect()
    };
    let matrix = |shift: f64| -> Result<CoefficientMatrix> {
        let mut values = Array2::zeros((d, classes - 1));
        for c in 0..classes - 1 {
            for (j, v) in column(c, shift).into_iter().enumerate() {
                values[[j, c]] = v;
            }
        }
        CoefficientMatrix::new(values, classes)
    };
    Ok(Truth {
        target: matrix(0.0)?,
        sources: (0..config.num_sources)
            .map(|k| matrix(config.shift(k)))
            .collect::<Result<_>>()?,
    })
}

/// Per-class averaged L1 distance `(C-1)^{-1} Σ_c ||a_c - b_c||_1`.
pub fn shift_level(a: &CoefficientMatrix, b: &CoefficientMatrix) -> Result<f64> {
    a.check_same_shape(b)?;
    let l1: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum();
    Ok(l1 / (a.num_classes() - 1) as f64)
}

/// Standard normal `n × d` matrix.
pub fn gaussian_features(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
}

/// One synthetic domain with every label visible.
///
/// The graph, features and labels use `derive_seed(seed, [0])`, `[1]` and
/// `[2]` respectively.
pub fn gen_domain(
    spec: &GraphSpec,
    beta: &CoefficientMatrix,
    n: usize,
    d: usize,
    hops: usize,
    seed: u64,
) -> Result<Dataset> {
    if beta.num_features() != d {
        return Err(Error::DimensionMismatch {
            context: "coefficient rows vs feature dimension",
            expected: d,
            found: beta.num_features(),
        });
    }
    let graph = spec.generate(n, derive_seed(seed, &[0]))?;
    let x = gaussian_features(n, d, derive_seed(seed, &[1]));
    let z = crate::graph::propagate(&crate::graph::normalize_adjacency(&graph), x.view(), hops)?;
    let labels = sample_labels(z.values().view(), beta, derive_seed(seed, &[2]))?;
    Dataset::fully_visible(graph, x, labels)
}

/// Parameter varied across an MSE experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    SourceN,
    H,
    /// ER edge probability of the sources.
    SourceDensity,
    /// Within-block probability of a balanced two-block SBM for the sources.
    SbmWithin,
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::SourceN => "source_n",
            Sweep::H => "h",
            Sweep::SourceDensity => "source_density",
            Sweep::SbmWithin => "sbm_within",
        }
    }

    fn apply(&self, config: &ScenarioConfig, value: f64) -> Result<ScenarioConfig> {
        let mut c = config.clone();
        match self {
            Sweep::SourceN => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::InvalidArgument(format!("source_n must be a positive integer, got {value}")));
                }
                c.source_n = value as usize;
            }
            Sweep::H => c.h = value,
            Sweep::SourceDensity => c.source_graph = GraphSpec::Er { p: value },
            Sweep::SbmWithin => {
                let between = match &config.source_graph {
                    GraphSpec::Sbm { between, .. } => *between,
                    _ => 0.05,
                };
                c.source_graph = GraphSpec::Sbm {
                    blocks: 2,
                    within: value,
                    between,
                };
            }
        }
        Ok(c)
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_n" => Ok(Sweep::SourceN),
            "h" => Ok(Sweep::H),
            "source_density" => Ok(Sweep::SourceDensity),
            "sbm_within" => Ok(Sweep::SbmWithin),
            _ => Err(Error::InvalidArgument(format!("unknown sweep '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TransGcr,
    GcrOnly,
    NaiveTl,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::TransGcr, Method::GcrOnly, Method::NaiveTl];

    pub fn name(&self) -> &'static str {
        match self {
            Method::TransGcr => "trans_gcr",
            Method::GcrOnly => "gcr_only",
            Method::NaiveTl => "naive_tl",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

/// One measurement in an experiment table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub scenario_param: String,
    pub value: String,
    pub method: String,
    pub replicate: usize,
    pub metric: String,
    pub metric_value: f64,
}

/// A cell that could not produce its metric.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub scenario_param: String,
    pub value: String,
    pub method: String,
    pub replicate: usize,
    pub message: String,
}

/// Aggregate of one (parameter value, method, metric) group.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub scenario_param: String,
    pub value: String,
    pub method: String,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    /// Standard error of the mean (zero for a single replicate).
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentTable {
    pub rows: Vec<TableRow>,
    pub failures: Vec<CellFailure>,
}

impl ExperimentTable {
    /// Mean and standard error per group, in first-appearance order of the
    /// swept values.
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut order: Vec<(String, String, String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            let key = (
                r.scenario_param.clone(),
                r.value.clone(),
                r.method.clone(),
                r.metric.clone(),
            );
            let entry = groups.entry(key.clone()).or_default();
            if entry.is_empty() {
                order.push(key);
            }
            entry.push(r.metric_value);
        }
        order
            .into_iter()
            .map(|key| {
                let vals = &groups[&key];
                let (mean, se) = mean_and_se(vals);
                CellSummary {
                    scenario_param: key.0,
                    value: key.1,
                    method: key.2,
                    metric: key.3,
                    count: vals.len(),
                    mean,
                    std_error: se,
                }
            })
            .collect()
    }

    /// Metric values for one (value, method, metric) group, by replicate.
    pub fn values(&self, value: &str, method: &str, metric: &str) -> Vec<f64> {
        let mut rows: Vec<&TableRow> = self
            .rows
            .iter()
            .filter(|r| r.value == value && r.method == method && r.metric == metric)
            .collect();
        rows.sort_by_key(|r| r.replicate);
        rows.into_iter().map(|r| r.metric_value).collect()
    }
}

pub fn mean_and_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Canonical text form of a swept value.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

/// Resolves the single-fit penalty rule, running target cross-validation
/// for `Cv`.
fn resolve_single(rule: &LambdaRule, target: &DomainView<'_>, d: usize, solver: &FitConfig, seed: u64) -> Result<Penalty> {
    match rule {
        LambdaRule::Fixed { value } => Ok(Penalty::Fixed(*value)),
        LambdaRule::Scaled { kappa } => Ok(Penalty::Scaled(*kappa)),
        LambdaRule::Cv { kappas, folds } => {
            let n_train = train_size(visible(target.mask), *folds);
            let dataset = FeatureDataset::new(target)?;
            let grid: Vec<(usize, f64)> = kappas.iter().map(|&k| (0, scaled_lambda(k, n_train, d))).collect();
            let cv = cv_hyperparams(&dataset.0, &grid, *folds, solver, seed)?;
            let pos = grid
                .iter()
                .position(|&(_, l)| l == cv.best_lambda)
                .expect("selected lambda is in the grid");
            Ok(Penalty::Scaled(kappas[pos]))
        }
    }
}

/// Nominal training size of a V-fold split of `n` nodes.
fn train_size(n: usize, folds: usize) -> usize {
    n - n / folds
}

fn candidates(rule: &LambdaRule) -> Vec<Penalty> {
    match rule {
        LambdaRule::Fixed { value } => vec![Penalty::Fixed(*value)],
        LambdaRule::Scaled { kappa } => vec![Penalty::Scaled(*kappa)],
        LambdaRule::Cv { kappas, .. } => kappas.iter().map(|&k| Penalty::Scaled(k)).collect(),
    }
}

fn cv_folds(rule: &LambdaRule) -> Option<usize> {
    match rule {
        LambdaRule::Cv { folds, .. } => Some(*folds),
        _ => None,
    }
}

fn transfer_config(config: &ScenarioConfig, beta: Penalty, delta: Penalty, n_pooled: usize, n_target: usize) -> TransferConfig {
    TransferConfig {
        hops: config.hops,
        lambda_beta: beta.lambda(n_pooled, config.d),
        lambda_delta: delta.lambda(n_target, config.d),
        penalty_mode: config.penalty_mode,
        include_target_in_pool: config.include_target_in_pool,
        solver: config.solver(),
    }
}

/// Resolves the two transfer penalties. With a `Cv` rule on either side
/// every (β, δ) candidate pair is scored by target cross-validation of the
/// full two-step estimate; ties go to the earlier pair, β-major.
fn resolve_transfer<'a>(
    config: &ScenarioConfig,
    target: DomainView<'a>,
    sources: &[DomainView<'a>],
    seed: u64,
) -> Result<(Penalty, Penalty)> {
    let folds = cv_folds(&config.lambda_delta).or(cv_folds(&config.lambda_beta));
    let (betas, deltas) = (candidates(&config.lambda_beta), candidates(&config.lambda_delta));
    let Some(folds) = folds else {
        return Ok((betas[0], deltas[0]));
    };
    let n_train = train_size(visible(target.mask), folds);
    let n_sources: usize = sources.iter().map(|s| visible(s.mask)).sum();
    let n_pooled = n_sources + if config.include_target_in_pool { n_train } else { 0 };
    let pairs: Vec<(Penalty, Penalty)> = betas
        .iter()
        .flat_map(|&b| deltas.iter().map(move |&d| (b, d)))
        .collect();
    let configs: Vec<TransferConfig> = pairs
        .iter()
        .map(|&(b, d)| transfer_config(config, b, d, n_pooled, n_train))
        .collect();
    let cv = cv_transfer(target, sources, &configs, folds, seed)?;
    Ok(pairs[cv.best])
}

/// Wraps already propagated features as an edgeless dataset so that
/// zero-hop cross-validation reuses them unchanged.
struct FeatureDataset(Dataset);

impl FeatureDataset {
    fn new(view: &DomainView<'_>) -> Result<Self> {
        Ok(FeatureDataset(Dataset::new(
            Graph::empty(view.features.nrows()),
            view.features.to_owned(),
            view.labels.clone(),
            view.mask.to_vec(),
        )?))
    }
}

fn visible(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

/// Penalties of one replicate after any cross-validation.
#[derive(Debug, Clone, Copy)]
struct Penalties {
    single: Penalty,
    beta: Penalty,
    delta: Penalty,
}

/// Runs one method on prepared domains and returns its target estimate.
fn estimate<'a>(
    method: Method,
    config: &ScenarioConfig,
    target: DomainView<'a>,
    sources: &[DomainView<'a>],
    penalties: Penalties,
) -> Result<CoefficientMatrix> {
    let solver = config.solver();
    let n_target = visible(target.mask);
    let n_sources: usize = sources.iter().map(|s| visible(s.mask)).sum();
    match method {
        Method::GcrOnly => {
            let cfg = FitConfig {
                lambda: penalties.single.lambda(n_target, config.d),
                ..solver
            };
            Ok(fit(target.features, target.labels, target.mask, &cfg)?.coefficients)
        }
        Method::NaiveTl => {
            let cfg = FitConfig {
                lambda: penalties.single.lambda(n_target + n_sources, config.d),
                ..solver
            };
            Ok(naive_tl_views(target, sources, &cfg)?.coefficients)
        }
        Method::TransGcr => {
            let n_pooled = n_sources + if config.include_target_in_pool { n_target } else { 0 };
            let cfg = transfer_config(config, penalties.beta, penalties.delta, n_pooled, n_target);
            Ok(trans_gcr_views(target, sources, &cfg)?.beta_target)
        }
    }
}

/// Target and sources of one replicate, already propagated.
struct Replicate {
    target: Dataset,
    target_z: Array2<f64>,
    sources: Vec<Dataset>,
    source_z: Vec<Array2<f64>>,
}

impl Replicate {
    fn generate(config: &ScenarioConfig, truth: &Truth, value_key: u64, replicate: usize) -> Result<Self> {
        let target_seed = derive_seed(config.seed, &[replicate as u64, 0]);
        let target = gen_domain(&config.target_graph, &truth.target, config.n0, config.d, config.hops, target_seed)
            .map_err(|e| e.in_step("generating target"))?;
        let sources = (0..config.num_sources)
            .map(|k| {
                let seed = derive_seed(config.seed, &[value_key, replicate as u64, k as u64 + 1]);
                gen_domain(&config.source_graph, &truth.sources[k], config.source_n, config.d, config.hops, seed)
                    .map_err(|e| e.in_step(format!("generating source {k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let target_z = propagated(&target, config.hops)?;
        let source_z = sources
            .iter()
            .map(|s| propagated(s, config.hops))
            .collect::<Result<Vec<_>>>()?;
        Ok(Replicate {
            target,
            target_z,
            sources,
            source_z,
        })
    }

    fn target_view(&self) -> DomainView<'_> {
        DomainView {
            features: self.target_z.view(),
            labels: &self.target.labels,
            mask: &self.target.mask,
        }
    }

    fn source_views(&self, which: impl Iterator<Item = usize>) -> Vec<DomainView<'_>> {
        which
            .map(|k| DomainView {
                features: self.source_z[k].view(),
                labels: &self.sources[k].labels,
                mask: &self.sources[k].mask,
            })
            .collect()
    }
}

/// Coefficient MSE of each method over a sweep of one scenario parameter.
///
/// Every method uses all `num_sources` sources. Rows carry the metric
/// `mse`.
pub fn run_mse_experiment(
    config: &ScenarioConfig,
    sweep: Sweep,
    values: &[f64],
    methods: &[Method],
) -> Result<ExperimentTable> {
    config.validate()?;
    if values.is_empty() || methods.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid or method list".into()));
    }
    let configs = values
        .iter()
        .map(|&v| {
            let c = sweep.apply(config, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let reps = config.replicates;
    let cells = par::map_range(values.len() * reps, |cell| {
        let (vi, r) = (cell / reps, cell % reps);
        let cfg = &configs[vi];
        let value = format_value(values[vi]);
        let run = || -> Result<Vec<TableRow>> {
            let truth = build_truth(cfg)?;
            let rep = Replicate::generate(cfg, &truth, float_key(values[vi]), r)?;
            let target = rep.target_view();
            let sources = rep.source_views(0..cfg.num_sources);
            let cv_seed = derive_seed(cfg.seed, &[r as u64, u64::MAX]);
            let single = if methods.iter().any(|&m| m != Method::TransGcr) {
                resolve_single(&cfg.lambda, &target, cfg.d, &cfg.solver(), cv_seed)?
            } else {
                Penalty::Fixed(0.0)
            };
            let (beta, delta) = if methods.contains(&Method::TransGcr) {
                resolve_transfer(cfg, target, &sources, cv_seed)?
            } else {
                (Penalty::Fixed(0.0), Penalty::Fixed(0.0))
            };
            let penalties = Penalties { single, beta, delta };
            methods
                .iter()
                .map(|&m| {
                    let est = estimate(m, cfg, target, &sources, penalties)
                        .map_err(|e| e.in_step(m.name()))?;
                    Ok(TableRow {
                        scenario_param: sweep.name().to_string(),
                        value: value.clone(),
                        method: m.name().to_string(),
                        replicate: r,
                        metric: "mse".into(),
                        metric_value: coef_mse(&est, &truth.target)?,
                    })
                })
                .collect()
        };
        run().map_err(|e| e.in_step(format!("{}={} replicate {r}", sweep.name(), value)))
    });
    let mut table = ExperimentTable::default();
    for cell in cells {
        table.rows.extend(cell?);
    }
    Ok(table)
}

/// AUC of cross-validated transferability scores against the known
/// transferable set, for each number of candidate sources `K`.
///
/// Source `k` counts as transferable when `k < num_transferable`. Cells
/// where every (or no) source is transferable are recorded as failures.
/// The `lambda` rule is unused here and the transfer rules may not be `Cv`.
pub fn run_detection_experiment(config: &ScenarioConfig, folds: usize, k_values: &[usize]) -> Result<ExperimentTable> {
    config.validate()?;
    if k_values.is_empty() {
        return Err(Error::InvalidArgument("empty K grid".into()));
    }
    if cv_folds(&config.lambda_beta).is_some() || cv_folds(&config.lambda_delta).is_some() {
        return Err(Error::InvalidArgument(
            "detection experiments need fixed or scaled transfer penalties".into(),
        ));
    }
    let configs = k_values
        .iter()
        .map(|&k| {
            let c = ScenarioConfig {
                num_sources: k,
                num_transferable: config.num_transferable.min(k),
                ..config.clone()
            };
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let reps = config.replicates;
    let cells = par::map_range(k_values.len() * reps, |cell| {
        let (ki, r) = (cell / reps, cell % reps);
        let cfg = &configs[ki];
        let value = k_values[ki].to_string();
        let run = || -> Result<f64> {
            let truth = build_truth(cfg)?;
            let rep = Replicate::generate(cfg, &truth, k_values[ki] as u64, r)?;
            let (beta, delta) = (candidates(&cfg.lambda_beta)[0], candidates(&cfg.lambda_delta)[0]);
            let n_train = train_size(cfg.n0, folds);
            let n_pooled = cfg.source_n + if cfg.include_target_in_pool { n_train } else { 0 };
            let tcfg = transfer_config(cfg, beta, delta, n_pooled, n_train);
            let fold_seed = derive_seed(cfg.seed, &[k_values[ki] as u64, r as u64, u64::MAX - 1]);
            let report = transferability_scores(&rep.target, &rep.sources, folds, &tcfg, fold_seed)?;
            let scores: Vec<f64> = report.scores.iter().map(|s| -s).collect();
            let labels: Vec<bool> = (0..cfg.num_sources).map(|k| k < cfg.num_transferable).collect();
            auc(&scores, &labels)
        };
        (value, r, run())
    });
    let mut table = ExperimentTable::default();
    for (value, r, res) in cells {
        match res {
            Ok(v) => table.rows.push(TableRow {
                scenario_param: "num_sources".into(),
                value,
                method: "trans_gcr".into(),
                replicate: r,
                metric: "auc".into(),
                metric_value: v,
            }),
            Err(Error::DegenerateLabels(msg)) => table.failures.push(CellFailure {
                scenario_param: "num_sources".into(),
                value,
                method: "trans_gcr".into(),
                replicate: r,
                message: format!("degenerate labels: {msg}"),
            }),
            Err(e) => return Err(e.in_step(format!("num_sources={value} replicate {r}"))),
        }
    }
    Ok(table)
}

/// How the rate experiment picks `κ` in `λ = κ sqrt(n log d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase", deny_unknown_fields)]
pub enum KappaChoice {
    Fixed { kappa: f64 },
    /// Minimize mean squared error at the smallest `n` over a separate set
    /// of tuning replicates.
    Grid { kappas: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    pub d: usize,
    pub s: usize,
    pub n_grid: Vec<usize>,
    /// Known ER edge probability, also used in the feature scaling.
    pub p: f64,
    pub replicates: usize,
    pub magnitude: f64,
    pub kappa: KappaChoice,
    pub seed: u64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            d: 50,
            s: 5,
            n_grid: vec![400, 800, 1600, 3200],
            p: 0.05,
            replicates: 20,
            magnitude: 0.5,
            kappa: KappaChoice::Grid {
                kappas: vec![0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 1.0],
            },
            seed: 0,
            tol: 1e-6,
            max_sweeps: 500,
        }
    }
}

impl RateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.s > self.d {
            return bad("support size exceeds dimension");
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("n_grid must be non-empty and strictly increasing");
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad("edge probability must lie in (0, 1]");
        }
        if self.replicates == 0 {
            return bad("need at least one replicate");
        }
        match &self.kappa {
            KappaChoice::Fixed { kappa } if !(*kappa >= 0.0) => bad("kappa must be non-negative"),
            KappaChoice::Grid { kappas } if kappas.is_empty() || kappas.iter().any(|k| !(*k >= 0.0)) => {
                bad("kappa grid must be non-empty and non-negative")
            }
            _ => Ok(()),
        }
    }

    pub fn truth(&self) -> CoefficientMatrix {
        let values = Array2::from_shape_fn((self.d, 1), |(j, _)| if j < self.s { self.magnitude } else { 0.0 });
        CoefficientMatrix::new(values, 2).expect("finite")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateResult {
    pub table: ExperimentTable,
    pub kappa: f64,
    /// Mean squared error per `n`, in grid order.
    pub mean_errors: Vec<f64>,
    /// OLS slope of log mean error against log n.
    pub slope: f64,
}

/// Squared estimation error of one binary fit on ER-scaled features.
fn rate_replicate(config: &RateConfig, truth: &CoefficientMatrix, n: usize, kappa: f64, seed: u64) -> Result<f64> {
    let graph = gen_er(n, config.p, derive_seed(seed, &[0]))?;
    let x = gaussian_features(n, config.d, derive_seed(seed, &[1]));
    let z = er_scale(&graph, x.view(), Some(config.p))?;
    let labels = sample_labels(z.values().view(), truth, derive_seed(seed, &[2]))?;
    let cfg = FitConfig {
        lambda: scaled_lambda(kappa, n, config.d),
        tol: config.tol,
        max_outer: config.max_sweeps,
        ..Default::default()
    };
    let r = fit(z.values().view(), &labels, &vec![true; n], &cfg)?;
    squared_error(&r.coefficients, truth)
}

/// OLS slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Empirical convergence rate of the single-domain estimator with
/// `Z = A X / sqrt(n p)` and `λ = κ sqrt(n log d)`.
pub fn rate_check(config: &RateConfig) -> Result<RateResult> {
    config.validate()?;
    let truth = config.truth();
    let reps = config.replicates;
    let kappa = match &config.kappa {
        KappaChoice::Fixed { kappa } => *kappa,
        KappaChoice::Grid { kappas } => {
            let n = config.n_grid[0];
            let errs = par::map_range(kappas.len() * reps, |cell| {
                let (ki, r) = (cell / reps, cell % reps);
                let seed = derive_seed(config.seed, &[u64::MAX, r as u64]);
                rate_replicate(config, &truth, n, kappas[ki], seed)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let means: Vec<f64> = errs.chunks(reps).map(|c| c.iter().sum::<f64>() / reps as f64).collect();
            let best = (0..kappas.len())
                .min_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)))
                .expect("non-empty");
            kappas[best]
        }
    };
    let grid = &config.n_grid;
    let errs = par::map_range(grid.len() * reps, |cell| {
        let (ni, r) = (cell / reps, cell % reps);
        let seed = derive_seed(config.seed, &[grid[ni] as u64, r as u64]);
        rate_replicate(config, &truth, grid[ni], kappa, seed)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut table = ExperimentTable::default();
    for (cell, &e) in errs.iter().enumerate() {
        let (ni, r) = (cell / reps, cell % reps);
        table.rows.push(TableRow {
            scenario_param: "n".into(),
            value: grid[ni].to_string(),
            method: "gcr_er_scaled".into(),
            replicate: r,
            metric: "sq_error".into(),
            metric_value: e,
        });
    }
    let mean_errors: Vec<f64> = errs.chunks(reps).map(|c| c.iter().sum::<f64>() / reps as f64).collect();
    let slope = if grid.len() >= 2 && mean_errors.iter().all(|&m| m > 0.0) {
        let lx: Vec<f64> = grid.iter().map(|&n| (n as f64).ln()).collect();
        let ly: Vec<f64> = mean_errors.iter().map(|m| m.ln()).collect();
        ols_slope(&lx, &ly)
    } else {
        f64::NAN
    };
    Ok(RateResult {
        table,
        kappa,
        mean_errors,
        slope,
    })
}
