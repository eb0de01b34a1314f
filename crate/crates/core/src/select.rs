//! Cross-validated transferability scoring of candidate sources and
//! hyperparameter selection.
//!
//! Folds only hide labels. Propagation always runs over the whole target
//! graph with every node's features, so held-out nodes still contribute to
//! their neighbours' aggregated features.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::gcr::{probabilities, CoefficientMatrix, Dataset, Labels};
use crate::par;
use crate::rng::rng_from_seed;
use crate::solver::{fit, fit_warm, FitConfig};
use crate::transfer::{correction_step, propagated, source_step, trans_gcr_views, DomainView, TransferConfig};

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPartition {
    pub folds: Vec<Vec<usize>>,
    pub seed: u64,
}

impl FoldPartition {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }
}

/// Uniformly random partition of `0..n0` into `v` folds whose sizes differ
/// by at most one. Each fold is returned sorted.
pub fn partition_folds(n0: usize, v: usize, seed: u64) -> Result<FoldPartition> {
    partition_items((0..n0).collect(), v, seed)
}

fn partition_items(mut items: Vec<usize>, v: usize, seed: u64) -> Result<FoldPartition> {
    if v < 2 || v > items.len() {
        return Err(Error::InvalidArgument(format!(
            "fold count {v} must lie in [2, {}]",
            items.len()
        )));
    }
    let mut rng = rng_from_seed(seed);
    items.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); v];
    for (pos, item) in items.into_iter().enumerate() {
        folds[pos % v].push(item);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPartition { folds, seed })
}

/// Held-out negative log-likelihood from precomputed features:
/// `-Σ_{i ∈ test} Σ_c [Y_ic log P_ic + (1 - Y_ic) log(1 - P_ic)]`.
pub fn held_out_nll_features(
    z: ArrayView2<'_, f64>,
    labels: &Labels,
    beta: &CoefficientMatrix,
    test_nodes: &[usize],
) -> Result<f64> {
    if let Some(&bad) = test_nodes.iter().find(|&&i| i >= z.nrows()) {
        return Err(Error::InvalidArgument(format!(
            "test node {bad} out of range for {} nodes",
            z.nrows()
        )));
    }
    let p = probabilities(z, beta)?;
    let mut nl = 0.0;
    for &i in test_nodes {
        for c in 0..beta.num_classes() {
            let pic = p[[i, c]].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            nl -= if labels.get(i) == c {
                pic.ln()
            } else {
                (1.0 - pic).ln()
            };
        }
    }
    Ok(nl)
}

/// Held-out negative log-likelihood on `test_nodes`, propagating over the
/// full target graph with `m` hops.
pub fn held_out_nll(target: &Dataset, beta: &CoefficientMatrix, test_nodes: &[usize], m: usize) -> Result<f64> {
    let z = propagated(target, m)?;
    held_out_nll_features(z.view(), &target.labels, beta, test_nodes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferabilityReport {
    /// Mean held-out NL per source; lower is more transferable.
    pub scores: Vec<f64>,
    /// `fold_scores[k][v]` for source `k` and fold `v`.
    pub fold_scores: Vec<Vec<f64>>,
    pub folds: FoldPartition,
}

impl TransferabilityReport {
    /// All source indices from lowest to highest score.
    pub fn ranking(&self) -> Vec<usize> {
        rank_by_score(&self.scores)
    }

    pub fn select(&self, l: usize) -> Vec<usize> {
        select_sources(&self.scores, l)
    }
}

fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Indices of the `l` lowest scores, lowest first; ties go to the smaller
/// index.
pub fn select_sources(scores: &[f64], l: usize) -> Vec<usize> {
    let mut order = rank_by_score(scores);
    order.truncate(l);
    order
}

/// Visible nodes that remain for training once `fold` is held out.
fn training_mask(base: &[bool], fold: &[usize]) -> Vec<bool> {
    let mut mask = base.to_vec();
    for &i in fold {
        mask[i] = false;
    }
    mask
}

fn visible_nodes(mask: &[bool]) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask[i]).collect()
}

/// Scores each candidate source by V-fold cross-validated held-out NL of
/// the two-step estimator fitted with that source alone.
///
/// Folds partition the target's visible nodes. Each (source, fold) cell is
/// independent; cells run in parallel and are merged by index.
pub fn transferability_scores(
    target: &Dataset,
    sources: &[Dataset],
    v: usize,
    config: &TransferConfig,
    seed: u64,
) -> Result<TransferabilityReport> {
    let folds = partition_items(visible_nodes(&target.mask), v, seed)?;
    let target_z = propagated(target, config.hops).map_err(|e| e.in_step("propagating target"))?;
    let source_z: Vec<_> = par::map_slice(sources, |s| propagated(s, config.hops))
        .into_iter()
        .enumerate()
        .map(|(k, r)| r.map_err(|e| e.in_step(format!("propagating source {k}"))))
        .collect::<Result<_>>()?;
    let masks: Vec<Vec<bool>> = folds.folds.iter().map(|f| training_mask(&target.mask, f)).collect();
    if let Some(v) = masks.iter().position(|m| !m.iter().any(|&b| b)) {
        return Err(Error::NoTrainingLabels(format!("fold {v}")));
    }

    let cells = par::map_range(sources.len() * v, |cell| {
        let (k, f) = (cell / v, cell % v);
        let target_view = DomainView {
            features: target_z.view(),
            labels: &target.labels,
            mask: &masks[f],
        };
        let source_view = DomainView {
            features: source_z[k].view(),
            labels: &sources[k].labels,
            mask: &sources[k].mask,
        };
        trans_gcr_views(target_view, &[source_view], config)
            .and_then(|r| held_out_nll_features(target_z.view(), &target.labels, &r.beta_target, &folds.folds[f]))
            .map_err(|e| e.in_step(format!("source {k}, fold {f}")))
    });
    let cells = cells.into_iter().collect::<Result<Vec<f64>>>()?;
    let fold_scores: Vec<Vec<f64>> = cells.chunks(v).map(|c| c.to_vec()).collect();
    let scores = fold_scores
        .iter()
        .map(|f| f.iter().sum::<f64>() / v as f64)
        .collect();
    Ok(TransferabilityReport {
        scores,
        fold_scores,
        folds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvCell {
    pub hops: usize,
    pub lambda: f64,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub best_hops: usize,
    pub best_lambda: f64,
    /// One entry per grid cell, in grid order.
    pub table: Vec<CvCell>,
    pub folds: FoldPartition,
}

/// V-fold cross-validation of `(hops, λ)` on a single dataset's visible
/// labels. Within each hop count the λ values are fitted from largest to
/// smallest, each warm-started from the previous solution.
///
/// The winner has the lowest mean held-out NL; ties go to fewer hops, then
/// to the smaller λ.
pub fn cv_hyperparams(
    dataset: &Dataset,
    grid: &[(usize, f64)],
    v: usize,
    solver: &FitConfig,
    seed: u64,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    let folds = partition_items(visible_nodes(&dataset.mask), v, seed)?;
    let masks: Vec<Vec<bool>> = folds.folds.iter().map(|f| training_mask(&dataset.mask, f)).collect();
    if let Some(f) = masks.iter().position(|m| !m.iter().any(|&b| b)) {
        return Err(Error::NoTrainingLabels(format!("fold {f}")));
    }

    let mut hop_values: Vec<usize> = grid.iter().map(|&(m, _)| m).collect();
    hop_values.sort_unstable();
    hop_values.dedup();
    let features = par::map_slice(&hop_values, |&m| propagated(dataset, m))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    // One job per (hop count, fold): a warm-started path down the λ values.
    let jobs = par::map_range(hop_values.len() * v, |job| {
        let (h, f) = (job / v, job % v);
        let mut lambdas: Vec<f64> = grid
            .iter()
            .filter(|&&(m, _)| m == hop_values[h])
            .map(|&(_, l)| l)
            .collect();
        lambdas.sort_by(|a, b| b.total_cmp(a));
        lambdas.dedup();
        let z = features[h].view();
        let mut current: Option<CoefficientMatrix> = None;
        let mut out = Vec::with_capacity(lambdas.len());
        for lambda in lambdas {
            let cfg = FitConfig { lambda, ..*solver };
            let result = match &current {
                None => fit(z, &dataset.labels, &masks[f], &cfg)?,
                Some(init) => fit_warm(z, &dataset.labels, &masks[f], init, &cfg)?,
            };
            let nl = held_out_nll_features(z, &dataset.labels, &result.coefficients, &folds.folds[f])?;
            out.push((lambda, nl));
            current = Some(result.coefficients);
        }
        Ok::<_, Error>(out)
    });
    let jobs = jobs.into_iter().collect::<Result<Vec<_>>>()?;

    let table: Vec<CvCell> = grid
        .iter()
        .map(|&(m, lambda)| {
            let h = hop_values.binary_search(&m).expect("hop value present");
            let fold_scores: Vec<f64> = (0..v)
                .map(|f| {
                    jobs[h * v + f]
                        .iter()
                        .find(|(l, _)| l.total_cmp(&lambda).is_eq())
                        .map(|&(_, nl)| nl)
                        .expect("lambda fitted")
                })
                .collect();
            let mean = fold_scores.iter().sum::<f64>() / v as f64;
            CvCell {
                hops: m,
                lambda,
                fold_scores,
                mean,
            }
        })
        .collect();

    let best = table
        .iter()
        .min_by(|a, b| {
            a.mean
                .total_cmp(&b.mean)
                .then(a.hops.cmp(&b.hops))
                .then(a.lambda.total_cmp(&b.lambda))
        })
        .expect("non-empty grid");
    Ok(CvResult {
        best_hops: best.hops,
        best_lambda: best.lambda,
        table,
        folds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferCv {
    /// Index of the winning configuration.
    pub best: usize,
    /// Mean held-out NL per configuration, in input order.
    pub scores: Vec<f64>,
    pub folds: FoldPartition,
}

/// V-fold cross-validation of complete transfer configurations on the
/// target's visible labels.
///
/// Without target pooling the source step does not see the target, so it
/// is fitted once per distinct `lambda_beta` and shared across folds. Ties
/// go to the earlier configuration.
pub fn cv_transfer<'a>(
    target: DomainView<'a>,
    sources: &[DomainView<'a>],
    configs: &[TransferConfig],
    v: usize,
    seed: u64,
) -> Result<TransferCv> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("empty transfer configuration grid".into()));
    }
    let folds = partition_items(visible_nodes(target.mask), v, seed)?;
    let masks: Vec<Vec<bool>> = folds.folds.iter().map(|f| training_mask(target.mask, f)).collect();
    if let Some(f) = masks.iter().position(|m| !m.iter().any(|&b| b)) {
        return Err(Error::NoTrainingLabels(format!("fold {f}")));
    }
    let short_sources: Vec<DomainView<'_>> = sources.iter().map(|s| s.reborrow()).collect();
    let fold_view = |f: usize| DomainView {
        features: target.features.reborrow(),
        labels: target.labels,
        mask: &masks[f],
    };

    // Shared source fits, keyed by position of the first config using them.
    let shared: Vec<usize> = configs
        .iter()
        .map(|c| {
            configs
                .iter()
                .position(|o| !c.include_target_in_pool && !o.include_target_in_pool && o.source_fit() == c.source_fit())
                .unwrap_or(usize::MAX)
        })
        .collect();
    let owners: Vec<usize> = (0..configs.len()).filter(|&i| shared[i] == i).collect();
    let source_fits = par::map_slice(&owners, |&i| source_step(target, sources, &configs[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let cells = par::map_range(configs.len() * v, |cell| {
        let (i, f) = (cell / v, cell % v);
        let view = fold_view(f);
        let source_fit = match owners.binary_search(&shared[i]) {
            Ok(pos) => source_fits[pos].clone(),
            Err(_) => source_step(view, &short_sources, &configs[i])?,
        };
        let r = correction_step(view, source_fit, &configs[i])?;
        held_out_nll_features(target.features, target.labels, &r.beta_target, &folds.folds[f])
    });
    let cells = cells.into_iter().collect::<Result<Vec<f64>>>()?;
    let scores: Vec<f64> = cells.chunks(v).map(|c| c.iter().sum::<f64>() / v as f64).collect();
    let best = (0..scores.len())
        .min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)))
        .expect("non-empty grid");
    Ok(TransferCv { best, scores, folds })
}
