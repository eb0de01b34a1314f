//! Source pooling, the two-step transfer estimator and the naive pooling
//! baseline.
//!
//! The two-step estimator fits `β^A` on the pooled sources, then fits a
//! correction `δ` on the target with `β^A` held as a fixed offset, and
//! returns `β^A + δ`.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcr::{CoefficientMatrix, Dataset, Labels};
use crate::graph::{normalize_adjacency, propagate, Graph};
use crate::solver::{fit, fit_offset, FitConfig, FitResult, PenaltyMode};

/// Several domains stacked row-wise with a block-diagonal graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledDataset {
    /// First row of each constituent block.
    pub offsets: Vec<usize>,
    pub sizes: Vec<usize>,
    pub dataset: Dataset,
}

impl PooledDataset {
    pub fn num_nodes(&self) -> usize {
        self.dataset.num_nodes()
    }

    /// Row range of block `k`.
    pub fn block(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k] + self.sizes[k]
    }
}

fn check_compatible<'a>(datasets: impl IntoIterator<Item = &'a Dataset>) -> Result<(usize, usize)> {
    let mut iter = datasets.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("cannot pool an empty list of datasets".into()))?;
    let (d, c) = (first.num_features(), first.num_classes());
    for ds in iter {
        if ds.num_features() != d {
            return Err(Error::DimensionMismatch {
                context: "feature dimension across domains",
                expected: d,
                found: ds.num_features(),
            });
        }
        if ds.num_classes() != c {
            return Err(Error::DimensionMismatch {
                context: "class count across domains",
                expected: c,
                found: ds.num_classes(),
            });
        }
    }
    Ok((d, c))
}

/// Concatenates datasets in order; graphs stay disjoint.
pub fn pool_sources(datasets: &[&Dataset]) -> Result<PooledDataset> {
    let (_, classes) = check_compatible(datasets.iter().copied())?;
    let sizes: Vec<usize> = datasets.iter().map(|d| d.num_nodes()).collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &n| {
            let start = *acc;
            *acc += n;
            Some(start)
        })
        .collect();
    let graph = Graph::disjoint_union(datasets.iter().map(|d| &d.graph));
    let views: Vec<ArrayView2<'_, f64>> = datasets.iter().map(|d| d.features.view()).collect();
    let features = concatenate(Axis(0), &views).expect("column counts checked");
    let labels = Labels::new(
        datasets
            .iter()
            .flat_map(|d| d.labels.as_slice().iter().copied())
            .collect(),
        classes,
    )?;
    let mask = datasets.iter().flat_map(|d| d.mask.iter().copied()).collect();
    Ok(PooledDataset {
        offsets,
        sizes,
        dataset: Dataset::new(graph, features, labels, mask)?,
    })
}

/// A domain reduced to what the likelihood needs: propagated features,
/// labels and visibility.
#[derive(Debug, Clone, Copy)]
pub struct DomainView<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: &'a Labels,
    pub mask: &'a [bool],
}

impl DomainView<'_> {
    /// The same view with a shorter lifetime (array views are invariant).
    pub fn reborrow(&self) -> DomainView<'_> {
        DomainView {
            features: self.features.reborrow(),
            labels: self.labels,
            mask: self.mask,
        }
    }
}

/// Propagated features `S^m X` of a dataset.
pub fn propagated(dataset: &Dataset, hops: usize) -> Result<Array2<f64>> {
    let s = normalize_adjacency(&dataset.graph);
    Ok(propagate(&s, dataset.features.view(), hops)?.into_values())
}

/// Owned stacked rows of several domains.
struct Stacked {
    features: Array2<f64>,
    labels: Labels,
    mask: Vec<bool>,
}

fn stack(domains: &[DomainView<'_>]) -> Result<Stacked> {
    let first = domains
        .first()
        .ok_or_else(|| Error::InvalidArgument("no domains to pool".into()))?;
    let views: Vec<ArrayView2<'_, f64>> = domains.iter().map(|d| d.features).collect();
    let features = concatenate(Axis(0), &views).map_err(|_| Error::DimensionMismatch {
        context: "feature dimension across domains",
        expected: first.features.ncols(),
        found: views.iter().map(|v| v.ncols()).find(|&c| c != first.features.ncols()).unwrap_or(0),
    })?;
    let classes = first.labels.num_classes();
    if let Some(d) = domains.iter().find(|d| d.labels.num_classes() != classes) {
        return Err(Error::DimensionMismatch {
            context: "class count across domains",
            expected: classes,
            found: d.labels.num_classes(),
        });
    }
    let labels = Labels::new(
        domains
            .iter()
            .flat_map(|d| d.labels.as_slice().iter().copied())
            .collect(),
        classes,
    )?;
    let mask = domains.iter().flat_map(|d| d.mask.iter().copied()).collect();
    Ok(Stacked {
        features,
        labels,
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub hops: usize,
    pub lambda_beta: f64,
    pub lambda_delta: f64,
    pub penalty_mode: PenaltyMode,
    /// Also pool the target's visible labels into the source fit.
    pub include_target_in_pool: bool,
    /// Tolerance and iteration caps shared by both fits; its `lambda` and
    /// `penalty_mode` are overridden.
    pub solver: FitConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            hops: 1,
            lambda_beta: 0.0,
            lambda_delta: 0.0,
            penalty_mode: PenaltyMode::Delta,
            include_target_in_pool: false,
            solver: FitConfig::default(),
        }
    }
}

impl TransferConfig {
    pub(crate) fn source_fit(&self) -> FitConfig {
        FitConfig {
            lambda: self.lambda_beta,
            ..self.solver
        }
    }

    fn delta_fit(&self) -> FitConfig {
        FitConfig {
            lambda: self.lambda_delta,
            penalty_mode: self.penalty_mode,
            ..self.solver
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferResult {
    /// Estimate from the pooled sources.
    pub beta_source: CoefficientMatrix,
    /// Estimated target correction.
    pub delta: CoefficientMatrix,
    /// `beta_source + delta`.
    pub beta_target: CoefficientMatrix,
    pub source_fit: FitResult,
    pub delta_fit: FitResult,
    pub config: TransferConfig,
}

/// First step: the penalized fit on the pooled sources (plus the target's
/// visible labels when `include_target_in_pool` is set).
pub fn source_step<'a>(
    target: DomainView<'a>,
    sources: &[DomainView<'a>],
    config: &TransferConfig,
) -> Result<FitResult> {
    let mut pool: Vec<DomainView<'a>> = sources.to_vec();
    if config.include_target_in_pool {
        pool.push(target);
    }
    if pool.is_empty() {
        return Err(Error::InvalidArgument(
            "no source domains to pool (and target pooling disabled)".into(),
        ));
    }
    let pooled = stack(&pool).map_err(|e| e.in_step("pooling sources"))?;
    fit(
        pooled.features.view(),
        &pooled.labels,
        &pooled.mask,
        &config.source_fit(),
    )
    .map_err(|e| e.in_step("source estimation"))
}

/// Second step: the target correction on top of a finished source fit.
pub fn correction_step(
    target: DomainView<'_>,
    source_fit: FitResult,
    config: &TransferConfig,
) -> Result<TransferResult> {
    if !target.mask.iter().any(|&m| m) {
        return Err(Error::NoTrainingLabels("the target correction step".into()));
    }
    let beta_source = source_fit.coefficients.clone();
    let delta_fit = fit_offset(
        target.features,
        target.labels,
        target.mask,
        &beta_source,
        &config.delta_fit(),
    )
    .map_err(|e| e.in_step("domain shift estimation"))?;
    let delta = delta_fit.coefficients.clone();
    let beta_target = beta_source.add(&delta)?;
    Ok(TransferResult {
        beta_source,
        delta,
        beta_target,
        source_fit,
        delta_fit,
        config: *config,
    })
}

/// Two-step transfer estimate from already propagated domains.
pub fn trans_gcr_views<'a>(
    target: DomainView<'a>,
    sources: &[DomainView<'a>],
    config: &TransferConfig,
) -> Result<TransferResult> {
    if !target.mask.iter().any(|&m| m) {
        return Err(Error::NoTrainingLabels("the target correction step".into()));
    }
    let source_fit = source_step(target, sources, config)?;
    correction_step(target, source_fit, config)
}

/// Two-step transfer estimate: normalize and propagate every domain, pool
/// the sources, fit `β^A`, fit the correction on the target, and add.
pub fn trans_gcr(target: &Dataset, sources: &[Dataset], config: &TransferConfig) -> Result<TransferResult> {
    check_compatible(std::iter::once(target).chain(sources))?;
    let target_z = propagated(target, config.hops).map_err(|e| e.in_step("propagating target"))?;
    let source_z = sources
        .iter()
        .enumerate()
        .map(|(k, s)| propagated(s, config.hops).map_err(|e| e.in_step(format!("propagating source {k}"))))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<DomainView<'_>> = sources
        .iter()
        .zip(&source_z)
        .map(|(s, z)| DomainView {
            features: z.view(),
            labels: &s.labels,
            mask: &s.mask,
        })
        .collect();
    let target_view = DomainView {
        features: target_z.view(),
        labels: &target.labels,
        mask: &target.mask,
    };
    trans_gcr_views(target_view, &views, config)
}

/// Naive pooling baseline on already propagated domains: one fit on target
/// plus all sources.
pub fn naive_tl_views<'a>(
    target: DomainView<'a>,
    sources: &[DomainView<'a>],
    config: &FitConfig,
) -> Result<FitResult> {
    let mut pool = vec![target];
    pool.extend_from_slice(sources);
    let pooled = stack(&pool)?;
    fit(pooled.features.view(), &pooled.labels, &pooled.mask, config)
}

/// Naive pooling baseline: a single penalized fit on target and sources
/// together.
pub fn naive_tl(
    target: &Dataset,
    sources: &[Dataset],
    hops: usize,
    config: &FitConfig,
) -> Result<CoefficientMatrix> {
    check_compatible(std::iter::once(target).chain(sources))?;
    let target_z = propagated(target, hops)?;
    let source_z = sources
        .iter()
        .map(|s| propagated(s, hops))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<DomainView<'_>> = sources
        .iter()
        .zip(&source_z)
        .map(|(s, z)| DomainView {
            features: z.view(),
            labels: &s.labels,
            mask: &s.mask,
        })
        .collect();
    let target_view = DomainView {
        features: target_z.view(),
        labels: &target.labels,
        mask: &target.mask,
    };
    Ok(naive_tl_views(target_view, &views, config)?.coefficients)
}
