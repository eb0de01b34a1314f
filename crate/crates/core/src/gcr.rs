//! The GCR probability model: multinomial logit on aggregated features
//! with the last class as the zero-coefficient reference.
//!
//! Class indices are 0-based in memory (`0..C`, reference class `C - 1`);
//! text formats use `1..=C`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::rng_from_seed;

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Coefficients `β ∈ R^{d × (C-1)}`; the reference class is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    values: Array2<f64>,
    num_classes: usize,
}

impl CoefficientMatrix {
    pub fn new(values: Array2<f64>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if values.ncols() != num_classes - 1 {
            return Err(Error::DimensionMismatch {
                context: "coefficient columns (C - 1)",
                expected: num_classes - 1,
                found: values.ncols(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coefficients"));
        }
        Ok(CoefficientMatrix {
            values,
            num_classes,
        })
    }

    pub fn zeros(num_features: usize, num_classes: usize) -> Self {
        assert!(num_classes >= 2, "need at least 2 classes");
        CoefficientMatrix {
            values: Array2::zeros((num_features, num_classes - 1)),
            num_classes,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn num_features(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Column `c`, i.e. `β_c` for `c < C - 1`.
    pub fn column(&self, c: usize) -> ArrayView1<'_, f64> {
        self.values.column(c)
    }

    /// `Σ_c ||β_c||_1`.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    /// Number of nonzero entries.
    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    /// Element-wise sum with a matrix of the same shape.
    pub fn add(&self, other: &CoefficientMatrix) -> Result<CoefficientMatrix> {
        self.check_same_shape(other)?;
        Ok(CoefficientMatrix {
            values: &self.values + &other.values,
            num_classes: self.num_classes,
        })
    }

    pub(crate) fn check_same_shape(&self, other: &CoefficientMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::DimensionMismatch {
                context: "number of classes",
                expected: self.num_classes,
                found: other.num_classes,
            });
        }
        if self.num_features() != other.num_features() {
            return Err(Error::DimensionMismatch {
                context: "number of features",
                expected: self.num_features(),
                found: other.num_features(),
            });
        }
        Ok(())
    }
}

/// One class index per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    classes: Vec<usize>,
    num_classes: usize,
}

impl Labels {
    /// `classes` are 0-based and must be `< num_classes`.
    pub fn new(classes: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some((i, &c)) = classes.iter().enumerate().find(|(_, &c)| c >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "node {i} has class index {c}, outside 0..{num_classes}"
            )));
        }
        Ok(Labels {
            classes,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.classes
    }

    pub fn get(&self, node: usize) -> usize {
        self.classes[node]
    }

    /// `Y_ic` as 0/1.
    #[inline]
    pub fn indicator(&self, node: usize, class: usize) -> f64 {
        if self.classes[node] == class {
            1.0
        } else {
            0.0
        }
    }

    /// Dense one-hot `n × C` matrix.
    pub fn one_hot(&self) -> Array2<f64> {
        let mut y = Array2::zeros((self.len(), self.num_classes));
        for (i, &c) in self.classes.iter().enumerate() {
            y[[i, c]] = 1.0;
        }
        y
    }
}

/// One domain: graph, node features, labels and label visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: Graph,
    pub features: Array2<f64>,
    pub labels: Labels,
    /// `true` where the node's label may be used for fitting.
    pub mask: Vec<bool>,
}

impl Dataset {
    pub fn new(graph: Graph, features: Array2<f64>, labels: Labels, mask: Vec<bool>) -> Result<Self> {
        let n = graph.num_nodes();
        for (context, found) in [
            ("feature rows", features.nrows()),
            ("label count", labels.len()),
            ("mask length", mask.len()),
        ] {
            if found != n {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: n,
                    found,
                });
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        Ok(Dataset {
            graph,
            features,
            labels,
            mask,
        })
    }

    /// Dataset with every label visible.
    pub fn fully_visible(graph: Graph, features: Array2<f64>, labels: Labels) -> Result<Self> {
        let n = graph.num_nodes();
        Self::new(graph, features, labels, vec![true; n])
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn num_visible(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Copy with a different visibility mask.
    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        Self::new(
            self.graph.clone(),
            self.features.clone(),
            self.labels.clone(),
            mask,
        )
    }
}

fn check_inputs(z: ArrayView2<'_, f64>, b: &CoefficientMatrix) -> Result<()> {
    if z.ncols() != b.num_features() {
        return Err(Error::DimensionMismatch {
            context: "feature columns vs coefficient rows",
            expected: b.num_features(),
            found: z.ncols(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    Ok(())
}

fn check_labels(z: ArrayView2<'_, f64>, y: &Labels, mask: &[bool], b: &CoefficientMatrix) -> Result<()> {
    check_inputs(z, b)?;
    if y.num_classes() != b.num_classes() {
        return Err(Error::DimensionMismatch {
            context: "label classes vs coefficient classes",
            expected: b.num_classes(),
            found: y.num_classes(),
        });
    }
    for (context, found) in [("label count", y.len()), ("mask length", mask.len())] {
        if found != z.nrows() {
            return Err(Error::DimensionMismatch {
                context,
                expected: z.nrows(),
                found,
            });
        }
    }
    Ok(())
}

/// Linear scores `Z β`, shape `n × (C-1)`.
pub fn logits(z: ArrayView2<'_, f64>, b: &CoefficientMatrix) -> Array2<f64> {
    z.dot(b.values())
}

/// Class probabilities, shape `n × C`, computed with log-sum-exp.
pub fn probabilities(z: ArrayView2<'_, f64>, b: &CoefficientMatrix) -> Result<Array2<f64>> {
    check_inputs(z, b)?;
    let eta = logits(z, b);
    let classes = b.num_classes();
    let mut p = Array2::zeros((z.nrows(), classes));
    for (i, row) in eta.rows().into_iter().enumerate() {
        let shift = row.iter().fold(0.0_f64, |m, &v| m.max(v));
        let reference = (-shift).exp();
        let denom = reference + row.iter().map(|&v| (v - shift).exp()).sum::<f64>();
        for (c, &v) in row.iter().enumerate() {
            p[[i, c]] = (v - shift).exp() / denom;
        }
        p[[i, classes - 1]] = reference / denom;
    }
    Ok(p)
}

/// Penalized negative log-likelihood, summed over masked-in nodes as
/// independent per-class logistic terms (the reference class contributes
/// `log 2` per node).
pub fn loss(
    z: ArrayView2<'_, f64>,
    y: &Labels,
    mask: &[bool],
    b: &CoefficientMatrix,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "penalty must be non-negative, got {lambda}"
        )));
    }
    check_labels(z, y, mask, b)?;
    let eta = logits(z, b);
    let mut nll = 0.0;
    for (i, row) in eta.rows().into_iter().enumerate() {
        if !mask[i] {
            continue;
        }
        for (c, &e) in row.iter().enumerate() {
            nll -= y.indicator(i, c) * e - log1p_exp(e);
        }
        nll += std::f64::consts::LN_2;
    }
    Ok(nll + lambda * b.l1_norm())
}

/// Gradient of the smooth part of [`loss`] with respect to `β`.
pub fn gradient(
    z: ArrayView2<'_, f64>,
    y: &Labels,
    mask: &[bool],
    b: &CoefficientMatrix,
) -> Result<Array2<f64>> {
    check_labels(z, y, mask, b)?;
    let eta = logits(z, b);
    let mut residual = Array2::<f64>::zeros(eta.raw_dim());
    for (i, row) in eta.rows().into_iter().enumerate() {
        if !mask[i] {
            continue;
        }
        for (c, &e) in row.iter().enumerate() {
            residual[[i, c]] = y.indicator(i, c) - sigmoid(e);
        }
    }
    Ok(-z.t().dot(&residual))
}

/// Most probable class per node; ties go to the smaller index.
pub fn predict(z: ArrayView2<'_, f64>, b: &CoefficientMatrix) -> Result<Labels> {
    let p = probabilities(z, b)?;
    let classes = p
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Labels::new(classes, b.num_classes())
}

/// Draws each node's class from its model probabilities.
pub fn sample_labels(z: ArrayView2<'_, f64>, b: &CoefficientMatrix, seed: u64) -> Result<Labels> {
    let p = probabilities(z, b)?;
    let mut rng = rng_from_seed(seed);
    let last = b.num_classes() - 1;
    let classes = p
        .rows()
        .into_iter()
        .map(|row| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (c, &v) in row.iter().enumerate() {
                acc += v;
                if u < acc {
                    return c;
                }
            }
            // Rounding left the cumulative sum just below one.
            row.iter().rposition(|&v| v > 0.0).unwrap_or(last)
        })
        .collect();
    Labels::new(classes, b.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        })
    }

    #[test]
    fn stable_primitives() {
        assert_eq!(log1p_exp(1000.0), 1000.0);
        assert!(log1p_exp(-1000.0) >= 0.0 && log1p_exp(-1000.0) < 1e-300);
        assert!((log1p_exp(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }

    #[test]
    fn zero_coefficients_give_uniform_probabilities() {
        let z = array![[1.0, 2.0], [-3.0, 0.5]];
        let p = probabilities(z.view(), &CoefficientMatrix::zeros(2, 4)).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn binary_probability_from_logit() {
        let z = array![[3.0_f64.ln()]];
        let b = CoefficientMatrix::new(array![[1.0]], 2).unwrap();
        let p = probabilities(z.view(), &b).unwrap();
        assert!((p[[0, 0]] - 0.75).abs() < 1e-15);
        assert!((p[[0, 1]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let z = array![[1000.0]];
        let b = CoefficientMatrix::new(array![[1.0, 1.0]], 3).unwrap();
        let p = probabilities(z.view(), &b).unwrap();
        assert!((p[[0, 0]] - 0.5).abs() < 1e-9);
        assert!((p[[0, 1]] - 0.5).abs() < 1e-9);
        assert!(p[[0, 2]] >= 0.0 && p[[0, 2]] < 1e-300);
    }

    #[test]
    fn probabilities_reject_bad_input() {
        let b = CoefficientMatrix::zeros(3, 3);
        assert!(probabilities(Array2::zeros((2, 2)).view(), &b).is_err());
        let z = array![[f64::NAN, 0.0, 0.0]];
        assert!(matches!(probabilities(z.view(), &b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn loss_at_zero_is_n_c_log2() {
        let z = Array2::<f64>::ones((5, 2));
        let y = Labels::new(vec![0, 1, 2, 0, 1], 3).unwrap();
        let v = loss(z.view(), &y, &[true; 5], &CoefficientMatrix::zeros(2, 3), 0.0).unwrap();
        assert!((v - 5.0 * 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn penalty_is_linear() {
        let z = array![[0.3, -1.0], [2.0, 0.1]];
        let y = Labels::new(vec![0, 1], 2).unwrap();
        let b = CoefficientMatrix::new(array![[2.5], [0.0]], 2).unwrap();
        let l1 = loss(z.view(), &y, &[true, true], &b, 1.0).unwrap();
        let l0 = loss(z.view(), &y, &[true, true], &b, 0.0).unwrap();
        assert!((l1 - l0 - 2.5).abs() < 1e-12);
        assert!(loss(z.view(), &y, &[true, true], &b, -1.0).is_err());
    }

    /// Scalar re-implementation summing every term separately.
    fn loss_oracle(z: &Array2<f64>, y: &[usize], mask: &[bool], b: &Array2<f64>, c: usize, lambda: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..z.nrows() {
            if !mask[i] {
                continue;
            }
            for class in 0..c {
                let mut e = 0.0;
                if class < c - 1 {
                    for j in 0..z.ncols() {
                        e += z[[i, j]] * b[[j, class]];
                    }
                }
                let yic = if y[i] == class { 1.0 } else { 0.0 };
                total -= yic * e - (1.0 + e.exp()).ln();
            }
        }
        let mut pen = 0.0;
        for v in b.iter() {
            pen += v.abs();
        }
        total + lambda * pen
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let z = random_matrix(8, 3, 1.0, &mut rng);
            let b = random_matrix(3, 2, 0.7, &mut rng);
            let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
            let mask: Vec<bool> = (0..8).map(|_| rng.random_bool(0.7)).collect();
            let labels = Labels::new(y.clone(), 3).unwrap();
            let coef = CoefficientMatrix::new(b.clone(), 3).unwrap();
            let got = loss(z.view(), &labels, &mask, &coef, 0.3).unwrap();
            let want = loss_oracle(&z, &y, &mask, &b, 3, 0.3);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn gradient_balanced_residuals_vanish() {
        let z = Array2::<f64>::ones((4, 1));
        let y = Labels::new(vec![0, 0, 1, 1], 2).unwrap();
        let g = gradient(z.view(), &y, &[true; 4], &CoefficientMatrix::zeros(1, 2)).unwrap();
        assert_eq!(g[[0, 0]], 0.0);
    }

    #[test]
    fn gradient_with_empty_mask_is_zero() {
        let z = array![[1.0, 2.0], [3.0, -1.0]];
        let y = Labels::new(vec![0, 2], 3).unwrap();
        let b = CoefficientMatrix::new(array![[0.1, 0.2], [0.3, -0.4]], 3).unwrap();
        let g = gradient(z.view(), &y, &[false, false], &b).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random_matrix(10, 4, 1.0, &mut rng);
        let b = random_matrix(4, 2, 0.5, &mut rng);
        let y = Labels::new((0..10).map(|_| rng.random_range(0..3)).collect(), 3).unwrap();
        let mask = vec![true; 10];
        let coef = CoefficientMatrix::new(b.clone(), 3).unwrap();
        let g = gradient(z.view(), &y, &mask, &coef).unwrap();
        let h = 1e-5;
        for j in 0..4 {
            for c in 0..2 {
                let mut plus = b.clone();
                plus[[j, c]] += h;
                let mut minus = b.clone();
                minus[[j, c]] -= h;
                let lp = loss(z.view(), &y, &mask, &CoefficientMatrix::new(plus, 3).unwrap(), 0.0).unwrap();
                let lm = loss(z.view(), &y, &mask, &CoefficientMatrix::new(minus, 3).unwrap(), 0.0).unwrap();
                assert!(((lp - lm) / (2.0 * h) - g[[j, c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn predict_tie_break_and_sign_rule() {
        let z = array![[1.0], [-1.0]];
        let zero = CoefficientMatrix::zeros(1, 3);
        assert_eq!(predict(z.view(), &zero).unwrap().as_slice(), &[0, 0]);
        let b = CoefficientMatrix::new(array![[2.0]], 2).unwrap();
        assert_eq!(predict(z.view(), &b).unwrap().as_slice(), &[0, 1]);
    }

    #[test]
    fn predict_matches_probability_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_matrix(50, 3, 1.0, &mut rng);
        let coef = CoefficientMatrix::new(random_matrix(3, 3, 1.0, &mut rng), 4).unwrap();
        let p = probabilities(z.view(), &coef).unwrap();
        let pred = predict(z.view(), &coef).unwrap();
        for (i, row) in p.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let oracle = row.iter().position(|&v| v == max).unwrap();
            assert_eq!(pred.get(i), oracle);
        }
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let n = 30000;
        let z = Array2::<f64>::ones((n, 1));
        let labels = sample_labels(z.view(), &CoefficientMatrix::zeros(1, 3), 17).unwrap();
        let sd = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in 0..3 {
            let count = labels.as_slice().iter().filter(|&&v| v == c).count() as f64;
            assert!((count - n as f64 / 3.0).abs() < 3.0 * sd, "class {c}: {count}");
        }
    }

    #[test]
    fn degenerate_sampling_and_determinism() {
        let z = Array2::<f64>::ones((100, 1));
        let b = CoefficientMatrix::new(array![[1e6]], 2).unwrap();
        let labels = sample_labels(z.view(), &b, 1).unwrap();
        assert!(labels.as_slice().iter().all(|&c| c == 0));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random_matrix(200, 2, 1.0, &mut rng);
        let b = CoefficientMatrix::new(random_matrix(2, 2, 1.0, &mut rng), 3).unwrap();
        assert_eq!(sample_labels(z.view(), &b, 99).unwrap(), sample_labels(z.view(), &b, 99).unwrap());
    }

    #[test]
    fn dataset_validates_shapes() {
        let g = Graph::empty(3);
        let y = Labels::new(vec![0, 1, 0], 2).unwrap();
        assert!(Dataset::fully_visible(g.clone(), Array2::zeros((3, 2)), y.clone()).is_ok());
        assert!(Dataset::fully_visible(g.clone(), Array2::zeros((2, 2)), y.clone()).is_err());
        assert!(Dataset::new(g, Array2::zeros((3, 2)), y, vec![true]).is_err());
        assert!(Labels::new(vec![0, 3], 3).is_err());
    }
}
