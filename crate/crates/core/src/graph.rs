//! Undirected graphs, symmetric normalization, feature propagation and
//! random-graph generators.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::rng_from_seed;

/// Undirected simple graph on nodes `0..n`.
///
/// Edges are stored once as sorted `(u, v)` pairs with `u < v`, alongside a
/// sorted neighbour list per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Graph with `n` nodes and no edges.
    pub fn empty(n: usize) -> Self {
        Graph {
            n,
            edges: Vec::new(),
            neighbors: vec![Vec::new(); n],
        }
    }

    /// Builds a graph from unordered pairs.
    ///
    /// Self-loops, out-of-range endpoints and repeated pairs (in either
    /// orientation) are rejected.
    pub fn from_edges(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut edges = Vec::new();
        for (u, v) in pairs {
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop at node {u}")));
            }
            if u >= n || v >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) out of range for {n} nodes"
                )));
            }
            edges.push((u.min(v), u.max(v)));
        }
        edges.sort_unstable();
        if let Some(w) = edges.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidGraph(format!(
                "duplicate edge ({}, {})",
                w[0].0, w[0].1
            )));
        }
        Ok(Self::from_sorted_unique(n, edges))
    }

    /// `edges` must be sorted, unique, with `u < v < n`.
    fn from_sorted_unique(n: usize, edges: Vec<(usize, usize)>) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Graph {
            n,
            edges,
            neighbors,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Sorted `(u, v)` pairs with `u < v`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    /// Fraction of node pairs that are connected, `2|E| / (n(n-1))`.
    pub fn density(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        2.0 * self.edges.len() as f64 / (self.n as f64 * (self.n as f64 - 1.0))
    }

    /// Disjoint union, relabelling each graph's nodes after the previous ones.
    pub fn disjoint_union<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> Graph {
        let mut n = 0;
        let mut edges = Vec::new();
        for g in graphs {
            edges.extend(g.edges.iter().map(|&(u, v)| (u + n, v + n)));
            n += g.n;
        }
        Graph::from_sorted_unique(n, edges)
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` stored in CSR form, `D` being the degree
/// matrix of `A + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let range = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[range.clone()], &self.values[range])
    }

    /// Entry `(i, j)`, zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// One sparse-dense product `S X`.
    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let d = x.ncols();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.n * d];
        par::for_each_row(&mut out, d, |i, row| {
            let (cols, vals) = self.row(i);
            for (&j, &s) in cols.iter().zip(vals) {
                let src = &xs[j * d..(j + 1) * d];
                for (o, &v) in row.iter_mut().zip(src) {
                    *o += s * v;
                }
            }
        });
        Array2::from_shape_vec((self.n, d), out).expect("shape")
    }
}

/// Symmetric normalization with self-loops added.
pub fn normalize_adjacency(g: &Graph) -> NormalizedAdjacency {
    let n = g.num_nodes();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(n + 2 * g.num_edges());
    let mut values = Vec::with_capacity(n + 2 * g.num_edges());
    indptr.push(0);
    for i in 0..n {
        let di = (g.degree(i) + 1) as f64;
        let mut diag_done = false;
        for &j in g.neighbors(i) {
            if !diag_done && j > i {
                indices.push(i);
                values.push(di.recip());
                diag_done = true;
            }
            indices.push(j);
            // Product of the two degrees first so that (i, j) and (j, i)
            // round identically.
            let dj = (g.degree(j) + 1) as f64;
            values.push((di * dj).sqrt().recip());
        }
        if !diag_done {
            indices.push(i);
            values.push(di.recip());
        }
        indptr.push(indices.len());
    }
    NormalizedAdjacency {
        n,
        indptr,
        indices,
        values,
    }
}

/// How a feature matrix was aggregated over the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scaling {
    /// `S^M X` with the normalized adjacency.
    SymNormalized,
    /// `A X / sqrt(n p)`.
    ErScaled,
}

/// Graph-aggregated node features.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedFeatures {
    values: Array2<f64>,
    hops: usize,
    scaling: Scaling,
}

impl PropagatedFeatures {
    /// Wraps an already aggregated matrix, checking that it is finite.
    pub fn new(values: Array2<f64>, hops: usize, scaling: Scaling) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("propagated features"));
        }
        Ok(PropagatedFeatures {
            values,
            hops,
            scaling,
        })
    }

    /// Unaggregated features, treated as zero hops.
    pub fn raw(x: Array2<f64>) -> Result<Self> {
        Self::new(x, 0, Scaling::SymNormalized)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

/// `S^m X` by `m` successive sparse-dense products.
pub fn propagate(
    s: &NormalizedAdjacency,
    x: ArrayView2<'_, f64>,
    m: usize,
) -> Result<PropagatedFeatures> {
    if x.nrows() != s.num_nodes() {
        return Err(Error::DimensionMismatch {
            context: "propagate (feature rows vs graph nodes)",
            expected: s.num_nodes(),
            found: x.nrows(),
        });
    }
    let mut z = x.to_owned();
    for _ in 0..m {
        z = s.apply(z.view());
    }
    PropagatedFeatures::new(z, m, Scaling::SymNormalized)
}

/// `A X / sqrt(n p)` with the raw (loop-free) adjacency.
///
/// When `p` is `None` the in-sample density `2|E| / (n(n-1))` is used.
pub fn er_scale(g: &Graph, x: ArrayView2<'_, f64>, p: Option<f64>) -> Result<PropagatedFeatures> {
    let n = g.num_nodes();
    if x.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "er_scale (feature rows vs graph nodes)",
            expected: n,
            found: x.nrows(),
        });
    }
    let p_eff = match p {
        Some(p) if p > 0.0 && p <= 1.0 => p,
        Some(p) => {
            return Err(Error::InvalidProbability {
                what: "ER scaling",
                value: p,
                range: "(0, 1]",
            })
        }
        None => {
            let p_hat = g.density();
            if p_hat <= 0.0 {
                return Err(Error::UndefinedScaling(
                    "graph has no edges, so the estimated edge probability is zero".into(),
                ));
            }
            p_hat
        }
    };
    let scale = (n as f64 * p_eff).sqrt().recip();
    let d = x.ncols();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * d];
    par::for_each_row(&mut out, d, |i, row| {
        for &j in g.neighbors(i) {
            for (o, &v) in row.iter_mut().zip(&xs[j * d..(j + 1) * d]) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|o| *o *= scale);
    });
    let z = Array2::from_shape_vec((n, d), out).expect("shape");
    PropagatedFeatures::new(z, 1, Scaling::ErScaled)
}

fn check_probability(what: &'static str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidProbability {
            what,
            value: p,
            range: "[0, 1]",
        })
    }
}

/// Samples every unordered pair `(i, j)`, `i < j`, in lexicographic order
/// with probability `prob(i, j)`.
fn sample_pairs<R: Rng>(n: usize, rng: &mut R, mut prob: impl FnMut(usize, usize) -> f64) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < prob(i, j) {
                edges.push((i, j));
            }
        }
    }
    Graph::from_sorted_unique(n, edges)
}

/// Erdős–Rényi `G(n, p)`.
pub fn gen_er(n: usize, p: f64, seed: u64) -> Result<Graph> {
    check_probability("ER edge probability", p)?;
    let mut rng = rng_from_seed(seed);
    Ok(sample_pairs(n, &mut rng, |_, _| p))
}

/// Stochastic block model with contiguous blocks.
pub fn gen_sbm(block_sizes: &[usize], within: f64, between: f64, seed: u64) -> Result<Graph> {
    check_probability("SBM within-block probability", within)?;
    check_probability("SBM between-block probability", between)?;
    if block_sizes.is_empty() || block_sizes.contains(&0) {
        return Err(Error::InvalidArgument(
            "SBM block sizes must be non-empty and positive".into(),
        ));
    }
    let block: Vec<usize> = block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &size)| std::iter::repeat_n(b, size))
        .collect();
    let mut rng = rng_from_seed(seed);
    Ok(sample_pairs(block.len(), &mut rng, |i, j| {
        if block[i] == block[j] {
            within
        } else {
            between
        }
    }))
}

/// Built-in graphons.
///
/// The textual form used in config files is `const:<p>`, `product:<rho>`
/// (`rho * u * v`) or `min:<rho>` (`rho * min(u, v)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Graphon {
    Constant(f64),
    Product(f64),
    Min(f64),
}

impl Graphon {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        match *self {
            Graphon::Constant(p) => p,
            Graphon::Product(rho) => rho * u * v,
            Graphon::Min(rho) => rho * u.min(v),
        }
    }
}

impl fmt::Display for Graphon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Graphon::Constant(p) => write!(f, "const:{p}"),
            Graphon::Product(r) => write!(f, "product:{r}"),
            Graphon::Min(r) => write!(f, "min:{r}"),
        }
    }
}

impl FromStr for Graphon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognised graphon '{s}'"));
        let (kind, param) = s.split_once(':').ok_or_else(bad)?;
        let param: f64 = param.trim().parse().map_err(|_| bad())?;
        match kind.trim() {
            "const" | "constant" => Ok(Graphon::Constant(param)),
            "product" => Ok(Graphon::Product(param)),
            "min" => Ok(Graphon::Min(param)),
            _ => Err(bad()),
        }
    }
}

/// W-random graph: latent `u_i ~ U(0, 1)`, then each pair connected with
/// probability `w(u_i, u_j)`.
///
/// Fails if `w` leaves `[0, 1]` at any evaluated pair.
pub fn gen_graphon(n: usize, w: impl Fn(f64, f64) -> f64, seed: u64) -> Result<Graph> {
    let mut rng = rng_from_seed(seed);
    let latent: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = w(latent[i], latent[j]);
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidProbability {
                    what: "graphon value",
                    value: p,
                    range: "[0, 1]",
                });
            }
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Ok(Graph::from_sorted_unique(n, edges))
}
