//! Graph convolutional multinomial logistic regression (GCR).
//!
//! Node labels follow a multinomial logit model on graph-aggregated
//! features `S^M X`, where `S` is the self-loop augmented, symmetrically
//! normalized adjacency. Coefficients are estimated by L1-penalized
//! coordinate descent. On top of the single-domain estimator the crate
//! provides the two-step transfer estimator (pool sources, then learn a
//! sparse correction on the target), cross-validated source
//! transferability scoring, and a simulation lab with ER, SBM and graphon
//! generators.
//!
//! Data-parallel loops (replicates, folds, candidate sources, row blocks of
//! sparse products) run on rayon when the `parallel` feature is enabled and
//! fall back to plain iterators otherwise. Results are identical either
//! way: every random stream is derived from an explicit seed.

pub mod error;
pub mod eval;
pub mod gcr;
pub mod graph;
pub mod io;
pub mod par;
pub mod rng;
pub mod select;
pub mod sim;
pub mod solver;
pub mod transfer;

pub use error::{Error, Result};
pub use gcr::{CoefficientMatrix, Dataset, Labels};
pub use graph::{Graph, NormalizedAdjacency, PropagatedFeatures, Scaling};
pub use solver::{FitConfig, FitResult, PenaltyMode};
pub use transfer::{TransferConfig, TransferResult};
