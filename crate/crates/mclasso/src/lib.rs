//! Finite-state Markov chain transition-matrix estimation with
//! equality-pattern discovery: closed-form and bootstrap-smoothed maximum
//! likelihood, equality-constrained fits with likelihood-ratio tests,
//! fused-lasso style penalized estimators (plain and adaptive), ordered
//! k-fold cross-validation, evaluation metrics, and a seeded Monte Carlo
//! study harness.

pub mod chain;
pub mod cli;
pub mod datasets;
pub mod io;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod metrics;
pub mod model_selection;
pub mod penalized;
pub mod stats;

pub use chain::{
    count_transitions, extract_equality_classes, sequence_from_counts, simulate_sequence,
    stationary_distribution, EqualityPartition, InitialState, StateSequence,
    StationaryDistribution, TransitionCounts, TransitionMatrix, ValidityMode,
};
pub use error::{Error, Result};
pub use estimators::{
    bootstrap_mle, constrained_mle, log_likelihood, lrt, mle, LrtResult, ZeroRowPolicy,
};
pub use metrics::{
    asymptotic_covariance, frobenius_distance, purity, selection_accuracy, CovarianceBlocks,
};
pub use model_selection::{cv_score, log_grid, select_lambda, split_folds, CvMethod, CvReport};
pub use penalized::{
    adaptive_weights, pair_set, solve, PairSet, PairWeights, PenalizedFit, SolverOptions,
};
