//! Ordered k-fold splitting of sequences and cross-validated selection of
//! the regularization parameter.

use crate::chain::{count_transitions, StateSequence, TransitionCounts};
use crate::error::{Error, Result};
use crate::estimators::{mle, ZeroRowPolicy};
use crate::penalized::{adaptive_weights, pair_set, solve, PairWeights, SolverOptions, DEFAULT_W_MAX};
use rayon::prelude::*;
use serde::Serialize;

/// Which penalized estimator cross-validation fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvMethod {
    McLasso,
    McALasso,
}

/// Held-out probability floor: a zero-probability cell with positive held-out
/// count contributes a large finite penalty.
pub const HOLDOUT_FLOOR: f64 = 1e-9;

/// Splits a sequence into k contiguous blocks in original order; sizes differ
/// by at most one, with the remainder going to the earliest blocks.
/// Transitions are later counted within blocks only.
pub fn split_folds(seq: &StateSequence, k: usize) -> Result<Vec<StateSequence>> {
    if k < 2 {
        return Err(Error::Domain(format!("fold count {k} must be >= 2")));
    }
    let n = seq.len();
    if n < 2 * k {
        return Err(Error::TooShort { n, min: 2 * k });
    }
    let base = n / k;
    let rem = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + if i < rem { 1 } else { 0 };
        let block = seq.states()[start..start + size].to_vec();
        folds.push(StateSequence::new(block, seq.m())?);
        start += size;
    }
    Ok(folds)
}

fn add_counts(acc: &mut Vec<Vec<u64>>, c: &TransitionCounts) {
    for i in 0..c.m() {
        for j in 0..c.m() {
            acc[i][j] += c.get(i, j);
        }
    }
}

fn fit_fold(
    train: &TransitionCounts,
    lambda: f64,
    method: CvMethod,
    gamma: f64,
    opts: &SolverOptions,
) -> Result<crate::chain::TransitionMatrix> {
    let pairs = pair_set(train.m());
    let weights = match method {
        CvMethod::McLasso => PairWeights::unit(&pairs),
        CvMethod::McALasso => {
            let pilot = mle(train, ZeroRowPolicy::Uniform)?;
            adaptive_weights(&pilot, &pairs, gamma, DEFAULT_W_MAX)?
        }
    };
    Ok(solve(train, lambda, &weights, opts)?.estimate)
}

/// Per-fold held-out negative log-likelihoods for one lambda.
fn fold_scores(
    folds: &[TransitionCounts],
    lambda: f64,
    method: CvMethod,
    gamma: f64,
) -> Result<Vec<f64>> {
    let m = folds[0].m();
    let k = folds.len();
    let opts = SolverOptions::default();
    (0..k)
        .map(|kappa| {
            let mut train = vec![vec![0u64; m]; m];
            for (i, f) in folds.iter().enumerate() {
                if i != kappa {
                    add_counts(&mut train, f);
                }
            }
            let train = TransitionCounts::new(&train)?;
            let fit = fit_fold(&train, lambda, method, gamma, &opts)?;
            let test = &folds[kappa];
            let mut score = 0.0;
            for i in 0..m {
                for j in 0..m {
                    let n = test.get(i, j);
                    if n > 0 {
                        score -= n as f64 * fit.get(i, j).max(HOLDOUT_FLOOR).ln();
                    }
                }
            }
            Ok(score)
        })
        .collect()
}

/// Cross-validation score CV(lambda): summed held-out negative log-likelihood
/// over ordered folds.
pub fn cv_score(
    seq: &StateSequence,
    lambda: f64,
    k: usize,
    method: CvMethod,
    gamma: f64,
) -> Result<f64> {
    let folds: Vec<TransitionCounts> = split_folds(seq, k)?
        .iter()
        .map(count_transitions)
        .collect();
    Ok(fold_scores(&folds, lambda, method, gamma)?.iter().sum())
}

/// Cross-validation report over a lambda grid.
#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub grid: Vec<f64>,
    pub scores: Vec<f64>,
    /// k x |grid| per-fold score matrix.
    pub per_fold: Vec<Vec<f64>>,
    pub best_lambda: f64,
    pub k: usize,
    pub method: CvMethod,
    pub gamma: f64,
}

impl CvReport {
    /// CSV rows `lambda,cv_score,fold_1..fold_k`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,cv_score");
        for f in 1..=self.k {
            out.push_str(&format!(",fold_{f}"));
        }
        out.push('\n');
        for (gi, &lambda) in self.grid.iter().enumerate() {
            out.push_str(&format!("{lambda},{}", self.scores[gi]));
            for kappa in 0..self.k {
                out.push_str(&format!(",{}", self.per_fold[kappa][gi]));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates every grid point and returns the argmin, breaking ties toward
/// the smallest lambda. Deterministic: no randomness is involved.
pub fn select_lambda(
    seq: &StateSequence,
    grid: &[f64],
    k: usize,
    method: CvMethod,
    gamma: f64,
) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(Error::Domain("empty lambda grid".into()));
    }
    if let Some(&bad) = grid.iter().find(|&&l| !(l >= 0.0)) {
        return Err(Error::Domain(format!("lambda {bad} must be >= 0")));
    }
    let folds: Vec<TransitionCounts> = split_folds(seq, k)?
        .iter()
        .map(count_transitions)
        .collect();
    let per_lambda: Vec<Vec<f64>> = grid
        .par_iter()
        .map(|&lambda| fold_scores(&folds, lambda, method, gamma))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = per_lambda.iter().map(|f| f.iter().sum()).collect();
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Convergence(format!("non-finite CV score {bad}")));
    }
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        let better = s < scores[best] || (s == scores[best] && grid[i] < grid[best]);
        if better {
            best = i;
        }
    }
    let per_fold: Vec<Vec<f64>> = (0..k)
        .map(|kappa| per_lambda.iter().map(|f| f[kappa]).collect())
        .collect();
    Ok(CvReport {
        grid: grid.to_vec(),
        scores,
        per_fold,
        best_lambda: grid[best],
        k,
        method,
        gamma,
    })
}

/// Logarithmically spaced grid of `len` values over [lo, hi].
pub fn log_grid(lo: f64, hi: f64, len: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || len < 2 {
        return Err(Error::Domain(format!(
            "invalid grid spec lo={lo} hi={hi} len={len}"
        )));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..len)
        .map(|i| (a + (b - a) * i as f64 / (len - 1) as f64).exp())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{simulate_sequence, InitialState};
    use crate::datasets;

    fn seq_100() -> StateSequence {
        simulate_sequence(&datasets::sim_truth(), 100, 4, InitialState::Stationary).unwrap()
    }

    #[test]
    fn fold_sizes_even_split() {
        let folds = split_folds(&seq_100(), 5).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.len(), 20);
            assert_eq!(count_transitions(f).total(), 19);
        }
    }

    #[test]
    fn fold_sizes_with_remainder() {
        let seq = StateSequence::new(vec![1, 2, 1, 2, 1, 2, 1, 2, 1, 2, 1], 2).unwrap();
        let folds = split_folds(&seq, 5).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
    }

    #[test]
    fn folds_concatenate_to_original() {
        let seq = seq_100();
        let folds = split_folds(&seq, 7).unwrap();
        let rebuilt: Vec<usize> = folds.iter().flat_map(|f| f.states().to_vec()).collect();
        assert_eq!(rebuilt, seq.states());
    }

    #[test]
    fn too_short_rejected() {
        let seq = StateSequence::new(vec![1, 2, 1], 2).unwrap();
        assert!(matches!(split_folds(&seq, 2), Err(Error::TooShort { .. })));
    }

    #[test]
    fn boundary_transitions_are_dropped() {
        let seq = simulate_sequence(&datasets::sim_truth(), 1003, 8, InitialState::Stationary)
            .unwrap();
        let k = 5;
        let total: u64 = split_folds(&seq, k)
            .unwrap()
            .iter()
            .map(|f| count_transitions(f).total())
            .sum();
        assert_eq!(total as usize, (seq.len() - 1) - (k - 1));
    }

    #[test]
    fn cv_at_lambda_zero_matches_independent_two_pass_oracle() {
        let seq = simulate_sequence(&datasets::sim_truth(), 2000, 21, InitialState::Stationary)
            .unwrap();
        let k = 5;
        let got = cv_score(&seq, 0.0, k, CvMethod::McLasso, 1.0).unwrap();

        // independent oracle: explicit two-pass fold-wise MLE without the
        // penalized solver
        let folds = split_folds(&seq, k).unwrap();
        let m = seq.m();
        let mut expected = 0.0;
        for kappa in 0..k {
            let mut train = vec![vec![0u64; m]; m];
            for (i, f) in folds.iter().enumerate() {
                if i == kappa {
                    continue;
                }
                for w in f.states().windows(2) {
                    train[w[0] - 1][w[1] - 1] += 1;
                }
            }
            let row_sums: Vec<u64> = train.iter().map(|r| r.iter().sum()).collect();
            let test = count_transitions(&folds[kappa]);
            for i in 0..m {
                for j in 0..m {
                    let n = test.get(i, j);
                    if n > 0 {
                        let p = if row_sums[i] == 0 {
                            1.0 / m as f64
                        } else {
                            train[i][j] as f64 / row_sums[i] as f64
                        };
                        expected -= n as f64 * p.max(HOLDOUT_FLOOR).ln();
                    }
                }
            }
        }
        assert!(
            (got - expected).abs() < 1e-4 * (1.0 + expected.abs()),
            "{got} vs {expected}"
        );
    }

    #[test]
    fn select_lambda_single_candidate() {
        let report = select_lambda(&seq_100(), &[0.0], 5, CvMethod::McALasso, 1.0).unwrap();
        assert_eq!(report.best_lambda, 0.0);
    }

    #[test]
    fn select_lambda_deterministic() {
        let seq = simulate_sequence(&datasets::sim_truth(), 1500, 30, InitialState::Stationary)
            .unwrap();
        let grid = log_grid(0.1, 10.0, 5).unwrap();
        let a = select_lambda(&seq, &grid, 5, CvMethod::McALasso, 1.0).unwrap();
        let b = select_lambda(&seq, &grid, 5, CvMethod::McALasso, 1.0).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.best_lambda, b.best_lambda);
    }

    #[test]
    fn cv_score_invariant_under_state_relabeling() {
        let seq = simulate_sequence(&datasets::sim_truth(), 1500, 13, InitialState::Stationary)
            .unwrap();
        // permutation 1->3, 2->1, 3->2
        let perm = [3usize, 1, 2];
        let relabeled =
            StateSequence::new(seq.states().iter().map(|&s| perm[s - 1]).collect(), 3).unwrap();
        let a = cv_score(&seq, 1.5, 5, CvMethod::McALasso, 1.0).unwrap();
        let b = cv_score(&relabeled, 1.5, 5, CvMethod::McALasso, 1.0).unwrap();
        assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn duplicated_grid_leaves_best_lambda_unchanged() {
        let seq = simulate_sequence(&datasets::sim_truth(), 1500, 30, InitialState::Stationary)
            .unwrap();
        let grid = log_grid(0.1, 10.0, 4).unwrap();
        let doubled: Vec<f64> = grid.iter().chain(grid.iter()).copied().collect();
        let a = select_lambda(&seq, &grid, 5, CvMethod::McLasso, 1.0).unwrap();
        let b = select_lambda(&seq, &doubled, 5, CvMethod::McLasso, 1.0).unwrap();
        assert_eq!(a.best_lambda, b.best_lambda);
    }
}
