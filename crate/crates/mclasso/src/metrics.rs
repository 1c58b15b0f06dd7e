//! Evaluation of estimates against a known truth: purity, Frobenius
//! distance, pairwise selection accuracy, and the asymptotic covariance of
//! the MLE.

use crate::chain::{
    stationary_distribution, EqualityPartition, StationaryDistribution, TransitionMatrix,
};
use crate::error::{Error, Result};
use crate::penalized::{PairSet, PenalizedFit};
use serde::Serialize;

/// Clustering purity of an estimated cell partition against the truth:
/// (1/m^2) * sum over estimate classes of the largest overlap with any truth
/// class. Note that all-singleton estimates score 1.0 under this definition.
pub fn purity(truth: &EqualityPartition, estimate: &EqualityPartition) -> Result<f64> {
    if truth.m() != estimate.m() {
        return Err(Error::Mismatch(format!(
            "partitions over {}x{} vs {}x{} cells",
            truth.m(),
            truth.m(),
            estimate.m(),
            estimate.m()
        )));
    }
    let m2 = (truth.m() * truth.m()) as f64;
    let mut total = 0usize;
    for est_class in estimate.classes() {
        let best = truth
            .classes()
            .iter()
            .map(|tc| est_class.iter().filter(|c| tc.contains(c)).count())
            .max()
            .unwrap_or(0);
        total += best;
    }
    Ok(total as f64 / m2)
}

/// Entrywise Euclidean (Frobenius) distance between two transition matrices.
pub fn frobenius_distance(truth: &TransitionMatrix, estimate: &TransitionMatrix) -> Result<f64> {
    if truth.m() != estimate.m() {
        return Err(Error::Shape(format!(
            "matrix sizes {} vs {}",
            truth.m(),
            estimate.m()
        )));
    }
    let mut sum = 0.0;
    for i in 0..truth.m() {
        for j in 0..truth.m() {
            let d = truth.get(i, j) - estimate.get(i, j);
            sum += d * d;
        }
    }
    Ok(sum.sqrt())
}

/// Fraction of cell pairs whose fused/unfused status in the estimated
/// partition matches exact equality of the corresponding truth entries.
pub fn selection_accuracy_partition(
    truth: &TransitionMatrix,
    estimate: &EqualityPartition,
    pairs: &PairSet,
) -> Result<f64> {
    if truth.m() != estimate.m() || truth.m() != pairs.m() {
        return Err(Error::Shape(format!(
            "sizes truth={} partition={} pairs={}",
            truth.m(),
            estimate.m(),
            pairs.m()
        )));
    }
    let mut correct = 0usize;
    for t in 0..pairs.len() {
        let ((a_i, a_j), (b_i, b_j)) = pairs.cells(t);
        let truth_equal = truth.get(a_i, a_j) == truth.get(b_i, b_j);
        let fused = estimate.same_class((a_i, a_j), (b_i, b_j));
        if truth_equal == fused {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// [`selection_accuracy_partition`] applied to a penalized fit's fused
/// partition.
pub fn selection_accuracy(
    truth: &TransitionMatrix,
    fit: &PenalizedFit,
    pairs: &PairSet,
) -> Result<f64> {
    selection_accuracy_partition(truth, &fit.fused_partition, pairs)
}

/// Asymptotic covariance of the vectorized MLE: block-diagonal with block i
/// equal to Z_i / pi_i, where Z_i = diag(p_i) - p_i p_i^T is the multinomial
/// covariance of row i.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceBlocks {
    pub m: usize,
    /// The m matrices Z_i, each m x m, row-major.
    pub blocks: Vec<Vec<f64>>,
    pub pi: StationaryDistribution,
    /// m^2 x m^2 block-diagonal matrix, row-major, block i = Z_i / pi_i.
    pub assembled: Vec<f64>,
}

impl CovarianceBlocks {
    /// Covariance of the difference p_hat[a] - p_hat[b] of two cells, scaled
    /// by the sequence length N (i.e. the asymptotic Var of sqrt(N) times the
    /// difference).
    pub fn difference_variance(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let m2 = self.m * self.m;
        let ia = a.0 * self.m + a.1;
        let ib = b.0 * self.m + b.1;
        let s = |r: usize, c: usize| self.assembled[r * m2 + c];
        s(ia, ia) + s(ib, ib) - 2.0 * s(ia, ib)
    }
}

pub fn asymptotic_covariance(p: &TransitionMatrix) -> Result<CovarianceBlocks> {
    let m = p.m();
    let pi = stationary_distribution(p)?;
    let mut blocks = Vec::with_capacity(m);
    let m2 = m * m;
    let mut assembled = vec![0.0; m2 * m2];
    for i in 0..m {
        let mut z = vec![0.0; m * m];
        for j in 0..m {
            for k in 0..m {
                let v = if j == k {
                    p.get(i, j) * (1.0 - p.get(i, j))
                } else {
                    -p.get(i, j) * p.get(i, k)
                };
                z[j * m + k] = v;
                assembled[(i * m + j) * m2 + (i * m + k)] = v / pi.get(i);
            }
        }
        blocks.push(z);
    }
    Ok(CovarianceBlocks {
        m,
        blocks,
        pi,
        assembled,
    })
}

/// The JSON metrics bundle emitted by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub purity: f64,
    pub frobenius: f64,
    pub selection_accuracy: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{
        count_transitions, extract_equality_classes, simulate_sequence, InitialState,
        ValidityMode,
    };
    use crate::datasets;
    use crate::estimators::{mle, ZeroRowPolicy};
    use crate::penalized::pair_set;
    use approx::assert_relative_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn partition(m: usize, classes: Vec<Vec<(usize, usize)>>) -> EqualityPartition {
        EqualityPartition::new(m, classes, None).unwrap()
    }

    #[test]
    fn purity_perfect_match_is_one() {
        let t = partition(2, vec![vec![(0, 0), (1, 1)], vec![(0, 1)], vec![(1, 0)]]);
        assert_eq!(purity(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn purity_hand_example() {
        let truth = partition(2, vec![vec![(0, 0), (1, 1)], vec![(0, 1)], vec![(1, 0)]]);
        let est = partition(2, vec![vec![(0, 0)], vec![(1, 1)], vec![(0, 1), (1, 0)]]);
        assert_relative_eq!(purity(&truth, &est).unwrap(), 0.75);
    }

    #[test]
    fn purity_all_singletons_is_one() {
        let truth = partition(2, vec![vec![(0, 0), (1, 1)], vec![(0, 1), (1, 0)]]);
        let singles = EqualityPartition::singletons(2);
        assert_eq!(purity(&truth, &singles).unwrap(), 1.0);
    }

    #[test]
    fn purity_mismatched_sizes_rejected() {
        let a = EqualityPartition::singletons(2);
        let b = EqualityPartition::singletons(3);
        assert!(matches!(purity(&a, &b), Err(Error::Mismatch(_))));
    }

    #[test]
    fn frobenius_examples() {
        let a = TransitionMatrix::new(
            &[vec![0.6, 0.4], vec![0.4, 0.6]],
            ValidityMode::Stochastic,
        )
        .unwrap();
        let b = TransitionMatrix::new(
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
            ValidityMode::Stochastic,
        )
        .unwrap();
        assert_eq!(frobenius_distance(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(frobenius_distance(&a, &b).unwrap(), 0.2, epsilon = 1e-12);
        assert_relative_eq!(
            frobenius_distance(&a, &b).unwrap(),
            frobenius_distance(&b, &a).unwrap()
        );
    }

    #[test]
    fn frobenius_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut mats = Vec::new();
            for _ in 0..3 {
                let mut rows = Vec::new();
                for _ in 0..3 {
                    let mut r: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 0.01).collect();
                    let s: f64 = r.iter().sum();
                    r.iter_mut().for_each(|x| *x /= s);
                    rows.push(r);
                }
                mats.push(TransitionMatrix::new(&rows, ValidityMode::Stochastic).unwrap());
            }
            let ab = frobenius_distance(&mats[0], &mats[1]).unwrap();
            let bc = frobenius_distance(&mats[1], &mats[2]).unwrap();
            let ac = frobenius_distance(&mats[0], &mats[2]).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn selection_accuracy_examples_for_sim_truth() {
        let truth = datasets::sim_truth();
        let pairs = pair_set(3);
        // fit fusing nothing
        let singles = EqualityPartition::singletons(3);
        assert_relative_eq!(
            selection_accuracy_partition(&truth, &singles, &pairs).unwrap(),
            32.0 / 36.0,
            epsilon = 1e-12
        );
        // fit fusing everything
        let cells: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .collect();
        let all = partition(3, vec![cells]);
        assert_relative_eq!(
            selection_accuracy_partition(&truth, &all, &pairs).unwrap(),
            4.0 / 36.0,
            epsilon = 1e-12
        );
        // fit fusing exactly the truth's equal cells
        let exact = extract_equality_classes(&truth, 0.0).unwrap();
        assert_eq!(
            selection_accuracy_partition(&truth, &exact, &pairs).unwrap(),
            1.0
        );
    }

    #[test]
    fn purity_and_selection_accuracy_relabel_invariant() {
        // permute states of sim_truth with sigma = (2,3,1) and check both
        // metrics agree with the unpermuted evaluation
        let truth = datasets::sim_truth();
        let sigma = [1usize, 2, 0]; // state i -> sigma[i]
        let mut rows = vec![vec![0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rows[sigma[i]][sigma[j]] = truth.get(i, j);
            }
        }
        let truth_p = TransitionMatrix::new(&rows, ValidityMode::StrictErgodic).unwrap();
        let est = extract_equality_classes(&truth, 1e-3).unwrap();
        let est_p_classes: Vec<Vec<(usize, usize)>> = est
            .classes()
            .iter()
            .map(|c| {
                let mut v: Vec<(usize, usize)> =
                    c.iter().map(|&(i, j)| (sigma[i], sigma[j])).collect();
                v.sort_unstable();
                v
            })
            .collect();
        let est_p = partition(3, est_p_classes);
        let pairs = pair_set(3);
        let t0 = extract_equality_classes(&truth, 0.0).unwrap();
        let t0p = extract_equality_classes(&truth_p, 0.0).unwrap();
        assert_relative_eq!(
            purity(&t0, &est).unwrap(),
            purity(&t0p, &est_p).unwrap()
        );
        assert_relative_eq!(
            selection_accuracy_partition(&truth, &est, &pairs).unwrap(),
            selection_accuracy_partition(&truth_p, &est_p, &pairs).unwrap()
        );
    }

    #[test]
    fn covariance_symmetric_two_state_example() {
        let p = TransitionMatrix::new(
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
            ValidityMode::StrictErgodic,
        )
        .unwrap();
        let cov = asymptotic_covariance(&p).unwrap();
        assert_relative_eq!(cov.pi.get(0), 0.5, epsilon = 1e-10);
        for b in &cov.blocks {
            assert_relative_eq!(b[0], 0.25, epsilon = 1e-12);
            assert_relative_eq!(b[1], -0.25, epsilon = 1e-12);
        }
        // assembled diag entries 0.25/0.5 = 0.5
        assert_relative_eq!(cov.assembled[0], 0.5, epsilon = 1e-10);
        assert_relative_eq!(cov.assembled[1], -0.5, epsilon = 1e-10);
    }

    #[test]
    fn z_blocks_row_sum_zero_and_assembled_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let m = 2 + (rng.random::<u32>() % 3) as usize;
            let mut rows = Vec::new();
            for _ in 0..m {
                let mut r: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 0.05).collect();
                let s: f64 = r.iter().sum();
                r.iter_mut().for_each(|x| *x /= s);
                rows.push(r);
            }
            let p = TransitionMatrix::new(&rows, ValidityMode::StrictErgodic).unwrap();
            let cov = asymptotic_covariance(&p).unwrap();
            for b in &cov.blocks {
                for i in 0..m {
                    let s: f64 = (0..m).map(|j| b[i * m + j]).sum();
                    assert!(s.abs() < 1e-12);
                }
            }
            let m2 = m * m;
            let a = nalgebra::DMatrix::from_row_slice(m2, m2, &cov.assembled);
            let eig = a.symmetric_eigenvalues();
            for ev in eig.iter() {
                assert!(*ev >= -1e-10, "eigenvalue {ev}");
            }
        }
    }

    #[test]
    fn lemma5_scaled_residuals_bounded() {
        // scaled residuals (p_hat - p*) * n_i. / (sqrt(N) * p*_ij) should
        // stay O_p(1): their spread must not grow with N
        let truth = datasets::sim_truth();
        let mut sds = Vec::new();
        for (ni, n) in [1_000usize, 10_000, 100_000].into_iter().enumerate() {
            let mut vals = Vec::new();
            for seed in 0..50u64 {
                let seq = simulate_sequence(
                    &truth,
                    n,
                    9000 + seed + 1000 * ni as u64,
                    InitialState::Stationary,
                )
                .unwrap();
                let counts = count_transitions(&seq);
                let est = mle(&counts, ZeroRowPolicy::Error).unwrap();
                for i in 0..3 {
                    for j in 0..3 {
                        let r = (est.get(i, j) - truth.get(i, j)) * counts.row_sum(i) as f64
                            / ((n as f64).sqrt() * truth.get(i, j));
                        vals.push(r);
                    }
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            sds.push(var.sqrt());
        }
        for sd in &sds {
            assert!(*sd < 3.0, "scaled residual sd {sd} too large");
        }
        // no growth trend: largest N's sd not more than double the smallest N's
        assert!(sds[2] < 2.0 * sds[0] + 0.5, "sds grew: {sds:?}");
    }

    #[test]
    fn difference_variance_matches_closed_form() {
        let truth = datasets::sim_truth();
        let cov = asymptotic_covariance(&truth).unwrap();
        let got = cov.difference_variance((0, 1), (2, 1));
        let p12 = truth.get(0, 1);
        let p32 = truth.get(2, 1);
        let expected = p12 * (1.0 - p12) / cov.pi.get(0) + p32 * (1.0 - p32) / cov.pi.get(2);
        assert_relative_eq!(got, expected, epsilon = 1e-10);
    }
}
