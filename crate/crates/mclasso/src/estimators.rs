//! Closed-form MLE, bootstrap-smoothed MLE, equality-constrained MLE and the
//! likelihood-ratio test of equality partitions.

use crate::chain::{EqualityPartition, TransitionCounts, TransitionMatrix, ValidityMode};
use crate::error::{Error, Result};
use crate::stats::chi_square_quantile;
use serde::{Deserialize, Serialize};

/// How [`mle`] treats an unvisited row (n_i. = 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroRowPolicy {
    #[default]
    Error,
    Uniform,
}

/// Log-likelihood sum n_ij * log p_ij. Cells with n_ij = 0 contribute 0
/// regardless of p_ij.
pub fn log_likelihood(p: &TransitionMatrix, counts: &TransitionCounts) -> Result<f64> {
    if p.m() != counts.m() {
        return Err(Error::Shape(format!(
            "matrix is {}x{} but counts are {}x{}",
            p.m(),
            p.m(),
            counts.m(),
            counts.m()
        )));
    }
    let mut ll = 0.0;
    for (idx, &n) in counts.counts().iter().enumerate() {
        if n == 0 {
            continue;
        }
        let pij = p.entries()[idx];
        if pij <= 0.0 {
            let m = p.m();
            return Err(Error::Domain(format!(
                "cell ({},{}) has count {n} but probability 0",
                idx / m + 1,
                idx % m + 1
            )));
        }
        ll += n as f64 * pij.ln();
    }
    Ok(ll)
}

/// Closed-form maximum likelihood estimate p_ij = n_ij / n_i. .
pub fn mle(counts: &TransitionCounts, zero_row: ZeroRowPolicy) -> Result<TransitionMatrix> {
    let m = counts.m();
    let mut entries = vec![0.0f64; m * m];
    for i in 0..m {
        let row_sum = counts.row_sum(i);
        if row_sum == 0 {
            match zero_row {
                ZeroRowPolicy::Error => return Err(Error::ZeroRow { row: i + 1 }),
                ZeroRowPolicy::Uniform => {
                    for j in 0..m {
                        entries[i * m + j] = 1.0 / m as f64;
                    }
                }
            }
        } else {
            for j in 0..m {
                entries[i * m + j] = counts.get(i, j) as f64 / row_sum as f64;
            }
        }
    }
    TransitionMatrix::from_flat(m, entries, ValidityMode::Stochastic)
}

/// Bootstrap-smoothed MLE: shrinkage of the count ratios toward an ergodic
/// reference matrix `q` with strength `alpha_smooth`.
pub fn bootstrap_mle(
    counts: &TransitionCounts,
    q: &TransitionMatrix,
    alpha_smooth: f64,
) -> Result<TransitionMatrix> {
    let m = counts.m();
    if q.m() != m {
        return Err(Error::Shape("reference matrix dimension mismatch".into()));
    }
    if q.entries().iter().any(|&v| v <= 0.0) {
        return Err(Error::Positivity {
            i: 0,
            j: 0,
            value: 0.0,
        });
    }
    if !(alpha_smooth >= 0.0) {
        return Err(Error::Domain(format!("alpha = {alpha_smooth} must be >= 0")));
    }
    let mut entries = vec![0.0f64; m * m];
    for i in 0..m {
        let row_sum = counts.row_sum(i) as f64;
        if alpha_smooth == 0.0 && row_sum == 0.0 {
            return Err(Error::ZeroRow { row: i + 1 });
        }
        for j in 0..m {
            entries[i * m + j] =
                (alpha_smooth * q.get(i, j) + counts.get(i, j) as f64) / (alpha_smooth + row_sum);
        }
    }
    let mode = if alpha_smooth > 0.0 {
        ValidityMode::StrictErgodic
    } else {
        ValidityMode::Stochastic
    };
    TransitionMatrix::from_flat(m, entries, mode)
}

/// Maximizes the likelihood subject to row-sum constraints and equal values
/// within each partition class.
///
/// Classes with positive total count are solved by Newton iteration on the
/// row multipliers of the stationarity system; zero-count classes take value
/// 0 when that frees mass for a positive class in some shared row, and are
/// otherwise assigned the minimum-norm feasible values.
pub fn constrained_mle(
    counts: &TransitionCounts,
    partition: &EqualityPartition,
) -> Result<TransitionMatrix> {
    let m = counts.m();
    if partition.m() != m {
        return Err(Error::Mismatch("partition dimension differs from counts".into()));
    }
    let classes = partition.classes();
    let nc = classes.len();

    // class totals and row incidence
    let mut class_total = vec![0u64; nc];
    let mut incidence = vec![vec![0u32; nc]; m]; // incidence[row][class]
    for (c, class) in classes.iter().enumerate() {
        for &(i, j) in class {
            class_total[c] += counts.get(i, j);
            incidence[i][c] += 1;
        }
    }

    let positive: Vec<usize> = (0..nc).filter(|&c| class_total[c] > 0).collect();
    let newton_rows: Vec<usize> = (0..m)
        .filter(|&i| positive.iter().any(|&c| incidence[i][c] > 0))
        .collect();
    let free_rows: Vec<usize> = (0..m).filter(|i| !newton_rows.contains(i)).collect();
    // zero-count classes: pinned at 0 when they share a row with a positive
    // class, otherwise likelihood-indifferent
    let mut value = vec![f64::NAN; nc];
    let mut indifferent = Vec::new();
    for c in 0..nc {
        if class_total[c] > 0 {
            continue;
        }
        let shares_newton_row = (0..m).any(|i| incidence[i][c] > 0 && newton_rows.contains(&i));
        if shares_newton_row {
            value[c] = 0.0;
        } else {
            indifferent.push(c);
        }
    }

    if !positive.is_empty() {
        solve_positive_classes(
            &newton_rows,
            &positive,
            &incidence,
            &class_total,
            counts,
            &mut value,
        )?;
    }

    if !free_rows.is_empty() {
        solve_indifferent_classes(&free_rows, &indifferent, &incidence, &mut value)?;
    }

    let mut entries = vec![0.0f64; m * m];
    for (c, class) in classes.iter().enumerate() {
        for &(i, j) in class {
            entries[i * m + j] = value[c];
        }
    }
    TransitionMatrix::from_flat(m, entries, ValidityMode::Stochastic)
}

/// Newton iteration on row multipliers nu: for positive classes the optimum
/// has value M_c / (sum_i A_ic nu_i), and nu solves the row-sum equations.
fn solve_positive_classes(
    rows: &[usize],
    positive: &[usize],
    incidence: &[Vec<u32>],
    class_total: &[u64],
    counts: &TransitionCounts,
    value: &mut [f64],
) -> Result<()> {
    let nr = rows.len();
    let mut nu: Vec<f64> = rows
        .iter()
        .map(|&i| (counts.row_sum(i) as f64).max(1.0))
        .collect();

    let denom = |nu: &[f64], c: usize| -> f64 {
        rows.iter()
            .enumerate()
            .map(|(k, &i)| incidence[i][c] as f64 * nu[k])
            .sum()
    };
    let residual = |nu: &[f64]| -> Vec<f64> {
        rows.iter()
            .enumerate()
            .map(|(k, &i)| {
                let _ = k;
                let mut s = -1.0;
                for &c in positive {
                    if incidence[i][c] > 0 {
                        s += incidence[i][c] as f64 * class_total[c] as f64 / denom(nu, c);
                    }
                }
                s
            })
            .collect()
    };

    let mut f = residual(&nu);
    let mut fnorm = f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for _ in 0..200 {
        if fnorm < 1e-12 {
            break;
        }
        // Jacobian J[k][l] = -sum_c A_{r_k,c} A_{r_l,c} M_c / denom_c^2
        let mut jac = nalgebra::DMatrix::<f64>::zeros(nr, nr);
        for &c in positive {
            let d = denom(&nu, c);
            let w = class_total[c] as f64 / (d * d);
            for (k, &ik) in rows.iter().enumerate() {
                let aik = incidence[ik][c] as f64;
                if aik == 0.0 {
                    continue;
                }
                for (l, &il) in rows.iter().enumerate() {
                    let ail = incidence[il][c] as f64;
                    if ail != 0.0 {
                        jac[(k, l)] -= aik * ail * w;
                    }
                }
            }
        }
        let rhs = nalgebra::DVector::from_iterator(nr, f.iter().map(|v| -v));
        let step = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| infeasible_or_convergence(rows, positive, incidence))?;
        // damped update keeping all denominators positive
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = nu.iter().zip(step.iter()).map(|(v, s)| v + t * s).collect();
            let ok = positive.iter().all(|&c| denom(&cand, c) > 0.0);
            if ok {
                let fc = residual(&cand);
                let fcn = fc.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if fcn < fnorm || t < 1e-10 {
                    nu = cand;
                    f = fc;
                    fnorm = fcn;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-14 {
                return Err(infeasible_or_convergence(rows, positive, incidence));
            }
        }
    }
    if fnorm >= 1e-10 {
        return Err(infeasible_or_convergence(rows, positive, incidence));
    }
    for &c in positive {
        value[c] = class_total[c] as f64 / denom(&nu, c);
    }
    Ok(())
}

/// Rows with no positive-count class: assign minimum-norm feasible values to
/// the likelihood-indifferent classes.
fn solve_indifferent_classes(
    free_rows: &[usize],
    indifferent: &[usize],
    incidence: &[Vec<u32>],
    value: &mut [f64],
) -> Result<()> {
    let nr = free_rows.len();
    let nc = indifferent.len();
    if nc == 0 {
        return Err(Error::Infeasible(
            "a row contains only classes pinned at 0".into(),
        ));
    }
    let mut a = nalgebra::DMatrix::<f64>::zeros(nr, nc);
    for (k, &i) in free_rows.iter().enumerate() {
        for (l, &c) in indifferent.iter().enumerate() {
            a[(k, l)] = incidence[i][c] as f64;
        }
    }
    let b = nalgebra::DVector::from_element(nr, 1.0);
    let svd = a.clone().svd(true, true);
    let x = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::Infeasible(e.to_string()))?;
    let x: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
    // verify feasibility after clamping
    for (k, &i) in free_rows.iter().enumerate() {
        let _ = i;
        let s: f64 = indifferent
            .iter()
            .enumerate()
            .map(|(l, _)| a[(k, l)] * x[l])
            .sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(Error::Infeasible(format!(
                "unvisited row {} cannot satisfy its sum constraint",
                free_rows[k] + 1
            )));
        }
    }
    for (l, &c) in indifferent.iter().enumerate() {
        value[c] = x[l];
    }
    Ok(())
}

fn infeasible_or_convergence(rows: &[usize], positive: &[usize], incidence: &[Vec<u32>]) -> Error {
    // a least-squares check distinguishes structural infeasibility from a
    // solver failure
    let nr = rows.len();
    let nc = positive.len();
    let mut a = nalgebra::DMatrix::<f64>::zeros(nr, nc);
    for (k, &i) in rows.iter().enumerate() {
        for (l, &c) in positive.iter().enumerate() {
            a[(k, l)] = incidence[i][c] as f64;
        }
    }
    let b = nalgebra::DVector::from_element(nr, 1.0);
    let svd = a.clone().svd(true, true);
    match svd.solve(&b, 1e-12) {
        Ok(x) => {
            let r = (&a * &x - &b).amax();
            if r > 1e-8 {
                Error::Infeasible("partition classes force a row sum away from 1".into())
            } else {
                Error::Convergence("constrained MLE Newton iteration failed".into())
            }
        }
        Err(_) => Error::Convergence("constrained MLE Newton iteration failed".into()),
    }
}

/// Likelihood-ratio test result.
#[derive(Debug, Clone, Serialize)]
pub struct LrtResult {
    pub gamma: f64,
    pub df: usize,
    pub critical: f64,
    pub level: f64,
    pub reject: bool,
    pub null_fit: TransitionMatrix,
    pub alt_fit: TransitionMatrix,
}

/// Likelihood-ratio test of an equality partition against the unconstrained
/// alternative; Gamma is asymptotically chi-square with m^2 - |C_0| degrees
/// of freedom.
pub fn lrt(
    counts: &TransitionCounts,
    null_partition: &EqualityPartition,
    level: f64,
) -> Result<LrtResult> {
    let m = counts.m();
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Domain(format!("level {level} outside (0, 1)")));
    }
    let df = m * m - null_partition.num_classes();
    if df == 0 {
        return Err(Error::Degenerate(
            "null partition equals the unconstrained alternative".into(),
        ));
    }
    let null_fit = constrained_mle(counts, null_partition)?;
    let alt_fit = mle(counts, ZeroRowPolicy::Uniform)?;
    let ll_null = log_likelihood(&null_fit, counts)?;
    let ll_alt = log_likelihood(&alt_fit, counts)?;
    let gamma = -2.0 * (ll_null - ll_alt);
    let critical = chi_square_quantile(1.0 - level, df)?;
    Ok(LrtResult {
        gamma,
        df,
        critical,
        level,
        reject: gamma > critical,
        null_fit,
        alt_fit,
    })
}
