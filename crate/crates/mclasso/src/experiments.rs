//! Seeded Monte Carlo study harness: simulate many replicates from a known
//! chain, fit each estimator, and aggregate metrics.

use crate::chain::{
    count_transitions, extract_equality_classes, simulate_sequence, EqualityPartition,
    InitialState, TransitionMatrix,
};
use crate::error::{Error, Result};
use crate::estimators::{mle, ZeroRowPolicy};
use crate::metrics::{frobenius_distance, purity, selection_accuracy_partition};
use crate::model_selection::{select_lambda, CvMethod};
use crate::penalized::{adaptive_weights, pair_set, solve, PairWeights, SolverOptions, DEFAULT_W_MAX};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyMethod {
    Mle,
    McLasso,
    McALasso,
}

impl StudyMethod {
    pub fn name(&self) -> &'static str {
        match self {
            StudyMethod::Mle => "mle",
            StudyMethod::McLasso => "mclasso",
            StudyMethod::McALasso => "mcalasso",
        }
    }
}

/// How the penalized methods choose lambda within each replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LambdaRule {
    /// Cross-validate over the grid independently in every replicate.
    PerReplicateCv,
    /// Use one fixed lambda for all replicates (fast mode).
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyConfig {
    pub truth: TransitionMatrix,
    pub n_reps: usize,
    pub n: usize,
    pub seed_base: u64,
    pub grid: Vec<f64>,
    pub k: usize,
    pub methods: Vec<StudyMethod>,
    pub gamma: f64,
    pub lambda_rule: LambdaRule,
}

impl StudyConfig {
    /// Desk-scale defaults: small enough that a full study runs in minutes.
    pub fn desk_scale(truth: TransitionMatrix, seed_base: u64) -> Self {
        StudyConfig {
            truth,
            n_reps: 20,
            n: 20_000,
            seed_base,
            grid: crate::model_selection::log_grid(0.5, 50.0, 15).expect("static grid"),
            k: 5,
            methods: vec![StudyMethod::Mle, StudyMethod::McLasso, StudyMethod::McALasso],
            gamma: 1.0,
            lambda_rule: LambdaRule::PerReplicateCv,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_reps < 1 {
            return Err(Error::Domain("n_reps must be >= 1".into()));
        }
        if self.n < 2 * self.k {
            return Err(Error::TooShort {
                n: self.n,
                min: 2 * self.k,
            });
        }
        let needs_grid = matches!(self.lambda_rule, LambdaRule::PerReplicateCv)
            && self
                .methods
                .iter()
                .any(|m| *m != StudyMethod::Mle);
        if needs_grid && self.grid.is_empty() {
            return Err(Error::Domain(
                "lambda grid must be nonempty for penalized methods".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::Domain("methods must be nonempty".into()));
        }
        Ok(())
    }
}

/// One replicate/method result row.
#[derive(Debug, Clone, Serialize)]
pub struct RawRow {
    pub replicate: usize,
    pub seed: u64,
    pub method: StudyMethod,
    pub lambda: f64,
    pub purity: f64,
    pub frobenius: f64,
    pub selection_accuracy: f64,
    /// Number of non-singleton fused classes in the estimated partition.
    pub fused_classes: usize,
    /// True when the estimated partition exactly equals the truth partition.
    pub exact_recovery: bool,
}

/// min, q1, median, mean, q3, max.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SixNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn six_number(values: &[f64]) -> SixNumber {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let quantile = |q: f64| -> f64 {
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        v[lo] * (1.0 - frac) + v[hi] * frac
    };
    SixNumber {
        min: v[0],
        q1: quantile(0.25),
        median: quantile(0.5),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        q3: quantile(0.75),
        max: v[v.len() - 1],
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: StudyMethod,
    pub n_ok: usize,
    pub purity: SixNumber,
    pub frobenius: SixNumber,
    pub selection_accuracy: SixNumber,
    /// Replicates in which the estimate fused at least one cell pair.
    pub detections_total: usize,
    /// Replicates whose fused partition exactly equals the truth partition.
    pub detections_exact: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyFailure {
    pub replicate: usize,
    pub method: StudyMethod,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudySummary {
    pub config: StudyConfig,
    pub per_method: Vec<MethodSummary>,
    pub raw: Vec<RawRow>,
    pub failures: Vec<StudyFailure>,
}

fn fit_method(
    config: &StudyConfig,
    seq: &crate::chain::StateSequence,
    counts: &crate::chain::TransitionCounts,
    truth_partition: &EqualityPartition,
    method: StudyMethod,
    replicate: usize,
    seed: u64,
) -> Result<RawRow> {
    let pairs = pair_set(config.truth.m());
    let (estimate, partition, lambda) = match method {
        StudyMethod::Mle => {
            let est = mle(counts, ZeroRowPolicy::Error)?;
            let part = extract_equality_classes(&est, 0.0)?;
            (est, part, 0.0)
        }
        StudyMethod::McLasso | StudyMethod::McALasso => {
            let cv_method = if method == StudyMethod::McLasso {
                CvMethod::McLasso
            } else {
                CvMethod::McALasso
            };
            let lambda = match config.lambda_rule {
                LambdaRule::Fixed(l) => l,
                LambdaRule::PerReplicateCv => {
                    select_lambda(seq, &config.grid, config.k, cv_method, config.gamma)?
                        .best_lambda
                }
            };
            let weights = match method {
                StudyMethod::McLasso => PairWeights::unit(&pairs),
                _ => {
                    let pilot = mle(counts, ZeroRowPolicy::Uniform)?;
                    adaptive_weights(&pilot, &pairs, config.gamma, DEFAULT_W_MAX)?
                }
            };
            let fit = solve(counts, lambda, &weights, &SolverOptions::default())?;
            (fit.estimate, fit.fused_partition, lambda)
        }
    };
    let fused_classes = partition
        .classes()
        .iter()
        .filter(|c| c.len() > 1)
        .count();
    let exact_recovery = partition.classes() == truth_partition.classes();
    Ok(RawRow {
        replicate,
        seed,
        method,
        lambda,
        purity: purity(truth_partition, &partition)?,
        frobenius: frobenius_distance(&config.truth, &estimate)?,
        selection_accuracy: selection_accuracy_partition(&config.truth, &partition, &pairs)?,
        fused_classes,
        exact_recovery,
    })
}

/// Runs the Monte Carlo study. Replicates are independent jobs keyed by seed;
/// results are sorted by (replicate, method) so scheduling order never shows
/// in the output. Per-replicate failures are collected, not fatal.
pub fn run_study(config: &StudyConfig) -> Result<StudySummary> {
    config.validate()?;
    let truth_partition = extract_equality_classes(&config.truth, 0.0)?;
    let results: Vec<(Vec<RawRow>, Vec<StudyFailure>)> = (0..config.n_reps)
        .into_par_iter()
        .map(|r| {
            let seed = config.seed_base + r as u64;
            let mut rows = Vec::new();
            let mut failures = Vec::new();
            match simulate_sequence(&config.truth, config.n, seed, InitialState::Stationary) {
                Ok(seq) => {
                    let counts = count_transitions(&seq);
                    for &method in &config.methods {
                        match fit_method(config, &seq, &counts, &truth_partition, method, r, seed)
                        {
                            Ok(row) => rows.push(row),
                            Err(e) => failures.push(StudyFailure {
                                replicate: r,
                                method,
                                error: e.to_string(),
                            }),
                        }
                    }
                }
                Err(e) => {
                    for &method in &config.methods {
                        failures.push(StudyFailure {
                            replicate: r,
                            method,
                            error: e.to_string(),
                        });
                    }
                }
            }
            (rows, failures)
        })
        .collect();
    let mut raw = Vec::new();
    let mut failures = Vec::new();
    for (rows, fails) in results {
        raw.extend(rows);
        failures.extend(fails);
    }
    let method_order = |m: StudyMethod| config.methods.iter().position(|x| *x == m).unwrap_or(0);
    raw.sort_by_key(|r| (r.replicate, method_order(r.method)));
    failures.sort_by_key(|f| (f.replicate, method_order(f.method)));

    let mut per_method = Vec::new();
    for &method in &config.methods {
        let rows: Vec<&RawRow> = raw.iter().filter(|r| r.method == method).collect();
        if rows.is_empty() {
            continue;
        }
        let collect = |f: fn(&RawRow) -> f64| -> Vec<f64> { rows.iter().map(|r| f(r)).collect() };
        per_method.push(MethodSummary {
            method,
            n_ok: rows.len(),
            purity: six_number(&collect(|r| r.purity)),
            frobenius: six_number(&collect(|r| r.frobenius)),
            selection_accuracy: six_number(&collect(|r| r.selection_accuracy)),
            detections_total: rows.iter().filter(|r| r.fused_classes > 0).count(),
            detections_exact: rows.iter().filter(|r| r.exact_recovery).count(),
        });
    }
    Ok(StudySummary {
        config: config.clone(),
        per_method,
        raw,
        failures,
    })
}

impl StudySummary {
    /// Table-style summary, one row per method/metric.
    pub fn summary_csv(&self) -> String {
        let mut out =
            String::from("method,metric,min,q1,median,mean,q3,max,detections_total,detections_exact,n_ok\n");
        for ms in &self.per_method {
            for (name, s) in [
                ("purity", &ms.purity),
                ("frobenius", &ms.frobenius),
                ("selection_accuracy", &ms.selection_accuracy),
            ] {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    ms.method.name(),
                    name,
                    s.min,
                    s.q1,
                    s.median,
                    s.mean,
                    s.q3,
                    s.max,
                    ms.detections_total,
                    ms.detections_exact,
                    ms.n_ok
                ));
            }
        }
        out
    }

    /// One row per replicate/method.
    pub fn raw_csv(&self) -> String {
        let mut out = String::from(
            "replicate,seed,method,lambda,purity,frobenius,selection_accuracy,fused_classes,exact_recovery\n",
        );
        for r in &self.raw {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.replicate,
                r.seed,
                r.method.name(),
                r.lambda,
                r.purity,
                r.frobenius,
                r.selection_accuracy,
                r.fused_classes,
                r.exact_recovery
            ));
        }
        out
    }
}

/// Per-replicate MLE differences p_hat[cell_a] - p_hat[cell_b] for external
/// plotting (cells 0-based).
pub fn difference_histogram(
    truth: &TransitionMatrix,
    cell_a: (usize, usize),
    cell_b: (usize, usize),
    n: usize,
    n_reps: usize,
    seed_base: u64,
) -> Result<Vec<f64>> {
    let m = truth.m();
    for (i, j) in [cell_a, cell_b] {
        if i >= m || j >= m {
            return Err(Error::Shape(format!("cell ({i},{j}) out of range for m={m}")));
        }
    }
    (0..n_reps)
        .into_par_iter()
        .map(|r| {
            let seq = simulate_sequence(truth, n, seed_base + r as u64, InitialState::Stationary)?;
            let est = mle(&count_transitions(&seq), ZeroRowPolicy::Error)?;
            Ok(est.get(cell_a.0, cell_a.1) - est.get(cell_b.0, cell_b.1))
        })
        .collect()
}

/// `diff` column CSV for [`difference_histogram`] output.
pub fn hist_csv(diffs: &[f64]) -> String {
    let mut out = String::from("diff\n");
    for d in diffs {
        out.push_str(&format!("{d}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets;

    fn tiny_config() -> StudyConfig {
        StudyConfig {
            truth: datasets::sim_truth(),
            n_reps: 2,
            n: 2000,
            seed_base: 77,
            grid: vec![1.0, 5.0],
            k: 5,
            methods: vec![StudyMethod::Mle, StudyMethod::McALasso],
            gamma: 1.0,
            lambda_rule: LambdaRule::PerReplicateCv,
        }
    }

    #[test]
    fn single_replicate_min_equals_max_equals_mean() {
        let mut config = tiny_config();
        config.n_reps = 1;
        config.lambda_rule = LambdaRule::Fixed(2.0);
        let summary = run_study(&config).unwrap();
        assert!(summary.failures.is_empty());
        for ms in &summary.per_method {
            for s in [&ms.purity, &ms.frobenius, &ms.selection_accuracy] {
                assert_eq!(s.min, s.max);
                assert_eq!(s.min, s.mean);
                assert_eq!(s.q1, s.median);
            }
        }
    }

    #[test]
    fn rerun_is_byte_identical() {
        let config = tiny_config();
        let a = run_study(&config).unwrap();
        let b = run_study(&config).unwrap();
        assert_eq!(a.raw_csv(), b.raw_csv());
        assert_eq!(a.summary_csv(), b.summary_csv());
    }

    #[test]
    fn summary_ordering_invariants() {
        let config = tiny_config();
        let summary = run_study(&config).unwrap();
        for ms in &summary.per_method {
            for s in [&ms.purity, &ms.frobenius, &ms.selection_accuracy] {
                assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
                assert!(s.mean >= s.min && s.mean <= s.max);
            }
            assert!(ms.detections_exact <= ms.detections_total.max(ms.n_ok));
        }
    }

    #[test]
    fn mle_never_detects_exact_fusions() {
        let mut config = tiny_config();
        config.methods = vec![StudyMethod::Mle];
        config.n_reps = 5;
        let summary = run_study(&config).unwrap();
        assert_eq!(summary.per_method[0].detections_total, 0);
        assert_eq!(summary.per_method[0].detections_exact, 0);
    }

    #[test]
    fn histogram_identical_cells_all_zero() {
        let diffs =
            difference_histogram(&datasets::sim_truth(), (0, 1), (0, 1), 500, 10, 3).unwrap();
        assert_eq!(diffs.len(), 10);
        assert!(diffs.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn histogram_mean_near_zero_for_equal_pair() {
        let diffs =
            difference_histogram(&datasets::equal_pair_truth(), (0, 1), (2, 1), 10_000, 200, 500)
                .unwrap();
        let mean: f64 = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var: f64 =
            diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (diffs.len() - 1) as f64;
        let se = (var / diffs.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn histogram_variance_halves_when_n_doubles() {
        let var = |n: usize| {
            let d = difference_histogram(&datasets::equal_pair_truth(), (0, 1), (2, 1), n, 400, 9)
                .unwrap();
            let mean: f64 = d.iter().sum::<f64>() / d.len() as f64;
            d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (d.len() - 1) as f64
        };
        let ratio = var(8000) / var(4000);
        assert!(ratio > 0.35 && ratio < 0.65, "ratio {ratio}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny_config();
        c.n_reps = 0;
        assert!(run_study(&c).is_err());
        let mut c = tiny_config();
        c.grid.clear();
        assert!(run_study(&c).is_err());
        let mut c = tiny_config();
        c.methods.clear();
        assert!(run_study(&c).is_err());
    }
}
