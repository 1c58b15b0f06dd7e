//! Penalized maximum-likelihood estimation of transition matrices with an L1
//! penalty on all pairwise probability differences (McLasso), optionally with
//! adaptive weights from an MLE pilot (McALasso).
//!
//! The non-smooth objective is minimized by smoothing |x| to sqrt(x^2 + mu^2)
//! and driving mu to zero over a continuation schedule; each smooth stage is
//! solved by Newton iterations on the row-sum KKT system with an active set
//! for the entry lower bound.

use crate::chain::{
    extract_equality_classes, EqualityPartition, TransitionCounts, TransitionMatrix, ValidityMode,
};
use crate::error::{Error, Result};
use crate::estimators::{constrained_mle, mle, ZeroRowPolicy};
use serde::Serialize;

/// All unordered pairs of distinct matrix cells, in row-major cell indexing
/// and lexicographic pair order. Cells are flat indices i*m + j.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    m: usize,
    pairs: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pair t as (a, b) flat cell indices with a < b.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Pair t as ((i1,j1),(i2,j2)) cell coordinates.
    pub fn cells(&self, t: usize) -> ((usize, usize), (usize, usize)) {
        let (a, b) = self.pairs[t];
        ((a / self.m, a % self.m), (b / self.m, b % self.m))
    }
}

/// Enumerates all C(m^2, 2) unordered distinct cell pairs.
pub fn pair_set(m: usize) -> PairSet {
    let n = m * m;
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            pairs.push((a, b));
        }
    }
    PairSet { m, pairs }
}

/// Differences p_a - p_b over the pair set, in pair order.
pub fn pair_differences(p: &TransitionMatrix, pairs: &PairSet) -> Vec<f64> {
    pairs
        .pairs()
        .iter()
        .map(|&(a, b)| p.entries()[a] - p.entries()[b])
        .collect()
}

/// Penalty weights over a pair set. Unit weights give McLasso; pilot-based
/// weights give McALasso.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairWeights {
    weights: Vec<f64>,
    gamma: f64,
    w_max: f64,
}

/// Default cap on adaptive weights (the pilot difference may be exactly 0).
pub const DEFAULT_W_MAX: f64 = 1e8;

impl PairWeights {
    /// Unit weights (McLasso).
    pub fn unit(pairs: &PairSet) -> Self {
        Self {
            weights: vec![1.0; pairs.len()],
            gamma: 1.0,
            w_max: 1.0,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_unit(&self) -> bool {
        self.weights.iter().all(|&w| w == 1.0)
    }
}

/// Adaptive weights w_t = min(1 / |pilot difference|^gamma, w_max) from an
/// MLE pilot estimate.
pub fn adaptive_weights(
    pilot: &TransitionMatrix,
    pairs: &PairSet,
    gamma: f64,
    w_max: f64,
) -> Result<PairWeights> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("gamma = {gamma} must be > 0")));
    }
    if !(w_max > 0.0) {
        return Err(Error::Domain(format!("w_max = {w_max} must be > 0")));
    }
    let diffs = pair_differences(pilot, pairs);
    let weights = diffs
        .iter()
        .map(|d| {
            if *d == 0.0 {
                w_max
            } else {
                (1.0 / d.abs().powf(gamma)).min(w_max)
            }
        })
        .collect();
    Ok(PairWeights {
        weights,
        gamma,
        w_max,
    })
}

/// The exact penalized negative log-likelihood objective.
pub fn objective(
    p: &TransitionMatrix,
    counts: &TransitionCounts,
    lambda: f64,
    weights: &PairWeights,
    pairs: &PairSet,
) -> Result<f64> {
    if p.entries().iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain("objective requires strictly positive entries".into()));
    }
    if p.m() != counts.m() || pairs.m() != p.m() || weights.weights().len() != pairs.len() {
        return Err(Error::Shape("objective input dimensions disagree".into()));
    }
    Ok(objective_flat(p.entries(), counts, lambda, weights, pairs, 0.0))
}

/// Smoothed objective over a flat entry buffer; mu = 0 gives the exact
/// objective. Exposed for gradient verification.
pub fn objective_flat(
    p: &[f64],
    counts: &TransitionCounts,
    lambda: f64,
    weights: &PairWeights,
    pairs: &PairSet,
    mu: f64,
) -> f64 {
    let mut nll = 0.0;
    for (idx, &n) in counts.counts().iter().enumerate() {
        if n > 0 {
            nll -= n as f64 * p[idx].ln();
        }
    }
    let mut pen = 0.0;
    for (t, &(a, b)) in pairs.pairs().iter().enumerate() {
        let d = p[a] - p[b];
        pen += weights.weights()[t] * (d * d + mu * mu).sqrt();
    }
    nll + lambda * pen
}

/// Analytic gradient of [`objective_flat`]. Exposed for finite-difference
/// verification.
pub fn gradient_flat(
    p: &[f64],
    counts: &TransitionCounts,
    lambda: f64,
    weights: &PairWeights,
    pairs: &PairSet,
    mu: f64,
) -> Vec<f64> {
    let mut g = vec![0.0f64; p.len()];
    for (idx, &n) in counts.counts().iter().enumerate() {
        if n > 0 {
            g[idx] -= n as f64 / p[idx];
        }
    }
    for (t, &(a, b)) in pairs.pairs().iter().enumerate() {
        let d = p[a] - p[b];
        let s = lambda * weights.weights()[t] * d / (d * d + mu * mu).sqrt();
        g[a] += s;
        g[b] -= s;
    }
    g
}

fn hessian_flat(
    p: &[f64],
    counts: &TransitionCounts,
    lambda: f64,
    weights: &PairWeights,
    pairs: &PairSet,
    mu: f64,
) -> nalgebra::DMatrix<f64> {
    let n = p.len();
    let mut h = nalgebra::DMatrix::<f64>::zeros(n, n);
    for (idx, &c) in counts.counts().iter().enumerate() {
        if c > 0 {
            h[(idx, idx)] += c as f64 / (p[idx] * p[idx]);
        }
    }
    for (t, &(a, b)) in pairs.pairs().iter().enumerate() {
        let d = p[a] - p[b];
        let r = (d * d + mu * mu).sqrt();
        let c = lambda * weights.weights()[t] * mu * mu / (r * r * r);
        h[(a, a)] += c;
        h[(b, b)] += c;
        h[(a, b)] -= c;
        h[(b, a)] -= c;
    }
    h
}

/// Options for [`solve`].
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Entry lower bound during optimization.
    pub eps: f64,
    /// Absolute tolerance on |p_a - p_b| below which cells are fused.
    pub fuse_tol: f64,
    /// Smoothing continuation schedule.
    pub mu_init: f64,
    pub mu_final: f64,
    pub mu_factor: f64,
    /// Newton iteration budget per continuation stage.
    pub max_iters: usize,
    /// Relative KKT residual required at the final stage.
    pub kkt_tol: f64,
    /// Residual above which the solve is reported failed.
    pub kkt_fail: f64,
    pub zero_row: ZeroRowPolicy,
    /// Also compute a post-fusion constrained MLE refit.
    pub refit: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            eps: 1e-9,
            fuse_tol: 1e-4,
            mu_init: 1e-2,
            mu_final: 1e-8,
            mu_factor: 10.0,
            max_iters: 500,
            kkt_tol: 1e-9,
            kkt_fail: 1e-6,
            zero_row: ZeroRowPolicy::Uniform,
            refit: false,
        }
    }
}

/// Solver diagnostics attached to a fit.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub final_mu: f64,
}

/// A penalized fit: the estimate, its active pair set and fused partition.
#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub estimate: TransitionMatrix,
    pub lambda: f64,
    pub weights: PairWeights,
    pub objective_value: f64,
    /// Pair indices t whose two cells are in different fused classes.
    pub active_set: Vec<usize>,
    pub fused_partition: EqualityPartition,
    pub diagnostics: Diagnostics,
    /// Post-fusion constrained MLE, when requested.
    pub refit: Option<TransitionMatrix>,
}

impl PenalizedFit {
    /// JSON summary with 1-based cell coordinates.
    pub fn summary_json(&self, pairs: &PairSet) -> serde_json::Value {
        let active: Vec<_> = self
            .active_set
            .iter()
            .map(|&t| {
                let ((i1, j1), (i2, j2)) = pairs.cells(t);
                serde_json::json!([[i1 + 1, j1 + 1], [i2 + 1, j2 + 1]])
            })
            .collect();
        let fused: Vec<_> = self
            .fused_partition
            .classes()
            .iter()
            .filter(|c| c.len() > 1)
            .map(|c| {
                let cells: Vec<_> = c.iter().map(|&(i, j)| vec![i + 1, j + 1]).collect();
                serde_json::json!(cells)
            })
            .collect();
        serde_json::json!({
            "lambda": self.lambda,
            "gamma": self.weights.gamma(),
            "estimate": self.estimate,
            "objective": self.objective_value,
            "active_pairs": active,
            "fused_classes": fused,
            "refit": self.refit,
            "diagnostics": self.diagnostics,
        })
    }
}

/// Minimizes the penalized negative log-likelihood over row-stochastic
/// matrices with entries in [eps, 1].
pub fn solve(
    counts: &TransitionCounts,
    lambda: f64,
    weights: &PairWeights,
    opts: &SolverOptions,
) -> Result<PenalizedFit> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda = {lambda} must be >= 0")));
    }
    let m = counts.m();
    let pairs = pair_set(m);
    if weights.weights().len() != pairs.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} pairs",
            weights.weights().len(),
            pairs.len()
        )));
    }
    let n = m * m;

    // feasible interior start at the (floored) MLE
    let pilot = mle(counts, opts.zero_row)?;
    let mut p: Vec<f64> = pilot.entries().to_vec();
    for i in 0..m {
        let row = &mut p[i * m..(i + 1) * m];
        for v in row.iter_mut() {
            *v = v.max(1e-4);
        }
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }

    let mut schedule = Vec::new();
    let mut mu = opts.mu_init;
    while mu > opts.mu_final * (1.0 + 1e-12) {
        schedule.push(mu);
        mu /= opts.mu_factor;
    }
    schedule.push(opts.mu_final);

    let mut fixed = vec![false; n];
    let mut total_iters = 0usize;
    let mut residual = f64::INFINITY;
    let last = schedule.len() - 1;
    for (si, &mu) in schedule.iter().enumerate() {
        let tol = if si == last { opts.kkt_tol } else { 1e-6 };
        let (iters, res) =
            newton_stage(&mut p, &mut fixed, counts, lambda, weights, &pairs, mu, tol, opts)?;
        total_iters += iters;
        residual = res;
    }

    // exact polish: with fused classes collapsed to one variable and the
    // penalty signs frozen, the problem is smooth; Newton then removes the
    // O(mu) smoothing bias from the continuation solution
    // only trust the polish when continuation already settled the pattern
    if residual <= 1e-3 {
        if let Some((better, reduced_res)) = polish(&p, counts, lambda, weights, &pairs, opts) {
            p = better;
            residual = residual.min(reduced_res);
        }
    }

    let violation = (0..m)
        .map(|i| (p[i * m..(i + 1) * m].iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    if residual > opts.kkt_fail || violation > 1e-8 {
        return Err(Error::Convergence(format!(
            "KKT residual {residual:.3e}, constraint violation {violation:.3e} after {total_iters} iterations"
        )));
    }

    let estimate = TransitionMatrix::from_flat(m, p, ValidityMode::StrictErgodic)?;
    let objective_value = objective_flat(estimate.entries(), counts, lambda, weights, &pairs, 0.0);
    let fused_partition = extract_equality_classes(&estimate, opts.fuse_tol)?;
    let map = fused_partition.cell_to_class();
    let active_set: Vec<usize> = pairs
        .pairs()
        .iter()
        .enumerate()
        .filter(|&(_, &(a, b))| map[a] != map[b])
        .map(|(t, _)| t)
        .collect();
    let refit = if opts.refit {
        Some(constrained_mle(counts, &fused_partition)?)
    } else {
        None
    };
    Ok(PenalizedFit {
        estimate,
        lambda,
        weights: weights.clone(),
        objective_value,
        active_set,
        fused_partition,
        diagnostics: Diagnostics {
            iterations: total_iters,
            kkt_residual: residual,
            constraint_violation: violation,
            final_mu: opts.mu_final,
        },
        refit,
    })
}

/// Exact Newton polish on the reduced problem implied by the current fusion
/// pattern: cells within `fuse_tol` of each other share one variable, the
/// penalty over distinct classes is linear with frozen signs, and the row
/// sums stay constraints. Returns the improved entries and the reduced-KKT
/// residual, or None when the polish does not improve the exact objective.
fn polish(
    p: &[f64],
    counts: &TransitionCounts,
    lambda: f64,
    weights: &PairWeights,
    pairs: &PairSet,
    opts: &SolverOptions,
) -> Option<(Vec<f64>, f64)> {
    let m = counts.m();
    let n = m * m;

    // union-find over pairs within fuse_tol
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = x;
        while parent[c] != r {
            let nx = parent[c];
            parent[c] = r;
            c = nx;
        }
        r
    }
    for &(a, b) in pairs.pairs() {
        if (p[a] - p[b]).abs() <= opts.fuse_tol {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        }
    }
    let mut class_of = vec![usize::MAX; n];
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for c in 0..n {
        let r = find(&mut parent, c);
        if class_of[r] == usize::MAX {
            class_of[r] = classes.len();
            classes.push(Vec::new());
        }
        class_of[c] = class_of[r];
        classes[class_of[r]].push(c);
    }
    let nk = classes.len();

    // class data: total counts, initial value, pinned status
    let mut mass = vec![0.0f64; nk];
    let mut value = vec![0.0f64; nk];
    for (k, cells) in classes.iter().enumerate() {
        for &c in cells {
            mass[k] += counts.counts()[c] as f64;
            value[k] += p[c];
        }
        value[k] /= cells.len() as f64;
    }
    // pin classes with no likelihood curvature or stuck at the lower bound
    let pinned: Vec<bool> = (0..nk)
        .map(|k| mass[k] == 0.0 || value[k] <= 10.0 * opts.eps)
        .collect();
    let free_k: Vec<usize> = (0..nk).filter(|&k| !pinned[k]).collect();
    if free_k.is_empty() {
        return None;
    }
    let col: Vec<usize> = {
        let mut col = vec![usize::MAX; nk];
        for (i, &k) in free_k.iter().enumerate() {
            col[k] = i;
        }
        col
    };

    // linear penalty coefficient per class from frozen signs
    let mut lin = vec![0.0f64; nk];
    for (t, &(a, b)) in pairs.pairs().iter().enumerate() {
        let (ka, kb) = (class_of[a], class_of[b]);
        if ka == kb {
            continue;
        }
        let s = (p[a] - p[b]).signum();
        lin[ka] += lambda * weights.weights()[t] * s;
        lin[kb] -= lambda * weights.weights()[t] * s;
    }

    // row constraint coefficients and targets
    let mut a_mat = vec![vec![0.0f64; free_k.len()]; m];
    let mut target = vec![1.0f64; m];
    for i in 0..m {
        for j in 0..m {
            let k = class_of[i * m + j];
            if pinned[k] {
                target[i] -= value[k];
            } else {
                a_mat[i][col[k]] += 1.0;
            }
        }
    }

    // drop linearly dependent row constraints (fusion can make rows of the
    // reduced constraint matrix coincide, e.g. one class covering several
    // rows); the full set is re-checked on the expanded candidate below
    let kept: Vec<usize> = {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut kept = Vec::new();
        for i in 0..m {
            let mut r = a_mat[i].clone();
            let norm0: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            for b in &basis {
                let dot: f64 = r.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in r.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
            let norm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-10 * (1.0 + norm0) {
                for x in r.iter_mut() {
                    *x /= norm;
                }
                basis.push(r);
                kept.push(i);
            }
        }
        kept
    };
    let a_mat: Vec<Vec<f64>> = kept.iter().map(|&i| a_mat[i].clone()).collect();
    let target_all = target.clone();
    let target: Vec<f64> = kept.iter().map(|&i| target[i]).collect();
    let a_all: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut row = vec![0.0f64; free_k.len()];
            for j in 0..m {
                let k = class_of[i * m + j];
                if !pinned[k] {
                    row[col[k]] += 1.0;
                }
            }
            row
        })
        .collect();
    let mr = kept.len();

    // damped Newton on the reduced smooth problem
    let kf = free_k.len();
    let dim = kf + mr;
    let reduced_obj = |v: &[f64]| -> f64 {
        free_k
            .iter()
            .enumerate()
            .map(|(i, &k)| -mass[k] * v[i].ln() + lin[k] * v[i])
            .sum()
    };
    let mut v: Vec<f64> = free_k.iter().map(|&k| value[k].max(opts.eps)).collect();
    let mut reduced_res = f64::INFINITY;
    for _ in 0..60 {
        let g: Vec<f64> = free_k
            .iter()
            .enumerate()
            .map(|(i, &k)| -mass[k] / v[i] + lin[k])
            .collect();
        let mut kkt = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = nalgebra::DVector::<f64>::zeros(dim);
        for (i, &k) in free_k.iter().enumerate() {
            kkt[(i, i)] = mass[k] / (v[i] * v[i]);
            rhs[i] = -g[i];
        }
        for i in 0..mr {
            for c in 0..kf {
                kkt[(c, kf + i)] = a_mat[i][c];
                kkt[(kf + i, c)] = a_mat[i][c];
            }
            rhs[kf + i] = target[i] - (0..kf).map(|c| a_mat[i][c] * v[c]).sum::<f64>();
        }
        // SVD least-squares: fusing can make row constraints linearly
        // dependent (e.g. a single class covering several rows), which
        // leaves the KKT matrix singular but the system still consistent
        let sol = kkt.lu().solve(&rhs)?;
        // residual with the multipliers from this solve
        let scale = 1.0
            + lambda * weights.weights().iter().fold(0.0f64, |a, &w| a.max(w))
            + g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let mut res = 0.0f64;
        for (i, _) in free_k.iter().enumerate() {
            let mut s = g[i];
            for r in 0..mr {
                s += a_mat[r][i] * sol[kf + r];
            }
            res = res.max(s.abs());
        }
        let cres = (0..mr).map(|i| rhs[kf + i].abs()).fold(0.0, f64::max);
        reduced_res = (res / scale).max(cres);
        if res / scale < 1e-13 && cres < 1e-12 {
            break;
        }
        // fraction-to-boundary step with a simple decrease safeguard
        let mut alpha = 1.0f64;
        for i in 0..kf {
            if sol[i] < 0.0 {
                alpha = alpha.min(0.999 * (v[i] - opts.eps) / (-sol[i]));
            }
        }
        if alpha <= 0.0 {
            break;
        }
        let before = reduced_obj(&v);
        let infeasible = cres > 1e-12;
        let mut t = alpha;
        let mut moved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = v
                .iter()
                .enumerate()
                .map(|(i, &x)| (x + t * sol[i]).max(opts.eps))
                .collect();
            // while the row constraints are violated the step restores
            // feasibility and may legitimately raise the objective
            if infeasible || reduced_obj(&cand) <= before + 1e-12 * (1.0 + before.abs()) {
                v = cand;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }

    // every original row constraint (including any dropped as dependent)
    // must hold at the solution, else the pattern was inconsistent
    let full_cres = (0..m)
        .map(|i| {
            (target_all[i] - (0..kf).map(|c| a_all[i][c] * v[c]).sum::<f64>()).abs()
        })
        .fold(0.0, f64::max);
    if full_cres > 1e-9 {
        return None;
    }

    // expand and accept only a genuine exact-objective improvement
    let mut cand = p.to_vec();
    for (i, &k) in free_k.iter().enumerate() {
        for &c in &classes[k] {
            cand[c] = v[i];
        }
    }
    for (k, cells) in classes.iter().enumerate() {
        if pinned[k] {
            for &c in cells {
                cand[c] = p[c];
            }
        }
    }
    let old = objective_flat(p, counts, lambda, weights, pairs, 0.0);
    let new = objective_flat(&cand, counts, lambda, weights, pairs, 0.0);
    if new <= old && reduced_res.is_finite() {
        Some((cand, reduced_res))
    } else {
        None
    }
}

/// Relative KKT residual of the smoothed stage problem, with least-squares
/// row multipliers. Returns (residual, scale).
fn kkt_residual(
    g: &[f64],
    p: &[f64],
    fixed: &[bool],
    m: usize,
    eps: f64,
    scale_extra: f64,
) -> (f64, f64, Vec<f64>) {
    let _ = (p, eps);
    let scale = 1.0 + scale_extra + g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut nu = vec![0.0f64; m];
    let mut free_res = 0.0f64;
    let mut bound_res = 0.0f64;
    for i in 0..m {
        let free: Vec<usize> = (i * m..(i + 1) * m).filter(|&c| !fixed[c]).collect();
        if free.is_empty() {
            continue;
        }
        nu[i] = -free.iter().map(|&c| g[c]).sum::<f64>() / free.len() as f64;
        for &c in &free {
            free_res = free_res.max((g[c] + nu[i]).abs());
        }
        for c in i * m..(i + 1) * m {
            if fixed[c] {
                // bound multiplier must be nonnegative
                bound_res = bound_res.max((-(g[c] + nu[i])).max(0.0));
            }
        }
    }
    (free_res / scale, bound_res / scale, nu)
}

#[allow(clippy::too_many_arguments)]
fn newton_stage(
    p: &mut [f64],
    fixed: &mut [bool],
    counts: &TransitionCounts,
    lambda: f64,
    weights: &PairWeights,
    pairs: &PairSet,
    mu: f64,
    tol: f64,
    opts: &SolverOptions,
) -> Result<(usize, f64)> {
    let m = counts.m();
    let n = m * m;
    let eps = opts.eps;
    let mut iters = 0usize;
    let mut stalled = 0usize;
    // Levenberg damping, raised when steps stop making progress (e.g. cells
    // with zero counts have no likelihood curvature away from the kinks)
    let mut damp = 0.0f64;
    // the penalty contributes terms of magnitude up to lambda*w_t whose
    // cancellation against the count gradient limits achievable stationarity
    let scale_extra =
        lambda * weights.weights().iter().fold(0.0f64, |a, &w| a.max(w));
    loop {
        // never leave a row fully fixed
        for i in 0..m {
            if (i * m..(i + 1) * m).all(|c| fixed[c]) {
                let c = i * m;
                fixed[c] = false;
            }
        }
        let g = gradient_flat(p, counts, lambda, weights, pairs, mu);
        let (free_res, bound_res, nu) = kkt_residual(&g, p, fixed, m, eps, scale_extra);
        let res = free_res.max(bound_res);
        if free_res < tol {
            // the current active set has converged; release bound-fixed
            // cells whose multiplier went negative before declaring victory
            let mut released = false;
            for i in 0..m {
                for c in i * m..(i + 1) * m {
                    if fixed[c] && g[c] + nu[i] < -1e-10 * (1.0 + g[c].abs() + nu[i].abs()) {
                        fixed[c] = false;
                        released = true;
                    }
                }
            }
            if !released {
                return Ok((iters, res));
            }
        }
        if iters >= opts.max_iters || stalled >= 8 {
            return Ok((iters, res));
        }
        iters += 1;

        let free: Vec<usize> = (0..n).filter(|&c| !fixed[c]).collect();
        let nf = free.len();
        let mut col_of = vec![usize::MAX; n];
        for (k, &c) in free.iter().enumerate() {
            col_of[c] = k;
        }
        let h = hessian_flat(p, counts, lambda, weights, pairs, mu);
        let max_diag = (0..n).map(|c| h[(c, c)]).fold(0.0, f64::max);
        let reg = 1e-12 * (1.0 + max_diag) + damp;
        let dim = nf + m;
        let mut kkt = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = nalgebra::DVector::<f64>::zeros(dim);
        for (ka, &a) in free.iter().enumerate() {
            for (kb, &b) in free.iter().enumerate() {
                kkt[(ka, kb)] = h[(a, b)] + if ka == kb { reg } else { 0.0 };
            }
            let row = a / m;
            kkt[(ka, nf + row)] = 1.0;
            kkt[(nf + row, ka)] = 1.0;
            rhs[ka] = -g[a];
        }
        for i in 0..m {
            rhs[nf + i] = 1.0 - p[i * m..(i + 1) * m].iter().sum::<f64>();
        }
        let sol = match kkt.lu().solve(&rhs) {
            Some(s) => s,
            None => {
                return Err(Error::Convergence("singular KKT system in penalized solver".into()))
            }
        };

        // step to the entry lower bound
        let mut alpha = 1.0f64;
        let mut blocking = None;
        for (k, &c) in free.iter().enumerate() {
            let d = sol[k];
            if d < 0.0 {
                let limit = (p[c] - eps) / (-d);
                if limit < alpha {
                    alpha = limit;
                    blocking = Some(c);
                }
            }
        }
        let dir_deriv: f64 = free.iter().enumerate().map(|(k, &c)| g[c] * sol[k]).sum();
        let phi0 = objective_flat(p, counts, lambda, weights, pairs, mu);
        let mut t = alpha;
        let mut accepted = false;
        while t > 1e-13 {
            let mut cand = p.to_vec();
            for (k, &c) in free.iter().enumerate() {
                cand[c] = (cand[c] + t * sol[k]).max(eps);
            }
            let phi = objective_flat(&cand, counts, lambda, weights, pairs, mu);
            if phi <= phi0 + 1e-4 * t * dir_deriv + 1e-12 * (1.0 + phi0.abs()) {
                p.copy_from_slice(&cand);
                if t == alpha {
                    if let Some(c) = blocking {
                        p[c] = eps;
                        fixed[c] = true;
                    }
                }
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || t < 1e-4 * alpha.max(1e-3) {
            // either the line search failed outright or bound clipping left
            // only a microscopic step: damp the next model more strongly
            stalled += if accepted { 0 } else { 1 };
            damp = (damp * 10.0).max(1e-8 * (1.0 + max_diag));
        } else {
            stalled = 0;
            damp /= 10.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feasible(m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = vec![0.0f64; m * m];
        for i in 0..m {
            let row: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = row.iter().sum();
            for j in 0..m {
                p[i * m + j] = row[j] / s;
            }
        }
        p
    }

    #[test]
    fn pair_set_cardinalities() {
        assert_eq!(pair_set(2).len(), 6);
        assert_eq!(pair_set(3).len(), 36);
        assert_eq!(pair_set(4).len(), 120);
    }

    #[test]
    fn pair_differences_uniform_and_reference() {
        let m3 = pair_set(3);
        let uniform = TransitionMatrix::new(
            &vec![vec![1.0 / 3.0; 3]; 3],
            ValidityMode::StrictErgodic,
        )
        .unwrap();
        assert!(pair_differences(&uniform, &m3).iter().all(|&d| d == 0.0));

        let p = datasets::sim_truth();
        // cells (1,2) and (3,2) 1-based -> flat 1 and 7
        let t = m3
            .pairs()
            .iter()
            .position(|&(a, b)| (a, b) == (1, 7))
            .unwrap();
        let d = pair_differences(&p, &m3)[t];
        assert!((d - (0.2 - 0.34)).abs() < 1e-12);
        // antisymmetry under orientation swap
        assert!((-(p.entries()[7] - p.entries()[1]) - d).abs() < 1e-15);
    }

    #[test]
    fn adaptive_weight_values() {
        let pairs = pair_set(2);
        // pilot with a 0.5 gap between p00 and p01
        let pilot = TransitionMatrix::new(
            &[vec![0.75, 0.25], vec![0.6, 0.4]],
            ValidityMode::StrictErgodic,
        )
        .unwrap();
        let w = adaptive_weights(&pilot, &pairs, 1.0, DEFAULT_W_MAX).unwrap();
        let t = pairs.pairs().iter().position(|&(a, b)| (a, b) == (0, 1)).unwrap();
        assert!((w.weights()[t] - 2.0).abs() < 1e-12);
        let w2 = adaptive_weights(&pilot, &pairs, 2.0, DEFAULT_W_MAX).unwrap();
        // gap 0.1 between p01 (0.25) and ... construct directly: |0.25-0.15|? use p10-p11 gap 0.2
        let t2 = pairs.pairs().iter().position(|&(a, b)| (a, b) == (2, 3)).unwrap();
        assert!((w2.weights()[t2] - 1.0 / (0.2f64.powi(2))).abs() < 1e-9);
    }

    #[test]
    fn zero_pilot_difference_caps_and_fuses() {
        let pairs = pair_set(2);
        let pilot = TransitionMatrix::new(
            &[vec![0.3, 0.7], vec![0.3, 0.7]],
            ValidityMode::StrictErgodic,
        )
        .unwrap();
        let w = adaptive_weights(&pilot, &pairs, 1.0, DEFAULT_W_MAX).unwrap();
        let t = pairs.pairs().iter().position(|&(a, b)| (a, b) == (0, 2)).unwrap();
        assert_eq!(w.weights()[t], DEFAULT_W_MAX);
        // any positive lambda must fuse the capped pair on a toy instance
        let counts = TransitionCounts::new(&[vec![3, 7], vec![4, 6]]).unwrap();
        let fit = solve(&counts, 0.01, &w, &SolverOptions::default()).unwrap();
        assert!(fit.fused_partition.same_class((0, 0), (1, 0)));
    }

    #[test]
    fn objective_hand_values() {
        let pairs = pair_set(2);
        let counts = TransitionCounts::new(&[vec![1, 1], vec![1, 1]]).unwrap();
        let p = TransitionMatrix::new(&[vec![0.6, 0.4], vec![0.4, 0.6]], ValidityMode::StrictErgodic)
            .unwrap();
        let w = PairWeights::unit(&pairs);
        let nll = -(0.6f64.ln() + 0.4f64.ln() + 0.4f64.ln() + 0.6f64.ln());
        let got = objective(&p, &counts, 1.0, &w, &pairs).unwrap();
        assert!((got - (nll + 0.8)).abs() < 1e-12, "got {got}");
        // lambda = 0 reduces to the negative log-likelihood
        let got0 = objective(&p, &counts, 0.0, &w, &pairs).unwrap();
        assert!((got0 - nll).abs() < 1e-12);
        // uniform matrix has zero penalty
        let u = TransitionMatrix::new(&[vec![0.5, 0.5], vec![0.5, 0.5]], ValidityMode::StrictErgodic)
            .unwrap();
        let gu = objective(&u, &counts, 17.0, &w, &pairs).unwrap();
        assert!((gu - 4.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn objective_is_convex_on_random_segments() {
        let pairs = pair_set(3);
        let counts = datasets::sim_counts();
        let w = PairWeights::unit(&pairs);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p1 = random_feasible(3, &mut rng);
            let p2 = random_feasible(3, &mut rng);
            let theta: f64 = rng.random();
            let mix: Vec<f64> = p1
                .iter()
                .zip(&p2)
                .map(|(a, b)| theta * a + (1.0 - theta) * b)
                .collect();
            let f = |p: &[f64]| objective_flat(p, &counts, 2.5, &w, &pairs, 0.0);
            assert!(f(&mix) <= theta * f(&p1) + (1.0 - theta) * f(&p2) + 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let pairs = pair_set(3);
        let counts = datasets::sim_counts();
        let pilot = mle(&counts, ZeroRowPolicy::Error).unwrap();
        let w = adaptive_weights(&pilot, &pairs, 1.0, DEFAULT_W_MAX).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mu = 1e-3;
        for _ in 0..100 {
            let p = random_feasible(3, &mut rng);
            let g = gradient_flat(&p, &counts, 1.7, &w, &pairs, mu);
            for c in 0..9 {
                let h = 1e-6 * p[c];
                let mut pp = p.clone();
                pp[c] += h;
                let mut pm = p.clone();
                pm[c] -= h;
                let fd = (objective_flat(&pp, &counts, 1.7, &w, &pairs, mu)
                    - objective_flat(&pm, &counts, 1.7, &w, &pairs, mu))
                    / (2.0 * h);
                let rel = (g[c] - fd).abs() / (1.0 + g[c].abs().max(fd.abs()));
                assert!(rel < 1e-6, "cell {c}: analytic {} vs fd {fd}", g[c]);
            }
        }
    }

    #[test]
    fn solve_lambda_zero_recovers_mle() {
        let counts = datasets::acgt_counts();
        let pairs = pair_set(4);
        let w = PairWeights::unit(&pairs);
        let fit = solve(&counts, 0.0, &w, &SolverOptions::default()).unwrap();
        let plain = mle(&counts, ZeroRowPolicy::Error).unwrap();
        for (a, b) in fit.estimate.entries().iter().zip(plain.entries()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn solve_huge_lambda_gives_uniform_rows() {
        let counts = datasets::sim_counts();
        let pairs = pair_set(3);
        let w = PairWeights::unit(&pairs);
        let fit = solve(&counts, 1e6, &w, &SolverOptions::default()).unwrap();
        for &v in fit.estimate.entries() {
            assert!((v - 1.0 / 3.0).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn penalty_at_solution_is_nonincreasing_in_lambda() {
        let counts = datasets::sim_counts();
        let pairs = pair_set(3);
        let pilot = mle(&counts, ZeroRowPolicy::Error).unwrap();
        let w = adaptive_weights(&pilot, &pairs, 1.0, DEFAULT_W_MAX).unwrap();
        let mut last = f64::INFINITY;
        for &lambda in &[0.1, 1.0, 5.0, 25.0, 125.0] {
            let fit = solve(&counts, lambda, &w, &SolverOptions::default()).unwrap();
            let pen: f64 = pair_differences(&fit.estimate, &pairs)
                .iter()
                .zip(w.weights())
                .map(|(d, wt)| wt * d.abs())
                .sum();
            assert!(pen <= last + 1e-6, "penalty rose: {pen} > {last} at lambda {lambda}");
            last = pen;
        }
    }

    #[test]
    fn solve_reports_consistent_active_set() {
        let counts = datasets::sim_counts();
        let pairs = pair_set(3);
        let pilot = mle(&counts, ZeroRowPolicy::Error).unwrap();
        let w = adaptive_weights(&pilot, &pairs, 1.0, DEFAULT_W_MAX).unwrap();
        let fit = solve(&counts, 5.0, &w, &SolverOptions::default()).unwrap();
        let map = fit.fused_partition.cell_to_class();
        for (t, &(a, b)) in pairs.pairs().iter().enumerate() {
            let active = fit.active_set.contains(&t);
            assert_eq!(active, map[a] != map[b]);
        }
    }

    #[test]
    fn refit_matches_constrained_mle_on_fused_partition() {
        let counts = datasets::sim_counts();
        let pairs = pair_set(3);
        let pilot = mle(&counts, ZeroRowPolicy::Error).unwrap();
        let w = adaptive_weights(&pilot, &pairs, 1.0, DEFAULT_W_MAX).unwrap();
        let opts = SolverOptions {
            refit: true,
            ..Default::default()
        };
        let fit = solve(&counts, 5.0, &w, &opts).unwrap();
        let refit = fit.refit.as_ref().unwrap();
        let direct = constrained_mle(&counts, &fit.fused_partition).unwrap();
        for (a, b) in refit.entries().iter().zip(direct.entries()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
