//! Core Markov chain domain types: transition matrices, observed sequences,
//! transition counts, equality partitions and stationary distributions.

use crate::error::{Error, Result};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Row-sum tolerance enforced on constructed matrices.
pub const ROW_SUM_TOL: f64 = 1e-10;
/// Maximum row-sum deviation accepted for renormalization at construction.
pub const ROW_SUM_ACCEPT: f64 = 1e-8;

/// Validity regime for a transition matrix.
///
/// Estimation targets must be ergodic (all entries strictly positive), while
/// simulation inputs and raw MLE outputs may contain zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ValidityMode {
    StrictErgodic,
    #[default]
    Stochastic,
}

/// A row-stochastic m x m probability matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixWire", into = "MatrixWire")]
pub struct TransitionMatrix {
    m: usize,
    entries: Vec<f64>, // row-major
    mode: ValidityMode,
}

#[derive(Serialize, Deserialize)]
struct MatrixWire {
    m: usize,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<MatrixWire> for TransitionMatrix {
    type Error = Error;
    fn try_from(w: MatrixWire) -> Result<Self> {
        if w.rows.len() != w.m {
            return Err(Error::Shape(format!(
                "declared m = {} but {} rows given",
                w.m,
                w.rows.len()
            )));
        }
        TransitionMatrix::new(&w.rows, ValidityMode::Stochastic)
    }
}

impl From<TransitionMatrix> for MatrixWire {
    fn from(p: TransitionMatrix) -> Self {
        MatrixWire {
            m: p.m,
            rows: p.rows_vec(),
        }
    }
}

impl TransitionMatrix {
    /// Validates and constructs a transition matrix.
    ///
    /// Rows whose sums deviate from 1 by less than [`ROW_SUM_ACCEPT`] are
    /// renormalized; larger deviations are rejected.
    pub fn new(rows: &[Vec<f64>], mode: ValidityMode) -> Result<Self> {
        let m = rows.len();
        if m < 2 {
            return Err(Error::Shape(format!("need m >= 2 states, got {m}")));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Shape(format!(
                    "row {} has {} entries, expected {m}",
                    i + 1,
                    row.len()
                )));
            }
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_flat(m, flat, mode)
    }

    /// As [`TransitionMatrix::new`] from a row-major flat buffer.
    pub fn from_flat(m: usize, mut entries: Vec<f64>, mode: ValidityMode) -> Result<Self> {
        if m < 2 || entries.len() != m * m {
            return Err(Error::Shape(format!(
                "expected {m}x{m} entries, got {}",
                entries.len()
            )));
        }
        for i in 0..m {
            for j in 0..m {
                let v = entries[i * m + j];
                if !v.is_finite() {
                    return Err(Error::Domain(format!("entry ({},{}) not finite", i + 1, j + 1)));
                }
                let bad = match mode {
                    ValidityMode::StrictErgodic => v <= 0.0,
                    ValidityMode::Stochastic => v < 0.0,
                };
                if bad {
                    return Err(Error::Positivity {
                        i: i + 1,
                        j: j + 1,
                        value: v,
                    });
                }
                if v > 1.0 + ROW_SUM_ACCEPT {
                    return Err(Error::Domain(format!(
                        "entry ({},{}) = {v} exceeds 1",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        for i in 0..m {
            let sum: f64 = entries[i * m..(i + 1) * m].iter().sum();
            if (sum - 1.0).abs() >= ROW_SUM_ACCEPT {
                return Err(Error::RowSum { row: i + 1, sum });
            }
            for v in &mut entries[i * m..(i + 1) * m] {
                *v /= sum;
            }
        }
        Ok(Self { m, entries, mode })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn mode(&self) -> ValidityMode {
        self.mode
    }

    /// Entry p_ij with 0-based indices.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.m..(i + 1) * self.m]
    }

    /// Row-major flat view of all m^2 entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn rows_vec(&self) -> Vec<Vec<f64>> {
        (0..self.m).map(|i| self.row(i).to_vec()).collect()
    }

    /// Re-interprets the matrix under a different validity mode.
    pub fn with_mode(&self, mode: ValidityMode) -> Result<Self> {
        Self::from_flat(self.m, self.entries.clone(), mode)
    }
}

/// Initial-state law for simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialState {
    /// Fixed 1-based start state.
    Fixed(usize),
    /// Draw the start state from the stationary distribution of the chain.
    Stationary,
    /// Draw the start state uniformly over 1..=m.
    Uniform,
}

/// An observed realization of the chain; states are stored 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSequence {
    m: usize,
    states: Vec<usize>,
}

impl StateSequence {
    pub fn new(states: Vec<usize>, m: usize) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::TooShort {
                n: states.len(),
                min: 2,
            });
        }
        if let Some(&s) = states.iter().find(|&&s| s < 1 || s > m) {
            return Err(Error::Domain(format!("state {s} outside [1, {m}]")));
        }
        Ok(Self { m, states })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// 1-based states in observation order.
    pub fn states(&self) -> &[usize] {
        &self.states
    }
}

/// Observed transition counts n_ij with cached row sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionCounts {
    m: usize,
    counts: Vec<u64>, // row-major
    row_sums: Vec<u64>,
    total: u64,
}

impl TransitionCounts {
    pub fn new(rows: &[Vec<u64>]) -> Result<Self> {
        let m = rows.len();
        if m < 2 {
            return Err(Error::Shape(format!("need m >= 2 states, got {m}")));
        }
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("count matrix is not square".into()));
        }
        let counts: Vec<u64> = rows.iter().flatten().copied().collect();
        let row_sums: Vec<u64> = (0..m).map(|i| counts[i * m..(i + 1) * m].iter().sum()).collect();
        let total = row_sums.iter().sum();
        Ok(Self {
            m,
            counts,
            row_sums,
            total,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.m + j]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.row_sums[i]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn rows_vec(&self) -> Vec<Vec<u64>> {
        (0..self.m)
            .map(|i| self.counts[i * self.m..(i + 1) * self.m].to_vec())
            .collect()
    }
}

/// A partition of the m^2 matrix cells into classes of equal probability.
/// Cells are 0-based (row, col) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualityPartition {
    m: usize,
    classes: Vec<Vec<(usize, usize)>>,
    values: Option<Vec<f64>>,
}

impl EqualityPartition {
    pub fn new(m: usize, classes: Vec<Vec<(usize, usize)>>, values: Option<Vec<f64>>) -> Result<Self> {
        let mut seen = vec![false; m * m];
        let mut covered = 0usize;
        for class in &classes {
            if class.is_empty() {
                return Err(Error::Domain("empty partition class".into()));
            }
            for &(i, j) in class {
                if i >= m || j >= m {
                    return Err(Error::Domain(format!("cell ({i},{j}) outside {m}x{m} matrix")));
                }
                if seen[i * m + j] {
                    return Err(Error::Domain(format!("cell ({i},{j}) appears in two classes")));
                }
                seen[i * m + j] = true;
                covered += 1;
            }
        }
        if covered != m * m {
            return Err(Error::Domain(format!(
                "classes cover {covered} cells, expected {}",
                m * m
            )));
        }
        if let Some(v) = &values {
            if v.len() != classes.len() {
                return Err(Error::Mismatch("one value per class required".into()));
            }
        }
        let mut classes = classes;
        for c in &mut classes {
            c.sort_unstable();
        }
        Ok(Self { m, classes, values })
    }

    /// Builds a partition from explicitly fused groups; all remaining cells
    /// become singletons.
    pub fn from_fused_groups(m: usize, groups: &[Vec<(usize, usize)>]) -> Result<Self> {
        let mut assigned = vec![false; m * m];
        let mut classes: Vec<Vec<(usize, usize)>> = Vec::new();
        for g in groups {
            for &(i, j) in g {
                if i >= m || j >= m {
                    return Err(Error::Domain(format!("cell ({i},{j}) outside {m}x{m} matrix")));
                }
                assigned[i * m + j] = true;
            }
            classes.push(g.clone());
        }
        for i in 0..m {
            for j in 0..m {
                if !assigned[i * m + j] {
                    classes.push(vec![(i, j)]);
                }
            }
        }
        Self::new(m, classes, None)
    }

    /// The all-singletons partition.
    pub fn singletons(m: usize) -> Self {
        let classes = (0..m)
            .flat_map(|i| (0..m).map(move |j| vec![(i, j)]))
            .collect();
        Self::new(m, classes, None).expect("singleton partition is always valid")
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn classes(&self) -> &[Vec<(usize, usize)>] {
        &self.classes
    }

    pub fn values(&self) -> Option<&[f64]> {
        self.values.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Map from flat cell index to class index.
    pub fn cell_to_class(&self) -> Vec<usize> {
        let mut map = vec![0usize; self.m * self.m];
        for (c, class) in self.classes.iter().enumerate() {
            for &(i, j) in class {
                map[i * self.m + j] = c;
            }
        }
        map
    }

    /// True when both cells belong to one class.
    pub fn same_class(&self, a: (usize, usize), b: (usize, usize)) -> bool {
        let map = self.cell_to_class();
        map[a.0 * self.m + a.1] == map[b.0 * self.m + b.1]
    }
}

/// Stationary distribution pi with pi P = pi.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDistribution {
    pi: Vec<f64>,
}

impl StationaryDistribution {
    pub fn m(&self) -> usize {
        self.pi.len()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn get(&self, i: usize) -> f64 {
        self.pi[i]
    }
}

/// Simulates a sequence of length `n` from `p`, deterministically in
/// `(p, n, seed, initial)`.
pub fn simulate_sequence(
    p: &TransitionMatrix,
    n: usize,
    seed: u64,
    initial: InitialState,
) -> Result<StateSequence> {
    if n < 2 {
        return Err(Error::TooShort { n, min: 2 });
    }
    let m = p.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = match initial {
        InitialState::Fixed(s) => {
            if s < 1 || s > m {
                return Err(Error::Domain(format!("initial state {s} outside [1, {m}]")));
            }
            s - 1
        }
        InitialState::Uniform => rng.random_range(0..m),
        InitialState::Stationary => {
            let pi = stationary_distribution(p)?;
            sample_index(pi.pi(), rng.random())
        }
    };
    let mut states = Vec::with_capacity(n);
    states.push(first + 1);
    let mut cur = first;
    for _ in 1..n {
        cur = sample_index(p.row(cur), rng.random());
        states.push(cur + 1);
    }
    StateSequence::new(states, m)
}

fn sample_index(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Counts adjacent transitions in `seq`.
pub fn count_transitions(seq: &StateSequence) -> TransitionCounts {
    let m = seq.m();
    let mut counts = vec![0u64; m * m];
    for w in seq.states().windows(2) {
        counts[(w[0] - 1) * m + (w[1] - 1)] += 1;
    }
    let rows: Vec<Vec<u64>> = (0..m).map(|i| counts[i * m..(i + 1) * m].to_vec()).collect();
    TransitionCounts::new(&rows).expect("counts from a sequence are always square")
}

/// Solves pi P = pi, sum pi = 1 by a direct linear solve, requiring residual
/// below 1e-12.
pub fn stationary_distribution(p: &TransitionMatrix) -> Result<StationaryDistribution> {
    if p.mode() != ValidityMode::StrictErgodic {
        // accept matrices constructed in stochastic mode if actually positive
        if p.entries().iter().any(|&v| v <= 0.0) {
            return Err(Error::Positivity {
                i: 0,
                j: 0,
                value: 0.0,
            });
        }
    }
    let m = p.m();
    // (P^T - I) pi = 0 with the last equation replaced by sum pi = 1.
    let mut a = nalgebra::DMatrix::<f64>::zeros(m, m);
    let mut b = nalgebra::DVector::<f64>::zeros(m);
    for r in 0..m - 1 {
        for c in 0..m {
            a[(r, c)] = p.get(c, r) - if r == c { 1.0 } else { 0.0 };
        }
    }
    for c in 0..m {
        a[(m - 1, c)] = 1.0;
    }
    b[m - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Convergence("singular system for stationary distribution".into()))?;
    let mut pi: Vec<f64> = pi.iter().copied().collect();
    // A couple of power-iteration refinements to push the residual down.
    for _ in 0..4 {
        let next: Vec<f64> = (0..m)
            .map(|j| (0..m).map(|i| pi[i] * p.get(i, j)).sum())
            .collect();
        let s: f64 = next.iter().sum();
        pi = next.iter().map(|v| v / s).collect();
    }
    let residual = (0..m)
        .map(|j| {
            let v: f64 = (0..m).map(|i| pi[i] * p.get(i, j)).sum();
            (v - pi[j]).abs()
        })
        .fold(0.0, f64::max);
    if residual >= 1e-12 || pi.iter().any(|&v| v < 0.0) {
        return Err(Error::Convergence(format!(
            "stationary distribution residual {residual:.3e} above 1e-12"
        )));
    }
    Ok(StationaryDistribution { pi })
}

/// Reconstructs a sequence whose transition counts equal `counts` exactly,
/// by walking an Eulerian path of the transition multigraph. Deterministic:
/// lowest-numbered next state first.
pub fn sequence_from_counts(counts: &TransitionCounts, seed: u64) -> Result<StateSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = counts.m();
    let mut remaining: Vec<u64> = counts.counts().to_vec();
    let out: Vec<i64> = (0..m).map(|i| counts.row_sum(i) as i64).collect();
    let col: Vec<i64> = (0..m)
        .map(|j| (0..m).map(|i| counts.get(i, j) as i64).sum())
        .collect();
    let mut start = None;
    let mut plus = 0;
    let mut minus = 0;
    for i in 0..m {
        match out[i] - col[i] {
            0 => {}
            1 => {
                plus += 1;
                start = Some(i);
            }
            -1 => minus += 1,
            _ => {
                return Err(Error::Domain(
                    "counts do not admit a realizing sequence (degree imbalance > 1)".into(),
                ))
            }
        }
    }
    if plus > 1 || minus > 1 {
        return Err(Error::Domain(
            "counts do not admit a realizing sequence (multiple imbalanced states)".into(),
        ));
    }
    let start = start.unwrap_or_else(|| (0..m).find(|&i| out[i] > 0).unwrap_or(0));
    if counts.total() == 0 {
        return Err(Error::TooShort { n: 1, min: 2 });
    }
    // Hierholzer with randomized edge choice: picking the next edge with
    // probability proportional to its remaining multiplicity makes the
    // realization look like a typical chain sample rather than a maximally
    // sorted walk (which would wreck ordered-fold cross-validation)
    let mut stack = vec![start];
    let mut path = Vec::with_capacity(counts.total() as usize + 1);
    while let Some(&v) = stack.last() {
        let row = &remaining[v * m..(v + 1) * m];
        let left: u64 = row.iter().sum();
        if left > 0 {
            let mut draw = rng.random_range(0..left);
            let mut j = 0;
            while draw >= remaining[v * m + j] {
                draw -= remaining[v * m + j];
                j += 1;
            }
            remaining[v * m + j] -= 1;
            stack.push(j);
        } else {
            path.push(v);
            stack.pop();
        }
    }
    if remaining.iter().any(|&c| c > 0) {
        return Err(Error::Domain(
            "counts do not admit a realizing sequence (transition graph disconnected)".into(),
        ));
    }
    path.reverse();
    StateSequence::new(path.into_iter().map(|s| s + 1).collect(), m)
}

/// Union-find clustering of cells whose values differ by at most `tol`;
/// non-transitive closeness is resolved by transitive merging. Class values
/// are the means of their members.
pub fn extract_equality_classes(p: &TransitionMatrix, tol: f64) -> Result<EqualityPartition> {
    if tol < 0.0 {
        return Err(Error::Domain(format!("tolerance {tol} must be >= 0")));
    }
    let m = p.m();
    let n = m * m;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let r = find(parent, parent[x]);
            parent[x] = r;
        }
        parent[x]
    }
    for a in 0..n {
        for b in a + 1..n {
            if (p.entries()[a] - p.entries()[b]).abs() <= tol {
                let ra = find(&mut parent, a);
                let rb = find(&mut parent, b);
                if ra != rb {
                    parent[rb] = ra;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for x in 0..n {
        let r = find(&mut parent, x);
        groups.entry(r).or_default().push(x);
    }
    let mut classes = Vec::new();
    let mut values = Vec::new();
    for cells in groups.values() {
        let value = cells.iter().map(|&c| p.entries()[c]).sum::<f64>() / cells.len() as f64;
        classes.push(cells.iter().map(|&c| (c / m, c % m)).collect());
        values.push(value);
    }
    EqualityPartition::new(m, classes, Some(values))
}
