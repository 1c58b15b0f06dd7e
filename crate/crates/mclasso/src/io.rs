//! File formats and text parsing: sequences, matrices, counts, alphabets,
//! and the null-hypothesis grammar.

use crate::chain::{
    EqualityPartition, StateSequence, TransitionCounts, TransitionMatrix, ValidityMode,
};
use crate::error::{Error, Result};
use serde::Deserialize;
use std::collections::HashMap;
use std::path::Path;

/// Bijective map between single-character symbols and states 1..m.
#[derive(Debug, Clone)]
pub struct AlphabetMap {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl AlphabetMap {
    /// Builds a map from an ordered list of unique symbols; symbol k maps to
    /// state k+1.
    pub fn new(symbols: &[char]) -> Result<Self> {
        if symbols.len() < 2 {
            return Err(Error::Parse(format!(
                "alphabet needs at least 2 symbols, got {}",
                symbols.len()
            )));
        }
        let mut index = HashMap::new();
        for (k, &c) in symbols.iter().enumerate() {
            if index.insert(c, k + 1).is_some() {
                return Err(Error::Parse(format!("duplicate alphabet symbol '{c}'")));
            }
        }
        Ok(Self {
            symbols: symbols.to_vec(),
            index,
        })
    }

    /// The built-in preset A->1, C->2, G->3, T->4.
    pub fn acgt() -> Self {
        Self::new(&['A', 'C', 'G', 'T']).expect("static alphabet")
    }

    /// Resolves a spec string: "ACGT" for the preset, "file:<path>" for a
    /// file holding the symbols (one per line or a single line).
    pub fn from_spec(spec: &str) -> Result<Self> {
        if spec == "ACGT" {
            return Ok(Self::acgt());
        }
        if let Some(path) = spec.strip_prefix("file:") {
            let text = std::fs::read_to_string(path)?;
            let symbols: Vec<char> = text.split_whitespace().flat_map(|t| t.chars()).collect();
            return Self::new(&symbols);
        }
        Err(Error::Parse(format!(
            "unknown alphabet spec '{spec}' (expected ACGT or file:<path>)"
        )))
    }

    pub fn m(&self) -> usize {
        self.symbols.len()
    }

    pub fn state_of(&self, c: char) -> Result<usize> {
        self.index
            .get(&c)
            .copied()
            .ok_or_else(|| Error::Parse(format!("symbol '{c}' not in alphabet")))
    }

    pub fn symbol_of(&self, state: usize) -> Result<char> {
        self.symbols
            .get(state.checked_sub(1).ok_or_else(|| {
                Error::Parse("states are 1-based".into())
            })?)
            .copied()
            .ok_or_else(|| Error::Parse(format!("state {state} outside alphabet")))
    }
}

/// Parses a sequence file: one token per line, each an integer state 1..m or
/// a single character resolved through the alphabet.
pub fn parse_sequence(text: &str, m: usize, alphabet: Option<&AlphabetMap>) -> Result<StateSequence> {
    let mut states = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let tok = raw.trim();
        if tok.is_empty() {
            continue;
        }
        let state = if let Ok(s) = tok.parse::<usize>() {
            s
        } else if tok.chars().count() == 1 {
            let c = tok.chars().next().expect("single char");
            match alphabet {
                Some(a) => a.state_of(c)?,
                None => {
                    return Err(Error::Parse(format!(
                        "line {}: symbol token '{tok}' but no alphabet given",
                        lineno + 1
                    )))
                }
            }
        } else {
            return Err(Error::Parse(format!(
                "line {}: token '{tok}' is neither an integer nor a single symbol",
                lineno + 1
            )));
        };
        states.push(state);
    }
    StateSequence::new(states, m)
}

pub fn read_sequence(path: &Path, m: usize, alphabet: Option<&AlphabetMap>) -> Result<StateSequence> {
    parse_sequence(&std::fs::read_to_string(path)?, m, alphabet)
}

/// Formats a sequence, one state per line, as symbols when an alphabet is
/// given and integers otherwise.
pub fn format_sequence(seq: &StateSequence, alphabet: Option<&AlphabetMap>) -> Result<String> {
    let mut out = String::new();
    for &s in seq.states() {
        match alphabet {
            Some(a) => out.push(a.symbol_of(s)?),
            None => out.push_str(&s.to_string()),
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Deserialize)]
struct MatrixJson {
    #[allow(dead_code)]
    m: usize,
    rows: Vec<Vec<f64>>,
}

/// Parses a matrix from JSON {"m": .., "rows": [..]} or CSV rows; the format
/// is detected from the first non-space character.
pub fn parse_matrix(text: &str, mode: ValidityMode) -> Result<TransitionMatrix> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let parsed: MatrixJson =
            serde_json::from_str(trimmed).map_err(|e| Error::Parse(format!("matrix JSON: {e}")))?;
        TransitionMatrix::new(&parsed.rows, mode)
    } else {
        let mut rows = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("matrix value '{t}': {e}")))
                })
                .collect::<Result<_>>()?;
            rows.push(row);
        }
        TransitionMatrix::new(&rows, mode)
    }
}

pub fn read_matrix(path: &Path, mode: ValidityMode) -> Result<TransitionMatrix> {
    parse_matrix(&std::fs::read_to_string(path)?, mode)
}

/// CSV with >= 12 significant digits so files round-trip.
pub fn matrix_to_csv(p: &TransitionMatrix) -> String {
    let mut out = String::new();
    for i in 0..p.m() {
        let row: Vec<String> = (0..p.m()).map(|j| format!("{:.15e}", p.get(i, j))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_to_json(p: &TransitionMatrix) -> String {
    serde_json::to_string_pretty(p).expect("matrix serializes") + "\n"
}

/// Human-oriented fixed 6-decimal table.
pub fn matrix_to_table(p: &TransitionMatrix) -> String {
    let mut out = String::new();
    for i in 0..p.m() {
        let row: Vec<String> = (0..p.m()).map(|j| format!("{:.6}", p.get(i, j))).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Parses a counts file: CSV of m integer rows.
pub fn parse_counts(text: &str) -> Result<TransitionCounts> {
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<u64> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::Parse(format!("count value '{t}': {e}")))
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    TransitionCounts::new(&rows)
}

pub fn read_counts(path: &Path) -> Result<TransitionCounts> {
    parse_counts(&std::fs::read_to_string(path)?)
}

pub fn counts_to_csv(c: &TransitionCounts) -> String {
    let mut out = String::new();
    for i in 0..c.m() {
        let row: Vec<String> = (0..c.m()).map(|j| c.get(i, j).to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses a null-hypothesis expression into an equality partition (unnamed
/// cells stay singletons).
///
/// Two concrete grammars:
/// - letter cells under an alphabet: groups separated by `,`, cells as
///   two-symbol `RC` pairs joined by `=`, e.g. `AG=GC` or `AA=GA,AG=GC`;
/// - integer cells: groups separated by `;`, cells as `i,j` pairs joined by
///   `=`, e.g. `1,2=3,2` or `1,1=3,1;1,2=2,3` (the `;` separator avoids
///   ambiguity with the in-cell comma).
pub fn parse_null(expr: &str, m: usize, alphabet: Option<&AlphabetMap>) -> Result<EqualityPartition> {
    let expr = expr.trim();
    if expr.is_empty() {
        return Err(Error::Parse("empty null-hypothesis expression".into()));
    }
    let letter_mode = expr.chars().any(|c| c.is_alphabetic());
    let groups: Vec<&str> = if letter_mode {
        expr.split(',').collect()
    } else {
        expr.split(';').collect()
    };
    let mut parsed_groups = Vec::new();
    for group in groups {
        let mut cells = Vec::new();
        for cell in group.split('=') {
            let cell = cell.trim();
            let (i, j) = if letter_mode {
                let a = alphabet.ok_or_else(|| {
                    Error::Parse(format!("letter cell '{cell}' but no alphabet given"))
                })?;
                let chars: Vec<char> = cell.chars().collect();
                if chars.len() != 2 {
                    return Err(Error::Parse(format!(
                        "cell '{cell}' must be two alphabet symbols"
                    )));
                }
                (a.state_of(chars[0])?, a.state_of(chars[1])?)
            } else {
                let parts: Vec<&str> = cell.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(Error::Parse(format!("cell '{cell}' must be i,j")));
                }
                let i: usize = parts[0]
                    .parse()
                    .map_err(|e| Error::Parse(format!("cell '{cell}': {e}")))?;
                let j: usize = parts[1]
                    .parse()
                    .map_err(|e| Error::Parse(format!("cell '{cell}': {e}")))?;
                (i, j)
            };
            if i < 1 || i > m || j < 1 || j > m {
                return Err(Error::Parse(format!(
                    "cell ({i},{j}) outside 1..{m}"
                )));
            }
            cells.push((i - 1, j - 1));
        }
        if cells.len() < 2 {
            return Err(Error::Parse(format!(
                "group '{group}' must name at least two cells"
            )));
        }
        parsed_groups.push(cells);
    }
    EqualityPartition::from_fused_groups(m, &parsed_groups)
}
