//! Command-line surface: argument parsing and subcommand dispatch.

use crate::chain::{
    count_transitions, extract_equality_classes, simulate_sequence,
    InitialState, TransitionCounts, ValidityMode,
};
use crate::error::{Error, Result};
use crate::estimators::{bootstrap_mle, lrt, mle, ZeroRowPolicy};
use crate::experiments::{
    difference_histogram, hist_csv, run_study, LambdaRule, StudyConfig, StudyMethod,
};
use crate::io::{
    counts_to_csv, matrix_to_csv, matrix_to_json, matrix_to_table, parse_null, read_counts,
    read_matrix, read_sequence, AlphabetMap,
};
use crate::metrics::{
    frobenius_distance, purity, selection_accuracy_partition, MetricsReport,
};
use crate::model_selection::{log_grid, select_lambda, CvMethod};
use crate::penalized::{adaptive_weights, pair_set, solve, PairWeights, SolverOptions, DEFAULT_W_MAX};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::io::Write as _;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "mclasso",
    version,
    about = "Markov chain transition-matrix estimation with equality-pattern discovery"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimateMethod {
    Mle,
    Bootstrap,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PenalizedMethod {
    Lasso,
    Alasso,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ZeroRowArg {
    Error,
    Uniform,
}

impl From<ZeroRowArg> for ZeroRowPolicy {
    fn from(z: ZeroRowArg) -> Self {
        match z {
            ZeroRowArg::Error => ZeroRowPolicy::Error,
            ZeroRowArg::Uniform => ZeroRowPolicy::Uniform,
        }
    }
}

#[derive(Args)]
struct GridArgs {
    /// Log-spaced lambda grid as lo:hi:len (e.g. 0.5:50:15).
    #[arg(long, conflicts_with = "lambdas")]
    grid: Option<String>,
    /// Explicit comma-separated lambda values.
    #[arg(long)]
    lambdas: Option<String>,
}

impl GridArgs {
    fn resolve(&self) -> Result<Vec<f64>> {
        if let Some(spec) = &self.grid {
            let parts: Vec<&str> = spec.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::Parse(format!("grid spec '{spec}' must be lo:hi:len")));
            }
            let lo: f64 = parts[0]
                .parse()
                .map_err(|e| Error::Parse(format!("grid lo: {e}")))?;
            let hi: f64 = parts[1]
                .parse()
                .map_err(|e| Error::Parse(format!("grid hi: {e}")))?;
            let len: usize = parts[2]
                .parse()
                .map_err(|e| Error::Parse(format!("grid len: {e}")))?;
            log_grid(lo, hi, len)
        } else if let Some(list) = &self.lambdas {
            list.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("lambda '{t}': {e}")))
                })
                .collect()
        } else {
            log_grid(0.5, 50.0, 15)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a sequence from a transition matrix.
    Simulate {
        /// Transition matrix file (JSON or CSV).
        #[arg(long)]
        truth: PathBuf,
        /// Sequence length.
        #[arg(long)]
        n: usize,
        /// RNG seed (all randomness is seeded).
        #[arg(long)]
        seed: u64,
        /// Initial state: stationary, uniform, or a fixed 1-based state.
        #[arg(long, default_value = "stationary")]
        initial: String,
        /// Emit symbols through an alphabet (ACGT or file:<path>).
        #[arg(long)]
        alphabet: Option<String>,
        /// Output file (stdout when omitted).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Count transitions in a sequence file.
    Counts {
        #[arg(long)]
        seq: PathBuf,
        /// State count m (inferred from the alphabet when given).
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        alphabet: Option<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Maximum-likelihood (optionally bootstrap-smoothed) estimate.
    Estimate {
        #[arg(long, value_enum, default_value = "mle")]
        method: EstimateMethod,
        #[arg(long)]
        counts: PathBuf,
        /// Bootstrap smoothing weight alpha (bootstrap method only).
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// Reference matrix for bootstrap shrinkage (default uniform).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "error")]
        zero_row: ZeroRowArg,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Likelihood-ratio test of an equality null hypothesis.
    Lrt {
        #[arg(long)]
        counts: PathBuf,
        /// Null hypothesis, e.g. "AG=GC" (with --alphabet) or "1,2=3,2".
        #[arg(long)]
        null: String,
        #[arg(long, default_value_t = 0.05)]
        level: f64,
        #[arg(long)]
        alphabet: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Penalized fit (McLasso or adaptive McALasso) at a fixed lambda.
    Fit {
        #[arg(long, value_enum)]
        method: PenalizedMethod,
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Fusion tolerance on estimated entries.
        #[arg(long, default_value_t = 1e-4)]
        fuse_tol: f64,
        /// Also report the post-fusion constrained MLE refit.
        #[arg(long)]
        refit: bool,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Cross-validate lambda on a sequence with ordered folds.
    Cv {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        alphabet: Option<String>,
        #[arg(long, value_enum)]
        method: PenalizedMethod,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare an estimate against a known truth.
    Metrics {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        /// Fusion tolerance applied to the estimate when extracting classes.
        #[arg(long, default_value_t = 1e-4)]
        fuse_tol: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Seeded Monte Carlo study; writes summary.csv and raw.csv.
    Study {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_reps: usize,
        #[arg(long, default_value_t = 20_000)]
        n: usize,
        /// Base RNG seed; replicate r uses seed + r.
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Comma-separated subset of mle,mclasso,mcalasso.
        #[arg(long, default_value = "mle,mclasso,mcalasso")]
        methods: String,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Skip per-replicate CV and use this fixed lambda.
        #[arg(long)]
        fixed_lambda: Option<f64>,
        /// Also write hist.csv of MLE differences for this cell pair,
        /// e.g. "1,2=3,2".
        #[arg(long)]
        hist: Option<String>,
        #[arg(long, default_value_t = 1000)]
        hist_reps: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn write_out(output: &Option<PathBuf>, text: &str) -> Result<()> {
    match output {
        Some(path) => std::fs::write(path, text)?,
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn alphabet_opt(spec: &Option<String>) -> Result<Option<AlphabetMap>> {
    spec.as_deref().map(AlphabetMap::from_spec).transpose()
}

fn resolve_m(m: Option<usize>, alphabet: &Option<AlphabetMap>) -> Result<usize> {
    match (m, alphabet) {
        (Some(m), _) => Ok(m),
        (None, Some(a)) => Ok(a.m()),
        (None, None) => Err(Error::Parse(
            "state count unknown: pass --m or --alphabet".into(),
        )),
    }
}

fn format_matrix(p: &crate::chain::TransitionMatrix, format: Format) -> String {
    match format {
        Format::Json => matrix_to_json(p),
        Format::Csv => matrix_to_csv(p),
        Format::Table => matrix_to_table(p),
    }
}

fn penalized_fit(
    counts: &TransitionCounts,
    method: PenalizedMethod,
    lambda: f64,
    gamma: f64,
    fuse_tol: f64,
    refit: bool,
) -> Result<crate::penalized::PenalizedFit> {
    let pairs = pair_set(counts.m());
    let weights = match method {
        PenalizedMethod::Lasso => PairWeights::unit(&pairs),
        PenalizedMethod::Alasso => {
            let pilot = mle(counts, ZeroRowPolicy::Uniform)?;
            adaptive_weights(&pilot, &pairs, gamma, DEFAULT_W_MAX)?
        }
    };
    let opts = SolverOptions {
        fuse_tol,
        refit,
        ..SolverOptions::default()
    };
    solve(counts, lambda, &weights, &opts)
}

fn run_command(command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            truth,
            n,
            seed,
            initial,
            alphabet,
            output,
        } => {
            let p = read_matrix(&truth, ValidityMode::StrictErgodic)?;
            let init = match initial.as_str() {
                "stationary" => InitialState::Stationary,
                "uniform" => InitialState::Uniform,
                s => InitialState::Fixed(s.parse::<usize>().map_err(|_| {
                    Error::Parse(format!(
                        "initial '{s}' must be stationary, uniform, or a state number"
                    ))
                })?),
            };
            let alphabet = alphabet_opt(&alphabet)?;
            let seq = simulate_sequence(&p, n, seed, init)?;
            write_out(&output, &crate::io::format_sequence(&seq, alphabet.as_ref())?)
        }
        Command::Counts {
            seq,
            m,
            alphabet,
            format,
            output,
        } => {
            let alphabet = alphabet_opt(&alphabet)?;
            let m = resolve_m(m, &alphabet)?;
            let counts = count_transitions(&read_sequence(&seq, m, alphabet.as_ref())?);
            let text = match format {
                Format::Json => {
                    serde_json::to_string_pretty(
                        &serde_json::json!({"m": counts.m(), "rows": counts.rows_vec()}),
                    )
                    .expect("counts serialize")
                        + "\n"
                }
                _ => counts_to_csv(&counts),
            };
            write_out(&output, &text)
        }
        Command::Estimate {
            method,
            counts,
            alpha,
            reference,
            zero_row,
            format,
            output,
        } => {
            let c = read_counts(&counts)?;
            let est = match method {
                EstimateMethod::Mle => mle(&c, zero_row.into())?,
                EstimateMethod::Bootstrap => {
                    let q = match reference {
                        Some(path) => read_matrix(&path, ValidityMode::StrictErgodic)?,
                        None => crate::chain::TransitionMatrix::from_flat(
                            c.m(),
                            vec![1.0 / c.m() as f64; c.m() * c.m()],
                            ValidityMode::StrictErgodic,
                        )?,
                    };
                    bootstrap_mle(&c, &q, alpha)?
                }
            };
            write_out(&output, &format_matrix(&est, format))
        }
        Command::Lrt {
            counts,
            null,
            level,
            alphabet,
            output,
        } => {
            let c = read_counts(&counts)?;
            let alphabet = alphabet_opt(&alphabet)?;
            let partition = parse_null(&null, c.m(), alphabet.as_ref())?;
            let result = lrt(&c, &partition, level)?;
            let text = serde_json::to_string_pretty(&result).expect("lrt serializes") + "\n";
            write_out(&output, &text)
        }
        Command::Fit {
            method,
            counts,
            lambda,
            gamma,
            fuse_tol,
            refit,
            format,
            output,
        } => {
            let c = read_counts(&counts)?;
            let fit = penalized_fit(&c, method, lambda, gamma, fuse_tol, refit)?;
            let text = match format {
                Format::Json => {
                    serde_json::to_string_pretty(&fit.summary_json(&pair_set(c.m())))
                        .expect("fit serializes")
                        + "\n"
                }
                Format::Csv => matrix_to_csv(&fit.estimate),
                Format::Table => matrix_to_table(&fit.estimate),
            };
            write_out(&output, &text)
        }
        Command::Cv {
            seq,
            m,
            alphabet,
            method,
            grid,
            k,
            gamma,
            format,
            output,
        } => {
            let alphabet = alphabet_opt(&alphabet)?;
            let m = resolve_m(m, &alphabet)?;
            let s = read_sequence(&seq, m, alphabet.as_ref())?;
            let cv_method = match method {
                PenalizedMethod::Lasso => CvMethod::McLasso,
                PenalizedMethod::Alasso => CvMethod::McALasso,
            };
            let report = select_lambda(&s, &grid.resolve()?, k, cv_method, gamma)?;
            let text = match format {
                Format::Csv => report.to_csv(),
                _ => serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
            };
            write_out(&output, &text)
        }
        Command::Metrics {
            truth,
            estimate,
            fuse_tol,
            output,
        } => {
            let t = read_matrix(&truth, ValidityMode::Stochastic)?;
            let e = read_matrix(&estimate, ValidityMode::Stochastic)?;
            let truth_partition = extract_equality_classes(&t, 0.0)?;
            let est_partition = extract_equality_classes(&e, fuse_tol)?;
            let report = MetricsReport {
                purity: purity(&truth_partition, &est_partition)?,
                frobenius: frobenius_distance(&t, &e)?,
                selection_accuracy: selection_accuracy_partition(
                    &t,
                    &est_partition,
                    &pair_set(t.m()),
                )?,
            };
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            write_out(&output, &text)
        }
        Command::Study {
            truth,
            n_reps,
            n,
            seed,
            grid,
            k,
            methods,
            gamma,
            fixed_lambda,
            hist,
            hist_reps,
            out_dir,
        } => {
            let p = read_matrix(&truth, ValidityMode::StrictErgodic)?;
            let methods = methods
                .split(',')
                .map(|t| match t.trim() {
                    "mle" => Ok(StudyMethod::Mle),
                    "mclasso" => Ok(StudyMethod::McLasso),
                    "mcalasso" => Ok(StudyMethod::McALasso),
                    other => Err(Error::Parse(format!("unknown method '{other}'"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let config = StudyConfig {
                truth: p.clone(),
                n_reps,
                n,
                seed_base: seed,
                grid: grid.resolve()?,
                k,
                methods,
                gamma,
                lambda_rule: match fixed_lambda {
                    Some(l) => LambdaRule::Fixed(l),
                    None => LambdaRule::PerReplicateCv,
                },
            };
            let summary = run_study(&config)?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("summary.csv"), summary.summary_csv())?;
            std::fs::write(out_dir.join("raw.csv"), summary.raw_csv())?;
            if let Some(expr) = hist {
                let part = parse_null(&expr, p.m(), None)?;
                let fused: Vec<_> = part
                    .classes()
                    .iter()
                    .filter(|c| c.len() == 2)
                    .collect();
                if fused.len() != 1 {
                    return Err(Error::Parse(format!(
                        "--hist '{expr}' must name exactly one cell pair"
                    )));
                }
                let diffs =
                    difference_histogram(&p, fused[0][0], fused[0][1], n, hist_reps, seed)?;
                std::fs::write(out_dir.join("hist.csv"), hist_csv(&diffs))?;
            }
            if !summary.failures.is_empty() {
                eprintln!(
                    "warning: {} replicate fits failed (see raw.csv coverage)",
                    summary.failures.len()
                );
            }
            println!("wrote {}", out_dir.display());
            Ok(())
        }
    }
}

/// Parses argv and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status
            let is_help = e.use_stderr();
            let _ = e.print();
            return if is_help { 1 } else { 0 };
        }
    };
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e);
            e.exit_code()
        }
    }
}
