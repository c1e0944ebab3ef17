use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use serde::Serialize;

use pnmf::data::MatrixFormat;
use pnmf::model::{log_barrier_sigma, ConstraintSide, GeneralizedSimplex, ProblemSpec, RegularizerSpec};
use pnmf::solver::LineSearch;
use pnmf::{kkt_residual, laplacian_2d, solve, Algorithm, DenseMatrix, SolveResult, SolverConfig, Termination};

use crate::common::{
    create_dir, finite, parse_format, read_manifest, read_matrix, usage, write_json, write_matrix, Outcome, MANIFEST,
    SCHEMA_VERSION,
};

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Data matrix file (`.csv` or `.f64`), or a directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Factorization rank; defaults to the manifest's rank for dataset directories.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value = "mu")]
    pub algo: Algorithm,
    /// Weight λ of the smoothness penalty (λ/2)·tr(H Δ Hᵀ) on the rows of H seen as p×p images.
    #[arg(long)]
    pub laplacian_weight: Option<f64>,
    /// Concave sparsity penalty Σ log(h + 1/α) on H.
    #[arg(long)]
    pub log_sparsity: Option<f64>,
    /// Barrier −Σ log(h − offset) on H; the offset defaults to 0.
    #[arg(long, num_args = 0..=1, default_missing_value = "0")]
    pub log_barrier: Option<f64>,
    /// Constrain every column of H to eᵀh = 1; `e` is read from the optional file
    /// (one weight per rank component), otherwise all ones.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    pub simplex_h: Option<String>,
    /// Line search on the Lipschitz constant: `upsilon,tau`.
    #[arg(long)]
    pub linesearch: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub rel_tol: f64,
    /// Entry floor ε.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub trace_every: usize,
    /// Solve the subproblems of a block in parallel.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    pub format: MatrixFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    schema_version: u32,
    algorithm: &'a str,
    data: String,
    shape: (usize, usize),
    rank: usize,
    termination: &'a Termination,
    iterations: usize,
    final_objective: Option<f64>,
    final_kl: Option<f64>,
    kkt_residual: Option<f64>,
    constraint_violation: Option<f64>,
    seconds: f64,
    dichotomy_iterations: usize,
    warnings: &'a [String],
    files: SummaryFiles,
}

#[derive(Debug, Serialize)]
struct SummaryFiles {
    w: String,
    h: String,
    trace_csv: String,
    trace_json: String,
}

/// Input matrix plus what the manifest (if any) knows about it.
struct Input {
    y: DenseMatrix,
    rank: Option<usize>,
    image_side: Option<usize>,
}

fn load_input(path: &Path) -> anyhow::Result<Input> {
    if path.is_dir() && path.join(MANIFEST).is_file() {
        let manifest = read_manifest(path)?;
        let y = read_matrix(&path.join(&manifest.files.y_noisy))?;
        Ok(Input {
            y,
            rank: Some(manifest.k),
            image_side: Some(manifest.p),
        })
    } else {
        Ok(Input {
            y: read_matrix(path)?,
            rank: None,
            image_side: None,
        })
    }
}

fn read_weights(path: &str) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading weights file {path}: {e}"))?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| anyhow::anyhow!("weights file {path}: {t:?}: {e}")))
        .collect()
}

fn parse_linesearch(s: &str) -> anyhow::Result<LineSearch> {
    let parts: Vec<&str> = s.split(',').collect();
    let [u, t] = parts.as_slice() else {
        return Err(usage(format!("--linesearch expects `upsilon,tau`, got {s:?}")));
    };
    let u: f64 = u.trim().parse().map_err(|_| usage(format!("bad upsilon {u:?}")))?;
    let t: f64 = t.trim().parse().map_err(|_| usage(format!("bad tau {t:?}")))?;
    LineSearch::new(u, t).map_err(|e| usage(e.to_string()))
}

fn build_spec(args: &SolveArgs, input: &Input, rank: usize) -> anyhow::Result<ProblemSpec> {
    let m = input.y.cols();
    let mut reg = RegularizerSpec::none();
    if let Some(weight) = args.laplacian_weight {
        let side = match input.image_side {
            Some(p) => p,
            None => {
                let p = (m as f64).sqrt().round() as usize;
                if p * p != m {
                    return Err(usage(format!(
                        "--laplacian-weight needs square images but Y has {m} columns"
                    )));
                }
                p
            }
        };
        let lap = RegularizerSpec::laplacian_smoothness(weight, laplacian_2d(side)?).map_err(|e| usage(e.to_string()))?;
        reg = reg.merge(lap)?;
    }
    let mut builder = ProblemSpec::builder(input.y.clone(), rank);
    if let Some(eps) = args.epsilon {
        builder = builder.epsilon(eps);
    }
    let eps = args.epsilon.unwrap_or(pnmf::model::DEFAULT_EPSILON);
    if let Some(offset) = args.log_barrier {
        let sigma = log_barrier_sigma(offset, eps).map_err(|e| usage(e.to_string()))?;
        reg = reg.merge(RegularizerSpec::log_barrier(offset, sigma).map_err(|e| usage(e.to_string()))?)?;
    }
    if let Some(alpha) = args.log_sparsity {
        reg = reg.merge(RegularizerSpec::log_sparsity(alpha).map_err(|e| usage(e.to_string()))?)?;
    }
    if let Some(file) = &args.simplex_h {
        let weights = if file.is_empty() {
            vec![1.0; rank]
        } else {
            read_weights(file)?
        };
        let c = GeneralizedSimplex::new(weights, ConstraintSide::HColumns).map_err(|e| usage(e.to_string()))?;
        builder = builder.constraint(c);
    }
    builder.reg_h(reg).build().map_err(|e| usage(e.to_string()))
}

pub fn run(args: &SolveArgs) -> anyhow::Result<Outcome> {
    // everything that can fail on bad input happens before the output directory exists
    let input = load_input(&args.data)?;
    let rank = args
        .rank
        .or(input.rank)
        .ok_or_else(|| usage("--rank is required when --data is a matrix file"))?;
    let spec = build_spec(args, &input, rank)?;
    let config = SolverConfig {
        algorithm: args.algo,
        max_iter: args.max_iter,
        rel_tol: args.rel_tol,
        linesearch: args.linesearch.as_deref().map(parse_linesearch).transpose()?,
        seed: args.seed,
        trace_every: args.trace_every,
        parallel: args.parallel,
        ..SolverConfig::default()
    };
    config.validate().map_err(|e| usage(e.to_string()))?;

    let t0 = Instant::now();
    let result = solve(&spec, &config)?;
    let seconds = t0.elapsed().as_secs_f64();
    write_outputs(args, &spec, &result, seconds)?;

    let last = result.trace.last();
    println!(
        "{}: {:?} after {} iterations, objective {:.10e}",
        args.algo.name(),
        result.termination,
        result.termination.iterations(),
        last.map_or(f64::NAN, |r| r.objective)
    );
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    Ok(match &result.termination {
        Termination::Failed { reason, .. } => Outcome::Failed(format!("solver failed: {reason}")),
        _ => Outcome::Success,
    })
}

fn write_outputs(args: &SolveArgs, spec: &ProblemSpec, result: &SolveResult, seconds: f64) -> anyhow::Result<()> {
    let dir = create_dir(&args.out)?;
    let mut warnings = result.warnings.clone();
    let kkt = match kkt_residual(&result.w, &result.h, spec) {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("KKT residual unavailable: {e}"));
            None
        }
    };
    let trace_csv = "trace.csv".to_string();
    let trace_json = "trace.json".to_string();
    result.trace.write_csv(&dir.join(&trace_csv))?;
    std::fs::write(dir.join(&trace_json), result.trace.to_json())?;
    let files = SummaryFiles {
        w: write_matrix(&dir, "W", &result.w, args.format)?,
        h: write_matrix(&dir, "H", &result.h, args.format)?,
        trace_csv,
        trace_json,
    };
    let last = result.trace.last();
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        algorithm: args.algo.name(),
        data: args.data.display().to_string(),
        shape: spec.y().shape(),
        rank: spec.rank(),
        termination: &result.termination,
        iterations: result.termination.iterations(),
        final_objective: result.trace.final_objective().and_then(finite),
        final_kl: last.and_then(|r| finite(r.kl_part)),
        kkt_residual: kkt,
        constraint_violation: last.map(|r| r.constraint_violation),
        seconds,
        dichotomy_iterations: result.trace.dichotomy_iterations,
        warnings: &warnings,
        files,
    };
    write_json(&dir.join("summary.json"), &summary)
}
