use std::path::PathBuf;

use clap::Args;

use pnmf::data::{generate, DatasetConfig, DatasetKind, MatrixFormat};

use crate::common::{
    create_dir, finite, parse_format, parse_lambda, usage, write_json, write_matrix, Manifest, ManifestFiles, Outcome,
    MANIFEST, SCHEMA_VERSION,
};

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Dataset family: `uniform` or `smooth`.
    #[arg(long, default_value = "smooth")]
    pub kind: DatasetKind,
    /// Number of rows of Y (and of W).
    #[arg(long, default_value_t = 25)]
    pub n: usize,
    /// Rank.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Side of the square images held in the rows of H (m = p²).
    #[arg(long, default_value_t = 16)]
    pub p: usize,
    /// Poisson noise level λ (Y ~ Poisson(λ·WH)/λ); `inf` for noiseless data.
    #[arg(long, default_value = "inf", value_parser = parse_lambda)]
    pub noise_lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Matrix file format: `csv` or `f64` (raw little-endian with a shape header).
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    pub format: MatrixFormat,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &GenerateArgs) -> anyhow::Result<Outcome> {
    let cfg = DatasetConfig::new(args.kind, args.n, args.k, args.p)
        .with_noise(args.noise_lambda)
        .with_seed(args.seed);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = generate(&cfg)?;

    let dir = create_dir(&args.out)?;
    let files = ManifestFiles {
        w_true: write_matrix(&dir, "W_true", &data.w_true, args.format)?,
        h_true: write_matrix(&dir, "H_true", &data.h_true, args.format)?,
        y_clean: write_matrix(&dir, "Y_clean", &data.y_clean, args.format)?,
        y_noisy: write_matrix(&dir, "Y_noisy", &data.y_noisy, args.format)?,
    };
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        kind: format!("{:?}", args.kind).to_lowercase(),
        n: cfg.n,
        k: cfg.k,
        p: cfg.p,
        m: cfg.m(),
        noise_lambda: finite(cfg.noise_lambda),
        seed: cfg.seed,
        format: args.format.extension().to_string(),
        files,
        smooth: cfg.smooth,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    println!("wrote dataset ({}×{}, rank {}) to {}", cfg.n, cfg.m(), cfg.k, dir.display());
    Ok(Outcome::Success)
}
