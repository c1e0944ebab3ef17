use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use pnmf::data::{load_matrix, save_matrix, MatrixFormat};
use pnmf::DenseMatrix;

/// Version stamped on every JSON document the CLI writes.
pub const SCHEMA_VERSION: u32 = 1;

/// How a successfully executed command ended.
pub enum Outcome {
    Success,
    /// The command ran but a check it gates on did not hold (exit code 1).
    Failed(String),
}

/// Bad flag values that clap cannot catch by itself; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "usage error: {}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

/// Parses `inf`/`infinity` as well as ordinary numbers.
pub fn parse_lambda(s: &str) -> Result<f64, String> {
    match s.to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "none" => Ok(f64::INFINITY),
        t => t.parse::<f64>().map_err(|e| e.to_string()),
    }
}

pub fn parse_format(s: &str) -> Result<MatrixFormat, String> {
    s.parse::<MatrixFormat>().map_err(|e| e.to_string())
}

/// Dataset description written next to generated matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub kind: String,
    pub n: usize,
    pub k: usize,
    pub p: usize,
    pub m: usize,
    /// `None` for noiseless data.
    pub noise_lambda: Option<f64>,
    pub seed: u64,
    pub format: String,
    pub files: ManifestFiles,
    pub smooth: pnmf::data::SmoothParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub w_true: String,
    pub h_true: String,
    pub y_clean: String,
    pub y_noisy: String,
}

pub const MANIFEST: &str = "manifest.json";

pub fn read_manifest(dir: &Path) -> anyhow::Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(manifest)
}

pub fn read_matrix(path: &Path) -> anyhow::Result<DenseMatrix> {
    if !path.is_file() {
        anyhow::bail!("input file {} does not exist", path.display());
    }
    load_matrix(path, MatrixFormat::from_path(path)).with_context(|| format!("loading {}", path.display()))
}

pub fn write_matrix(dir: &Path, stem: &str, m: &DenseMatrix, format: MatrixFormat) -> anyhow::Result<String> {
    let name = format!("{stem}.{}", format.extension());
    let path = dir.join(&name);
    save_matrix(&path, m, format).with_context(|| format!("writing {}", path.display()))?;
    Ok(name)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn create_dir(dir: &Path) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

/// JSON has no infinities; map non-finite values to `null`.
pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}
