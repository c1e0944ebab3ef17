//! Synthetic datasets, Poisson noise and matrix files.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// iid uniform factors.
    Uniform,
    /// Gaussian-bump spectra in W, blurred random images in the rows of H.
    Smooth,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(DatasetKind::Uniform),
            "smooth" => Ok(DatasetKind::Smooth),
            other => Err(Error::InvalidSpec(format!("unknown dataset kind '{other}'"))),
        }
    }
}

/// Knobs of the smooth generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothParams {
    pub gaussians: usize,
    /// Widths are drawn uniformly in `[n·lo, n·hi]`.
    pub width_fraction: (f64, f64),
    pub floor: f64,
    pub blur_passes: usize,
}

impl Default for SmoothParams {
    fn default() -> Self {
        Self {
            gaussians: 5,
            width_fraction: (1.0 / 20.0, 1.0 / 5.0),
            floor: 1e-3,
            blur_passes: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Rows of W (spectral length).
    pub n: usize,
    pub k: usize,
    /// Image side; H has `p²` columns.
    pub p: usize,
    /// Poisson scale; `f64::INFINITY` means noiseless.
    pub noise_lambda: f64,
    pub seed: u64,
    #[serde(default)]
    pub smooth: SmoothParams,
}

impl DatasetConfig {
    pub fn new(kind: DatasetKind, n: usize, k: usize, p: usize) -> Self {
        Self {
            kind,
            n,
            k,
            p,
            noise_lambda: f64::INFINITY,
            seed: 0,
            smooth: SmoothParams::default(),
        }
    }

    pub fn with_noise(mut self, lambda: f64) -> Self {
        self.noise_lambda = lambda;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidDimension("k must be ≥ 1".into()));
        }
        if self.p < 2 {
            return Err(Error::InvalidDimension(format!("p must be ≥ 2, got {}", self.p)));
        }
        if self.n < self.k {
            return Err(Error::InvalidDimension(format!("n = {} must be ≥ k = {}", self.n, self.k)));
        }
        if !(self.noise_lambda > 0.0) {
            return Err(Error::InvalidSpec(format!("noise λ must be > 0, got {}", self.noise_lambda)));
        }
        let s = &self.smooth;
        if s.gaussians == 0 || !(s.width_fraction.0 > 0.0 && s.width_fraction.0 <= s.width_fraction.1) || !(s.floor >= 0.0) {
            return Err(Error::InvalidSpec("invalid smooth-generator parameters".into()));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.p * self.p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub w_true: DenseMatrix,
    pub h_true: DenseMatrix,
    pub y_clean: DenseMatrix,
    pub y_noisy: DenseMatrix,
}

/// Independent generator streams derived from one seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_W: u64 = 1;
const STREAM_H: u64 = 2;

/// Uniform on `(0, 1]`.
fn unit_open_below(rng: &mut impl Rng) -> f64 {
    1.0 - rng.random::<f64>()
}

fn normalize_columns(h: &mut DenseMatrix) {
    let sums = h.column_sums();
    for r in 0..h.rows() {
        h.row_mut(r).iter_mut().zip(&sums).for_each(|(v, s)| *v /= s);
    }
}

fn finish(cfg: &DatasetConfig, w: DenseMatrix, h: DenseMatrix) -> Result<Dataset> {
    let y_clean = w.matmul(&h)?;
    let y_noisy = poisson_noise(&y_clean, cfg.noise_lambda, cfg.seed)?;
    Ok(Dataset {
        w_true: w,
        h_true: h,
        y_clean,
        y_noisy,
    })
}

pub fn gen_uniform(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rw = stream(cfg.seed, STREAM_W);
    let w = DenseMatrix::from_fn(cfg.n, cfg.k, |_, _| unit_open_below(&mut rw));
    let mut rh = stream(cfg.seed, STREAM_H);
    let mut h = DenseMatrix::from_fn(cfg.k, cfg.m(), |_, _| unit_open_below(&mut rh));
    normalize_columns(&mut h);
    finish(cfg, w, h)
}

/// One pass of a 3×3 mean filter; border pixels average their in-bounds neighbours.
fn box_blur(img: &[f64], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for r in 0..p {
        for c in 0..p {
            let (mut s, mut cnt) = (0.0, 0.0);
            for rr in r.saturating_sub(1)..=(r + 1).min(p - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(p - 1) {
                    s += img[rr * p + cc];
                    cnt += 1.0;
                }
            }
            out[r * p + c] = s / cnt;
        }
    }
    out
}

pub fn gen_smooth(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let sp = cfg.smooth;
    let n = cfg.n;
    let mut rw = stream(cfg.seed, STREAM_W);
    let mut w = DenseMatrix::zeros(n, cfg.k);
    let (lo, hi) = (sp.width_fraction.0 * n as f64, sp.width_fraction.1 * n as f64);
    for c in 0..cfg.k {
        let bumps: Vec<(f64, f64, f64)> = (0..sp.gaussians)
            .map(|_| {
                let center = rng_range(&mut rw, 0.0, n as f64);
                let width = rng_range(&mut rw, lo, hi);
                let amp = unit_open_below(&mut rw);
                (center, width, amp)
            })
            .collect();
        for i in 0..n {
            let x = i as f64;
            let v: f64 = bumps
                .iter()
                .map(|&(mu, s, a)| a * (-(x - mu).powi(2) / (2.0 * s * s)).exp())
                .sum();
            w.set(i, c, v + sp.floor);
        }
    }
    let mut rh = stream(cfg.seed, STREAM_H);
    let mut h = DenseMatrix::zeros(cfg.k, cfg.m());
    for r in 0..cfg.k {
        let mut img: Vec<f64> = (0..cfg.m()).map(|_| unit_open_below(&mut rh)).collect();
        for _ in 0..sp.blur_passes {
            img = box_blur(&img, cfg.p);
        }
        h.row_mut(r).copy_from_slice(&img);
    }
    normalize_columns(&mut h);
    finish(cfg, w, h)
}

fn rng_range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    match cfg.kind {
        DatasetKind::Uniform => gen_uniform(cfg),
        DatasetKind::Smooth => gen_smooth(cfg),
    }
}

/// Stream id space for noise draws, disjoint from the factor streams.
const NOISE_STREAM_BASE: u64 = 1 << 32;

/// `Poisson(λ y)/λ` per cell, each cell with its own derived stream; `λ = ∞` passes through.
pub fn poisson_noise(y: &DenseMatrix, lambda: f64, seed: u64) -> Result<DenseMatrix> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("noise λ must be > 0, got {lambda}")));
    }
    if let Some(pos) = y.values().iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::Domain(format!("entry {pos} = {} is negative", y.values()[pos])));
    }
    if lambda.is_infinite() {
        return Ok(y.clone());
    }
    let values: Result<Vec<f64>> = y
        .values()
        .par_iter()
        .enumerate()
        .map(|(idx, &v)| {
            let mean = lambda * v;
            if mean == 0.0 {
                return Ok(0.0);
            }
            let dist = Poisson::new(mean).map_err(|e| Error::Domain(format!("Poisson mean {mean}: {e}")))?;
            let mut rng = stream(seed, NOISE_STREAM_BASE + idx as u64);
            Ok(dist.sample(&mut rng) / lambda)
        })
        .collect();
    DenseMatrix::from_vec(y.rows(), y.cols(), values?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Csv,
    Raw64,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Raw64 => "f64",
        }
    }

    /// Guesses the format from a file extension (`.csv` → csv, anything else → raw64).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Raw64,
        }
    }
}

impl std::str::FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MatrixFormat::Csv),
            "raw64" | "f64" => Ok(MatrixFormat::Raw64),
            other => Err(Error::InvalidSpec(format!("unknown matrix format '{other}'"))),
        }
    }
}

pub fn matrix_to_csv(m: &DenseMatrix) -> String {
    let mut s = format!("{},{}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn matrix_from_csv(text: &str) -> Result<DenseMatrix> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        location: format!("line {line}"),
        reason,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let dims: Vec<&str> = header.split(',').collect();
    let dim = |s: &str| s.trim().parse::<usize>().map_err(|_| parse_err(1, format!("bad dimension '{s}'")));
    let (rows, cols) = match dims.as_slice() {
        [r, c] => (dim(r)?, dim(c)?),
        _ => return Err(parse_err(1, format!("header must be 'rows,cols', got '{header}'"))),
    };
    let mut values = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        seen += 1;
        if seen > rows {
            return Err(parse_err(ln, format!("more than {rows} data rows")));
        }
        let before = values.len();
        for tok in line.split(',') {
            let v: f64 = tok.trim().parse().map_err(|_| parse_err(ln, format!("bad value '{tok}'")))?;
            if !v.is_finite() {
                return Err(parse_err(ln, format!("non-finite value '{tok}'")));
            }
            values.push(v);
        }
        if values.len() - before != cols {
            return Err(parse_err(ln, format!("expected {cols} values, found {}", values.len() - before)));
        }
    }
    if seen != rows {
        return Err(parse_err(seen + 2, format!("expected {rows} data rows, found {seen}")));
    }
    DenseMatrix::from_vec(rows, cols, values)
}

pub fn matrix_to_raw64(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * m.values().len());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn matrix_from_raw64(bytes: &[u8]) -> Result<DenseMatrix> {
    let parse_err = |offset: usize, reason: String| Error::Parse {
        location: format!("byte offset {offset}"),
        reason,
    };
    if bytes.len() < 16 {
        return Err(parse_err(bytes.len(), "truncated 16-byte header".into()));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let count = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| parse_err(0, format!("dimensions {rows}x{cols} overflow")))?;
    let body = &bytes[16..];
    if body.len() != count {
        return Err(parse_err(
            16 + body.len().min(count),
            format!("expected {count} payload bytes for {rows}x{cols}, found {}", body.len()),
        ));
    }
    let mut values = Vec::with_capacity(count / 8);
    for (i, chunk) in body.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(parse_err(16 + 8 * i, format!("non-finite value {v}")));
        }
        values.push(v);
    }
    DenseMatrix::from_vec(rows as usize, cols as usize, values)
}

pub fn save_matrix(path: &Path, m: &DenseMatrix, format: MatrixFormat) -> Result<()> {
    let bytes = match format {
        MatrixFormat::Csv => matrix_to_csv(m).into_bytes(),
        MatrixFormat::Raw64 => matrix_to_raw64(m),
    };
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_matrix(path: &Path, format: MatrixFormat) -> Result<DenseMatrix> {
    let bytes = fs::read(path)?;
    match format {
        MatrixFormat::Csv => {
            let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
                location: format!("byte offset {}", e.utf8_error().valid_up_to()),
                reason: "not UTF-8".into(),
            })?;
            matrix_from_csv(&text)
        }
        MatrixFormat::Raw64 => matrix_from_raw64(&bytes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest};

    fn cfg(kind: DatasetKind) -> DatasetConfig {
        DatasetConfig::new(kind, 25, 3, 16).with_seed(7)
    }

    #[test]
    fn uniform_shapes_and_normalization() {
        let d = gen_uniform(&cfg(DatasetKind::Uniform)).unwrap();
        assert_eq!(d.w_true.shape(), (25, 3));
        assert_eq!(d.h_true.shape(), (3, 256));
        for s in d.h_true.column_sums() {
            assert!((s - 1.0).abs() <= 1e-12);
        }
        assert!(d.w_true.min() > 0.0 && d.w_true.max() <= 1.0);
        assert_eq!(d.y_clean, d.w_true.matmul(&d.h_true).unwrap());
        assert_eq!(d.y_noisy, d.y_clean);
        assert_eq!(d, gen_uniform(&cfg(DatasetKind::Uniform)).unwrap());
    }

    fn total_variation(img: &[f64], p: usize) -> f64 {
        let mut tv = 0.0;
        for r in 0..p {
            for c in 0..p {
                if c + 1 < p {
                    tv += (img[r * p + c + 1] - img[r * p + c]).abs();
                }
                if r + 1 < p {
                    tv += (img[(r + 1) * p + c] - img[r * p + c]).abs();
                }
            }
        }
        tv
    }

    #[test]
    fn smooth_rows_have_less_variation_than_noise() {
        let c = cfg(DatasetKind::Smooth);
        let d = gen_smooth(&c).unwrap();
        assert!(d.w_true.min() >= c.smooth.floor);
        for s in d.h_true.column_sums() {
            assert!((s - 1.0).abs() <= 1e-12);
        }
        // the same noise the generator starts from, before blurring
        let mut rh = stream(c.seed, STREAM_H);
        let (mut tv_noise, mut tv_smooth) = (0.0, 0.0);
        for _ in 0..c.k {
            let noise: Vec<f64> = (0..c.m()).map(|_| unit_open_below(&mut rh)).collect();
            let blurred = (0..c.smooth.blur_passes).fold(noise.clone(), |img, _| box_blur(&img, c.p));
            tv_noise += total_variation(&noise, c.p);
            tv_smooth += total_variation(&blurred, c.p);
        }
        assert!(tv_smooth < tv_noise);
    }

    #[test]
    fn config_validation() {
        assert!(DatasetConfig::new(DatasetKind::Uniform, 25, 3, 1).validate().is_err());
        assert!(DatasetConfig::new(DatasetKind::Uniform, 2, 3, 4).validate().is_err());
        assert!(DatasetConfig::new(DatasetKind::Uniform, 5, 0, 4).validate().is_err());
        assert!(DatasetConfig::new(DatasetKind::Uniform, 5, 3, 4).with_noise(0.0).validate().is_err());
    }

    #[test]
    fn poisson_zero_and_passthrough() {
        let y = DenseMatrix::from_vec(1, 3, vec![0.0, 1.5, 2.0]).unwrap();
        let n = poisson_noise(&y, 10.0, 1).unwrap();
        assert_eq!(n.get(0, 0), 0.0);
        assert!(n.values().iter().all(|v| (v * 10.0).fract() == 0.0));
        assert_eq!(poisson_noise(&y, f64::INFINITY, 1).unwrap(), y);
        let neg = DenseMatrix::from_vec(1, 1, vec![-1.0]).unwrap();
        assert!(matches!(poisson_noise(&neg, 1.0, 0), Err(Error::Domain(_))));
        assert_eq!(poisson_noise(&y, 10.0, 1).unwrap(), n);
    }

    #[test]
    fn poisson_moments_match_theory() {
        // one cell with λY = 50 replicated 10⁵ times: mean Y, variance Y/λ
        let lambda = 10.0;
        let y0 = 5.0;
        let reps = 100_000;
        let y = DenseMatrix::filled(1, reps, y0);
        let s = poisson_noise(&y, lambda, 2024).unwrap();
        let mean = s.sum() / reps as f64;
        let var = s.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((mean - y0).abs() <= 3.0 * (y0 / lambda).sqrt() / (reps as f64).sqrt());
        assert!((var / (y0 / lambda) - 1.0).abs() <= 0.05);
    }

    #[test]
    fn csv_layout() {
        let m = DenseMatrix::from_vec(1, 1, vec![2.5]).unwrap();
        let s = matrix_to_csv(&m);
        assert!(s.starts_with("1,1\n2.5"));
        assert_eq!(matrix_from_csv(&s).unwrap(), m);
    }

    #[test]
    fn malformed_inputs_report_locations() {
        let err = matrix_from_csv("2,2\n1,2\n3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { ref location, .. } if location == "line 3"), "{err:?}");
        assert!(matrix_from_csv("two,2\n").is_err());
        assert!(matrix_from_csv("1,1\nNaN\n").is_err());
        assert!(matrix_from_csv("2,1\n1\n").is_err());

        let bytes = matrix_to_raw64(&DenseMatrix::filled(2, 2, 1.0));
        assert!(matches!(matrix_from_raw64(&bytes[..20]), Err(Error::Parse { .. })));
        assert!(matches!(matrix_from_raw64(&bytes[..5]), Err(Error::Parse { .. })));
        let mut nan = bytes.clone();
        nan[16..24].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(matrix_from_raw64(&nan), Err(Error::Parse { ref location, .. }) if location == "byte offset 16"));
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = DenseMatrix::from_fn(3, 4, |i, j| (i as f64 + 0.1).powf(j as f64 + 0.3) / 7.0);
        for f in [MatrixFormat::Csv, MatrixFormat::Raw64] {
            let path = dir.path().join(format!("m.{}", f.extension()));
            save_matrix(&path, &m, f).unwrap();
            assert_eq!(MatrixFormat::from_path(&path), f);
            assert_eq!(load_matrix(&path, f).unwrap(), m);
        }
        assert!(load_matrix(&dir.path().join("missing.csv"), MatrixFormat::Csv).is_err());
    }

    proptest! {
        #[test]
        fn raw64_round_trip_is_bit_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1e300..1e300));
            let back = matrix_from_raw64(&matrix_to_raw64(&m)).unwrap();
            prop_assert!(back.values().iter().zip(m.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn csv_round_trip_is_exact(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = DenseMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 10f64.powi(rng.random_range(-30..30)));
            prop_assert_eq!(matrix_from_csv(&matrix_to_csv(&m)).unwrap(), m);
        }

        #[test]
        fn generated_datasets_satisfy_invariants(n in 3usize..30, k in 1usize..4, p in 2usize..6, seed in any::<u64>(), smooth in any::<bool>()) {
            prop_assume!(n >= k);
            let kind = if smooth { DatasetKind::Smooth } else { DatasetKind::Uniform };
            let d = generate(&DatasetConfig::new(kind, n, k, p).with_noise(20.0).with_seed(seed)).unwrap();
            prop_assert_eq!(&d.y_clean, &d.w_true.matmul(&d.h_true).unwrap());
            prop_assert!(d.y_noisy.min() >= 0.0);
            for s in d.h_true.column_sums() {
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }
}
