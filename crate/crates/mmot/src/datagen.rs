//! Synthetic dataset generators and the portable on-disk dataset format.
//!
//! # Families
//!
//! * `uniform-cube`: i.i.d. points uniform on `[-d^{-1/2}, d^{-1/2}]^d`, so
//!   `E||x||^2 = 1/3` for every `d`.
//! * `isotropic-gaussian`: i.i.d. `N(0, diag(d^{-1}))` — per-coordinate
//!   standard deviation `d^{-1/2}`, so `E||x||^2 = 1`.
//! * `gmm`: per marginal, a 3-component Gaussian mixture. Component means are
//!   drawn uniform on `[-1,1]^{d/2}` and embedded into `R^d` by a seeded
//!   random matrix with orthonormal columns (modified Gram-Schmidt); samples
//!   add isotropic noise of standard deviation `sigma` (default 0.1) to a
//!   uniformly chosen component mean. Requires even `d`.
//!
//! Marginals draw from independent ChaCha8 streams derived from
//! `(seed, family label, marginal index)`, so datasets are reproducible
//! bitwise and marginals are independent.
//!
//! # On-disk format
//!
//! A dataset is a directory holding `manifest.json` plus one
//! `marginal_<i>.csv` per marginal (0-based `i`). Each CSV has `n` rows of
//! `d_i` comma-separated decimal floats, no header, written with shortest
//! round-trip formatting so loading reproduces the samples bitwise. The
//! manifest records `k`, `n`, `dims`, `family`, `seed`, a format version, and
//! the SHA-256 hash of every CSV; loading verifies hashes and shapes.

use crate::error::{MmotError, Result};
use crate::model::MarginalDataset;
use crate::numerics::Mat;
use crate::rng::derive_rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::Path;

/// Data family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    UniformCube,
    IsotropicGaussian,
    Gmm,
}

impl Family {
    /// Kebab-case name used in manifests and CLI flags.
    pub fn name(self) -> &'static str {
        match self {
            Family::UniformCube => "uniform-cube",
            Family::IsotropicGaussian => "isotropic-gaussian",
            Family::Gmm => "gmm",
        }
    }

    /// Parses the kebab-case name (also accepts the short aliases
    /// `uniform` and `gaussian`).
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform-cube" | "uniform" => Ok(Family::UniformCube),
            "isotropic-gaussian" | "gaussian" => Ok(Family::IsotropicGaussian),
            "gmm" => Ok(Family::Gmm),
            other => Err(MmotError::InvalidArgument(format!(
                "unknown family '{other}' (expected uniform-cube, isotropic-gaussian, or gmm)"
            ))),
        }
    }
}

/// Generation request.
#[derive(Debug, Clone)]
pub struct GenSpec {
    pub family: Family,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub seed: u64,
    /// Number of mixture components (gmm only).
    pub gmm_components: usize,
    /// Component noise standard deviation (gmm only).
    pub gmm_sigma: f64,
}

impl GenSpec {
    pub fn new(family: Family, n: usize, k: usize, d: usize, seed: u64) -> Self {
        GenSpec {
            family,
            n,
            k,
            d,
            seed,
            gmm_components: 3,
            gmm_sigma: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k < 2 || self.d == 0 {
            return Err(MmotError::InvalidArgument(format!(
                "need n >= 1, k >= 2, d >= 1; got n={}, k={}, d={}",
                self.n, self.k, self.d
            )));
        }
        if self.family == Family::Gmm {
            if !self.d.is_multiple_of(2) || self.d < 2 {
                return Err(MmotError::InvalidArgument(format!(
                    "gmm requires an even d >= 2 (means live in half the ambient dimension), got d={}",
                    self.d
                )));
            }
            if self.gmm_sigma <= 0.0 || self.gmm_components == 0 {
                return Err(MmotError::InvalidArgument(
                    "gmm needs sigma > 0 and at least one component".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Generates a dataset for the spec, dispatching on the family.
pub fn generate(spec: &GenSpec) -> Result<MarginalDataset> {
    spec.validate()?;
    match spec.family {
        Family::UniformCube => gen_uniform_cube(spec),
        Family::IsotropicGaussian => gen_isotropic_gaussian(spec),
        Family::Gmm => gen_gmm(spec),
    }
}

/// Uniform on the cube of half-width `d^{-1/2}`.
pub fn gen_uniform_cube(spec: &GenSpec) -> Result<MarginalDataset> {
    spec.validate()?;
    let h = 1.0 / (spec.d as f64).sqrt();
    let mut marginals = Vec::with_capacity(spec.k);
    for i in 0..spec.k {
        let mut rng = derive_rng(spec.seed, "uniform-cube-marginal", i as u64);
        let mut m = Mat::zeros(spec.n, spec.d);
        for v in m.as_mut_slice() {
            // random::<f64>() is uniform on [0,1); map onto [-h, h).
            *v = (rng.random::<f64>() * 2.0 - 1.0) * h;
        }
        marginals.push(m);
    }
    MarginalDataset::new(marginals)
}

/// Isotropic Gaussian with per-coordinate standard deviation `d^{-1/2}`.
pub fn gen_isotropic_gaussian(spec: &GenSpec) -> Result<MarginalDataset> {
    spec.validate()?;
    let std = 1.0 / (spec.d as f64).sqrt();
    let mut marginals = Vec::with_capacity(spec.k);
    for i in 0..spec.k {
        let mut rng = derive_rng(spec.seed, "isotropic-gaussian-marginal", i as u64);
        let mut m = Mat::zeros(spec.n, spec.d);
        for v in m.as_mut_slice() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * std;
        }
        marginals.push(m);
    }
    MarginalDataset::new(marginals)
}

/// Gaussian mixture per marginal (see module docs).
pub fn gen_gmm(spec: &GenSpec) -> Result<MarginalDataset> {
    spec.validate()?;
    let half = spec.d / 2;
    let mut marginals = Vec::with_capacity(spec.k);
    for i in 0..spec.k {
        let mut mean_rng = derive_rng(spec.seed, "gmm-means", i as u64);
        let means: Vec<Vec<f64>> = (0..spec.gmm_components)
            .map(|_| {
                (0..half)
                    .map(|_| mean_rng.random::<f64>() * 2.0 - 1.0)
                    .collect()
            })
            .collect();
        let mut frame_rng = derive_rng(spec.seed, "gmm-frame", i as u64);
        let frame = orthonormal_columns(spec.d, half, &mut frame_rng);
        // Embed: mean_emb = frame * mean (frame is d x half, column-major here).
        let embedded: Vec<Vec<f64>> = means
            .iter()
            .map(|m| {
                let mut out = vec![0.0; spec.d];
                for (c, &coef) in m.iter().enumerate() {
                    for r in 0..spec.d {
                        out[r] += frame[c][r] * coef;
                    }
                }
                out
            })
            .collect();
        let mut rng = derive_rng(spec.seed, "gmm-samples", i as u64);
        let mut m = Mat::zeros(spec.n, spec.d);
        for r in 0..spec.n {
            let comp = rng.random_range(0..spec.gmm_components);
            let row = m.row_mut(r);
            for (t, slot) in row.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *slot = embedded[comp][t] + spec.gmm_sigma * z;
            }
        }
        marginals.push(m);
    }
    MarginalDataset::new(marginals)
}

/// Draws a `d x cols` matrix with orthonormal columns: Gaussian columns
/// orthonormalized by modified Gram-Schmidt. Returned column-major.
fn orthonormal_columns(d: usize, cols: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    assert!(cols <= d);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for prev in &q {
            let dot: f64 = prev.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (slot, p) in v.iter_mut().zip(prev) {
                *slot -= dot * p;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for slot in &mut v {
                *slot /= norm;
            }
            q.push(v);
        }
        // A norm this small has probability ~0; redrawing keeps the stream
        // deterministic either way.
    }
    q
}

/// Manifest stored alongside the sample CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub family: String,
    pub seed: u64,
    pub k: usize,
    pub n: usize,
    pub dims: Vec<usize>,
    /// SHA-256 hex digest of each marginal CSV, index-aligned.
    pub sha256: Vec<String>,
}

/// Current on-disk format version.
pub const DATASET_FORMAT_VERSION: u32 = 1;

fn csv_bytes(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.rows() * m.cols() * 20);
    for r in 0..m.rows() {
        let row = m.row(r);
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                out.push(b',');
            }
            // `{}` on f64 prints the shortest representation that parses back
            // to the identical bits.
            out.extend_from_slice(format!("{v}").as_bytes());
        }
        out.push(b'\n');
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Per-marginal SHA-256 hex digests of the canonical CSV serialization.
/// Matches the hashes recorded by [`save_dataset`], so a fingerprint taken
/// from an in-memory dataset identifies its on-disk form too.
pub fn dataset_fingerprint(data: &MarginalDataset) -> Vec<String> {
    (0..data.k())
        .map(|i| sha256_hex(&csv_bytes(data.marginal(i))))
        .collect()
}

/// Writes `manifest.json` plus one CSV per marginal into `dir` (created if
/// missing). `family` and `seed` are recorded verbatim in the manifest.
pub fn save_dataset(
    data: &MarginalDataset,
    dir: &Path,
    family: &str,
    seed: u64,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut hashes = Vec::with_capacity(data.k());
    for i in 0..data.k() {
        let bytes = csv_bytes(data.marginal(i));
        hashes.push(sha256_hex(&bytes));
        let mut f = std::fs::File::create(dir.join(format!("marginal_{i}.csv")))?;
        f.write_all(&bytes)?;
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        family: family.to_string(),
        seed,
        k: data.k(),
        n: data.n(),
        dims: data.dims().to_vec(),
        sha256: hashes,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| MmotError::Format(format!("manifest serialization failed: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Loads a dataset directory, verifying manifest consistency, per-file
/// SHA-256 hashes, and sample-matrix invariants.
pub fn load_dataset(dir: &Path) -> Result<(MarginalDataset, DatasetManifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        MmotError::Format(format!(
            "cannot read manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| MmotError::Format(format!("malformed manifest.json: {e}")))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(MmotError::Format(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    if manifest.dims.len() != manifest.k || manifest.sha256.len() != manifest.k {
        return Err(MmotError::Format(format!(
            "manifest lists {} dims and {} hashes for k={}",
            manifest.dims.len(),
            manifest.sha256.len(),
            manifest.k
        )));
    }
    let mut marginals = Vec::with_capacity(manifest.k);
    for i in 0..manifest.k {
        let path = dir.join(format!("marginal_{i}.csv"));
        let bytes = std::fs::read(&path).map_err(|e| {
            MmotError::Format(format!("missing marginal file {}: {e}", path.display()))
        })?;
        let got = sha256_hex(&bytes);
        if got != manifest.sha256[i] {
            return Err(MmotError::CorruptData(format!(
                "marginal {i} hash mismatch: manifest {} vs file {got}",
                manifest.sha256[i]
            )));
        }
        let mut rows = Vec::with_capacity(manifest.n * manifest.dims[i]);
        let mut row_count = 0usize;
        for (lineno, line) in bytes.lines().enumerate() {
            let line = line.map_err(|e| {
                MmotError::Format(format!("marginal {i} row {lineno}: read failure: {e}"))
            })?;
            if line.is_empty() {
                continue;
            }
            let mut cols = 0usize;
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| {
                    MmotError::Format(format!(
                        "marginal {i} row {lineno}: unparsable float '{field}'"
                    ))
                })?;
                rows.push(v);
                cols += 1;
            }
            if cols != manifest.dims[i] {
                return Err(MmotError::Format(format!(
                    "marginal {i} row {lineno}: {cols} columns, manifest says {}",
                    manifest.dims[i]
                )));
            }
            row_count += 1;
        }
        if row_count != manifest.n {
            return Err(MmotError::Format(format!(
                "marginal {i}: {row_count} rows, manifest says {}",
                manifest.n
            )));
        }
        marginals.push(Mat::from_vec(manifest.n, manifest.dims[i], rows));
    }
    let data = MarginalDataset::new(marginals)?;
    Ok((data, manifest))
}
