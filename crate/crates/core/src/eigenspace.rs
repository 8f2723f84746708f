//! Speaker space: standardization, Gram-path SVD of the speaker matrix, projection and
//! coefficient sampling.
//!
//! The speaker matrix `A` (M x N, one column per base speaker) is never materialized. Its rows
//! are visited in chunks: the first pass computes per-row mean/std and accumulates the N x N Gram
//! matrix `AᵀA` of the standardized rows; the second pass forms the left singular vectors as
//! `U[:, j] = A v_j / σ_j`. Peak working memory is O(N² + chunk) besides the output basis.
//!
//! Normal draws for [`sample_coeff`] come from `ChaCha20Rng::seed_from_u64(seed)` through
//! `rand_distr::StandardNormal`, consumed in order (draw 0 component 0, draw 0 component 1, ...).

use std::fs::File;
use std::hash::Hasher;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use fnv::FnvHasher;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskvec::{read_vector, write_values, FlatVector, VectorSource};

pub const MATRIX_MAGIC: &[u8; 4] = b"EVM1";

pub const DEFAULT_RANK_TOL: f64 = 1e-10;
pub const DEFAULT_CHUNK_SIZE: usize = 1 << 20;
pub const DEFAULT_STD_FLOOR: f64 = 1e-12;

/// Relative eigenvalue level (per speaker) below which Gram eigenvalues are rounding noise.
///
/// Eigenvalues of `AᵀA` carry an absolute error of order `N ε λ₁`, so singular values below
/// roughly `sqrt(64 N ε) σ₁` cannot be resolved through the Gram route whatever `rank_tol` says.
const GRAM_NOISE_PER_SPEAKER: f64 = 64.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Keep singular values with `σ_j > σ_1 * rank_tol`.
    pub rank_tol: f64,
    /// Standardize rows (zero mean, unit population std) before factorizing.
    pub standardize: bool,
    /// Scalars per streaming block (summed over all speakers).
    pub chunk_size: usize,
    /// Rows whose std falls below this are only centered.
    pub std_floor: f64,
    /// Fixed-order pairwise reduction of per-chunk Gram partials.
    pub deterministic: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            rank_tol: DEFAULT_RANK_TOL,
            standardize: true,
            chunk_size: DEFAULT_CHUNK_SIZE,
            std_floor: DEFAULT_STD_FLOOR,
            deterministic: true,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<()> {
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rank_tol must lie in (0, 1), got {}",
                self.rank_tol
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::InvalidArgument("chunk_size must be positive".into()));
        }
        if self.std_floor.is_nan() || self.std_floor < 0.0 {
            return Err(Error::InvalidArgument(
                "std_floor must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Coordinates of one speaker in a speaker space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerCoeff {
    pub values: Vec<f64>,
    pub label: Option<String>,
}

impl SpeakerCoeff {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            label: None,
        }
    }

    pub fn labeled(values: Vec<f64>, label: impl Into<String>) -> Self {
        Self {
            values,
            label: Some(label.into()),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![0.0; dim])
    }

    pub fn save(&self, path: impl AsRef<Path>, fingerprint: u64) -> Result<()> {
        write_values(&self.values, fingerprint, path)
    }

    /// Loads a coefficient file; the label is taken from the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, u64)> {
        let path = path.as_ref();
        let v = read_vector(path)?;
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        Ok((
            Self {
                values: v.values,
                label,
            },
            v.fingerprint,
        ))
    }
}

/// Per-row statistics of the speaker matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RowStats {
    pub mean: Vec<f64>,
    /// Population std, with floored rows set to 1.0.
    pub std: Vec<f64>,
    /// Rows whose std was floored.
    pub flagged: Vec<usize>,
}

fn check_sources<V: VectorSource>(vectors: &[V]) -> Result<(usize, u64)> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 speaker vectors, got {}",
            vectors.len()
        )));
    }
    let dim = vectors[0].dim();
    let fp = vectors[0].fingerprint();
    for v in &vectors[1..] {
        if v.fingerprint() != fp {
            return Err(Error::FingerprintMismatch {
                expected: fp,
                found: v.fingerprint(),
            });
        }
        if v.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: v.dim(),
            });
        }
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("speaker vectors are empty".into()));
    }
    Ok((dim, fp))
}

/// Per-block results of the first pass: mean, std, flagged rows, Gram partial.
type BlockPass = (Vec<f64>, Vec<f64>, Vec<usize>, Vec<f64>);

fn chunk_ranges(dim: usize, n: usize, chunk_size: usize) -> Vec<(usize, usize)> {
    let rows = (chunk_size / n).max(1);
    (0..dim)
        .step_by(rows)
        .map(|s| (s, (s + rows).min(dim)))
        .collect()
}

/// Reads rows `start..end` of every speaker, speaker-major (`block[i * len + k]`).
fn read_block<V: VectorSource>(vectors: &[V], start: usize, end: usize) -> Result<Vec<f64>> {
    let len = end - start;
    let mut block = vec![0.0; len * vectors.len()];
    for (v, dst) in vectors.iter().zip(block.chunks_exact_mut(len)) {
        v.read_range(start, dst)?;
    }
    Ok(block)
}

fn check_block_finite(block: &[f64], len: usize, start: usize) -> Result<()> {
    if let Some(pos) = block.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            name: format!("speaker vector {}", pos / len),
            index: start + pos % len,
        });
    }
    Ok(())
}

/// Mean and population std of each row of a speaker-major block.
fn block_stats(block: &[f64], n: usize, std_floor: f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let len = block.len() / n;
    let mut mean = vec![0.0; len];
    let mut std = vec![0.0; len];
    let mut flagged = Vec::new();
    for k in 0..len {
        let m = (0..n).map(|i| block[i * len + k]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| {
                let d = block[i * len + k] - m;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let s = var.sqrt();
        mean[k] = m;
        if s < std_floor {
            std[k] = 1.0;
            flagged.push(k);
        } else {
            std[k] = s;
        }
    }
    (mean, std, flagged)
}

/// Per-row mean and population standard deviation across the N speaker vectors.
pub fn accumulate_stats<V: VectorSource>(vectors: &[V], options: &FitOptions) -> Result<RowStats> {
    options.validate()?;
    let (dim, _) = check_sources(vectors)?;
    let n = vectors.len();
    let parts = chunk_ranges(dim, n, options.chunk_size)
        .into_par_iter()
        .map(|(s, e)| {
            let block = read_block(vectors, s, e)?;
            check_block_finite(&block, e - s, s)?;
            let (m, sd, f) = block_stats(&block, n, options.std_floor);
            Ok((s, m, sd, f))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stats = RowStats {
        mean: Vec::with_capacity(dim),
        std: Vec::with_capacity(dim),
        flagged: Vec::new(),
    };
    for (s, m, sd, f) in parts {
        stats.mean.extend(m);
        stats.std.extend(sd);
        stats.flagged.extend(f.into_iter().map(|k| k + s));
    }
    Ok(stats)
}

/// `(a - mean) / std`, elementwise.
pub fn standardize(a: &FlatVector, mean: &[f64], std: &[f64]) -> Result<FlatVector> {
    for len in [mean.len(), std.len()] {
        if len != a.dim() {
            return Err(Error::DimMismatch {
                expected: a.dim(),
                found: len,
            });
        }
    }
    let values = a
        .values
        .iter()
        .zip(mean.iter().zip(std))
        .map(|(v, (m, s))| (v - m) / s)
        .collect();
    Ok(FlatVector::new(values, a.fingerprint))
}

/// Inverse of [`standardize`]: `z * std + mean`.
pub fn destandardize(z: &FlatVector, mean: &[f64], std: &[f64]) -> Result<FlatVector> {
    for len in [mean.len(), std.len()] {
        if len != z.dim() {
            return Err(Error::DimMismatch {
                expected: z.dim(),
                found: len,
            });
        }
    }
    let values = z
        .values
        .iter()
        .zip(mean.iter().zip(std))
        .map(|(v, (m, s))| v * s + m)
        .collect();
    Ok(FlatVector::new(values, z.fingerprint))
}

fn standardize_block(block: &mut [f64], n: usize, mean: &[f64], std: &[f64]) {
    let len = block.len() / n;
    for col in block.chunks_exact_mut(len) {
        for ((v, m), s) in col.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
}

/// Upper triangle of `BᵀB` for a speaker-major block, as a packed N x N row-major matrix.
fn block_gram(block: &[f64], n: usize) -> Vec<f64> {
    let len = block.len() / n;
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        let ci = &block[i * len..(i + 1) * len];
        for j in i..n {
            let cj = &block[j * len..(j + 1) * len];
            g[i * n + j] = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
        }
    }
    g
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// Pairwise (balanced tree) sum of equally sized partials in their given order.
fn tree_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                add_into(&mut a, &b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// A fitted speaker space.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerBasis {
    dim: usize,
    /// Left singular vectors, column-major M x r.
    u: Vec<f64>,
    sigma: Vec<f64>,
    /// All N Gram eigenvalues, descending (diagnostic).
    eigenvalues: Vec<f64>,
    coeffs: Vec<SpeakerCoeff>,
    mean: Vec<f64>,
    std: Vec<f64>,
    flagged: Vec<usize>,
    n_speakers: usize,
    schema_fingerprint: u64,
    standardized: bool,
    options: FitOptions,
}

/// Factorizes the (optionally standardized) speaker matrix whose columns are `vectors`.
///
/// Stored coefficients `w_i` are the columns of the rank-truncated `Vᵀ`, so that
/// `ã_i ≈ U Σ w_i` for every base speaker.
pub fn fit_basis<V: VectorSource>(
    vectors: &[V],
    labels: &[String],
    options: &FitOptions,
) -> Result<SpeakerBasis> {
    options.validate()?;
    let (dim, fingerprint) = check_sources(vectors)?;
    let n = vectors.len();
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} speaker vectors",
            labels.len()
        )));
    }
    let ranges = chunk_ranges(dim, n, options.chunk_size);

    // Pass 1: row statistics and Gram partials.
    let first_pass = |&(s, e): &(usize, usize)| -> Result<BlockPass> {
        let mut block = read_block(vectors, s, e)?;
        check_block_finite(&block, e - s, s)?;
        let (mean, std, flagged) = if options.standardize {
            let (m, sd, f) = block_stats(&block, n, options.std_floor);
            standardize_block(&mut block, n, &m, &sd);
            (m, sd, f)
        } else {
            (vec![0.0; e - s], vec![1.0; e - s], Vec::new())
        };
        Ok((
            mean,
            std,
            flagged.into_iter().map(|k| k + s).collect(),
            block_gram(&block, n),
        ))
    };
    let parts = ranges
        .par_iter()
        .map(first_pass)
        .collect::<Result<Vec<_>>>()?;

    let mut mean = Vec::with_capacity(dim);
    let mut std = Vec::with_capacity(dim);
    let mut flagged = Vec::new();
    let mut grams = Vec::with_capacity(parts.len());
    for (m, sd, f, g) in parts {
        mean.extend(m);
        std.extend(sd);
        flagged.extend(f);
        grams.push(g);
    }
    let gram_upper = if options.deterministic {
        tree_sum(grams)
    } else {
        grams.into_par_iter().reduce(
            || vec![0.0; n * n],
            |mut a, b| {
                add_into(&mut a, &b);
                a
            },
        )
    };

    let gram = DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        gram_upper[a * n + b]
    });
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();

    let lambda1 = eigenvalues[0];
    if !lambda1.is_finite() || lambda1 <= 0.0 {
        return Err(Error::Numeric(
            "speaker matrix is zero: no singular value above tolerance".into(),
        ));
    }
    let sigma1 = lambda1.sqrt();
    let noise = lambda1 * GRAM_NOISE_PER_SPEAKER * n as f64;
    let rank = eigenvalues
        .iter()
        .take_while(|&&l| l > noise && l.sqrt() > sigma1 * options.rank_tol)
        .count();

    let sigma: Vec<f64> = eigenvalues[..rank].iter().map(|l| l.sqrt()).collect();
    // V columns (N-vectors), sign-normalized so the largest-magnitude entry is positive.
    let vcols: Vec<Vec<f64>> = order[..rank]
        .iter()
        .map(|&k| {
            let mut col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot =
                col.iter().enumerate().fold(
                    0,
                    |best, (i, v)| if v.abs() > col[best].abs() { i } else { best },
                );
            if col[pivot] < 0.0 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
            col
        })
        .collect();

    // Pass 2: U = A V Σ⁻¹, chunk by chunk.
    let u_parts = ranges
        .par_iter()
        .map(|&(s, e)| -> Result<Vec<f64>> {
            let mut block = read_block(vectors, s, e)?;
            if options.standardize {
                standardize_block(&mut block, n, &mean[s..e], &std[s..e]);
            }
            let len = e - s;
            let mut out = vec![0.0; len * rank];
            for (j, v) in vcols.iter().enumerate() {
                let dst = &mut out[j * len..(j + 1) * len];
                for (i, &vij) in v.iter().enumerate() {
                    let col = &block[i * len..(i + 1) * len];
                    for (d, a) in dst.iter_mut().zip(col) {
                        *d += a * vij;
                    }
                }
                let inv = 1.0 / sigma[j];
                dst.iter_mut().for_each(|d| *d *= inv);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut u = vec![0.0; dim * rank];
    for (&(s, e), part) in ranges.iter().zip(&u_parts) {
        let len = e - s;
        for j in 0..rank {
            u[j * dim + s..j * dim + e].copy_from_slice(&part[j * len..(j + 1) * len]);
        }
    }
    drop(u_parts);

    let coeffs = labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            SpeakerCoeff::labeled(vcols.iter().map(|c| c[i]).collect(), label.clone())
        })
        .collect();

    Ok(SpeakerBasis {
        dim,
        u,
        sigma,
        eigenvalues,
        coeffs,
        mean,
        std,
        flagged,
        n_speakers: n,
        schema_fingerprint: fingerprint,
        standardized: options.standardize,
        options: *options,
    })
}

impl SpeakerBasis {
    /// Parameter-space dimension M.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn n_speakers(&self) -> usize {
        self.n_speakers
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn u_column(&self, j: usize) -> &[f64] {
        &self.u[j * self.dim..(j + 1) * self.dim]
    }

    pub fn coeffs(&self) -> &[SpeakerCoeff] {
        &self.coeffs
    }

    pub fn coeff(&self, label: &str) -> Option<&SpeakerCoeff> {
        self.coeffs
            .iter()
            .find(|c| c.label.as_deref() == Some(label))
    }

    pub fn labels(&self) -> Vec<String> {
        self.coeffs
            .iter()
            .map(|c| c.label.clone().unwrap_or_default())
            .collect()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn flagged(&self) -> &[usize] {
        &self.flagged
    }

    pub fn schema_fingerprint(&self) -> u64 {
        self.schema_fingerprint
    }

    pub fn standardized(&self) -> bool {
        self.standardized
    }

    pub fn options(&self) -> &FitOptions {
        &self.options
    }

    /// Stable identifier derived from the schema fingerprint and the spectrum.
    pub fn basis_id(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(&self.schema_fingerprint.to_le_bytes());
        h.write(&(self.n_speakers as u64).to_le_bytes());
        for s in &self.sigma {
            h.write(&s.to_le_bytes());
        }
        h.finish()
    }

    /// Largest entry of `|UᵀU - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rank();
        let mut worst = 0.0f64;
        for a in 0..r {
            for b in a..r {
                let dot: f64 = self
                    .u_column(a)
                    .iter()
                    .zip(self.u_column(b))
                    .map(|(x, y)| x * y)
                    .sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn check_coeff(&self, w: &SpeakerCoeff) -> Result<()> {
        if w.dim() != self.rank() {
            return Err(Error::DimMismatch {
                expected: self.rank(),
                found: w.dim(),
            });
        }
        Ok(())
    }

    /// Writes rows `start..start + out.len()` of `U Σ w` into `out`.
    pub fn reconstruct_range(&self, w: &SpeakerCoeff, start: usize, out: &mut [f64]) -> Result<()> {
        self.check_coeff(w)?;
        let end = start + out.len();
        if end > self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: end,
            });
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, (&s, &wj)) in self.sigma.iter().zip(&w.values).enumerate() {
            let scale = s * wj;
            for (o, u) in out.iter_mut().zip(&self.u_column(j)[start..end]) {
                *o += scale * u;
            }
        }
        Ok(())
    }

    pub fn standardize(&self, a: &FlatVector) -> Result<FlatVector> {
        self.check_vector(a)?;
        standardize(a, &self.mean, &self.std)
    }

    pub fn destandardize(&self, z: &FlatVector) -> Result<FlatVector> {
        self.check_vector(z)?;
        destandardize(z, &self.mean, &self.std)
    }

    fn check_vector(&self, a: &FlatVector) -> Result<()> {
        if a.fingerprint != self.schema_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.schema_fingerprint,
                found: a.fingerprint,
            });
        }
        if a.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: a.dim(),
            });
        }
        Ok(())
    }
}

/// `U Σ w` in standardized coordinates.
pub fn reconstruct(basis: &SpeakerBasis, w: &SpeakerCoeff) -> Result<FlatVector> {
    let mut values = vec![0.0; basis.dim];
    basis.reconstruct_range(w, 0, &mut values)?;
    Ok(FlatVector::new(values, basis.schema_fingerprint))
}

/// `Σ⁻¹ Uᵀ ã` for a vector already in the basis's standardized coordinates.
pub fn project(basis: &SpeakerBasis, a: &FlatVector) -> Result<SpeakerCoeff> {
    basis.check_vector(a)?;
    let values = (0..basis.rank())
        .map(|j| {
            let dot: f64 = basis
                .u_column(j)
                .iter()
                .zip(&a.values)
                .map(|(u, x)| u * x)
                .sum();
            dot / basis.sigma[j]
        })
        .collect();
    Ok(SpeakerCoeff::new(values))
}

/// `count` coefficient vectors with i.i.d. `Normal(0, 1/N)` components, N = base speaker count.
pub fn sample_coeff(seed: u64, basis: &SpeakerBasis, count: usize) -> Vec<SpeakerCoeff> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let scale = 1.0 / (basis.n_speakers as f64).sqrt();
    let width = count.saturating_sub(1).to_string().len().max(4);
    (0..count)
        .map(|i| {
            let values = (0..basis.rank())
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            SpeakerCoeff::labeled(values, format!("sample_{i:0width$}"))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct BasisMeta {
    format: String,
    dim: usize,
    n_speakers: usize,
    rank: usize,
    sigma: Vec<f64>,
    eigenvalues: Vec<f64>,
    labels: Vec<String>,
    schema_fingerprint: String,
    basis_id: String,
    standardized: bool,
    flagged: Vec<usize>,
    options: FitOptions,
    orthonormality_error: f64,
}

const BASIS_FORMAT: &str = "eigenmerge-basis/1";

impl SpeakerBasis {
    /// Persists the basis as a directory: `meta.json`, `coeffs.evv` (r x N, column per speaker),
    /// `mean.evv`, `std.evv` and `U.evm`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = BasisMeta {
            format: BASIS_FORMAT.into(),
            dim: self.dim,
            n_speakers: self.n_speakers,
            rank: self.rank(),
            sigma: self.sigma.clone(),
            eigenvalues: self.eigenvalues.clone(),
            labels: self.labels(),
            schema_fingerprint: format!("{:016x}", self.schema_fingerprint),
            basis_id: format!("{:016x}", self.basis_id()),
            standardized: self.standardized,
            flagged: self.flagged.clone(),
            options: self.options,
            orthonormality_error: self.orthonormality_error(),
        };
        let meta_path = dir.join("meta.json");
        let json = serde_json::to_string_pretty(&meta).expect("basis meta serializes");
        std::fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;

        let coeffs: Vec<f64> = self
            .coeffs
            .iter()
            .flat_map(|c| c.values.iter().copied())
            .collect();
        write_values(&coeffs, self.schema_fingerprint, dir.join("coeffs.evv"))?;
        write_values(&self.mean, self.schema_fingerprint, dir.join("mean.evv"))?;
        write_values(&self.std, self.schema_fingerprint, dir.join("std.evv"))?;
        write_matrix(dir.join("U.evm"), self.dim, self.rank(), &self.u)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: BasisMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("bad basis meta.json: {e}")))?;
        if meta.format != BASIS_FORMAT {
            return Err(Error::Format(format!(
                "unsupported basis format {:?}",
                meta.format
            )));
        }
        let fingerprint = u64::from_str_radix(&meta.schema_fingerprint, 16)
            .map_err(|e| Error::Format(format!("bad schema fingerprint: {e}")))?;
        let (r, n, m) = (meta.rank, meta.n_speakers, meta.dim);
        if meta.sigma.len() != r || meta.labels.len() != n {
            return Err(Error::Format("basis meta.json is inconsistent".into()));
        }

        let load = |name: &str, len: usize| -> Result<Vec<f64>> {
            let v = read_vector(dir.join(name))?;
            if v.fingerprint != fingerprint {
                return Err(Error::FingerprintMismatch {
                    expected: fingerprint,
                    found: v.fingerprint,
                });
            }
            if v.dim() != len {
                return Err(Error::DimMismatch {
                    expected: len,
                    found: v.dim(),
                });
            }
            Ok(v.values)
        };
        let coeff_values = load("coeffs.evv", r * n)?;
        let mean = load("mean.evv", m)?;
        let std = load("std.evv", m)?;
        let (um, ur, u) = read_matrix(dir.join("U.evm"))?;
        if um != m || ur != r {
            return Err(Error::Format(format!(
                "U.evm is {um} x {ur}, meta.json says {m} x {r}"
            )));
        }
        let coeffs = meta
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                SpeakerCoeff::labeled(coeff_values[i * r..(i + 1) * r].to_vec(), l.clone())
            })
            .collect();
        Ok(Self {
            dim: m,
            u,
            sigma: meta.sigma,
            eigenvalues: meta.eigenvalues,
            coeffs,
            mean,
            std,
            flagged: meta.flagged,
            n_speakers: n,
            schema_fingerprint: fingerprint,
            standardized: meta.standardized,
            options: meta.options,
        })
    }
}

/// EVM1: magic, u64 rows, u64 cols, column-major little-endian f64.
pub fn write_matrix(path: impl AsRef<Path>, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let path = path.as_ref();
    if data.len() != rows * cols {
        return Err(Error::DimMismatch {
            expected: rows * cols,
            found: data.len(),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(MATRIX_MAGIC).map_err(io)?;
    out.write_all(&(rows as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&(cols as u64).to_le_bytes()).map_err(io)?;
    for v in data {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != MATRIX_MAGIC {
        return Err(Error::Format(format!(
            "{}: not an EVM1 matrix",
            path.display()
        )));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if rows.checked_mul(cols).and_then(|c| c.checked_mul(8)) != Some(body.len()) {
        return Err(Error::Format(format!(
            "{}: EVM1 declares {rows} x {cols} but holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn vecs(cols: &[Vec<f64>]) -> Vec<FlatVector> {
        cols.iter().map(|c| FlatVector::new(c.clone(), 7)).collect()
    }

    fn raw() -> FitOptions {
        FitOptions {
            standardize: false,
            ..FitOptions::default()
        }
    }

    #[test]
    fn stats_examples() {
        let v = vecs(&[vec![1.0, 5.0], vec![3.0, 5.0]]);
        let st = accumulate_stats(&v, &FitOptions::default()).unwrap();
        assert_eq!(st.mean, vec![2.0, 5.0]);
        assert_eq!(st.std, vec![1.0, 1.0]);
        assert_eq!(st.flagged, vec![1]);

        let z0 = standardize(&v[0], &st.mean, &st.std).unwrap();
        let z1 = standardize(&v[1], &st.mean, &st.std).unwrap();
        assert_eq!(z0.values, vec![-1.0, 0.0]);
        assert_eq!(z1.values, vec![1.0, 0.0]);
    }

    #[test]
    fn stats_reject_bad_inputs() {
        let one = vecs(&[vec![1.0]]);
        assert!(accumulate_stats(&one, &FitOptions::default()).is_err());
        let mixed = vec![FlatVector::new(vec![1.0], 1), FlatVector::new(vec![2.0], 2)];
        assert!(matches!(
            accumulate_stats(&mixed, &FitOptions::default()),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn standardize_examples() {
        let a = FlatVector::new(vec![3.0], 0);
        assert_eq!(standardize(&a, &[2.0], &[1.0]).unwrap().values, vec![1.0]);
        assert_eq!(standardize(&a, &[3.0], &[2.0]).unwrap().values, vec![0.0]);
        let floored = FlatVector::new(vec![5.0], 0);
        assert_eq!(
            standardize(&floored, &[5.0], &[1.0]).unwrap().values,
            vec![0.0]
        );
        assert!(standardize(&a, &[1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn identity_matrix_factorizes_exactly() {
        let v = vecs(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = fit_basis(&v, &labels(2), &raw()).unwrap();
        assert_eq!(b.rank(), 2);
        for s in b.sigma() {
            assert!((s - 1.0).abs() < 1e-15);
        }
        for (i, c) in b.coeffs().iter().enumerate() {
            let rec = reconstruct(&b, c).unwrap();
            for (x, y) in rec.values.iter().zip(&v[i].values) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_matrix_is_a_numeric_error() {
        let v = vecs(&[vec![0.0; 3], vec![0.0; 3]]);
        assert!(matches!(
            fit_basis(&v, &labels(2), &raw()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn non_finite_input_rejected() {
        let v = vecs(&[vec![0.0, f64::NAN], vec![1.0, 1.0]]);
        assert!(matches!(
            fit_basis(&v, &labels(2), &raw()),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn bad_rank_tol_rejected() {
        let v = vecs(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        for tol in [0.0, 1.0, -1.0, f64::NAN] {
            let o = FitOptions {
                rank_tol: tol,
                ..raw()
            };
            assert!(fit_basis(&v, &labels(2), &o).is_err());
        }
    }

    #[test]
    fn reconstruct_basics() {
        let v = vecs(&[
            vec![3.0, 0.0, 1.0],
            vec![0.0, 2.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ]);
        let b = fit_basis(&v, &labels(3), &raw()).unwrap();
        let zero = reconstruct(&b, &SpeakerCoeff::zeros(b.rank())).unwrap();
        assert!(zero.values.iter().all(|&x| x == 0.0));
        let mut e1 = SpeakerCoeff::zeros(b.rank());
        e1.values[0] = 1.0;
        let r = reconstruct(&b, &e1).unwrap();
        for (x, u) in r.values.iter().zip(b.u_column(0)) {
            assert!((x - b.sigma()[0] * u).abs() < 1e-14);
        }
        assert!(reconstruct(&b, &SpeakerCoeff::zeros(b.rank() + 1)).is_err());
    }

    #[test]
    fn project_linearity_and_mismatch() {
        let v = vecs(&[
            vec![3.0, 0.0, 1.0, 2.0],
            vec![0.0, 2.0, 1.0, -1.0],
            vec![1.0, 1.0, 0.0, 0.5],
        ]);
        let b = fit_basis(&v, &labels(3), &raw()).unwrap();
        let w = project(&b, &v[1]).unwrap();
        let w2 = project(&b, &v[1].scaled(2.0)).unwrap();
        for ((a, b2), stored) in w.values.iter().zip(&w2.values).zip(&b.coeffs()[1].values) {
            assert!((a - stored).abs() < 1e-12);
            assert!((2.0 * a - b2).abs() < 1e-12);
        }
        let foreign = FlatVector::new(v[0].values.clone(), 99);
        assert!(matches!(
            project(&b, &foreign),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let v = vecs(&[
            vec![1.0, 0.0, 2.0],
            vec![0.0, 1.0, 1.0],
            vec![2.0, 2.0, 0.0],
        ]);
        let b = fit_basis(&v, &labels(3), &raw()).unwrap();
        assert_eq!(sample_coeff(42, &b, 5), sample_coeff(42, &b, 5));
        assert_ne!(sample_coeff(42, &b, 5), sample_coeff(43, &b, 5));
        assert!(sample_coeff(1, &b, 3).iter().all(|c| c.dim() == b.rank()));
    }

    #[test]
    fn chunking_does_not_change_result_much() {
        let cols: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                (0..37)
                    .map(|k| ((i * 37 + k) as f64 * 0.37).sin())
                    .collect()
            })
            .collect();
        let v = vecs(&cols);
        let big = fit_basis(&v, &labels(4), &FitOptions::default()).unwrap();
        let small = fit_basis(
            &v,
            &labels(4),
            &FitOptions {
                chunk_size: 9,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert_eq!(big.rank(), small.rank());
        for (a, b) in big.sigma().iter().zip(small.sigma()) {
            assert!((a - b).abs() <= 1e-12 * big.sigma()[0]);
        }
        let fast = fit_basis(
            &v,
            &labels(4),
            &FitOptions {
                chunk_size: 9,
                deterministic: false,
                ..FitOptions::default()
            },
        )
        .unwrap();
        for (a, b) in fast.sigma().iter().zip(small.sigma()) {
            assert!((a - b).abs() <= 1e-12 * big.sigma()[0]);
        }
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = vecs(&[
            vec![1.0, 0.0, 2.0, 5.0],
            vec![0.0, 1.0, 1.0, 5.0],
            vec![2.0, 2.0, 0.0, 5.0],
        ]);
        let b = fit_basis(&v, &labels(3), &FitOptions::default()).unwrap();
        assert_eq!(b.flagged(), &[3]);
        b.save(dir.path()).unwrap();
        let back = SpeakerBasis::load(dir.path()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.basis_id(), b.basis_id());
    }

    #[test]
    fn coeff_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sample_0003.evv");
        let w = SpeakerCoeff::new(vec![0.25, -1.5]);
        w.save(&p, 11).unwrap();
        let (back, fp) = SpeakerCoeff::load(&p).unwrap();
        assert_eq!(back.values, w.values);
        assert_eq!(back.label.as_deref(), Some("sample_0003"));
        assert_eq!(fp, 11);
    }
}
