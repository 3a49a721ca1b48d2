//! Modality-gap mitigation.
//!
//! * `memory`: at inference, a visual embedding is replaced by a
//!   softmax-weighted combination of text embeddings stored in a
//!   [`MemoryBank`].
//! * `noise`: at training time, text embeddings are perturbed with isotropic
//!   Gaussian noise ([`NoiseGenerator`]).
//! * `none`: [`passthrough`].

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::{Backbone, BackboneError};
use crate::types::neumaier_sum;

pub const MEMORY_MAGIC: &[u8; 8] = b"PIONMEM1";

/// Column unit-norm tolerance.
const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GapError {
    #[error("cannot project the zero vector")]
    ZeroVector,
    #[error("dimension mismatch: vector has {actual}, bank expects {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("invalid memory bank: {0}")]
    Invalid(String),
    #[error("memory archive format error: {0}")]
    Format(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMode {
    Memory,
    Noise,
    None,
}

impl FromStr for GapMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "memory" => Ok(GapMode::Memory),
            "noise" => Ok(GapMode::Noise),
            "none" => Ok(GapMode::None),
            other => Err(format!("unknown gap mode `{other}` (expected memory, noise or none)")),
        }
    }
}

impl fmt::Display for GapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GapMode::Memory => "memory",
            GapMode::Noise => "noise",
            GapMode::None => "none",
        })
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    neumaier_sum(v.iter().map(|x| x * x)).sqrt()
}

/// Returns `v / ‖v‖`, or `None` for the zero vector.
pub fn l2_normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Text memory `M = [m_1 … m_N]` of unit-norm embeddings with temperature τ.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: Vec<String>,
    dim: usize,
    /// Column-major `D × N`: column `j` is `columns[j*D..(j+1)*D]`.
    columns: Vec<f64>,
    tau: f64,
}

impl MemoryBank {
    pub fn from_columns(entries: Vec<String>, dim: usize, columns: Vec<f64>, tau: f64) -> Result<Self, GapError> {
        if entries.is_empty() {
            return Err(GapError::Invalid("memory bank needs at least one entry".into()));
        }
        if dim == 0 || columns.len() != entries.len() * dim {
            return Err(GapError::Invalid(format!(
                "{} values cannot form {} columns of dimension {dim}",
                columns.len(),
                entries.len()
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(GapError::Invalid(format!("temperature must be positive, got {tau}")));
        }
        for (j, col) in columns.chunks_exact(dim).enumerate() {
            let n = l2_norm(col);
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(GapError::Invalid(format!("column {j} has norm {n}")));
            }
        }
        Ok(Self { entries, dim, columns, tau })
    }

    /// Embeds and L2-normalizes every text, keeping corpus order and duplicates.
    pub fn build<S: AsRef<str>>(corpus: &[S], adapter: &dyn Backbone, tau: f64) -> Result<Self, GapError> {
        if corpus.is_empty() {
            return Err(GapError::Invalid("memory corpus is empty".into()));
        }
        let dim = adapter.info().embedding_dim;
        let mut columns = Vec::with_capacity(corpus.len() * dim);
        for text in corpus {
            let e = adapter.encode_text(text.as_ref())?;
            let unit = l2_normalize(&e)
                .ok_or_else(|| GapError::Invalid(format!("zero text embedding for {:?}", text.as_ref())))?;
            columns.extend(unit);
        }
        let entries = corpus.iter().map(|s| s.as_ref().to_string()).collect();
        Self::from_columns(entries, dim, columns, tau)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j * self.dim..(j + 1) * self.dim]
    }

    /// Returns a copy with a different temperature.
    pub fn with_tau(&self, tau: f64) -> Result<Self, GapError> {
        Self::from_columns(self.entries.clone(), self.dim, self.columns.clone(), tau)
    }

    /// `α = softmax(Mᵀ v̂ / τ)` with `v̂ = v / ‖v‖`.
    pub fn weights(&self, v: &[f64]) -> Result<Vec<f64>, GapError> {
        if v.len() != self.dim {
            return Err(GapError::Dimension { expected: self.dim, actual: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(GapError::Invalid("query has non-finite entries".into()));
        }
        let unit = l2_normalize(v).ok_or(GapError::ZeroVector)?;
        let logits: Vec<f64> = self
            .columns
            .chunks_exact(self.dim)
            .map(|m| neumaier_sum(m.iter().zip(&unit).map(|(a, b)| a * b)) / self.tau)
            .collect();
        Ok(softmax(&logits))
    }

    /// `v_proj = M α`, a convex combination of the memory columns.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>, GapError> {
        let alpha = self.weights(v)?;
        Ok((0..self.dim)
            .map(|d| neumaier_sum(alpha.iter().enumerate().map(|(j, a)| a * self.columns[j * self.dim + d])))
            .collect())
    }

    /// Layout (little-endian): magic `PIONMEM1`, `u32` N, `u32` D, `f64` τ,
    /// N × (`u32` byte length, UTF-8 text), then `N*D` `f64` column-major.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), GapError> {
        w.write_all(MEMORY_MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.tau.to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.len() as u32).to_le_bytes())?;
            w.write_all(e.as_bytes())?;
        }
        for v in &self.columns {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, GapError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], GapError> {
            if buf.len() - pos < n {
                return Err(GapError::Format("truncated archive".into()));
            }
            pos += n;
            Ok(&buf[pos - n..pos])
        };
        if take(8)? != MEMORY_MAGIC {
            return Err(GapError::Format("bad magic".into()));
        }
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let tau = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut entries = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let s = String::from_utf8(take(len)?.to_vec()).map_err(|_| GapError::Format("entry is not UTF-8".into()))?;
            entries.push(s);
        }
        let payload = take(n * dim * 8)?;
        let columns = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if pos != buf.len() {
            return Err(GapError::Format("trailing bytes after payload".into()));
        }
        Self::from_columns(entries, dim, columns, tau)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GapError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GapError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total = neumaier_sum(exps.iter().copied());
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub variance: f64,
    pub seed: u64,
}

/// Seeded source of `N(0, σ² I)` perturbations. One per training worker.
pub struct NoiseGenerator {
    rng: ChaCha8Rng,
    normal: Option<Normal<f64>>,
}

impl NoiseGenerator {
    pub fn new(cfg: NoiseConfig) -> Result<Self, GapError> {
        if !(cfg.variance >= 0.0 && cfg.variance.is_finite()) {
            return Err(GapError::Invalid(format!("noise variance must be nonnegative, got {}", cfg.variance)));
        }
        let normal = (cfg.variance > 0.0).then(|| Normal::new(0.0, cfg.variance.sqrt()).expect("finite std"));
        Ok(Self { rng: ChaCha8Rng::seed_from_u64(cfg.seed), normal })
    }

    /// `e + g` with `g ~ N(0, σ² I)`; identity when σ² = 0.
    pub fn perturb(&mut self, e: &[f64]) -> Vec<f64> {
        match &self.normal {
            None => e.to_vec(),
            Some(n) => e.iter().map(|x| x + n.sample(&mut self.rng)).collect(),
        }
    }
}

/// No-mitigation baseline.
pub fn passthrough(v: &[f64]) -> Vec<f64> {
    v.to_vec()
}
