//! Vision-language backbone adapters.
//!
//! Real encoders (Talk2DINO, DINO.txt, CLIP variants) plug in behind
//! [`Backbone`]. Two offline adapters ship here: a seeded [`SyntheticAdapter`]
//! and a [`PrecomputedAdapter`] that serves grids from `PIONGRID1` archives.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::BackboneConfig;
use crate::metrics::tokenize;
use crate::types::{GridError, PatchGrid};

pub const GRID_MAGIC: &[u8; 9] = b"PIONGRID1";

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("backbone load failure: {0}")]
    Load(String),
    #[error("unsupported image: {0}")]
    UnsupportedImage(String),
    #[error("adapter `{adapter}` lacks capability: {capability}")]
    Capability { adapter: String, capability: &'static str },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("grid archive format error: {0}")]
    Format(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Static description of an adapter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterInfo {
    pub name: String,
    pub patch_size: u32,
    pub input_resolution: u32,
    pub embedding_dim: usize,
    pub has_attention: bool,
    pub has_text_encoder: bool,
}

impl AdapterInfo {
    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.patch_size == 0 || !self.input_resolution.is_multiple_of(self.patch_size) {
            return Err(BackboneError::Load(format!(
                "input resolution {} is not divisible by patch size {}",
                self.input_resolution, self.patch_size
            )));
        }
        if self.embedding_dim == 0 {
            return Err(BackboneError::Load("embedding dimension must be >= 1".into()));
        }
        Ok(())
    }

    /// Patches per side of the square input.
    pub fn grid_side(&self) -> usize {
        (self.input_resolution / self.patch_size) as usize
    }
}

/// Image encoder `ψ_v` and text encoder `ψ_t` sharing one embedding space.
pub trait Backbone: Send + Sync {
    fn info(&self) -> &AdapterInfo;

    fn encode_image(&self, image: &RgbImage) -> Result<PatchGrid, BackboneError>;

    fn encode_text(&self, text: &str) -> Result<Vec<f64>, BackboneError>;
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Key identifying decoded pixels, independent of the container format.
pub fn pixel_key(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    hex::encode(h.finalize())
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, BackboneError> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| BackboneError::UnsupportedImage(e.to_string()))
}

pub fn open_image(path: &Path) -> Result<RgbImage, BackboneError> {
    let bytes = std::fs::read(path)?;
    decode_image(&bytes)
}

/// Bilinear resize to the square backbone input; aspect ratio is not kept.
pub fn resize_to_input(image: &RgbImage, resolution: u32) -> RgbImage {
    if image.width() == resolution && image.height() == resolution {
        image.clone()
    } else {
        image::imageops::resize(image, resolution, resolution, FilterType::Triangle)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Number of pixel statistics per patch: bias, mean RGB, four sub-patch mean RGB.
const SYNTH_FEATURES: usize = 1 + 3 + 4 * 3;

/// Deterministic stand-in backbone.
///
/// A patch embedding is a fixed seeded random projection of the patch's mean
/// RGB and its 2×2 sub-patch means. A text embedding is a seeded hashing
/// bag-of-words: every token contributes a Gaussian vector seeded by its hash.
pub struct SyntheticAdapter {
    info: AdapterInfo,
    seed: u64,
    projection: Vec<f64>,
}

impl SyntheticAdapter {
    pub fn new(dim: usize, patch_size: u32, input_resolution: u32, seed: u64, attention: bool) -> Result<Self, BackboneError> {
        let info = AdapterInfo {
            name: "synthetic".into(),
            patch_size,
            input_resolution,
            embedding_dim: dim,
            has_attention: attention,
            has_text_encoder: true,
        };
        info.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (SYNTH_FEATURES as f64).sqrt();
        let projection = gaussian_vector(&mut rng, SYNTH_FEATURES * dim).into_iter().map(|x| x * scale).collect();
        Ok(Self { info, seed, projection })
    }

    fn patch_features(img: &RgbImage, x0: u32, y0: u32, p: u32) -> ([f64; SYNTH_FEATURES], f64) {
        let mut feats = [0.0; SYNTH_FEATURES];
        feats[0] = 1.0;
        let half = (p / 2).max(1);
        let mut quad_counts = [0u32; 4];
        let mut luminance = 0.0;
        for dy in 0..p {
            for dx in 0..p {
                let px = img.get_pixel(x0 + dx, y0 + dy).0;
                let q = usize::from(dy >= half) * 2 + usize::from(dx >= half);
                quad_counts[q] += 1;
                for c in 0..3 {
                    let v = px[c] as f64 / 255.0 - 0.5;
                    feats[1 + c] += v;
                    feats[4 + q * 3 + c] += v;
                }
                luminance += (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64) / 255.0;
            }
        }
        let n = (p * p) as f64;
        for c in 0..3 {
            feats[1 + c] /= n;
        }
        for q in 0..4 {
            let count = quad_counts[q].max(1) as f64;
            for c in 0..3 {
                feats[4 + q * 3 + c] /= count;
            }
        }
        (feats, luminance / n)
    }
}

impl Backbone for SyntheticAdapter {
    fn info(&self) -> &AdapterInfo {
        &self.info
    }

    fn encode_image(&self, image: &RgbImage) -> Result<PatchGrid, BackboneError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(BackboneError::UnsupportedImage("empty image".into()));
        }
        let res = self.info.input_resolution;
        let p = self.info.patch_size;
        let side = self.info.grid_side();
        let dim = self.info.embedding_dim;
        let resized = resize_to_input(image, res);
        let mut data = Vec::with_capacity(side * side * dim);
        let mut lum = Vec::with_capacity(side * side);
        for r in 0..side as u32 {
            for c in 0..side as u32 {
                let (feats, l) = Self::patch_features(&resized, c * p, r * p, p);
                lum.push(l);
                for d in 0..dim {
                    let v: f64 = feats.iter().enumerate().map(|(f, x)| x * self.projection[f * dim + d]).sum();
                    data.push(v as f32);
                }
            }
        }
        let attention = self.info.has_attention.then(|| {
            // saliency: luminance contrast against the image mean
            let mean = lum.iter().sum::<f64>() / lum.len() as f64;
            lum.iter().map(|l| ((l - mean).abs() + 1e-3) as f32).collect()
        });
        Ok(PatchGrid::new(side, side, dim, data, (res, res), p, attention)?)
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>, BackboneError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(BackboneError::Validation("text is empty after tokenization".into()));
        }
        let dim = self.info.embedding_dim;
        let mut out = vec![0.0; dim];
        for tok in &tokens {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(tok.as_bytes()) ^ self.seed.rotate_left(17));
            for (o, g) in out.iter_mut().zip(gaussian_vector(&mut rng, dim)) {
                *o += g;
            }
        }
        Ok(out)
    }
}

/// Adapter backed by precomputed grid archives named `<pixel_key>.pgrid`,
/// with an optional JSON table `{text: [floats]}` for text embeddings.
pub struct PrecomputedAdapter {
    info: AdapterInfo,
    dir: PathBuf,
    texts: HashMap<String, Vec<f64>>,
}

impl PrecomputedAdapter {
    pub fn new(info: AdapterInfo, dir: impl Into<PathBuf>, text_table: Option<&Path>) -> Result<Self, BackboneError> {
        info.validate()?;
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(BackboneError::Load(format!("grid directory {} not found", dir.display())));
        }
        let texts = match text_table {
            Some(p) => {
                let raw = std::fs::read_to_string(p)?;
                serde_json::from_str(&raw).map_err(|e| BackboneError::Load(format!("text table: {e}")))?
            }
            None => HashMap::new(),
        };
        let info = AdapterInfo { has_text_encoder: !texts.is_empty(), ..info };
        Ok(Self { info, dir, texts })
    }

    pub fn grid_path(&self, image: &RgbImage) -> PathBuf {
        self.dir.join(format!("{}.pgrid", pixel_key(image)))
    }
}

impl Backbone for PrecomputedAdapter {
    fn info(&self) -> &AdapterInfo {
        &self.info
    }

    fn encode_image(&self, image: &RgbImage) -> Result<PatchGrid, BackboneError> {
        let path = self.grid_path(image);
        if !path.exists() {
            return Err(BackboneError::UnsupportedImage(format!("no precomputed grid at {}", path.display())));
        }
        let grid = load_grid(&path)?;
        if grid.dim() != self.info.embedding_dim {
            return Err(BackboneError::Format(format!(
                "grid dim {} does not match adapter dim {}",
                grid.dim(),
                self.info.embedding_dim
            )));
        }
        Ok(grid)
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>, BackboneError> {
        if !self.info.has_text_encoder {
            return Err(BackboneError::Capability { adapter: self.info.name.clone(), capability: "text encoder" });
        }
        if text.trim().is_empty() {
            return Err(BackboneError::Validation("empty text".into()));
        }
        self.texts
            .get(text)
            .cloned()
            .ok_or_else(|| BackboneError::Validation(format!("text not in precomputed table: {text:?}")))
    }
}

/// Instantiates the adapter named by `backbone.name`.
pub fn build_backbone(cfg: &BackboneConfig) -> Result<Arc<dyn Backbone>, BackboneError> {
    match cfg.name.as_str() {
        "synthetic" => Ok(Arc::new(SyntheticAdapter::new(
            cfg.dim,
            cfg.patch_size,
            cfg.input_resolution,
            cfg.seed,
            cfg.attention,
        )?)),
        "precomputed" => {
            let dir = cfg
                .grid_dir
                .as_ref()
                .ok_or_else(|| BackboneError::Load("precomputed adapter needs backbone.grid_dir".into()))?;
            let table = dir.join("texts.json");
            let info = AdapterInfo {
                name: "precomputed".into(),
                patch_size: cfg.patch_size,
                input_resolution: cfg.input_resolution,
                embedding_dim: cfg.dim,
                has_attention: cfg.attention,
                has_text_encoder: false,
            };
            Ok(Arc::new(PrecomputedAdapter::new(info, dir, table.exists().then_some(table.as_path()))?))
        }
        other => Err(BackboneError::Load(format!("unknown backbone `{other}`"))),
    }
}

/// A grid together with the name of the backbone that produced it.
///
/// Layout (little-endian): magic `PIONGRID1`, `u32` rows, cols, dim,
/// patch_size, source height, source width, `u8` attention flag, `u16` name
/// length, name bytes, then `rows*cols*dim` `f32` in (row, col, dim) order,
/// then `rows*cols` `f32` attention values when flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct GridArchive {
    pub name: String,
    pub grid: PatchGrid,
}

impl GridArchive {
    pub fn write_to(&self, mut w: impl Write) -> Result<(), BackboneError> {
        let g = &self.grid;
        let name = self.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| BackboneError::Format("backbone name too long".into()))?;
        w.write_all(GRID_MAGIC)?;
        for v in [g.rows() as u32, g.cols() as u32, g.dim() as u32, g.patch_size, g.source_resolution.0, g.source_resolution.1] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[u8::from(g.attention().is_some())])?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        for v in g.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(att) = g.attention() {
            for v in att {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, BackboneError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = ByteCursor { buf: &buf, pos: 0 };
        if cur.take(GRID_MAGIC.len())? != GRID_MAGIC {
            return Err(BackboneError::Format("bad magic".into()));
        }
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let patch_size = cur.u32()?;
        let res = (cur.u32()?, cur.u32()?);
        let has_attention = match cur.take(1)?[0] {
            0 => false,
            1 => true,
            f => return Err(BackboneError::Format(format!("bad attention flag {f}"))),
        };
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| BackboneError::Format("backbone name is not UTF-8".into()))?;
        let n = rows
            .checked_mul(cols)
            .and_then(|x| x.checked_mul(dim))
            .ok_or_else(|| BackboneError::Format("header dimensions overflow".into()))?;
        let expected = (n + if has_attention { rows * cols } else { 0 }) * 4;
        if cur.remaining() != expected {
            return Err(BackboneError::Format(format!(
                "payload is {} bytes, header implies {expected}",
                cur.remaining()
            )));
        }
        let data = cur.f32s(n)?;
        let attention = if has_attention { Some(cur.f32s(rows * cols)?) } else { None };
        let grid = PatchGrid::new(rows, cols, dim, data, res, patch_size, attention)?;
        Ok(Self { name, grid })
    }
}

struct ByteCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BackboneError> {
        if self.remaining() < n {
            return Err(BackboneError::Format("truncated archive".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32, BackboneError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, BackboneError> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn save_grid(grid: &PatchGrid, name: &str, path: impl AsRef<Path>) -> Result<(), BackboneError> {
    let mut w = BufWriter::new(File::create(path)?);
    GridArchive { name: name.to_string(), grid: grid.clone() }.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<PatchGrid, BackboneError> {
    Ok(GridArchive::read_from(BufReader::new(File::open(path)?))?.grid)
}
