//! Domain types shared by every module.
//!
//! Region coordinates are always expressed in original-image pixels; the
//! mapping onto a backbone's patch grid happens in [`crate::regions`].
//! Flat patch indices are `row * cols + col`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version tag of the region JSON schema.
pub const REGION_SPEC_VERSION: &str = "region-spec/v1";

/// Tolerance on `Σ w_i = 1` for patch selections.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid dimensions must be positive (rows={rows}, cols={cols}, dim={dim})")]
    EmptyShape { rows: usize, cols: usize, dim: usize },
    #[error("payload has {actual} values, expected {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("non-finite value at offset {0}")]
    NonFinite(usize),
    #[error("attention map has {actual} entries, expected {expected}")]
    AttentionLength { expected: usize, actual: usize },
    #[error("attention map must be nonnegative with positive mass")]
    AttentionMass,
}

/// Width and height of an image in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }
}

/// Axis-aligned box `(x0, y0, x1, y1)` in original-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// The box covering a whole image.
    pub fn full(size: ImageSize) -> Self {
        Self::new(0.0, 0.0, size.width as f64, size.height as f64)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let c = [self.x0, self.y0, self.x1, self.y1];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(SpecError::Validation(format!("non-finite box coordinate in {c:?}")));
        }
        if !(self.x0 < self.x1 && self.y0 < self.y1) {
            return Err(SpecError::Validation(format!(
                "degenerate box {c:?}: requires x0 < x1 and y0 < y1"
            )));
        }
        Ok(())
    }
}

impl From<[f64; 4]> for PixelBox {
    fn from(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<PixelBox> for [f64; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Image,
    Patch,
    Box,
    BoxSet,
    Trace,
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionKind::Image => "image",
            RegionKind::Patch => "patch",
            RegionKind::Box => "box",
            RegionKind::BoxSet => "box_set",
            RegionKind::Trace => "trace",
        })
    }
}

/// A region of an image, as published in the `region-spec/v1` JSON schema:
///
/// ```json
/// {"kind": "image"}
/// {"kind": "patch", "patch": [row, col]}
/// {"kind": "box", "box": [x0, y0, x1, y1]}
/// {"kind": "box_set", "boxes": [[x0, y0, x1, y1], ...]}
/// {"kind": "trace", "points": [[x, y], ...]}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionSpec {
    Image,
    Patch { patch: [usize; 2] },
    Box {
        #[serde(rename = "box")]
        bbox: PixelBox,
    },
    BoxSet { boxes: Vec<PixelBox> },
    Trace { points: Vec<[f64; 2]> },
}

impl RegionSpec {
    pub fn kind(&self) -> RegionKind {
        match self {
            RegionSpec::Image => RegionKind::Image,
            RegionSpec::Patch { .. } => RegionKind::Patch,
            RegionSpec::Box { .. } => RegionKind::Box,
            RegionSpec::BoxSet { .. } => RegionKind::BoxSet,
            RegionSpec::Trace { .. } => RegionKind::Trace,
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        match self {
            RegionSpec::Image | RegionSpec::Patch { .. } => Ok(()),
            RegionSpec::Box { bbox } => bbox.validate(),
            RegionSpec::BoxSet { boxes } => {
                if boxes.is_empty() {
                    return Err(SpecError::Validation("box_set must contain at least one box".into()));
                }
                boxes.iter().try_for_each(PixelBox::validate)
            }
            RegionSpec::Trace { points } => {
                if points.is_empty() {
                    return Err(SpecError::Validation("trace must contain at least one point".into()));
                }
                if let Some(p) = points.iter().find(|p| !p[0].is_finite() || !p[1].is_finite()) {
                    return Err(SpecError::Validation(format!("non-finite trace point {p:?}")));
                }
                Ok(())
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("region spec serializes")
    }
}

impl FromStr for RegionSpec {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_region_spec(s)
    }
}

/// Parses and validates a `region-spec/v1` JSON document.
pub fn parse_region_spec(json: &str) -> Result<RegionSpec, SpecError> {
    let value: serde_json::Value =
        serde_json::from_str(json).map_err(|e| SpecError::Schema(e.to_string()))?;
    region_spec_from_value(value)
}

pub fn region_spec_from_value(value: serde_json::Value) -> Result<RegionSpec, SpecError> {
    if !value.is_object() {
        return Err(SpecError::Schema("region spec must be a JSON object".into()));
    }
    if value.get("kind").is_none() {
        return Err(SpecError::Schema("missing field `kind`".into()));
    }
    if let Some(v) = value.get("version") {
        if v.as_str() != Some(REGION_SPEC_VERSION) {
            return Err(SpecError::Schema(format!("unsupported version {v}")));
        }
    }
    let spec: RegionSpec =
        serde_json::from_value(value).map_err(|e| SpecError::Schema(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

/// Dense grid of patch embeddings produced by one backbone pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f32>,
    /// `(height, width)` the image was resized to before encoding.
    pub source_resolution: (u32, u32),
    pub patch_size: u32,
    attention: Option<Vec<f32>>,
}

impl PatchGrid {
    pub fn new(
        rows: usize,
        cols: usize,
        dim: usize,
        data: Vec<f32>,
        source_resolution: (u32, u32),
        patch_size: u32,
        attention: Option<Vec<f32>>,
    ) -> Result<Self, GridError> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(GridError::EmptyShape { rows, cols, dim });
        }
        let expected = rows * cols * dim;
        if data.len() != expected {
            return Err(GridError::PayloadLength { expected, actual: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        if let Some(att) = &attention {
            if att.len() != rows * cols {
                return Err(GridError::AttentionLength { expected: rows * cols, actual: att.len() });
            }
            let valid = att.iter().all(|a| a.is_finite() && *a >= 0.0) && att.iter().any(|a| *a > 0.0);
            if !valid {
                return Err(GridError::AttentionMass);
            }
        }
        Ok(Self { rows, cols, dim, data, source_resolution, patch_size, attention })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn attention(&self) -> Option<&[f32]> {
        self.attention.as_deref()
    }

    /// Embedding of the patch at flat index `idx`.
    pub fn patch(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn flat_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Approximate heap footprint, used for cache budgeting.
    pub fn size_bytes(&self) -> usize {
        (self.data.len() + self.attention.as_ref().map_or(0, Vec::len)) * std::mem::size_of::<f32>()
    }
}

/// Ordered multiset of flat patch indices with parallel aggregation weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSelection {
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl PatchSelection {
    /// Uniform weights `1/|S|` over the multiset.
    pub fn uniform(indices: Vec<usize>) -> Result<Self, SpecError> {
        if indices.is_empty() {
            return Err(SpecError::Validation("patch selection is empty".into()));
        }
        let w = 1.0 / indices.len() as f64;
        let weights = vec![w; indices.len()];
        Ok(Self { indices, weights })
    }

    /// Normalizes nonnegative raw weights to sum to one.
    pub fn from_raw_weights(indices: Vec<usize>, raw: Vec<f64>) -> Result<Self, SpecError> {
        if indices.is_empty() {
            return Err(SpecError::Validation("patch selection is empty".into()));
        }
        if indices.len() != raw.len() {
            return Err(SpecError::Validation("indices and weights differ in length".into()));
        }
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SpecError::Validation("weights must be finite and nonnegative".into()));
        }
        let total = neumaier_sum(raw.iter().copied());
        if total <= 0.0 {
            return Err(SpecError::Validation("weights have zero total mass".into()));
        }
        let weights = raw.into_iter().map(|w| w / total).collect();
        Ok(Self { indices, weights })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Checks every invariant against a grid with `num_patches` cells.
    pub fn validate(&self, num_patches: usize) -> Result<(), SpecError> {
        if self.indices.is_empty() || self.indices.len() != self.weights.len() {
            return Err(SpecError::Validation("malformed patch selection".into()));
        }
        if let Some(i) = self.indices.iter().find(|&&i| i >= num_patches) {
            return Err(SpecError::Validation(format!(
                "patch index {i} out of grid with {num_patches} patches"
            )));
        }
        if self.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(SpecError::Validation("negative or non-finite weight".into()));
        }
        let total = neumaier_sum(self.weights.iter().copied());
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(SpecError::Validation(format!("weights sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Compensated (Neumaier) summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Uniform,
    Gaussian,
    Attention,
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Aggregation::Uniform),
            "gaussian" => Ok(Aggregation::Gaussian),
            "attention" => Ok(Aggregation::Attention),
            other => Err(format!("unknown aggregation `{other}` (expected uniform, gaussian or attention)")),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Uniform => "uniform",
            Aggregation::Gaussian => "gaussian",
            Aggregation::Attention => "attention",
        })
    }
}

/// Aggregated embedding of a region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionEmbedding {
    pub vector: Vec<f64>,
    pub kind: RegionKind,
    pub aggregation: Aggregation,
}

/// Generated caption. An empty `text` flags a decode that produced nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub score: Option<f64>,
}

impl Caption {
    pub fn empty() -> Self {
        Self { text: String::new(), token_ids: Vec::new(), score: None }
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}
