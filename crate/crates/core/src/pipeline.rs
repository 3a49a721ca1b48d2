//! Region captioning: encode, select, aggregate, mitigate, decode.

use std::sync::Arc;

use image::RgbImage;
use serde::Serialize;
use thiserror::Error;

use crate::backbones::{Backbone, BackboneError};
use crate::config::Config;
use crate::decoder::{DecoderCheckpoint, DecoderError, Strategy};
use crate::gap::{l2_normalize, GapError, GapMode, MemoryBank};
use crate::regions::{embed_region, RegionError};
use crate::types::{Aggregation, Caption, ImageSize, PatchGrid, PatchSelection, RegionSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Gap(#[from] GapError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error("decoder was trained for gap mode `{trained}` but `{requested}` was requested")]
    ModeMismatch { trained: GapMode, requested: GapMode },
    #[error("inconsistent pipeline: {0}")]
    Inconsistent(String),
}

/// Everything needed to caption regions of already-encoded images.
/// Immutable and shareable across threads.
#[derive(Clone)]
pub struct Captioner {
    ckpt: Arc<DecoderCheckpoint>,
    bank: Option<Arc<MemoryBank>>,
    mode: GapMode,
    pub aggregation: Aggregation,
    pub strategy: Strategy,
    pub max_len: usize,
}

/// Caption plus the intermediate quantities that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct RegionCaption {
    pub caption: Caption,
    pub patch_indices: Vec<usize>,
    pub patch_weights: Vec<f64>,
}

impl Captioner {
    /// Uses the checkpoint's recorded gap mode. Memory mode needs a bank
    /// whose dimension matches the decoder prefix.
    pub fn new(ckpt: Arc<DecoderCheckpoint>, bank: Option<Arc<MemoryBank>>) -> Result<Self, PipelineError> {
        let mode = ckpt.mitigation.mode;
        Self::with_mode(ckpt, bank, mode)
    }

    /// Errors when `mode` differs from the mode the checkpoint was trained for.
    pub fn with_mode(
        ckpt: Arc<DecoderCheckpoint>,
        bank: Option<Arc<MemoryBank>>,
        mode: GapMode,
    ) -> Result<Self, PipelineError> {
        if mode != ckpt.mitigation.mode {
            return Err(PipelineError::ModeMismatch { trained: ckpt.mitigation.mode, requested: mode });
        }
        match (&bank, mode) {
            (None, GapMode::Memory) => {
                return Err(PipelineError::Inconsistent("memory mode requires a memory bank".into()));
            }
            (Some(b), GapMode::Memory) if b.dim() != ckpt.prefix_dim() => {
                return Err(PipelineError::Inconsistent(format!(
                    "memory bank dimension {} differs from decoder prefix dimension {}",
                    b.dim(),
                    ckpt.prefix_dim()
                )));
            }
            _ => {}
        }
        let max_len = ckpt.max_len();
        Ok(Self { ckpt, bank, mode, aggregation: Aggregation::Uniform, strategy: Strategy::Greedy, max_len })
    }

    pub fn mode(&self) -> GapMode {
        self.mode
    }

    pub fn checkpoint(&self) -> &DecoderCheckpoint {
        &self.ckpt
    }

    /// Maps a region embedding to the decoder prefix.
    pub fn condition(&self, v: &[f64]) -> Result<Vec<f64>, PipelineError> {
        match (self.mode, &self.bank) {
            (GapMode::Memory, Some(bank)) => Ok(bank.project(v)?),
            _ => Ok(l2_normalize(v).ok_or(GapError::ZeroVector)?),
        }
    }

    pub fn caption_grid(
        &self,
        grid: &PatchGrid,
        image: ImageSize,
        spec: &RegionSpec,
    ) -> Result<RegionCaption, PipelineError> {
        if grid.dim() != self.ckpt.prefix_dim() {
            return Err(PipelineError::Inconsistent(format!(
                "grid dimension {} differs from decoder prefix dimension {}",
                grid.dim(),
                self.ckpt.prefix_dim()
            )));
        }
        let (embedding, selection) = embed_region(spec, grid, image, self.aggregation)?;
        let caption = self.caption_vector(&embedding.vector)?;
        Ok(RegionCaption {
            caption,
            patch_indices: selection.indices().to_vec(),
            patch_weights: selection.weights().to_vec(),
        })
    }

    pub fn caption_vector(&self, v: &[f64]) -> Result<Caption, PipelineError> {
        let prefix = self.condition(v)?;
        Ok(self.ckpt.generate(&prefix, self.strategy, self.max_len)?)
    }
}

/// Builds a captioner from `decoder.*`, `gap.*` and `regions.aggregation`.
/// The configured gap mode must match the checkpoint's; memory mode loads
/// `gap.bank` and applies `gap.tau`.
pub fn load_captioner(cfg: &Config) -> Result<Captioner, PipelineError> {
    let path = cfg
        .decoder
        .checkpoint
        .as_ref()
        .ok_or_else(|| PipelineError::Inconsistent("decoder.checkpoint is not set".into()))?;
    let ckpt = Arc::new(DecoderCheckpoint::load(path)?);
    let bank = match (cfg.gap.mode, &cfg.gap.bank) {
        (GapMode::Memory, Some(p)) => Some(Arc::new(MemoryBank::load(p)?.with_tau(cfg.gap.tau)?)),
        (GapMode::Memory, None) => return Err(PipelineError::Inconsistent("gap.mode is memory but gap.bank is not set".into())),
        _ => None,
    };
    let mut c = Captioner::with_mode(ckpt, bank, cfg.gap.mode)?;
    c.aggregation = cfg.aggregation;
    c.strategy = cfg.decoder.strategy;
    c.max_len = cfg.decoder.max_len.min(c.checkpoint().max_len());
    Ok(c)
}

/// One-shot composition that encodes `image` and captions one region.
pub fn caption_region(
    backbone: &dyn Backbone,
    image: &RgbImage,
    spec: &RegionSpec,
    captioner: &Captioner,
) -> Result<Caption, PipelineError> {
    let grid = backbone.encode_image(image)?;
    let size = ImageSize::new(image.width(), image.height());
    Ok(captioner.caption_grid(&grid, size, spec)?.caption)
}

/// Selection used for a region, exposed for weight-inspection tooling.
pub fn selection_for(
    spec: &RegionSpec,
    grid: &PatchGrid,
    image: ImageSize,
    mode: Aggregation,
) -> Result<PatchSelection, PipelineError> {
    Ok(embed_region(spec, grid, image, mode)?.1)
}
