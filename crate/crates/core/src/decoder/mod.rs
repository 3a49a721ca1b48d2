//! Text-only prefix decoder: training from text embeddings, generation from
//! region embeddings, and the checkpoint archive.

mod model;
mod tokenizer;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{Arch, LossAndGrad, Weights};
pub use tokenizer::{split_words, Tokenizer, EOS, PAD, UNK};

use crate::backbones::{Backbone, BackboneError};
use crate::gap::{l2_normalize, GapMode, NoiseConfig, NoiseGenerator};
use crate::types::Caption;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"PIONCKPT1";

/// Examples per gradient chunk. Chunks are summed in a fixed order, so the
/// result does not depend on thread scheduling.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("training error: {0}")]
    Train(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Greedy => f.write_str("greedy"),
            Strategy::Beam(k) => write!(f, "beam:{k}"),
        }
    }
}

/// Training-time modality-gap handling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mitigation {
    pub mode: GapMode,
    /// Noise variance, used only in `noise` mode.
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub corpus_id: String,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub corpus: Vec<String>,
    pub corpus_id: String,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub mitigation: Mitigation,
    pub seed: u64,
    pub deterministic: bool,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Longest caption, in tokens, the decoder can produce.
    pub max_len: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl TrainSpec {
    /// Defaults of the memory-mode recipe: AdamW, lr 1e-5, weight decay
    /// 0.01, batch 64, 10 epochs, 4 layers × 4 heads.
    pub fn new(corpus: Vec<String>) -> Self {
        Self {
            corpus,
            corpus_id: "inline".into(),
            epochs: 10,
            lr: 1e-5,
            weight_decay: 0.01,
            batch_size: 64,
            mitigation: Mitigation { mode: GapMode::Memory, sigma2: 0.08 },
            seed: 0,
            deterministic: true,
            layers: 4,
            heads: 4,
            d_model: 64,
            max_len: 64,
            max_steps: None,
        }
    }

    fn validate(&self) -> Result<(), DecoderError> {
        let fail = |m: &str| Err(DecoderError::Train(m.to_string()));
        if self.corpus.is_empty() {
            return fail("corpus is empty");
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("learning rate must be > 0");
        }
        if self.batch_size == 0 {
            return fail("batch size must be >= 1");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail("d_model must be a positive multiple of heads");
        }
        if self.layers == 0 || self.max_len == 0 {
            return fail("layers and max_len must be >= 1");
        }
        if self.weight_decay < 0.0 || self.mitigation.sigma2 < 0.0 {
            return fail("weight decay and noise variance must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Trained decoder φ together with its tokenizer and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderCheckpoint {
    pub arch: Arch,
    pub weights: Weights,
    pub tokenizer: Tokenizer,
    pub mitigation: Mitigation,
    pub meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: Arch,
    vocab: Vec<String>,
    mitigation: Mitigation,
    meta: TrainMeta,
    shapes: Vec<(usize, usize)>,
}

struct AdamW {
    m: Weights,
    v: Weights,
    step: i32,
    lr: f64,
    weight_decay: f64,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(arch: &Arch, lr: f64, weight_decay: f64) -> Self {
        Self { m: Weights::zeros(arch), v: Weights::zeros(arch), step: 0, lr, weight_decay }
    }

    fn step(&mut self, params: &mut Weights, grads: &Weights) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step);
        let bc2 = 1.0 - Self::BETA2.powi(self.step);
        let (lr, wd) = (self.lr, self.weight_decay);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors()).zip(self.m.tensors_mut()).zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *p -= lr * wd * *p;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
            });
        }
    }
}

fn sum_grads(arch: &Arch, weights: &Weights, batch: &[(Vec<f64>, Vec<u32>)], deterministic: bool) -> (Weights, f64) {
    let one = |(prefix, tokens): &(Vec<f64>, Vec<u32>)| {
        let lg = weights.loss_and_grad(arch, prefix, tokens, EOS);
        (lg.grads, lg.loss)
    };
    let merge = |mut a: (Weights, f64), b: (Weights, f64)| {
        a.0.add_scaled(&b.0, 1.0);
        (a.0, a.1 + b.1)
    };
    if deterministic {
        let partials: Vec<(Weights, f64)> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| chunk.iter().map(one).reduce(merge).expect("nonempty chunk"))
            .collect();
        partials.into_iter().reduce(merge).expect("nonempty batch")
    } else {
        batch.par_iter().map(one).reduce(|| (Weights::zeros(arch), 0.0), merge)
    }
}

/// Trains a decoder to reconstruct each caption from its text embedding.
///
/// Embeddings are L2-normalized; in `noise` mode they are perturbed with a
/// fresh draw per example per epoch. Memory projection is inference-only.
pub fn train(spec: &TrainSpec, adapter: &dyn Backbone) -> Result<(DecoderCheckpoint, TrainLog), DecoderError> {
    spec.validate()?;
    if !adapter.info().has_text_encoder {
        return Err(BackboneError::Capability { adapter: adapter.info().name.clone(), capability: "text encoder" }.into());
    }
    let tokenizer = Tokenizer::fit(&spec.corpus);
    let arch = Arch {
        vocab: tokenizer.len(),
        d_model: spec.d_model,
        heads: spec.heads,
        layers: spec.layers,
        max_positions: spec.max_len + 1,
        prefix_dim: adapter.info().embedding_dim,
    };
    let mut examples = Vec::with_capacity(spec.corpus.len());
    for text in &spec.corpus {
        let e = adapter.encode_text(text)?;
        let e = l2_normalize(&e).ok_or_else(|| DecoderError::Train(format!("zero text embedding for {text:?}")))?;
        let mut tokens = tokenizer.encode(text);
        tokens.truncate(spec.max_len);
        examples.push((e, tokens));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut weights = Weights::init(&arch, &mut rng);
    let mut noise = match spec.mitigation.mode {
        GapMode::Noise => Some(
            NoiseGenerator::new(NoiseConfig { variance: spec.mitigation.sigma2, seed: spec.seed ^ 0x9e37_79b9 })
                .map_err(|e| DecoderError::Train(e.to_string()))?,
        ),
        _ => None,
    };
    let mut opt = AdamW::new(&arch, spec.lr, spec.weight_decay);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut steps = 0usize;
    'epochs: for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for idx in order.chunks(spec.batch_size) {
            let batch: Vec<(Vec<f64>, Vec<u32>)> = idx
                .iter()
                .map(|&i| {
                    let (e, toks) = &examples[i];
                    let prefix = noise.as_mut().map_or_else(|| e.clone(), |g| g.perturb(e));
                    (prefix, toks.clone())
                })
                .collect();
            let (mut grads, loss_sum) = sum_grads(&arch, &weights, &batch, spec.deterministic);
            let n = batch.len() as f64;
            let loss = loss_sum / n;
            if !loss.is_finite() {
                return Err(DecoderError::Train(format!("non-finite loss {loss} at epoch {epoch}, step {steps}")));
            }
            for t in grads.tensors_mut() {
                *t /= n;
            }
            opt.step(&mut weights, &grads);
            log.step_losses.push(loss);
            epoch_loss += loss_sum;
            seen += batch.len();
            steps += 1;
            if spec.max_steps.is_some_and(|m| steps >= m) {
                log.epoch_losses.push(epoch_loss / seen as f64);
                break 'epochs;
            }
        }
        log.epoch_losses.push(epoch_loss / seen as f64);
    }
    let meta = TrainMeta {
        corpus_id: spec.corpus_id.clone(),
        epochs: spec.epochs,
        lr: spec.lr,
        weight_decay: spec.weight_decay,
        batch_size: spec.batch_size,
        seed: spec.seed,
        steps,
    };
    Ok((DecoderCheckpoint { arch, weights, tokenizer, mitigation: spec.mitigation, meta }, log))
}

impl DecoderCheckpoint {
    pub fn prefix_dim(&self) -> usize {
        self.arch.prefix_dim
    }

    /// Longest caption in tokens.
    pub fn max_len(&self) -> usize {
        self.arch.max_positions - 1
    }

    /// Decodes a caption from a prefix vector.
    ///
    /// Returns an empty caption (rather than an error) when the decoder emits
    /// end-of-text immediately.
    pub fn generate(&self, prefix: &[f64], strategy: Strategy, max_len: usize) -> Result<Caption, DecoderError> {
        if prefix.len() != self.arch.prefix_dim {
            return Err(DecoderError::Decode(format!(
                "prefix has dimension {}, decoder expects {}",
                prefix.len(),
                self.arch.prefix_dim
            )));
        }
        if prefix.iter().any(|x| !x.is_finite()) {
            return Err(DecoderError::Decode("prefix has non-finite entries".into()));
        }
        let max_len = max_len.min(self.max_len());
        let (tokens, score) = match strategy {
            Strategy::Greedy => self.greedy(prefix, max_len),
            Strategy::Beam(k) => self.beam(prefix, k.max(1), max_len),
        };
        Ok(Caption { text: self.tokenizer.decode(&tokens), token_ids: tokens, score: Some(score) })
    }

    fn masked_log_probs(&self, prefix: &[f64], tokens: &[u32]) -> Vec<f64> {
        let mut lp = self.weights.next_log_probs(&self.arch, prefix, tokens);
        lp[PAD as usize] = f64::NEG_INFINITY;
        lp
    }

    fn greedy(&self, prefix: &[f64], max_len: usize) -> (Vec<u32>, f64) {
        let mut tokens = Vec::new();
        let mut score = 0.0;
        while tokens.len() < max_len {
            let lp = self.masked_log_probs(prefix, &tokens);
            let (best, best_lp) = argmax(&lp);
            score += best_lp;
            if best == EOS {
                break;
            }
            tokens.push(best);
        }
        (tokens, score)
    }

    fn beam(&self, prefix: &[f64], k: usize, max_len: usize) -> (Vec<u32>, f64) {
        // (tokens, total log-prob, finished)
        let mut beams: Vec<(Vec<u32>, f64, bool)> = vec![(Vec::new(), 0.0, false)];
        while beams.iter().any(|b| !b.2) {
            let mut cands = Vec::new();
            for (toks, score, done) in &beams {
                if *done {
                    cands.push((toks.clone(), *score, true));
                    continue;
                }
                let lp = self.masked_log_probs(prefix, toks);
                let mut ranked: Vec<(u32, f64)> = lp.iter().enumerate().map(|(i, l)| (i as u32, *l)).collect();
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                for &(tok, l) in ranked.iter().take(k) {
                    if tok == EOS {
                        cands.push((toks.clone(), score + l, true));
                    } else {
                        let mut t = toks.clone();
                        t.push(tok);
                        let done = t.len() >= max_len;
                        cands.push((t, score + l, done));
                    }
                }
            }
            cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            cands.truncate(k);
            beams = cands;
        }
        let (tokens, score, _) = beams.into_iter().next().expect("at least one beam");
        (tokens, score)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), DecoderError> {
        let header = Header {
            arch: self.arch,
            vocab: self.tokenizer.vocab().to_vec(),
            mitigation: self.mitigation,
            meta: self.meta.clone(),
            shapes: self.weights.tensors().iter().map(|t| t.dim()).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| DecoderError::Format(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for t in self.weights.tensors() {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, DecoderError> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic).map_err(|_| DecoderError::Format("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(DecoderError::Format("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|_| DecoderError::Format("truncated header".into()))?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(|_| DecoderError::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| DecoderError::Format(e.to_string()))?;
        let arch = header.arch;
        if arch.vocab != header.vocab.len() || arch.heads == 0 || !arch.d_model.is_multiple_of(arch.heads) {
            return Err(DecoderError::Format("inconsistent architecture header".into()));
        }
        let mut weights = Weights::zeros(&arch);
        let shapes: Vec<(usize, usize)> = weights.tensors().iter().map(|t| t.dim()).collect();
        if shapes != header.shapes {
            return Err(DecoderError::Format("tensor shapes do not match architecture".into()));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let expected = weights.num_params() * 8;
        if payload.len() != expected {
            return Err(DecoderError::Format(format!("payload is {} bytes, expected {expected}", payload.len())));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for t in weights.tensors_mut() {
            let (r, c) = t.dim();
            *t = Array2::from_shape_vec((r, c), values.by_ref().take(r * c).collect()).expect("shape");
        }
        Ok(Self {
            arch,
            weights,
            tokenizer: Tokenizer::from_vocab(header.vocab),
            mitigation: header.mitigation,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DecoderError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DecoderError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Index and value of the maximum; ties resolve to the lowest index.
fn argmax(values: &[f64]) -> (u32, f64) {
    let mut best = (0u32, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i as u32, v);
        }
    }
    best
}
