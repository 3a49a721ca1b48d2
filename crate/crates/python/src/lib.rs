//! Python module `pioner`.
//!
//! ```python
//! import pioner
//! pioner.select_region('{"kind":"box","box":[0,0,20,20]}', 4, 4, 56, 56)
//! pioner.score_captions(["a dog runs"], [["a dog runs fast"]])
//! cap = pioner.Captioner("decoder.ckpt", bank="bank.pmem")
//! cap.caption("img.png", '{"kind":"image"}')
//! ```
//!
//! Invalid input raises `ValueError`; pipeline failures raise `RuntimeError`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use pioner_core::backbones::{build_backbone, open_image, pixel_key as key_of, save_grid as write_grid, Backbone};
use pioner_core::decoder::DecoderCheckpoint;
use pioner_core::metrics::{self, EvalRecord, DENSE_THRESHOLDS};
use pioner_core::pipeline::{load_captioner, PipelineError};
use pioner_core::regions::{embed_region, gaussian_weights as gaussian};
use pioner_core::tracebench;
use pioner_core::types::{parse_region_spec, Aggregation, ImageSize, PatchGrid};
use pioner_core::Config;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Patch indices and weights a region selects on a `rows × cols` grid over
/// a `width × height` image.
pub fn region_weights(
    region: &str,
    rows: usize,
    cols: usize,
    width: u32,
    height: u32,
    aggregation: &str,
) -> Result<(Vec<usize>, Vec<f64>), String> {
    let spec = parse_region_spec(region).map_err(|e| e.to_string())?;
    let mode: Aggregation = aggregation.parse()?;
    // weights never depend on patch values, so a zero grid suffices
    let grid = PatchGrid::new(rows, cols, 1, vec![0.0; rows * cols], (height, width), 14, None).map_err(|e| e.to_string())?;
    let (_, sel) = embed_region(&spec, &grid, ImageSize::new(width, height), mode).map_err(|e| e.to_string())?;
    Ok((sel.indices().to_vec(), sel.weights().to_vec()))
}

/// Corpus CIDEr-D, BLEU@4 and ROUGE-L keyed by metric name.
pub fn corpus_scores(candidates: &[String], references: &[Vec<String>]) -> Result<BTreeMap<String, f64>, String> {
    if candidates.len() != references.len() {
        return Err(format!("{} candidates but {} reference lists", candidates.len(), references.len()));
    }
    let records: Vec<EvalRecord> = candidates
        .iter()
        .zip(references)
        .enumerate()
        .map(|(i, (c, r))| EvalRecord::new(i.to_string(), c.clone(), r.clone()))
        .collect();
    let mut out = BTreeMap::new();
    out.insert("CIDEr-D".to_string(), metrics::cider_d(&records).map_err(|e| e.to_string())?.corpus);
    out.insert("BLEU@4".to_string(), metrics::bleu4(&records).map_err(|e| e.to_string())?);
    out.insert("ROUGE-L".to_string(), metrics::rouge_l(&records).map_err(|e| e.to_string())?.corpus);
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (region, rows, cols, width, height, aggregation = "uniform"))]
fn select_region(
    region: &str,
    rows: usize,
    cols: usize,
    width: u32,
    height: u32,
    aggregation: &str,
) -> PyResult<(Vec<usize>, Vec<f64>)> {
    region_weights(region, rows, cols, width, height, aggregation).map_err(value_err)
}

#[pyfunction]
fn gaussian_weights(rows: usize, cols: usize) -> PyResult<Vec<f64>> {
    if rows == 0 || cols == 0 {
        return Err(value_err("rows and cols must be >= 1"));
    }
    Ok(gaussian(rows, cols))
}

#[pyfunction]
fn score_captions(candidates: Vec<String>, references: Vec<Vec<String>>) -> PyResult<BTreeMap<String, f64>> {
    corpus_scores(&candidates, &references).map_err(value_err)
}

/// Dense mAP from per-box similarities over the standard thresholds.
#[pyfunction]
#[pyo3(signature = (similarities, thresholds = None))]
fn dense_map(similarities: Vec<f64>, thresholds: Option<Vec<f64>>) -> PyResult<f64> {
    if similarities.is_empty() {
        return Err(value_err("no similarities"));
    }
    let t = thresholds.unwrap_or_else(|| DENSE_THRESHOLDS.to_vec());
    if t.is_empty() {
        return Err(value_err("no thresholds"));
    }
    Ok(metrics::dense_map_from_scores(&similarities, &t))
}

/// Points removed from each end of a trace of `length` points.
#[pyfunction]
fn trim_count(length: usize) -> usize {
    tracebench::trim_count(length)
}

/// Key under which the precomputed backbone looks up this image's grid.
/// Computed on pixels decoded here, so it matches the Rust side exactly.
#[pyfunction]
fn pixel_key(image: PathBuf) -> PyResult<String> {
    Ok(key_of(&open_image(&image).map_err(value_err)?))
}

/// Writes a grid archive from row-major `(rows, cols, dim)` values, for
/// exporting features computed by an external model.
#[pyfunction]
#[pyo3(signature = (path, values, rows, cols, dim, resolution, patch_size, attention = None, name = "external"))]
#[allow(clippy::too_many_arguments)]
fn save_grid(
    path: PathBuf,
    values: Vec<f32>,
    rows: usize,
    cols: usize,
    dim: usize,
    resolution: (u32, u32),
    patch_size: u32,
    attention: Option<Vec<f32>>,
    name: &str,
) -> PyResult<()> {
    let grid = PatchGrid::new(rows, cols, dim, values, resolution, patch_size, attention).map_err(value_err)?;
    write_grid(&grid, name, &path).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Checkpoint, optional memory bank and backbone bundled for captioning
/// image files.
#[pyclass(frozen)]
struct Captioner {
    backbone: Arc<dyn Backbone>,
    inner: pioner_core::pipeline::Captioner,
}

#[pymethods]
impl Captioner {
    /// `config` is a JSON config file; `checkpoint`, `bank` and
    /// `aggregation` override it. The gap mode follows the checkpoint unless
    /// the config sets `gap.mode`.
    #[new]
    #[pyo3(signature = (checkpoint, bank = None, config = None, aggregation = None))]
    fn new(checkpoint: PathBuf, bank: Option<PathBuf>, config: Option<PathBuf>, aggregation: Option<&str>) -> PyResult<Self> {
        let (mut cfg, mode_set) = match &config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(value_err)?;
                (Config::from_json_str(&text).map_err(value_err)?, text.contains("\"gap.mode\""))
            }
            None => (Config::default(), false),
        };
        let ckpt = DecoderCheckpoint::load(&checkpoint).map_err(value_err)?;
        if !mode_set {
            cfg.gap.mode = ckpt.mitigation.mode;
        }
        cfg.decoder.checkpoint = Some(checkpoint);
        if bank.is_some() {
            cfg.gap.bank = bank;
        }
        if let Some(a) = aggregation {
            cfg.aggregation = a.parse().map_err(value_err)?;
        }
        let inner = load_captioner(&cfg).map_err(value_err)?;
        let backbone = build_backbone(&cfg.backbone).map_err(value_err)?;
        Ok(Self { backbone, inner })
    }

    #[getter]
    fn gap_mode(&self) -> String {
        self.inner.mode().to_string()
    }

    /// Caption text, or `(text, indices, weights)` with `return_weights`.
    #[pyo3(signature = (image, region, return_weights = false))]
    fn caption<'py>(&self, py: Python<'py>, image: PathBuf, region: &str, return_weights: bool) -> PyResult<Bound<'py, PyAny>> {
        let spec = parse_region_spec(region).map_err(value_err)?;
        let out = py
            .detach(|| -> Result<_, PyErr> {
                let img = open_image(&image).map_err(value_err)?;
                let grid = self.backbone.encode_image(&img).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
                self.inner.caption_grid(&grid, ImageSize::new(img.width(), img.height()), &spec).map_err(|e| match e {
                    PipelineError::Region(r) => value_err(r),
                    other => PyRuntimeError::new_err(other.to_string()),
                })
            })?;
        if return_weights {
            Ok((out.caption.text, out.patch_indices, out.patch_weights).into_pyobject(py)?.into_any())
        } else {
            Ok(out.caption.text.into_pyobject(py)?.into_any())
        }
    }
}

#[pymodule]
#[pyo3(name = "pioner")]
fn pioner_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(select_region, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_weights, m)?)?;
    m.add_function(wrap_pyfunction!(score_captions, m)?)?;
    m.add_function(wrap_pyfunction!(dense_map, m)?)?;
    m.add_function(wrap_pyfunction!(trim_count, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_key, m)?)?;
    m.add_function(wrap_pyfunction!(save_grid, m)?)?;
    m.add_class::<Captioner>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_weights_follow_the_selection_rules() {
        let (idx, w) = region_weights(r#"{"kind":"box","box":[0,0,14,14]}"#, 2, 2, 28, 28, "uniform").unwrap();
        assert_eq!((idx, w), (vec![0], vec![1.0]));
        let (idx, _) = region_weights(r#"{"kind":"image"}"#, 3, 3, 42, 42, "gaussian").unwrap();
        assert_eq!(idx.len(), 9);
        assert!(region_weights(r#"{"kind":"trace","points":[[1,1]]}"#, 2, 2, 28, 28, "gaussian").is_err());
        assert!(region_weights("{", 2, 2, 28, 28, "uniform").is_err());
    }

    #[test]
    fn identical_captions_score_perfectly() {
        let c: Vec<String> = vec!["a man rides a brown horse".into(), "two red buses parked outside".into()];
        let r: Vec<Vec<String>> = c.iter().map(|s| vec![s.clone()]).collect();
        let s = corpus_scores(&c, &r).unwrap();
        assert!((s["CIDEr-D"] - 10.0).abs() < 1e-9);
        assert!((s["BLEU@4"] - 1.0).abs() < 1e-12 && (s["ROUGE-L"] - 1.0).abs() < 1e-12);
        assert!(corpus_scores(&c, &r[..1]).is_err());
    }
}
