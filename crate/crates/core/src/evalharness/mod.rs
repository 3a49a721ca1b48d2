//! Dataset loading and task runners for trace, dense, region-set and image
//! captioning.
//!
//! Every task reads one JSON-lines schema, one sample per line:
//!
//! ```text
//! {"id": "vg-1-0", "image": "img/1.jpg", "region": {"kind": "box", "box": [x0, y0, x1, y1]},
//!  "references": ["a red car"]}
//! ```
//!
//! The region kind must match the task (`trace`, `box`, `box_set`, `image`).
//! Relative image paths resolve against the dataset file's directory. Extra
//! fields are ignored; a `task` field, when present, must name the task.

pub mod convert;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backbones::{open_image, AdapterInfo, Backbone, BackboneError};
use crate::config::Config;
use crate::metrics::{self, EvalRecord, MetricError, ScorerPlugin, Similarity, SubprocessScorer, DENSE_THRESHOLDS};
use crate::pipeline::Captioner;
use crate::types::{region_spec_from_value, Caption, ImageSize, PatchGrid, RegionKind, RegionSpec};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("dataset {0} has no valid samples")]
    Empty(PathBuf),
    #[error("record {id}: {reason}")]
    Record { id: String, reason: String },
    #[error("unknown task `{0}` (expected trace, dense, region-set or image)")]
    UnknownTask(String),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("evaluation config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Trace,
    Dense,
    RegionSet,
    Image,
}

impl Task {
    pub fn region_kind(self) -> RegionKind {
        match self {
            Task::Trace => RegionKind::Trace,
            Task::Dense => RegionKind::Box,
            Task::RegionSet => RegionKind::BoxSet,
            Task::Image => RegionKind::Image,
        }
    }
}

impl FromStr for Task {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trace" => Ok(Task::Trace),
            "dense" => Ok(Task::Dense),
            "region-set" | "region_set" => Ok(Task::RegionSet),
            "image" => Ok(Task::Image),
            other => Err(DatasetError::UnknownTask(other.to_string())),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Trace => "trace",
            Task::Dense => "dense",
            Task::RegionSet => "region-set",
            Task::Image => "image",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub id: String,
    pub image: String,
    pub region: RegionSpec,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedRecord {
    /// 1-based line number.
    pub line: usize,
    pub id: Option<String>,
    pub reason: String,
}

/// Validates one JSONL line against the task schema.
pub fn parse_sample(task: Task, line: &str) -> Result<TaskSample, (Option<String>, String)> {
    let value: Value = serde_json::from_str(line).map_err(|e| (None, format!("invalid JSON: {e}")))?;
    let obj = value.as_object().ok_or((None, "record is not a JSON object".to_string()))?;
    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err((None, "missing or empty `id`".into())),
    };
    let fail = |reason: String| (Some(id.clone()), reason);
    if let Some(t) = obj.get("task") {
        let named = t.as_str().ok_or_else(|| fail("`task` is not a string".into()))?;
        if named.parse::<Task>().ok() != Some(task) {
            return Err(fail(format!("record is for task `{named}`, loading `{task}`")));
        }
    }
    let image = match obj.get("image") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        _ => return Err(fail("missing or empty `image`".into())),
    };
    let region = region_spec_from_value(obj.get("region").cloned().unwrap_or(Value::Null))
        .map_err(|e| fail(format!("region: {e}")))?;
    if region.kind() != task.region_kind() {
        return Err(fail(format!("region kind `{}` does not match task `{task}`", region.kind())));
    }
    let references: Vec<String> = match obj.get("references") {
        Some(Value::Array(a)) => a
            .iter()
            .map(|r| r.as_str().map(str::to_string).ok_or_else(|| fail("references must be strings".into())))
            .collect::<Result<_, _>>()?,
        _ => return Err(fail("missing `references` array".into())),
    };
    if references.is_empty() || references.iter().all(|r| r.trim().is_empty()) {
        return Err(fail("needs at least one nonempty reference".into()));
    }
    Ok(TaskSample { id, image, region, references })
}

/// Streaming reader: yields validated samples or the reason a line was skipped.
pub struct SampleReader<R> {
    task: Task,
    lines: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> SampleReader<R> {
    pub fn new(task: Task, reader: R) -> Self {
        Self { task, lines: reader.lines(), line_no: 0 }
    }
}

impl<R: BufRead> Iterator for SampleReader<R> {
    type Item = Result<TaskSample, SkippedRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(SkippedRecord { line: self.line_no, id: None, reason: e.to_string() })),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(
                parse_sample(self.task, &line)
                    .map_err(|(id, reason)| SkippedRecord { line: self.line_no, id, reason }),
            );
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    /// Stem of the dataset file.
    pub id: String,
    /// Directory that relative image paths resolve against.
    pub base_dir: PathBuf,
    pub samples: Vec<TaskSample>,
    pub skipped: Vec<SkippedRecord>,
}

impl Dataset {
    pub fn resolve_image(&self, image: &str) -> PathBuf {
        let p = Path::new(image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn distinct_images(&self) -> usize {
        let mut seen: Vec<&str> = self.samples.iter().map(|s| s.image.as_str()).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// Reads a task dataset, skipping and counting malformed records.
pub fn load_dataset(task: Task, path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for item in SampleReader::new(task, BufReader::new(file)) {
        match item {
            Ok(s) => samples.push(s),
            Err(skip) => {
                log::warn!("{}:{}: skipped record: {}", path.display(), skip.line, skip.reason);
                skipped.push(skip);
            }
        }
    }
    if samples.is_empty() {
        return Err(DatasetError::Empty(path.to_path_buf()));
    }
    Ok(Dataset {
        task,
        id: path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned()),
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        samples,
        skipped,
    })
}

/// Writes samples in the task JSONL schema.
pub fn write_samples(task: Task, samples: &[TaskSample], mut w: impl Write) -> std::io::Result<()> {
    for s in samples {
        let row = json!({"id": s.id, "image": s.image, "task": task.to_string(), "region": s.region, "references": s.references});
        writeln!(w, "{row}")?;
    }
    Ok(())
}

/// Wraps a backbone and counts `encode_image` calls.
pub struct CountingBackbone {
    inner: Arc<dyn Backbone>,
    calls: AtomicUsize,
}

impl CountingBackbone {
    pub fn new(inner: Arc<dyn Backbone>) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn encode_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backbone for CountingBackbone {
    fn info(&self) -> &AdapterInfo {
        self.inner.info()
    }

    fn encode_image(&self, image: &RgbImage) -> Result<PatchGrid, BackboneError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.encode_image(image)
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>, BackboneError> {
        self.inner.encode_text(text)
    }
}

pub type EncodedImage = Arc<(PatchGrid, ImageSize)>;
type Slot = Arc<OnceLock<Result<EncodedImage, String>>>;

/// Per-image grid cache. Concurrent requests for the same image wait on one
/// encode; failures are cached too so a bad image is decoded once.
pub struct GridCache {
    backbone: Arc<dyn Backbone>,
    slots: Mutex<HashMap<PathBuf, Slot>>,
}

impl GridCache {
    pub fn new(backbone: Arc<dyn Backbone>) -> Self {
        Self { backbone, slots: Mutex::new(HashMap::new()) }
    }

    pub fn get(&self, path: &Path) -> Result<EncodedImage, String> {
        let slot = self.slots.lock().expect("grid cache lock").entry(path.to_path_buf()).or_default().clone();
        slot.get_or_init(|| {
            let image = open_image(path).map_err(|e| format!("image {}: {e}", path.display()))?;
            let grid = self.backbone.encode_image(&image).map_err(|e| e.to_string())?;
            Ok(Arc::new((grid, ImageSize::new(image.width(), image.height()))))
        })
        .clone()
    }
}

/// Produces a caption for one sample from its encoded image.
pub trait RegionCaptioner: Send + Sync {
    fn caption(&self, grid: &PatchGrid, image: ImageSize, sample: &TaskSample) -> Result<Caption, String>;
}

impl RegionCaptioner for Captioner {
    fn caption(&self, grid: &PatchGrid, image: ImageSize, sample: &TaskSample) -> Result<Caption, String> {
        self.caption_grid(grid, image, &sample.region).map(|r| r.caption).map_err(|e| e.to_string())
    }
}

/// Test stub that answers with the sample's first reference.
pub struct EchoCaptioner;

impl RegionCaptioner for EchoCaptioner {
    fn caption(&self, _: &PatchGrid, _: ImageSize, sample: &TaskSample) -> Result<Caption, String> {
        Ok(Caption { text: sample.references[0].clone(), token_ids: Vec::new(), score: None })
    }
}

/// Per-box similarity used by the dense mAP.
pub enum DenseSimilarity {
    RougeL,
    Plugin(Arc<dyn ScorerPlugin>),
}

pub struct MetricSet {
    pub dense: DenseSimilarity,
    /// Extra corpus metrics reported under the plugin name.
    pub plugins: Vec<Arc<dyn ScorerPlugin>>,
}

impl Default for MetricSet {
    fn default() -> Self {
        Self { dense: DenseSimilarity::RougeL, plugins: Vec::new() }
    }
}

impl MetricSet {
    /// Builds plugins from `metrics.plugin.*` and resolves the dense-mAP
    /// similarity named by `eval.dense_similarity`.
    pub fn from_config(cfg: &Config) -> Result<Self, EvalError> {
        let mut plugins: Vec<Arc<dyn ScorerPlugin>> = Vec::new();
        for (name, cmd) in &cfg.plugins {
            plugins.push(Arc::new(SubprocessScorer::new(name.clone(), cmd).map_err(|e| EvalError::Config(e.to_string()))?));
        }
        let wanted = cfg.eval.dense_similarity.as_str();
        let dense = if wanted == "rouge_l" {
            DenseSimilarity::RougeL
        } else if let Some(p) = plugins.iter().find(|p| p.name() == wanted) {
            DenseSimilarity::Plugin(p.clone())
        } else {
            log::warn!(
                "dense mAP similarity `{wanted}` has no configured plugin (set metrics.plugin.{wanted}); \
                 falling back to native ROUGE-L, so dense mAP is not comparable to METEOR-based numbers"
            );
            DenseSimilarity::RougeL
        };
        Ok(Self { dense, plugins })
    }
}

pub struct RunOptions {
    pub jobs: usize,
    pub metrics: MetricSet,
    /// Written into the report so the run can be repeated.
    pub config_snapshot: BTreeMap<String, Value>,
    /// Per-sample JSONL dump.
    pub dump_path: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1, metrics: MetricSet::default(), config_snapshot: BTreeMap::new(), dump_path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleResult {
    pub id: String,
    pub image: String,
    pub region: RegionSpec,
    pub candidate: String,
    pub references: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: Task,
    pub dataset: String,
    pub n_samples: usize,
    pub n_skipped: usize,
    pub n_failed: usize,
    pub metrics: BTreeMap<String, f64>,
    pub dump_path: Option<PathBuf>,
    pub config: BTreeMap<String, Value>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "task {}  dataset {}  samples {}  skipped {}  failed {}\n",
            self.task, self.dataset, self.n_samples, self.n_skipped, self.n_failed
        );
        let width = self.metrics.keys().map(String::len).max().unwrap_or(6).max(6);
        out += &format!("{:<width$}  {:>10}\n", "metric", "value");
        for (k, v) in &self.metrics {
            out += &format!("{k:<width$}  {v:>10.4}\n");
        }
        out
    }

    /// Writes `path` as JSON and the table next to it with a `.txt` extension.
    pub fn write(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n")?;
        std::fs::write(path.with_extension("txt"), self.table())
    }
}

/// Captions every sample and scores the results.
///
/// Samples run on a pool of `jobs` workers; results are collected in dataset
/// order, so the report does not depend on scheduling. A sample whose image
/// or decode fails is scored with an empty caption.
pub fn run_task(
    dataset: &Dataset,
    backbone: Arc<dyn Backbone>,
    captioner: &dyn RegionCaptioner,
    opts: &RunOptions,
) -> Result<(EvalReport, Vec<SampleResult>), EvalError> {
    if dataset.samples.is_empty() {
        return Err(DatasetError::Empty(dataset.base_dir.join(&dataset.id)).into());
    }
    let cache = GridCache::new(backbone);
    let run_one = |s: &TaskSample| {
        let outcome = cache
            .get(&dataset.resolve_image(&s.image))
            .and_then(|enc| captioner.caption(&enc.0, enc.1, s));
        let (candidate, error) = match outcome {
            Ok(c) => (c.text, None),
            Err(e) => {
                log::warn!("sample {}: {e}", s.id);
                (String::new(), Some(e))
            }
        };
        SampleResult {
            id: s.id.clone(),
            image: s.image.clone(),
            region: s.region.clone(),
            candidate,
            references: s.references.clone(),
            error,
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| EvalError::Config(e.to_string()))?;
    let results: Vec<SampleResult> = pool.install(|| dataset.samples.par_iter().map(run_one).collect());

    let records: Vec<EvalRecord> =
        results.iter().map(|r| EvalRecord::new(r.id.clone(), r.candidate.clone(), r.references.clone())).collect();
    let mut table = BTreeMap::new();
    table.insert("CIDEr-D".to_string(), metrics::cider_d(&records)?.corpus);
    table.insert("BLEU@4".to_string(), metrics::bleu4(&records)?);
    table.insert("ROUGE-L".to_string(), metrics::rouge_l(&records)?.corpus);
    for p in &opts.metrics.plugins {
        table.insert(p.name().to_string(), p.score(&records)?.corpus);
    }
    if dataset.task == Task::Dense {
        let sim = match &opts.metrics.dense {
            DenseSimilarity::RougeL => Similarity::RougeL,
            DenseSimilarity::Plugin(p) => Similarity::Plugin(p.as_ref()),
        };
        table.insert("mAP".to_string(), metrics::dense_map(&records, sim, &DENSE_THRESHOLDS)?);
    }

    if let Some(path) = &opts.dump_path {
        let mut w = std::io::BufWriter::new(File::create(path)?);
        for r in &results {
            writeln!(w, "{}", serde_json::to_string(r).expect("row serializes"))?;
        }
        w.flush()?;
    }
    let report = EvalReport {
        task: dataset.task,
        dataset: dataset.id.clone(),
        n_samples: results.len(),
        n_skipped: dataset.skipped.len(),
        n_failed: results.iter().filter(|r| r.error.is_some()).count(),
        metrics: table,
        dump_path: opts.dump_path.clone(),
        config: opts.config_snapshot.clone(),
    };
    Ok((report, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_round_trip() {
        for t in [Task::Trace, Task::Dense, Task::RegionSet, Task::Image] {
            assert_eq!(t.to_string().parse::<Task>().unwrap(), t);
        }
        assert!("caption".parse::<Task>().is_err());
    }

    #[test]
    fn parse_sample_checks_kind_and_references() {
        let ok = r#"{"id":"a","image":"x.png","region":{"kind":"box","box":[0,0,4,4]},"references":["a cat"]}"#;
        assert_eq!(parse_sample(Task::Dense, ok).unwrap().id, "a");
        assert!(parse_sample(Task::Image, ok).is_err());
        let no_refs = r#"{"id":"a","image":"x.png","region":{"kind":"image"},"references":[]}"#;
        assert_eq!(parse_sample(Task::Image, no_refs).unwrap_err().0.as_deref(), Some("a"));
        let wrong_task = r#"{"id":"a","task":"dense","image":"x.png","region":{"kind":"image"},"references":["r"]}"#;
        assert!(parse_sample(Task::Image, wrong_task).is_err());
    }
}
