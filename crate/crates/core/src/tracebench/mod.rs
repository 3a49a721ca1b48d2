//! Trace-captioning benchmark construction from localized narratives.
//!
//! Each narrative is split into sentences, each sentence keeps the mouse
//! points recorded while it was spoken, the first and last 15% of those
//! points are trimmed, and the sentence is rewritten into a caption by an
//! LLM, which may also reject it.

pub mod llm;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use llm::{build_prompt, FixtureLlm, HttpLlm, LlmClient, LlmError, TokenBucket, PROMPT_TEMPLATE};

use crate::types::RegionSpec;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid narrative {image_id}: {reason}")]
    InvalidRecord { image_id: String, reason: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance: String,
    pub start_time: f64,
    pub end_time: f64,
}

/// Subset of a Localized Narratives JSONL record. Trace coordinates are
/// relative to the image (0..1); `width`/`height` convert them to pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrativeRecord {
    pub image_id: String,
    #[serde(default)]
    pub caption: String,
    #[serde(default)]
    pub timed_caption: Vec<Utterance>,
    #[serde(default)]
    pub traces: Vec<Vec<TracePoint>>,
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
}

impl NarrativeRecord {
    pub fn validate(&self) -> Result<(), TraceError> {
        let fail = |reason: String| Err(TraceError::InvalidRecord { image_id: self.image_id.clone(), reason });
        let mut last = f64::NEG_INFINITY;
        for p in self.traces.iter().flatten() {
            if !(p.x.is_finite() && p.y.is_finite() && p.t.is_finite()) {
                return fail(format!("non-finite trace point {p:?}"));
            }
            if p.t < last {
                return fail(format!("timestamps decrease at t = {}", p.t));
            }
            last = p.t;
        }
        for u in &self.timed_caption {
            if !(u.start_time.is_finite() && u.end_time.is_finite()) || u.end_time < u.start_time {
                return fail(format!("bad utterance window for {:?}", u.utterance));
            }
        }
        Ok(())
    }

    fn points(&self) -> impl Iterator<Item = &TracePoint> {
        self.traces.iter().flatten()
    }
}

/// A sentence and the time window in which it was spoken.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sentence {
    pub text: String,
    pub start: f64,
    pub end: f64,
}

fn ends_sentence(word: &str) -> bool {
    word.trim_end_matches(['"', '\'', ')']).ends_with(['.', '!', '?'])
}

/// Splits plain text after `.`, `!` or `?` followed by whitespace or the end.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for word in text.split_whitespace() {
        cur.push(word);
        if ends_sentence(word) {
            out.push(cur.join(" "));
            cur.clear();
        }
    }
    if !cur.is_empty() {
        out.push(cur.join(" "));
    }
    out
}

/// Sentences with time windows. Utterance timings are used when present;
/// otherwise the caption is split on punctuation and the trace's time span
/// is divided in proportion to sentence length.
pub fn sentences(record: &NarrativeRecord) -> Vec<Sentence> {
    if !record.timed_caption.is_empty() {
        let mut out = Vec::new();
        let mut words: Vec<&str> = Vec::new();
        let mut start = 0.0;
        for u in &record.timed_caption {
            let text = u.utterance.trim();
            if text.is_empty() {
                continue;
            }
            if words.is_empty() {
                start = u.start_time;
            }
            words.push(text);
            if ends_sentence(text) {
                out.push(Sentence { text: words.join(" "), start, end: u.end_time });
                words.clear();
            }
        }
        if !words.is_empty() {
            let end = record.timed_caption.last().map_or(start, |u| u.end_time);
            out.push(Sentence { text: words.join(" "), start, end });
        }
        return out;
    }
    let parts = split_sentences(&record.caption);
    let (t0, t1) = record
        .points()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.t), hi.max(p.t)));
    if parts.is_empty() || !t0.is_finite() {
        return parts.into_iter().map(|text| Sentence { text, start: 0.0, end: -1.0 }).collect();
    }
    let total: usize = parts.iter().map(|p| p.chars().count()).sum();
    let mut acc = 0usize;
    let n = parts.len();
    parts
        .into_iter()
        .enumerate()
        .map(|(i, text)| {
            let start = t0 + (t1 - t0) * acc as f64 / total as f64;
            acc += text.chars().count();
            let end = if i + 1 == n { t1 } else { t0 + (t1 - t0) * acc as f64 / total as f64 };
            Sentence { text, start, end }
        })
        .collect()
}

/// One sub-trace per sentence holding exactly the points with
/// `start <= t <= end`, in recording order.
pub fn split_by_sentence(record: &NarrativeRecord) -> Vec<(Sentence, Vec<TracePoint>)> {
    sentences(record)
        .into_iter()
        .map(|s| {
            let pts = record.points().filter(|p| p.t >= s.start && p.t <= s.end).copied().collect();
            (s, pts)
        })
        .collect()
}

/// Points dropped from each end: `floor(0.15 L)`, in exact integer arithmetic.
pub fn trim_count(len: usize) -> usize {
    len * 15 / 100
}

/// Drops the first and last 15% of points; keeps the middle point if
/// nothing would remain.
pub fn trim_trace<T: Clone>(points: &[T]) -> Vec<T> {
    let k = trim_count(points.len());
    if points.len() > 2 * k {
        points[k..points.len() - k].to_vec()
    } else if points.is_empty() {
        Vec::new()
    } else {
        vec![points[points.len() / 2].clone()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rewrite {
    Caption(String),
    Invalid,
}

/// Reads the first `{...}` span; `<INVALID>` marks a rejected sentence.
pub fn parse_rewrite(output: &str) -> Result<Rewrite, LlmError> {
    let start = output.find('{').ok_or_else(|| LlmError::Unparseable(output.to_string()))?;
    let len = output[start + 1..].find('}').ok_or_else(|| LlmError::Unparseable(output.to_string()))?;
    let inner = output[start + 1..start + 1 + len].trim();
    match inner {
        "" => Err(LlmError::Unparseable(output.to_string())),
        s if s.eq_ignore_ascii_case("<INVALID>") => Ok(Rewrite::Invalid),
        s => Ok(Rewrite::Caption(s.to_string())),
    }
}

/// Sends the rewrite prompt, retrying failed or unparseable answers up to
/// `max_retries` extra times.
pub fn rewrite_caption(sentence: &str, llm: &dyn LlmClient, max_retries: usize) -> Result<Rewrite, LlmError> {
    let prompt = build_prompt(sentence);
    let mut last = LlmError::Unparseable(String::new());
    for attempt in 0..=max_retries {
        match llm.complete(&prompt).and_then(|out| parse_rewrite(&out)) {
            Ok(r) => return Ok(r),
            Err(e @ LlmError::MissingFixture(_)) => return Err(e),
            Err(e) => {
                log::debug!("rewrite attempt {} failed: {e}", attempt + 1);
                last = e;
            }
        }
    }
    Err(last)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SampleStatus {
    Valid,
    Invalid,
    DiscardedEmpty,
    Discarded { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSample {
    pub id: String,
    pub image_id: String,
    pub image: String,
    /// Trimmed points in pixels.
    pub points: Vec<[f64; 2]>,
    pub original: String,
    pub caption: Option<String>,
    #[serde(flatten)]
    pub status: SampleStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildStats {
    pub records: usize,
    pub invalid_records: usize,
    pub sentences: usize,
    pub valid: usize,
    pub invalid: usize,
    pub empty: usize,
    pub llm_failures: usize,
    /// Images that produced no valid sample.
    pub discarded_images: usize,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Image path template; `{id}` is replaced by the image id.
    pub image_template: String,
    pub max_retries: usize,
    /// Records processed concurrently.
    pub concurrency: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { image_template: "{id}.jpg".into(), max_retries: 2, concurrency: 4 }
    }
}

fn process_record(rec: &NarrativeRecord, llm: &dyn LlmClient, opts: &BuildOptions) -> Result<Vec<TraceSample>, TraceError> {
    rec.validate()?;
    let (w, h) = match (rec.width, rec.height) {
        (Some(w), Some(h)) if w > 0 && h > 0 => (w as f64, h as f64),
        _ => {
            return Err(TraceError::InvalidRecord {
                image_id: rec.image_id.clone(),
                reason: "width and height are required to convert trace coordinates to pixels".into(),
            })
        }
    };
    let image = opts.image_template.replace("{id}", &rec.image_id);
    Ok(split_by_sentence(rec)
        .into_iter()
        .enumerate()
        .map(|(i, (sentence, pts))| {
            let trimmed = trim_trace(&pts);
            let mut sample = TraceSample {
                id: format!("{}-{i}", rec.image_id),
                image_id: rec.image_id.clone(),
                image: image.clone(),
                points: trimmed.iter().map(|p| [p.x * w, p.y * h]).collect(),
                original: sentence.text.clone(),
                caption: None,
                status: SampleStatus::DiscardedEmpty,
            };
            if trimmed.is_empty() {
                return sample;
            }
            sample.status = match rewrite_caption(&sentence.text, llm, opts.max_retries) {
                Ok(Rewrite::Caption(c)) => {
                    sample.caption = Some(c);
                    SampleStatus::Valid
                }
                Ok(Rewrite::Invalid) => SampleStatus::Invalid,
                Err(e) => SampleStatus::Discarded { reason: e.to_string() },
            };
            sample
        })
        .collect())
}

/// Runs split, trim and rewrite over all records. Output order follows input
/// order regardless of concurrency.
pub fn build_benchmark(
    records: &[NarrativeRecord],
    llm: &dyn LlmClient,
    opts: &BuildOptions,
) -> (Vec<TraceSample>, BuildStats) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.concurrency.max(1)).build().expect("thread pool");
    let per_record: Vec<Result<Vec<TraceSample>, TraceError>> =
        pool.install(|| records.par_iter().map(|r| process_record(r, llm, opts)).collect());
    let mut stats = BuildStats { records: records.len(), ..Default::default() };
    let mut samples = Vec::new();
    for result in per_record {
        let Ok(rs) = result.inspect_err(|e| log::warn!("{e}")) else {
            stats.invalid_records += 1;
            stats.discarded_images += 1;
            continue;
        };
        stats.sentences += rs.len();
        let mut any_valid = false;
        for s in &rs {
            match &s.status {
                SampleStatus::Valid => {
                    stats.valid += 1;
                    any_valid = true;
                }
                SampleStatus::Invalid => stats.invalid += 1,
                SampleStatus::DiscardedEmpty => stats.empty += 1,
                SampleStatus::Discarded { .. } => stats.llm_failures += 1,
            }
        }
        if !any_valid {
            stats.discarded_images += 1;
        }
        samples.extend(rs);
    }
    (samples, stats)
}

/// Writes valid samples in the trace-task JSONL schema.
pub fn write_jsonl(samples: &[TraceSample], mut w: impl Write) -> std::io::Result<usize> {
    let mut n = 0;
    for s in samples.iter().filter(|s| s.status == SampleStatus::Valid) {
        let region = RegionSpec::Trace { points: s.points.clone() };
        let row = json!({
            "id": s.id,
            "image": s.image,
            "task": "trace",
            "region": region,
            "references": [s.caption.as_deref().unwrap_or_default()],
            "original": s.original,
        });
        writeln!(w, "{row}")?;
        n += 1;
    }
    Ok(n)
}

/// Reads Localized Narratives JSONL, skipping blank lines.
pub fn read_narratives(text: &str) -> Result<Vec<NarrativeRecord>, TraceError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TraceError::InvalidRecord {
                image_id: format!("line {}", i + 1),
                reason: e.to_string(),
            })
        })
        .collect()
}
