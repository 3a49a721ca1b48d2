use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{EvalRecord, MetricError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginScores {
    pub corpus: f64,
    pub per_record: Vec<f64>,
}

/// External metric such as METEOR or SPICE.
pub trait ScorerPlugin: Send + Sync {
    fn name(&self) -> &str;
    /// One score per record, in record order.
    fn score(&self, records: &[EvalRecord]) -> Result<PluginScores, MetricError>;
}

/// Runs a scorer as a child process speaking line-delimited JSON: one
/// `{id, candidate, references}` request per line on stdin, one
/// `{id, score}` response per line on stdout. The corpus score is the mean.
#[derive(Debug, Clone)]
pub struct SubprocessScorer {
    name: String,
    program: String,
    args: Vec<String>,
}

#[derive(Deserialize)]
struct Response {
    id: String,
    score: f64,
}

impl SubprocessScorer {
    /// `command` is split on whitespace; the first word is the program.
    pub fn new(name: impl Into<String>, command: &str) -> Result<Self, MetricError> {
        let name = name.into();
        let mut words = command.split_whitespace().map(str::to_string);
        let program = words
            .next()
            .ok_or_else(|| MetricError::Plugin { name: name.clone(), reason: "empty command".into() })?;
        Ok(Self { name, program, args: words.collect() })
    }

    fn fail(&self, reason: impl Into<String>) -> MetricError {
        MetricError::Plugin { name: self.name.clone(), reason: reason.into() }
    }
}

impl ScorerPlugin for SubprocessScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, records: &[EvalRecord]) -> Result<PluginScores, MetricError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| self.fail(format!("spawn {}: {e}", self.program)))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let payload: String = records
            .iter()
            .map(|r| json!({"id": r.id, "candidate": r.candidate, "references": r.references}).to_string() + "\n")
            .collect();
        // Write from a thread so a scorer that streams answers cannot deadlock on a full pipe.
        let writer = std::thread::spawn(move || stdin.write_all(payload.as_bytes()));
        let stdout = child.stdout.take().expect("piped stdout");
        let mut per_record = Vec::with_capacity(records.len());
        for (rec, line) in records.iter().zip(BufReader::new(stdout).lines()) {
            let line = line.map_err(|e| self.fail(e.to_string()))?;
            let resp: Response =
                serde_json::from_str(&line).map_err(|e| self.fail(format!("bad response {line:?}: {e}")))?;
            if resp.id != rec.id {
                return Err(self.fail(format!("response id {} does not match request {}", resp.id, rec.id)));
            }
            if !resp.score.is_finite() {
                return Err(self.fail(format!("non-finite score for {}", rec.id)));
            }
            per_record.push(resp.score);
        }
        let _ = writer.join();
        let status = child.wait().map_err(|e| self.fail(e.to_string()))?;
        if per_record.len() != records.len() {
            return Err(self.fail(format!("{} responses for {} records ({status})", per_record.len(), records.len())));
        }
        let corpus = if per_record.is_empty() { 0.0 } else { per_record.iter().sum::<f64>() / per_record.len() as f64 };
        Ok(PluginScores { corpus, per_record })
    }
}
