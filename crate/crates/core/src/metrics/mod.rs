//! Native caption metrics, the dense-captioning mAP and the external scorer seam.
//!
//! Every native metric tokenizes through [`tokenize`].

mod plugin;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use plugin::{PluginScores, ScorerPlugin, SubprocessScorer};

/// Similarity thresholds of the dense mAP.
pub const DENSE_THRESHOLDS: [f64; 6] = [0.0, 0.05, 0.10, 0.15, 0.20, 0.25];

const CIDER_SIGMA: f64 = 6.0;
const ROUGE_BETA: f64 = 1.2;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no records to score")]
    Empty,
    #[error("record {0} has no references")]
    NoReferences(String),
    #[error("scorer plugin {name}: {reason}")]
    Plugin { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

impl EvalRecord {
    pub fn new(id: impl Into<String>, candidate: impl Into<String>, references: Vec<String>) -> Self {
        Self { id: id.into(), candidate: candidate.into(), references }
    }
}

fn check(records: &[EvalRecord]) -> Result<(), MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    match records.iter().find(|r| r.references.is_empty()) {
        Some(r) => Err(MetricError::NoReferences(r.id.clone())),
        None => Ok(()),
    }
}

/// Lowercases, replaces every non-alphanumeric character with a space and
/// splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

type Ngram = Vec<String>;

/// Counts of all n-grams of order 1..=`max_n`.
fn ngram_counts(tokens: &[String], max_n: usize) -> BTreeMap<Ngram, usize> {
    let mut counts = BTreeMap::new();
    for n in 1..=max_n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub corpus: f64,
    pub per_record: Vec<f64>,
}

struct TfIdf {
    vec: [BTreeMap<Ngram, f64>; 4],
    norm: [f64; 4],
    /// Bigram count, used by the length penalty.
    length: f64,
}

fn tfidf(counts: &BTreeMap<Ngram, usize>, df: &BTreeMap<Ngram, f64>, log_n: f64) -> TfIdf {
    let mut out = TfIdf { vec: Default::default(), norm: [0.0; 4], length: 0.0 };
    for (g, &tf) in counts {
        let n = g.len() - 1;
        let d = df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
        let w = tf as f64 * (log_n - d);
        out.vec[n].insert(g.clone(), w);
        out.norm[n] += w * w;
        if n == 1 {
            out.length += tf as f64;
        }
    }
    for v in &mut out.norm {
        *v = v.sqrt();
    }
    out
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> [f64; 4] {
    let delta = h.length - r.length;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut val = [0.0; 4];
    for n in 0..4 {
        for (g, &hv) in &h.vec[n] {
            if let Some(&rv) = r.vec[n].get(g) {
                val[n] += hv.min(rv) * rv;
            }
        }
        if h.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val[n] /= h.norm[n] * r.norm[n];
        }
        val[n] *= penalty;
    }
    val
}

/// CIDEr-D with document frequencies taken over the records' references.
pub fn cider_d(records: &[EvalRecord]) -> Result<CorpusScore, MetricError> {
    check(records)?;
    let refs: Vec<Vec<BTreeMap<Ngram, usize>>> = records
        .iter()
        .map(|r| r.references.iter().map(|s| ngram_counts(&tokenize(s), 4)).collect())
        .collect();
    let mut df: BTreeMap<Ngram, f64> = BTreeMap::new();
    for rec in &refs {
        let mut seen: Vec<&Ngram> = rec.iter().flat_map(|c| c.keys()).collect();
        seen.sort();
        seen.dedup();
        for g in seen {
            *df.entry(g.clone()).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (records.len() as f64).ln();
    let per_record: Vec<f64> = records
        .iter()
        .zip(&refs)
        .map(|(rec, rc)| {
            let h = tfidf(&ngram_counts(&tokenize(&rec.candidate), 4), &df, log_n);
            let mut total = [0.0; 4];
            for c in rc {
                let s = cider_sim(&h, &tfidf(c, &df, log_n));
                for n in 0..4 {
                    total[n] += s[n];
                }
            }
            total.iter().sum::<f64>() / 4.0 / rc.len() as f64 * 10.0
        })
        .collect();
    Ok(CorpusScore { corpus: mean(&per_record), per_record })
}

/// Corpus BLEU-4 with clipped counts, closest reference length and the
/// brevity penalty. Unsmoothed: zero matches at any order gives 0.
pub fn bleu4(records: &[EvalRecord]) -> Result<f64, MetricError> {
    check(records)?;
    let mut correct = [0usize; 4];
    let mut guess = [0usize; 4];
    let (mut test_len, mut ref_len) = (0usize, 0usize);
    for rec in records {
        let cand = tokenize(&rec.candidate);
        let refs: Vec<Vec<String>> = rec.references.iter().map(|r| tokenize(r)).collect();
        let mut max_ref: BTreeMap<Ngram, usize> = BTreeMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, 4) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        for (g, c) in ngram_counts(&cand, 4) {
            correct[g.len() - 1] += c.min(max_ref.get(&g).copied().unwrap_or(0));
        }
        for (n, slot) in guess.iter_mut().enumerate() {
            *slot += (cand.len() + 1).saturating_sub(n + 1);
        }
        test_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("references checked nonempty");
    }
    if (0..4).any(|n| correct[n] == 0 || guess[n] == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|n| (correct[n] as f64 / guess[n] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if test_len < ref_len { (1.0 - ref_len as f64 / test_len as f64).exp() } else { 1.0 };
    Ok(bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L of one candidate: LCS F-measure from the best precision and the
/// best recall over references, β = 1.2.
pub fn rouge_l_single(candidate: &str, references: &[String]) -> f64 {
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in references {
        let rt = tokenize(reference);
        if rt.is_empty() {
            continue;
        }
        let l = lcs(&cand, &rt) as f64;
        p = p.max(l / cand.len() as f64);
        r = r.max(l / rt.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(records: &[EvalRecord]) -> Result<CorpusScore, MetricError> {
    check(records)?;
    let per_record: Vec<f64> = records.iter().map(|r| rouge_l_single(&r.candidate, &r.references)).collect();
    Ok(CorpusScore { corpus: mean(&per_record), per_record })
}

/// Per-box caption similarity used by the dense mAP.
pub enum Similarity<'a> {
    RougeL,
    Plugin(&'a dyn ScorerPlugin),
}

/// Mean over thresholds of the fraction of boxes whose similarity reaches
/// the threshold. Localization is exact because boxes are given.
pub fn dense_map_from_scores(scores: &[f64], thresholds: &[f64]) -> f64 {
    if scores.is_empty() || thresholds.is_empty() {
        return 0.0;
    }
    let ap: f64 = thresholds
        .iter()
        .map(|&t| scores.iter().filter(|&&s| s >= t).count() as f64 / scores.len() as f64)
        .sum();
    ap / thresholds.len() as f64
}

pub fn dense_map(records: &[EvalRecord], similarity: Similarity<'_>, thresholds: &[f64]) -> Result<f64, MetricError> {
    check(records)?;
    let scores = match similarity {
        Similarity::RougeL => rouge_l(records)?.per_record,
        Similarity::Plugin(p) => p.score(records)?.per_record,
    };
    Ok(dense_map_from_scores(&scores, thresholds))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
