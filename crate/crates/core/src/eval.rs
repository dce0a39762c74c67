//! k-bin tolerance accuracy, evaluation over a test split, and two-report
//! comparison.
//!
//! A prediction hits at tolerance `k` when `|a − â| ≤ k` in bin-index space.
//! Top-1 is `k = 0`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::action::{encode, BinVector, CodecError, NormalizationStats, ACTION_DIM, DIMENSION_NAMES};
use crate::dataset::{Observation, Trajectory};
use crate::policy::{PolicyError, PolicyModel};

/// Tolerances reported by default: Top-1 and 5-bin.
pub const DEFAULT_KS: [u32; 2] = [0, 5];

const BATCH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no records to score")]
    NoRecords,
    #[error("empty test split")]
    EmptyTestSplit,
    #[error("no tolerances requested")]
    NoTolerances,
    #[error("reports use different tolerances: {0:?} vs {1:?}")]
    MismatchedKs(Vec<u32>, Vec<u32>),
    #[error("no instructions for trajectory {0}")]
    MissingInstructions(String),
    #[error("predictor returned {got} predictions for {expected} queries")]
    PredictionCount { expected: usize, got: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub trajectory_id: String,
    pub step: usize,
    pub instruction: String,
    pub truth: BinVector,
    pub pred: BinVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbinAccuracy {
    pub k: u32,
    /// In `DIMENSION_NAMES` order.
    pub per_dimension: [f64; ACTION_DIM],
    pub pooled: f64,
}

pub fn kbin_accuracy(records: &[PredictionRecord], k: u32) -> Result<KbinAccuracy, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut hits = [0usize; ACTION_DIM];
    for r in records {
        for (d, h) in hits.iter_mut().enumerate() {
            if r.truth.0[d].abs_diff(r.pred.0[d]) as u32 <= k {
                *h += 1;
            }
        }
    }
    let n = records.len() as f64;
    Ok(KbinAccuracy {
        k,
        per_dimension: hits.map(|h| h as f64 / n),
        pooled: hits.iter().sum::<usize>() as f64 / (n * ACTION_DIM as f64),
    })
}

/// Anything that maps `(observation, instruction)` pairs to bins.
pub trait ActionPredictor {
    fn predict_bins(&self, queries: &[(&Observation, &str)]) -> Result<Vec<BinVector>, EvalError>;
}

impl ActionPredictor for PolicyModel {
    fn predict_bins(&self, queries: &[(&Observation, &str)]) -> Result<Vec<BinVector>, EvalError> {
        let batch = queries.iter().map(|(o, l)| self.assemble_query(o, l)).collect::<Result<Vec<_>, _>>()?;
        Ok(self.predict_batch(&batch)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    /// Scored scalar comparisons (7 per record).
    pub n: usize,
    pub records: usize,
    pub dimensions: Vec<String>,
    pub accuracy: Vec<KbinAccuracy>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

impl EvalReport {
    pub fn from_records(
        records: &[PredictionRecord],
        ks: &[u32],
        model: &str,
        dataset: &str,
    ) -> Result<Self, EvalError> {
        if ks.is_empty() {
            return Err(EvalError::NoTolerances);
        }
        let accuracy = ks.iter().map(|&k| kbin_accuracy(records, k)).collect::<Result<_, _>>()?;
        Ok(Self {
            model: model.to_string(),
            dataset: dataset.to_string(),
            n: records.len() * ACTION_DIM,
            records: records.len(),
            dimensions: DIMENSION_NAMES.iter().map(|s| s.to_string()).collect(),
            accuracy,
            provenance: serde_json::Value::Null,
        })
    }

    pub fn ks(&self) -> Vec<u32> {
        self.accuracy.iter().map(|a| a.k).collect()
    }

    pub fn get(&self, k: u32) -> Option<&KbinAccuracy> {
        self.accuracy.iter().find(|a| a.k == k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Percentages with two decimals, one row per tolerance.
    pub fn render_table(&self) -> String {
        let mut header = vec!["Metric".to_string(), "pooled".to_string()];
        header.extend(self.dimensions.iter().cloned());
        let mut rows = vec![header];
        for a in &self.accuracy {
            let mut row = vec![metric_label(a.k), pct(a.pooled)];
            row.extend(a.per_dimension.iter().map(|v| pct(*v)));
            rows.push(row);
        }
        let mut out = format!("model: {}  dataset: {}  N = {}\n", self.model, self.dataset, self.n);
        out.push_str(&align(&rows));
        out
    }
}

pub fn metric_label(k: u32) -> String {
    if k == 0 {
        "Top-1 Acc (%)".to_string()
    } else {
        format!("{k}-Bin Acc (%)")
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Left-align the first column, right-align the rest.
fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let mut line = String::new();
        for (c, cell) in r.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Predict every step of every test trajectory under each of its
/// instructions and score the requested tolerances.
pub fn evaluate(
    predictor: &dyn ActionPredictor,
    test: &[&Trajectory],
    stats: &NormalizationStats,
    instructions: &BTreeMap<String, Vec<String>>,
    ks: &[u32],
    tags: (&str, &str),
) -> Result<(EvalReport, Vec<PredictionRecord>), EvalError> {
    if test.is_empty() || test.iter().all(|t| t.is_empty()) {
        return Err(EvalError::EmptyTestSplit);
    }
    let mut pending: Vec<(&Trajectory, usize, &str)> = Vec::new();
    for t in test {
        let texts = instructions
            .get(&t.id)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| EvalError::MissingInstructions(t.id.clone()))?;
        for step in 0..t.len() {
            for text in texts {
                pending.push((t, step, text));
            }
        }
    }
    let mut records = Vec::with_capacity(pending.len());
    for chunk in pending.chunks(BATCH) {
        let queries: Vec<(&Observation, &str)> =
            chunk.iter().map(|(t, s, l)| (&t.frames[*s].observation, *l)).collect();
        let preds = predictor.predict_bins(&queries)?;
        if preds.len() != chunk.len() {
            return Err(EvalError::PredictionCount { expected: chunk.len(), got: preds.len() });
        }
        for ((t, step, text), pred) in chunk.iter().zip(preds) {
            records.push(PredictionRecord {
                trajectory_id: t.id.clone(),
                step: *step,
                instruction: text.to_string(),
                truth: encode(&t.frames[*step].action, stats),
                pred,
            });
        }
    }
    let report = EvalReport::from_records(&records, ks, tags.0, tags.1)?;
    Ok((report, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub k: u32,
    pub label: String,
    /// Pooled accuracy, in percent.
    pub a: f64,
    pub b: f64,
    /// `b − a`, percentage points.
    pub delta: f64,
    /// Model tag of the better row, or `"tie"`.
    pub better: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub metrics: Vec<MetricDelta>,
}

pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Comparison, EvalError> {
    let (ka, kb) = (a.ks(), b.ks());
    let mut sa = ka.clone();
    let mut sb = kb.clone();
    sa.sort_unstable();
    sb.sort_unstable();
    if sa != sb {
        return Err(EvalError::MismatchedKs(ka, kb));
    }
    let metrics = a
        .accuracy
        .iter()
        .map(|x| {
            let y = b.get(x.k).expect("same tolerances");
            let (pa, pb) = (100.0 * x.pooled, 100.0 * y.pooled);
            let better = if pb > pa {
                b.model.clone()
            } else if pa > pb {
                a.model.clone()
            } else {
                "tie".to_string()
            };
            MetricDelta { k: x.k, label: metric_label(x.k), a: pa, b: pb, delta: pb - pa, better }
        })
        .collect();
    Ok(Comparison { a: a.model.clone(), b: b.model.clone(), metrics })
}

impl Comparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes") + "\n"
    }

    /// Two method rows, a signed delta row, and a marker row.
    pub fn render_table(&self) -> String {
        let mut header = vec!["Methods".to_string()];
        header.extend(self.metrics.iter().map(|m| m.label.clone()));
        let mut ra = vec![self.a.clone()];
        let mut rb = vec![self.b.clone()];
        let mut rd = vec!["delta (b - a)".to_string()];
        let mut rw = vec!["better".to_string()];
        for m in &self.metrics {
            ra.push(format!("{:.2}", m.a));
            rb.push(format!("{:.2}", m.b));
            rd.push(format!("{:+.2}", m.delta));
            rw.push(m.better.clone());
        }
        align(&[header, ra, rb, rd, rw])
    }
}
