//! Metrics (average recall, F1), the ablation comparison suite, and the
//! batch-1 latency benchmark.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{BargeInLabel, CorpusManifest, Split};
use crate::fusion::FusionModel;
use crate::{Error, Result};

/// Macro-averaged recall over both classes and F1 of the true-barge-in
/// class, both scaled to [0, 100].
pub fn metrics(predictions: &[BargeInLabel], truths: &[BargeInLabel]) -> Result<(f64, f64)> {
    if predictions.len() != truths.len() {
        return Err(Error::Validation(format!(
            "prediction/truth length mismatch: {} vs {}",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Validation("metrics over empty set".into()));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    let mut tn = 0.0;
    for (p, t) in predictions.iter().zip(truths.iter()) {
        match (p, t) {
            (BargeInLabel::TrueBargeIn, BargeInLabel::TrueBargeIn) => tp += 1.0,
            (BargeInLabel::TrueBargeIn, BargeInLabel::FalseBargeIn) => fp += 1.0,
            (BargeInLabel::FalseBargeIn, BargeInLabel::TrueBargeIn) => fn_ += 1.0,
            (BargeInLabel::FalseBargeIn, BargeInLabel::FalseBargeIn) => tn += 1.0,
        }
    }
    if tp + fn_ == 0.0 || tn + fp == 0.0 {
        return Err(Error::Validation(
            "a class is absent from truths; per-class recall undefined".into(),
        ));
    }
    let recall_true = tp / (tp + fn_);
    let recall_false = tn / (tn + fp);
    let avg_recall = 100.0 * (recall_true + recall_false) / 2.0;
    let f1 = if tp == 0.0 {
        0.0
    } else {
        let precision = tp / (tp + fp);
        100.0 * 2.0 * precision * recall_true / (precision + recall_true)
    };
    Ok((avg_recall, f1))
}

pub fn accuracy(predictions: &[BargeInLabel], truths: &[BargeInLabel]) -> f64 {
    let hits = predictions
        .iter()
        .zip(truths.iter())
        .filter(|(p, t)| p == t)
        .count();
    hits as f64 / truths.len() as f64
}

/// Classify every turn in a split and score it.
pub fn evaluate_split(
    model: &FusionModel,
    corpus: &CorpusManifest,
    split: Split,
) -> Result<EvalScores> {
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for turn in corpus.split(split) {
        let probs = model.forward(turn)?;
        preds.push(if probs[0] >= probs[1] {
            BargeInLabel::TrueBargeIn
        } else {
            BargeInLabel::FalseBargeIn
        });
        truths.push(turn.label);
    }
    let (avg_recall, f1) = metrics(&preds, &truths)?;
    Ok(EvalScores {
        avg_recall,
        f1,
        accuracy: 100.0 * accuracy(&preds, &truths),
        count: truths.len(),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalScores {
    pub avg_recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencySample {
    pub utterance_id: String,
    pub run: usize,
    pub ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencySummary {
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Median milliseconds spent per branch (speech, prompt, context).
    pub branch_median_ms: [f64; 3],
    pub samples: Vec<LatencySample>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // Nearest-rank on a sorted slice.
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile(values, 0.5)
}

/// Wall-clock of the full forward path at batch size 1 on the calling
/// thread. `threads` must be 1; the numbers are meaningless otherwise.
pub fn benchmark_latency(
    model: &FusionModel,
    corpus: &CorpusManifest,
    split: Split,
    warmup: usize,
    runs_per_utterance: usize,
    threads: usize,
) -> Result<LatencySummary> {
    if threads != 1 {
        return Err(Error::Config(format!(
            "latency benchmark requires threads = 1, got {threads}"
        )));
    }
    let turns: Vec<_> = corpus.split(split).collect();
    if turns.is_empty() {
        return Err(Error::Validation(format!("split {split} is empty")));
    }
    for i in 0..warmup {
        let turn = turns[i % turns.len()];
        let _ = model.forward(turn)?;
    }
    let mut samples = Vec::new();
    let mut per_utt_medians = Vec::new();
    let mut branch_ms: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for turn in &turns {
        let mut runs = Vec::with_capacity(runs_per_utterance);
        for run in 0..runs_per_utterance {
            let start = Instant::now();
            let timings = model.forward_timed(turn)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            runs.push(ms);
            samples.push(LatencySample {
                utterance_id: turn.id.clone(),
                run,
                ms,
            });
            for b in 0..3 {
                branch_ms[b].push(timings.branch_ms[b]);
            }
        }
        per_utt_medians.push(median(&mut runs));
    }
    per_utt_medians.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut all: Vec<f64> = samples.iter().map(|s| s.ms).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(LatencySummary {
        median_ms: percentile(&per_utt_medians, 0.5),
        p95_ms: percentile(&all, 0.95),
        branch_median_ms: [
            median(&mut branch_ms[0]),
            median(&mut branch_ms[1]),
            median(&mut branch_ms[2]),
        ],
        samples,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub inputs: String,
    pub avg_recall: f64,
    pub f1: f64,
    pub latency_ms_median: f64,
    pub latency_ms_p95: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Machine-readable CSV, one decimal place to match the table style.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,inputs,avg_recall,f1,latency_ms_median,latency_ms_p95\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.1},{:.1},{:.1},{:.1}\n",
                r.model, r.inputs, r.avg_recall, r.f1, r.latency_ms_median, r.latency_ms_p95
            ));
        }
        out
    }

    /// Human-readable fixed-width table.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<28} {:<24} {:>7} {:>7} {:>12} {:>12}\n",
            "Model", "Input", "Recall", "F1", "Latency(ms)", "p95(ms)"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:<24} {:>7.1} {:>7.1} {:>12.1} {:>12.1}\n",
                r.model, r.inputs, r.avg_recall, r.f1, r.latency_ms_median, r.latency_ms_p95
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("report.csv"), self.to_csv())
            .map_err(|e| Error::Io(format!("write report.csv: {e}")))?;
        std::fs::write(dir.join("report.txt"), self.to_text())
            .map_err(|e| Error::Io(format!("write report.txt: {e}")))?;
        Ok(())
    }
}

pub fn write_latency_samples(samples: &[LatencySample], path: &Path) -> Result<()> {
    let mut out = String::from("utterance_id,run,ms\n");
    for s in samples {
        out.push_str(&format!("{},{},{:.6}\n", s.utterance_id, s.run, s.ms));
    }
    std::fs::write(path, out).map_err(|e| Error::Io(format!("write {}: {e}", path.display())))
}
