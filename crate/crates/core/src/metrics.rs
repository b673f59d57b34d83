//! Segmentation metrics and per-call cost accounting.

use std::io::Write;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{overlap_stats, BinaryMask};

/// Per-image scores. Empty-vs-empty cases count as perfect; an empty
/// prediction against non-empty ground truth has precision 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub name: String,
    pub intersection: u64,
    pub union: u64,
    pub pred_px: u64,
    pub gt_px: u64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
}

fn ratio_or(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

impl ImageScores {
    pub fn compute(name: impl Into<String>, pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        let s = overlap_stats(pred, gt)?;
        let both_empty = s.a == 0 && s.b == 0;
        Ok(Self {
            name: name.into(),
            intersection: s.intersection,
            union: s.union,
            pred_px: s.a,
            gt_px: s.b,
            iou: ratio_or(s.intersection, s.union, 1.0),
            precision: ratio_or(s.intersection, s.a, if both_empty { 1.0 } else { 0.0 }),
            recall: ratio_or(s.intersection, s.b, if both_empty { 1.0 } else { 0.0 }),
            dice: ratio_or(2 * s.intersection, s.a + s.b, 1.0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub giou: f64,
    pub ciou: f64,
    pub mpr: f64,
    pub mrec: f64,
    pub mdice: f64,
    pub per_image: Vec<ImageScores>,
}

pub struct ImagePair<'a> {
    pub name: String,
    pub pred: &'a BinaryMask,
    pub gt: &'a BinaryMask,
}

pub fn evaluate(pairs: &[ImagePair<'_>]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Validation("evaluation needs at least one image".into()));
    }
    let per_image = pairs
        .iter()
        .map(|p| ImageScores::compute(p.name.clone(), p.pred, p.gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(per_image))
}

pub fn summarize(per_image: Vec<ImageScores>) -> MetricReport {
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageScores) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let (si, su) = per_image
        .iter()
        .fold((0u64, 0u64), |(i, u), s| (i + s.intersection, u + s.union));
    MetricReport {
        giou: mean(|s| s.iou),
        ciou: ratio_or(si, su, 1.0),
        mpr: mean(|s| s.precision),
        mrec: mean(|s| s.recall),
        mdice: mean(|s| s.dice),
        per_image,
    }
}

impl MetricReport {
    /// One row per image, then a `summary` row carrying the dataset means.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "image",
            "intersection",
            "union",
            "pred_px",
            "gt_px",
            "iou",
            "precision",
            "recall",
            "dice",
        ])?;
        for s in &self.per_image {
            w.write_record([
                s.name.clone(),
                s.intersection.to_string(),
                s.union.to_string(),
                s.pred_px.to_string(),
                s.gt_px.to_string(),
                s.iou.to_string(),
                s.precision.to_string(),
                s.recall.to_string(),
                s.dice.to_string(),
            ])?;
        }
        let (si, su) = self
            .per_image
            .iter()
            .fold((0u64, 0u64), |(i, u), s| (i + s.intersection, u + s.union));
        w.write_record([
            "summary".to_string(),
            si.to_string(),
            su.to_string(),
            String::new(),
            String::new(),
            self.giou.to_string(),
            self.mpr.to_string(),
            self.mrec.to_string(),
            self.mdice.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// USD per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceConfig {
    pub usd_per_m_input: f64,
    pub usd_per_m_output: f64,
}

impl Default for PriceConfig {
    fn default() -> Self {
        Self {
            usd_per_m_input: 0.30,
            usd_per_m_output: 2.50,
        }
    }
}

impl PriceConfig {
    pub fn call_cost(&self, input_tokens: u64, output_tokens: u64) -> f64 {
        input_tokens as f64 / 1e6 * self.usd_per_m_input + output_tokens as f64 / 1e6 * self.usd_per_m_output
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub role: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_ms: u64,
    #[serde(default)]
    pub ok: bool,
}

/// Append-only record of backend calls; safe to share between threads.
#[derive(Debug, Default)]
pub struct CostLedger {
    entries: Mutex<Vec<LedgerEntry>>,
}

impl Clone for CostLedger {
    fn clone(&self) -> Self {
        Self::from_entries(self.entries())
    }
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<LedgerEntry>) -> Self {
        Self {
            entries: Mutex::new(entries),
        }
    }

    pub fn record(&self, entry: LedgerEntry) {
        self.entries.lock().unwrap_or_else(|p| p.into_inner()).push(entry);
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn cost_total(entries: &[LedgerEntry], prices: &PriceConfig) -> f64 {
    entries
        .iter()
        .map(|e| prices.call_cost(e.input_tokens, e.output_tokens))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub calls: usize,
    pub failed_calls: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub median_latency_ms: f64,
    pub cost_usd: f64,
}

pub fn median(values: &mut [u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] as f64 + values[n / 2] as f64) / 2.0
    }
}

pub fn ledger_summary(entries: &[LedgerEntry], prices: &PriceConfig) -> LedgerSummary {
    let mut latencies: Vec<u64> = entries.iter().map(|e| e.latency_ms).collect();
    LedgerSummary {
        calls: entries.len(),
        failed_calls: entries.iter().filter(|e| !e.ok).count(),
        input_tokens: entries.iter().map(|e| e.input_tokens).sum(),
        output_tokens: entries.iter().map(|e| e.output_tokens).sum(),
        median_latency_ms: median(&mut latencies),
        cost_usd: cost_total(entries, prices),
    }
}
