//! Calibration and pseudo-label quality diagnostics.
//!
//! Bins are equal-width on `(0, 1]`. Bin `b` (1-based) covers
//! `((b-1)/M, b/M]` with edges computed as `i as f64 / M as f64`; a
//! confidence of exactly 0 goes to bin 1.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Default number of reliability bins.
pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRecord {
    pub confidence: f64,
    pub predicted: usize,
    pub truth: usize,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.predicted == self.truth
    }
}

/// A pseudo-label joined with the hidden truth of its unlabeled sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelRecord {
    pub confidence: f64,
    pub pseudo_label: usize,
    pub truth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// 0 for empty bins.
    pub mean_confidence: f64,
    /// 0 for empty bins.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    /// Percent.
    pub ece: f64,
    /// Percent.
    pub error_rate: f64,
    pub bins: Vec<ReliabilityBin>,
}

impl CalibrationReport {
    pub fn new(records: &[PredictionRecord], bins: usize) -> Result<Self> {
        let table = reliability_bins(records, bins)?;
        Ok(Self {
            ece: ece_from_bins(&table, records.len()),
            error_rate: error_rate(records)?,
            bins: table,
        })
    }

    /// `bin_lower,bin_upper,count,mean_confidence,accuracy`, one row per bin.
    pub fn reliability_csv(&self) -> String {
        let mut out = String::from("bin_lower,bin_upper,count,mean_confidence,accuracy\n");
        for b in &self.bins {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                sig6(b.lower),
                sig6(b.upper),
                b.count,
                sig6(b.mean_confidence),
                sig6(b.accuracy)
            );
        }
        out
    }
}

fn check_records(records: &[PredictionRecord], bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::Parameter("bin count must be >= 1".into()));
    }
    if records.is_empty() {
        return Err(Error::Domain("no prediction records".into()));
    }
    if let Some(r) = records.iter().find(|r| !(0.0..=1.0).contains(&r.confidence)) {
        return Err(Error::Domain(format!(
            "confidence {} outside [0, 1]",
            r.confidence
        )));
    }
    Ok(())
}

/// 0-based bin index of `confidence` under the `((b-1)/M, b/M]` rule.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut b = (confidence * m).ceil().clamp(1.0, m) as usize;
    // confidence·M may round across an edge; settle against the stored edges
    while b > 1 && confidence <= (b - 1) as f64 / m {
        b -= 1;
    }
    while b < bins && confidence > b as f64 / m {
        b += 1;
    }
    b - 1
}

pub fn reliability_bins(records: &[PredictionRecord], bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_records(records, bins)?;
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for r in records {
        let b = bin_index(r.confidence, bins);
        count[b] += 1;
        conf[b] += r.confidence;
        correct[b] += r.correct() as usize;
    }
    Ok((0..bins)
        .map(|b| {
            let n = count[b];
            let (mean_confidence, accuracy) = if n == 0 {
                (0.0, 0.0)
            } else {
                (conf[b] / n as f64, correct[b] as f64 / n as f64)
            };
            ReliabilityBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: n,
                mean_confidence,
                accuracy,
            }
        })
        .collect())
}

fn ece_from_bins(bins: &[ReliabilityBin], total: usize) -> f64 {
    let gap: f64 = bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / total as f64 * (b.accuracy - b.mean_confidence).abs())
        .sum();
    100.0 * gap
}

/// Expected calibration error in percent.
pub fn ece(records: &[PredictionRecord], bins: usize) -> Result<f64> {
    Ok(ece_from_bins(&reliability_bins(records, bins)?, records.len()))
}

/// Percentage of confidence-passing pseudo-labels that are wrong, and the
/// number of passing records. An empty passing set has impurity 0.
pub fn impurity(records: &[PseudoLabelRecord], threshold: f64) -> (f64, usize) {
    let passing: Vec<_> = records.iter().filter(|r| r.confidence >= threshold).collect();
    if passing.is_empty() {
        return (0.0, 0);
    }
    let wrong = passing.iter().filter(|r| r.pseudo_label != r.truth).count();
    (100.0 * wrong as f64 / passing.len() as f64, passing.len())
}

/// Top-1 error in percent.
pub fn error_rate(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Domain("no prediction records".into()));
    }
    let wrong = records.iter().filter(|r| !r.correct()).count();
    Ok(100.0 * wrong as f64 / records.len() as f64)
}

/// Formats like C's `%.6g`: six significant digits, trailing zeros dropped.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.5e}", x);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
