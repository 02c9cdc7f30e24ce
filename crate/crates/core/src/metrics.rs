//! Top-k error, macro F1, expected calibration error, and temperature scaling.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{argmax_rows, Classifier};

pub const DEFAULT_BINS: usize = 15;
/// Search interval for the calibration temperature.
pub const TS_RANGE: (f64, f64) = (0.05, 20.0);
pub const TS_TOLERANCE: f64 = 1e-4;

/// Logits of an evaluation split with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    logits: Array2<f64>,
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(logits: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let (n, c) = logits.dim();
        if n != labels.len() {
            return Err(Error::ShapeMismatch(format!("{n} logit rows vs {} labels", labels.len())));
        }
        if c < 2 {
            return Err(Error::ShapeMismatch(format!("need at least 2 classes, got {c}")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {l} outside [0, {c})")));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("logits contain NaN or infinity".into()));
        }
        Ok(PredictionSet { logits, labels })
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.ncols()
    }

    /// Same labels with logits divided by `tau`.
    pub fn scaled(&self, tau: f64) -> PredictionSet {
        PredictionSet { logits: self.logits.mapv(|z| z / tau), labels: self.labels.clone() }
    }

    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }
}

/// Rank of entry `label` in `row`, where larger logits and, among equal
/// logits, lower indices rank first.
fn rank_of(row: ArrayView1<f64>, label: usize) -> usize {
    let z = row[label];
    row.iter().enumerate().filter(|&(j, &v)| v > z || (v == z && j < label)).count()
}

/// Percentage of samples whose label is not among the `k` highest logits.
pub fn topk_error(preds: &PredictionSet, k: usize) -> Result<f64> {
    let c = preds.num_classes();
    if k < 1 || k >= c {
        return Err(Error::InvalidArgument(format!("k must lie in [1, {c}), got {k}")));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("empty prediction set".into()));
    }
    let misses = preds
        .logits
        .axis_iter(Axis(0))
        .zip(&preds.labels)
        .filter(|(row, &l)| rank_of(*row, l) >= k)
        .count();
    Ok(100.0 * misses as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 over all classes; a class with
/// `precision + recall = 0` scores 0.
pub fn macro_f1(preds: &PredictionSet) -> f64 {
    let c = preds.num_classes();
    let mut tp = vec![0usize; c];
    let mut predicted = vec![0usize; c];
    let mut actual = vec![0usize; c];
    for (p, &l) in preds.predictions().into_iter().zip(&preds.labels) {
        predicted[p] += 1;
        actual[l] += 1;
        if p == l {
            tp[l] += 1;
        }
    }
    let total: f64 = (0..c)
        .map(|k| {
            let precision = if predicted[k] > 0 { tp[k] as f64 / predicted[k] as f64 } else { 0.0 };
            let recall = if actual[k] > 0 { tp[k] as f64 / actual[k] as f64 } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .sum();
    total / c as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
    pub n_bins: usize,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// CSV with header `bin_lower,bin_upper,count,mean_confidence,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lower,bin_upper,count,mean_confidence,accuracy\n");
        for b in &self.bins {
            writeln!(out, "{:.16e},{:.16e},{},{:.16e},{:.16e}", b.lower, b.upper, b.count, b.mean_confidence, b.accuracy)
                .expect("writing to a String");
        }
        out
    }
}

/// Bin of `conf` among `n` equal-width bins `(k/n, (k+1)/n]`; zero joins the
/// first bin.
fn bin_index(conf: f64, n: usize) -> usize {
    let upper = |k: usize| (k + 1) as f64 / n as f64;
    let mut k = ((conf * n as f64).ceil() as usize).saturating_sub(1).min(n - 1);
    while k > 0 && conf <= upper(k - 1) {
        k -= 1;
    }
    while k + 1 < n && conf > upper(k) {
        k += 1;
    }
    k
}

/// ECE in percent from per-sample confidences and correctness.
pub fn ece_from_confidences(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<(f64, ReliabilityBins)> {
    if n_bins < 1 {
        return Err(Error::InvalidArgument("n_bins must be at least 1".into()));
    }
    if confidences.len() != correct.len() {
        return Err(Error::ShapeMismatch(format!("{} confidences vs {} outcomes", confidences.len(), correct.len())));
    }
    if confidences.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::InvalidArgument(format!("confidence {c} outside [0, 1]")));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let k = bin_index(c, n_bins);
        count[k] += 1;
        conf_sum[k] += c;
        hits[k] += ok as usize;
    }
    let n = confidences.len() as f64;
    let mut weighted = 0.0;
    let mut bins = Vec::with_capacity(n_bins);
    for k in 0..n_bins {
        let (mean_confidence, accuracy) = if count[k] > 0 {
            (conf_sum[k] / count[k] as f64, hits[k] as f64 / count[k] as f64)
        } else {
            (0.0, 0.0)
        };
        if count[k] > 0 {
            weighted += count[k] as f64 / n * (accuracy - mean_confidence).abs();
        }
        bins.push(ReliabilityBin {
            lower: k as f64 / n_bins as f64,
            upper: (k + 1) as f64 / n_bins as f64,
            count: count[k],
            mean_confidence,
            accuracy,
        });
    }
    Ok((100.0 * weighted, ReliabilityBins { bins, n_bins }))
}

/// Maximum softmax probability per row.
pub fn confidences(logits: &Array2<f64>) -> Vec<f64> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            1.0 / row.iter().map(|z| (z - m).exp()).sum::<f64>()
        })
        .collect()
}

/// ECE in percent of the top-class softmax confidence at temperature 1.
pub fn ece(preds: &PredictionSet, n_bins: usize) -> Result<(f64, ReliabilityBins)> {
    let conf = confidences(&preds.logits);
    let correct: Vec<bool> = preds.predictions().iter().zip(&preds.labels).map(|(p, l)| p == l).collect();
    ece_from_confidences(&conf, &correct, n_bins)
}

/// Mean negative log-likelihood of the labels under `softmax(z / tau)`.
pub fn nll_at(preds: &PredictionSet, tau: f64) -> f64 {
    let total: f64 = preds
        .logits
        .axis_iter(Axis(0))
        .zip(&preds.labels)
        .map(|(row, &l)| {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / tau;
            let lse = m + row.iter().map(|z| (z / tau - m).exp()).sum::<f64>().ln();
            lse - row[l] / tau
        })
        .sum();
    total / preds.len() as f64
}

/// Temperature minimizing validation NLL, by golden-section search on
/// `ln tau` over `[ln 0.05, ln 20]`.
pub fn temperature_scale(val: &PredictionSet) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    if val.labels.iter().all(|&l| l == val.labels[0]) {
        return Err(Error::InvalidArgument("validation labels all belong to one class".into()));
    }
    let f = |s: f64| nll_at(val, s.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TS_RANGE.0.ln(), TS_RANGE.1.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > TS_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    Ok(((a + b) / 2.0).exp())
}

/// Metric summary of one evaluation; errors and ECE are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1_error: f64,
    pub top5_error: f64,
    pub macro_f1: f64,
    pub ece: f64,
    pub ece_after_ts: Option<f64>,
    pub calibration_temperature: Option<f64>,
    pub n_samples: usize,
    pub n_bins: usize,
}

/// Top-5 error, or 0 when there are at most five classes and every label is
/// trivially within the top five.
fn top5(preds: &PredictionSet) -> Result<f64> {
    if preds.num_classes() <= 5 {
        Ok(0.0)
    } else {
        topk_error(preds, 5)
    }
}

/// All metrics of a prediction set; with `calibrate`, a temperature is fit on
/// the same set and the ECE recomputed after scaling.
pub fn evaluate_predictions(preds: &PredictionSet, n_bins: usize, calibrate: bool) -> Result<(MetricsReport, ReliabilityBins)> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("empty split".into()));
    }
    let (raw_ece, bins) = ece(preds, n_bins)?;
    let (ece_after_ts, calibration_temperature) = if calibrate {
        let tau = temperature_scale(preds)?;
        let (after, _) = ece(&preds.scaled(tau), n_bins)?;
        (Some(after), Some(tau))
    } else {
        (None, None)
    };
    let report = MetricsReport {
        top1_error: topk_error(preds, 1)?,
        top5_error: top5(preds)?,
        macro_f1: macro_f1(preds),
        ece: raw_ece,
        ece_after_ts,
        calibration_temperature,
        n_samples: preds.len(),
        n_bins,
    };
    Ok((report, bins))
}

/// Runs a model over normalized images in inference mode and scores it.
pub fn evaluate(
    model: &Classifier,
    images: ArrayView4<f64>,
    labels: &[usize],
    n_bins: usize,
    calibrate: bool,
) -> Result<(MetricsReport, ReliabilityBins)> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty split".into()));
    }
    let logits = model.predict(images)?;
    evaluate_predictions(&PredictionSet::new(logits, labels.to_vec())?, n_bins, calibrate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn topk_examples() {
        let p = PredictionSet::new(array![[3.0, 1.0, 0.0], [0.0, 2.0, 1.0]], vec![0, 1]).unwrap();
        assert_eq!(topk_error(&p, 1).unwrap(), 0.0);
        let tie = PredictionSet::new(array![[1.0, 1.0, 1.0, 1.0]], vec![3]).unwrap();
        assert_eq!(topk_error(&tie, 2).unwrap(), 100.0);
        assert_eq!(topk_error(&tie, 3).unwrap(), 100.0);
        let three = PredictionSet::new(
            array![[5.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 9.0, 1.0, 0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 7.0]],
            vec![1, 1, 6],
        )
        .unwrap();
        assert!((topk_error(&three, 1).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(topk_error(&three, 5).unwrap(), 0.0);
        assert!(topk_error(&three, 0).is_err());
        assert!(topk_error(&three, 7).is_err());
    }

    #[test]
    fn f1_examples() {
        // confusion [[2,1],[1,2]]
        let p = PredictionSet::new(
            array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],
            vec![0, 0, 0, 1, 1, 1],
        )
        .unwrap();
        assert!((macro_f1(&p) - 2.0 / 3.0).abs() < 1e-15);
        let perfect = PredictionSet::new(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![0, 1]).unwrap();
        assert!((macro_f1(&perfect) - 2.0 / 3.0).abs() < 1e-15, "absent class still averaged");
        let perfect2 = PredictionSet::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1]).unwrap();
        assert_eq!(macro_f1(&perfect2), 1.0);
    }

    #[test]
    fn ece_hand_examples() {
        let conf = [0.9, 0.9, 0.6, 0.6];
        let ok = [true, false, true, true];
        assert_eq!(ece_from_confidences(&conf, &ok, 2).unwrap().0, 0.0);
        let (e, bins) = ece_from_confidences(&conf, &ok, 5).unwrap();
        assert_eq!(e, 40.0);
        assert_eq!(bins.bins[2].count, 2);
        assert_eq!(bins.bins[4].count, 2);
        assert_eq!(bins.total(), 4);
        assert_eq!(ece_from_confidences(&[1.0, 1.0], &[true, true], 15).unwrap().0, 0.0);
        assert!(ece_from_confidences(&conf, &ok, 0).is_err());
    }

    #[test]
    fn boundary_confidence_goes_to_lower_bin() {
        for n in 1..40 {
            for k in 0..=n {
                let c = k as f64 / n as f64;
                let b = bin_index(c, n);
                let upper = (b + 1) as f64 / n as f64;
                let lower = b as f64 / n as f64;
                assert!(c <= upper && (c > lower || b == 0), "c={c} n={n} b={b}");
            }
        }
    }

    #[test]
    fn csv_has_one_row_per_bin() {
        let (_, bins) = ece_from_confidences(&[0.3, 0.7], &[true, false], 15).unwrap();
        let csv = bins.to_csv();
        assert_eq!(csv.lines().count(), 16);
        assert!(csv.starts_with("bin_lower,bin_upper,count,mean_confidence,accuracy\n"));
    }

    #[test]
    fn temperature_rejects_single_class() {
        let p = PredictionSet::new(array![[1.0, 0.0], [2.0, 0.0]], vec![0, 0]).unwrap();
        assert!(temperature_scale(&p).is_err());
    }
}
