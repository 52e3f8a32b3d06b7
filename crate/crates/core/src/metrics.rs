//! Accuracy, pseudo-label quality, calibration and confidence statistics.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::numkit::{argmax, Matrix};
use crate::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 15;
pub const CONF_GROUP_BINS: usize = 20;

/// Fraction of rows whose argmax (ties to the lowest index) equals the label.
pub fn top1_accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .iter_rows()
        .zip(labels)
        .filter(|(z, &y)| argmax(z).0 == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Shannon entropy in nats of a normalized histogram; `0·ln 0 = 0`. An empty
/// histogram has entropy 0.
pub fn hist_entropy(hist: &[usize]) -> f64 {
    let n: usize = hist.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    hist.iter()
        .filter(|&&h| h > 0)
        .map(|&h| {
            let p = h as f64 / n;
            p * (1.0 / p).ln()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoLabelStats {
    /// Confident pseudo-labels per class.
    pub hist: Vec<usize>,
    /// Accuracy among confident rows; `None` without ground truth or
    /// without any confident row.
    pub accuracy: Option<f64>,
    pub entropy: f64,
    /// Mean top probability over all rows.
    pub mean_conf: f64,
    /// Mean top probability over confident rows only.
    pub mean_conf_confident: Option<f64>,
}

/// Pseudo-label statistics of probability rows `q` at a confidence threshold.
/// A ground truth of `-1` (an OOD row) never matches a pseudo-label.
pub fn pl_stats(q: &Matrix, truth: Option<&[i32]>, threshold: f64) -> PseudoLabelStats {
    let c = q.cols();
    let mut hist = vec![0usize; c];
    let mut correct = 0usize;
    let mut conf_all = 0.0;
    let mut conf_confident = 0.0;
    for (i, row) in q.iter_rows().enumerate() {
        let (k, conf) = argmax(row);
        conf_all += conf;
        if conf >= threshold {
            hist[k] += 1;
            conf_confident += conf;
            if truth.is_some_and(|t| t[i] == k as i32) {
                correct += 1;
            }
        }
    }
    let confident: usize = hist.iter().sum();
    PseudoLabelStats {
        entropy: hist_entropy(&hist),
        accuracy: (truth.is_some() && confident > 0).then(|| correct as f64 / confident as f64),
        mean_conf: if q.rows() == 0 { 0.0 } else { conf_all / q.rows() as f64 },
        mean_conf_confident: (confident > 0).then(|| conf_confident / confident as f64),
        hist,
    }
}

fn bin_of(conf: f64, n_bins: usize) -> usize {
    // bins are (b/n, (b+1)/n]; a confidence of exactly 0 joins the first bin
    let b = (conf * n_bins as f64).ceil() as usize;
    b.saturating_sub(1).min(n_bins - 1)
}

/// Expected calibration error over equal-width bins on (0, 1].
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::Usage("confidences and correctness differ in length".into()));
    }
    if n_bins == 0 {
        return Err(Error::Usage("ece needs at least one bin".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Usage(format!("confidence {c} outside [0,1]")));
    }
    if confidences.is_empty() {
        return Ok(0.0);
    }
    let mut n = vec![0usize; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_of(c, n_bins);
        n[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
    }
    let total = confidences.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| n[b] > 0)
        .map(|b| {
            let nb = n[b] as f64;
            (nb / total) * (hits[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

/// Scales confidences by `κ = accuracy / mean confidence`, clamped to [0,1].
pub fn rectified_conf(confidences: &[f64], pl_accuracy: f64) -> Result<Vec<f64>> {
    if confidences.is_empty() {
        return Err(Error::Usage("rectified_conf of an empty sample".into()));
    }
    let mean = confidences.iter().sum::<f64>() / confidences.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::Usage("mean confidence must be positive".into()));
    }
    let kappa = pl_accuracy / mean;
    Ok(confidences.iter().map(|c| (kappa * c).clamp(0.0, 1.0)).collect())
}

/// Counts of `values` in `n_bins` equal-width bins over (0, 1].
pub fn histogram01(values: &[f64], n_bins: usize) -> Vec<usize> {
    let mut h = vec![0; n_bins];
    for &v in values {
        h[bin_of(v.clamp(0.0, 1.0), n_bins)] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfGroups {
    pub correct: Vec<f64>,
    pub incorrect: Vec<f64>,
    pub ood: Vec<f64>,
    pub correct_hist: Vec<usize>,
    pub incorrect_hist: Vec<usize>,
    pub ood_hist: Vec<usize>,
}

/// Splits top confidences of `q` into correct-pseudo-label, incorrect and
/// OOD groups.
pub fn conf_groups(q: &Matrix, truth: &[i32], ood_mask: Option<&[bool]>) -> Result<ConfGroups> {
    if truth.len() != q.rows() || ood_mask.is_some_and(|m| m.len() != q.rows()) {
        return Err(Error::Usage("conf_groups inputs are not aligned".into()));
    }
    let (mut correct, mut incorrect, mut ood) = (Vec::new(), Vec::new(), Vec::new());
    for (i, row) in q.iter_rows().enumerate() {
        let (k, conf) = argmax(row);
        if ood_mask.is_some_and(|m| m[i]) {
            ood.push(conf);
        } else if truth[i] == k as i32 {
            correct.push(conf);
        } else {
            incorrect.push(conf);
        }
    }
    Ok(ConfGroups {
        correct_hist: histogram01(&correct, CONF_GROUP_BINS),
        incorrect_hist: histogram01(&incorrect, CONF_GROUP_BINS),
        ood_hist: histogram01(&ood, CONF_GROUP_BINS),
        correct,
        incorrect,
        ood,
    })
}

impl ConfGroups {
    /// `group,confidence` rows for plotting.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "group,confidence")?;
        for (name, vals) in [("correct", &self.correct), ("incorrect", &self.incorrect), ("ood", &self.ood)] {
            for v in vals {
                writeln!(w, "{name},{v}")?;
            }
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

/// Median of a sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
