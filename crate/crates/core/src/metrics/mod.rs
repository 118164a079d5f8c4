//! Scores for predictive distributions.
//!
//! Brier is the per-class mean `(1/C) sum_c (p_c - onehot_c)^2`, averaged
//! over points; multiply by `n_classes` for the per-point sum convention.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Targets;
use crate::sampling::PredictiveResult;

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub nll: f64,
    pub brier: f64,
    pub ece: f64,
    pub mce: f64,
    pub n_bins: usize,
    pub n_classes: usize,
    pub auroc: Option<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 8] = [
        "accuracy",
        "nll",
        "brier",
        "ece",
        "mce",
        "n_bins",
        "n_classes",
        "auroc",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            fmt(self.accuracy),
            fmt(self.nll),
            fmt(self.brier),
            fmt(self.ece),
            fmt(self.mce),
            self.n_bins.to_string(),
            self.n_classes.to_string(),
            self.auroc.map(fmt).unwrap_or_default(),
        ]
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("plain struct");
        v["brier_normalization"] = "per_class_mean".into();
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub nll: f64,
    /// RMSE of the mixture mean.
    pub rmse: f64,
}

impl RegressionReport {
    pub const CSV_HEADER: [&'static str; 2] = ["nll", "rmse"];

    pub fn csv_row(&self) -> Vec<String> {
        vec![fmt(self.nll), fmt(self.rmse)]
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.17e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `NaN` for empty bins.
    pub accuracy: f64,
    pub confidence: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Max-probability per row.
pub fn confidences(probs: &DMatrix<f64>) -> Vec<f64> {
    probs.row_iter().map(|r| r.max()).collect()
}

fn check_labels(probs: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            axis: "labels",
            expected: probs.nrows(),
            found: labels.len(),
        });
    }
    if probs.nrows() == 0 {
        return Err(Error::InvalidArgument("no points to score".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= probs.ncols()) {
        return Err(Error::InvalidArgument(format!(
            "label {l} out of range for {} classes",
            probs.ncols()
        )));
    }
    Ok(())
}

/// Equal-width bins on `[0, 1]` over the max probability.
pub fn reliability_bins(
    probs: &DMatrix<f64>,
    labels: &[usize],
    n_bins: usize,
) -> Result<Vec<ReliabilityBin>> {
    check_labels(probs, labels)?;
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be at least 1".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    for (i, &label) in labels.iter().enumerate() {
        let row = probs.row(i);
        let conf = row.max();
        let b = ((conf * n_bins as f64).floor() as usize).min(n_bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        if argmax(row.iter().copied()) == label {
            hits[b] += 1;
        }
    }
    Ok((0..n_bins)
        .map(|b| {
            let n = count[b] as f64;
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                accuracy: hits[b] as f64 / n,
                confidence: conf_sum[b] / n,
            }
        })
        .collect())
}

pub fn classification_metrics(
    pred: &PredictiveResult,
    labels: &[usize],
    n_bins: usize,
) -> Result<MetricsReport> {
    match pred {
        PredictiveResult::Classification { probs } => {
            classification_metrics_from_probs(probs, labels, n_bins)
        }
        PredictiveResult::Regression { .. } => Err(Error::InvalidArgument(
            "classification metrics need a categorical predictive".into(),
        )),
    }
}

pub fn classification_metrics_from_probs(
    probs: &DMatrix<f64>,
    labels: &[usize],
    n_bins: usize,
) -> Result<MetricsReport> {
    let bins = reliability_bins(probs, labels, n_bins)?;
    let n = labels.len() as f64;
    let c = probs.ncols();
    let mut correct = 0usize;
    let mut nll = 0.0;
    let mut brier = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = probs.row(i);
        if argmax(row.iter().copied()) == label {
            correct += 1;
        }
        nll -= row[label].max(PROB_FLOOR).ln();
        let mut sq = 0.0;
        for (k, &p) in row.iter().enumerate() {
            let d = p - if k == label { 1.0 } else { 0.0 };
            sq += d * d;
        }
        brier += sq / c as f64;
    }
    let mut ece = 0.0;
    let mut mce: f64 = 0.0;
    for b in bins.iter().filter(|b| b.count > 0) {
        let gap = (b.accuracy - b.confidence).abs();
        ece += b.count as f64 / n * gap;
        mce = mce.max(gap);
    }
    let report = MetricsReport {
        accuracy: correct as f64 / n,
        nll: nll / n,
        brier: brier / n,
        // a weighted mean never exceeds its max; clamp away rounding
        ece: ece.min(mce),
        mce,
        n_bins,
        n_classes: c,
        auroc: None,
    };
    if ![
        report.accuracy,
        report.nll,
        report.brier,
        report.ece,
        report.mce,
    ]
    .iter()
    .all(|x| x.is_finite())
    {
        return Err(Error::InvalidArgument(
            "predictive probabilities are not finite".into(),
        ));
    }
    Ok(report)
}

/// Mean over points of `-log((1/S) sum_s N(y | f_s(x), sigma2 I))`.
pub fn regression_nll(pred: &PredictiveResult, targets: &Targets) -> Result<f64> {
    let (means, sigma2, values, dim) = regression_parts(pred, targets)?;
    let n = means[0].nrows();
    let s = means.len() as f64;
    let log_norm = 0.5 * dim as f64 * (2.0 * std::f64::consts::PI * sigma2).ln();
    let mut total = 0.0;
    let mut logp = vec![0.0; means.len()];
    for i in 0..n {
        for (lp, m) in logp.iter_mut().zip(means) {
            let sq: f64 = (0..dim)
                .map(|c| (values[i * dim + c] - m[(i, c)]).powi(2))
                .sum();
            *lp = -0.5 * sq / sigma2 - log_norm;
        }
        let mx = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logp.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        total -= lse - s.ln();
    }
    Ok(total / n as f64)
}

pub fn regression_metrics(pred: &PredictiveResult, targets: &Targets) -> Result<RegressionReport> {
    let nll = regression_nll(pred, targets)?;
    let (means, _, values, dim) = regression_parts(pred, targets)?;
    let s = means.len() as f64;
    let n = means[0].nrows();
    let mut sq = 0.0;
    for i in 0..n {
        for c in 0..dim {
            let mean = means.iter().map(|m| m[(i, c)]).sum::<f64>() / s;
            sq += (values[i * dim + c] - mean).powi(2);
        }
    }
    Ok(RegressionReport {
        nll,
        rmse: (sq / (n * dim) as f64).sqrt(),
    })
}

fn regression_parts<'a>(
    pred: &'a PredictiveResult,
    targets: &'a Targets,
) -> Result<(&'a [DMatrix<f64>], f64, &'a [f64], usize)> {
    let PredictiveResult::Regression { means, sigma2 } = pred else {
        return Err(Error::InvalidArgument(
            "regression metrics need a Gaussian predictive".into(),
        ));
    };
    let Targets::Values { dim, values } = targets else {
        return Err(Error::InvalidArgument(
            "regression metrics need real-valued targets".into(),
        ));
    };
    if !(*sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be positive, got {sigma2}"
        )));
    }
    if means.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let n = means[0].nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("no points to score".into()));
    }
    if means.iter().any(|m| m.ncols() != *dim || m.nrows() != n) || values.len() != n * dim {
        return Err(Error::DimensionMismatch {
            axis: "regression targets",
            expected: n * means[0].ncols(),
            found: values.len(),
        });
    }
    Ok((means, *sigma2, values, *dim))
}

/// Area under the ROC curve with `positive` as the positive class, via the
/// Mann-Whitney statistic with midranks for ties.
pub fn auroc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::InvalidArgument(
            "auroc needs non-empty score lists".into(),
        ));
    }
    if positive.iter().chain(negative).any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument("auroc scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&x| (x, true))
        .chain(negative.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the rank sum keeps midranks integral
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank2 = (i + 1 + j) as u128;
        rank2_pos += midrank2 * all[i..j].iter().filter(|x| x.1).count() as u128;
        i = j;
    }
    let np = positive.len() as u128;
    let nn = negative.len() as u128;
    let u2 = rank2_pos - np * (np + 1);
    Ok(ratio(u2, 2 * np * nn))
}

/// `num / den` for `num <= den`, rounded so that `ratio(a, d) + ratio(d - a, d) == 1`.
fn ratio(num: u128, den: u128) -> f64 {
    if 2 * num <= den {
        num as f64 / den as f64
    } else {
        1.0 - (den - num) as f64 / den as f64
    }
}
