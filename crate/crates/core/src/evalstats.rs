//! Accuracy, run aggregation and one-way ANOVA.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty evaluation mask")]
    EmptyMask,
    #[error("ANOVA needs at least two groups, got {0}")]
    TooFewGroups(usize),
    #[error("group '{0}' needs at least two samples")]
    TooFewSamples(String),
    #[error("group '{name}' has accuracy {value} outside [0, 1]")]
    OutOfRange { name: String, value: f64 },
    #[error("F statistic undefined: zero variance within and between groups")]
    Degenerate,
}

/// Fraction of `(node, label)` pairs whose row argmax equals the label.
pub fn accuracy(probs: &Matrix, targets: &[(usize, usize)]) -> Result<f64, StatsError> {
    if targets.is_empty() {
        return Err(StatsError::EmptyMask);
    }
    let hits = targets.iter().filter(|&&(i, c)| argmax(probs.row(i)) == c).count();
    Ok(hits as f64 / targets.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySample {
    pub method: String,
    pub accuracies: Vec<f64>,
}

impl AccuracySample {
    pub fn new(method: impl Into<String>, accuracies: Vec<f64>) -> Self {
        Self {
            method: method.into(),
            accuracies,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub ss_between: f64,
    pub ss_within: f64,
}

/// One-way ANOVA across groups of per-run accuracies.
pub fn one_way_anova(groups: &[AccuracySample]) -> Result<AnovaResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    for g in groups {
        if g.accuracies.len() < 2 {
            return Err(StatsError::TooFewSamples(g.method.clone()));
        }
        if let Some(&value) = g.accuracies.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(StatsError::OutOfRange {
                name: g.method.clone(),
                value,
            });
        }
    }
    anova_unchecked(groups.iter().map(|g| g.accuracies.as_slice()))
}

/// ANOVA on arbitrary real samples (no [0, 1] range check).
pub fn anova_values<'a>(groups: impl IntoIterator<Item = &'a [f64]>) -> Result<AnovaResult, StatsError> {
    let groups: Vec<&[f64]> = groups.into_iter().collect();
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    if groups.iter().any(|g| g.len() < 2) {
        return Err(StatsError::TooFewSamples(String::new()));
    }
    anova_unchecked(groups.into_iter())
}

fn anova_unchecked<'a>(groups: impl Iterator<Item = &'a [f64]>) -> Result<AnovaResult, StatsError> {
    let groups: Vec<&[f64]> = groups.collect();
    let total: usize = groups.iter().map(|g| g.len()).sum();
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / total as f64;

    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in &groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    let df_between = groups.len() - 1;
    let df_within = total - groups.len();

    let f = if ss_within == 0.0 {
        if ss_between == 0.0 {
            return Err(StatsError::Degenerate);
        }
        f64::INFINITY
    } else {
        (ss_between / df_between as f64) / (ss_within / df_within as f64)
    };
    let p = f_upper_tail(f, df_between as f64, df_within as f64);
    Ok(AnovaResult {
        f,
        p,
        df_between,
        df_within,
        ss_between,
        ss_within,
    })
}

/// `P(F > f)` for the F(d1, d2) distribution via the regularized incomplete beta.
pub fn f_upper_tail(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    // P(F > f) = I_{d2/(d2 + d1 f)}(d2/2, d1/2)
    let x = d2 / (d2 + d1 * f);
    beta_reg(d2 / 2.0, d1 / 2.0, x).clamp(0.0, 1.0)
}
