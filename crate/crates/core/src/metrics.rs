//! Accuracy, ROC AUC and presentation-attack error rates.
//!
//! Label 1 is the attack (fake) class, label 0 the bona fide (real) class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(labels: &[u8], other: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("no samples to score".into()));
    }
    if labels.len() != other {
        return Err(Error::InvalidInput(format!(
            "{} labels but {} predictions",
            labels.len(),
            other
        )));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let fake = labels.iter().filter(|&&l| l == 1).count();
    let real = labels.len() - fake;
    if fake == 0 || real == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {real} real and {fake} fake"
        )));
    }
    Ok((real, fake))
}

pub fn accuracy(labels: &[u8], predictions: &[u8]) -> Result<f64> {
    check_lengths(labels, predictions.len())?;
    let hits = labels.iter().zip(predictions).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mann–Whitney AUC: the probability that a random fake outscores a random
/// real, ties credited one half. `O(n log n)` via a sort over tie groups.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    check_lengths(labels, scores.len())?;
    let (n_real, n_fake) = class_counts(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut wins = 0.0;
    let mut reals_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut fake, mut real) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                fake += 1;
            } else {
                real += 1;
            }
            j += 1;
        }
        wins += (fake * reals_below) as f64 + 0.5 * (fake * real) as f64;
        reals_below += real;
        i = j;
    }
    Ok(wins / (n_real * n_fake) as f64)
}

/// `(APCER, BPCER)`: fakes accepted as real, reals flagged as fake.
pub fn apcer_bpcer(labels: &[u8], predictions: &[u8]) -> Result<(f64, f64)> {
    check_lengths(labels, predictions.len())?;
    let (n_real, n_fake) = class_counts(labels)?;
    let missed = labels
        .iter()
        .zip(predictions)
        .filter(|(&l, &p)| l == 1 && p == 0)
        .count();
    let flagged = labels
        .iter()
        .zip(predictions)
        .filter(|(&l, &p)| l == 0 && p == 1)
        .count();
    Ok((missed as f64 / n_fake as f64, flagged as f64 / n_real as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub auc: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub threshold_used: Option<f64>,
    pub route_counts: BTreeMap<String, usize>,
}

impl MetricsReport {
    /// Scores every metric from labels, hard decisions, soft scores and routes.
    pub fn compute(
        labels: &[u8],
        predictions: &[u8],
        scores: &[f64],
        routes: &[&str],
        threshold_used: Option<f64>,
    ) -> Result<Self> {
        check_lengths(labels, scores.len())?;
        check_lengths(labels, routes.len())?;
        let (n_real, n_fake) = class_counts(labels)?;
        let (apcer, bpcer) = apcer_bpcer(labels, predictions)?;
        let mut route_counts = BTreeMap::new();
        for r in routes {
            *route_counts.entry(r.to_string()).or_insert(0) += 1;
        }
        Ok(Self {
            acc: accuracy(labels, predictions)?,
            auc: auc(labels, scores)?,
            apcer,
            bpcer,
            n_real,
            n_fake,
            threshold_used: threshold_used.filter(|t| t.is_finite()),
            route_counts,
        })
    }
}
