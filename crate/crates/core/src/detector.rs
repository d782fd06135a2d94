//! Threshold-calibrated open-set correction.
//!
//! A sample whose mean absolute bias exceeds `τ` is labelled fake regardless
//! of the classifier. `τ` is the smallest calibration statistic that keeps a
//! `coverage` fraction of the calibration population at or below it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForgeryNet, ForwardMode, Params};
use crate::tensor::FeatureMap;

pub const STATISTIC_NAME: &str = "mean_abs_bias";
pub const DEFAULT_COVERAGE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    /// `None` until calibrated; `Some(f64::INFINITY)` disables rejection.
    pub tau: Option<f64>,
    pub statistic: String,
    pub coverage: f64,
    pub calibration_size: usize,
}

impl Default for DetectorState {
    fn default() -> Self {
        Self::uncalibrated(DEFAULT_COVERAGE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Classifier,
    Rejected,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Classifier => "classifier",
            Route::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// 1 = fake, 0 = real.
    pub label: u8,
    pub score: f64,
    pub route: Route,
    pub bias_statistic: f64,
}

/// Mean of all elements of the bias image.
pub fn bias_statistic(bias: &FeatureMap) -> f64 {
    bias.mean()
}

/// Smallest value `τ` of `biases` with `#{b ≤ τ} / K ≥ coverage`.
pub fn calibrate_threshold(biases: &[f64], coverage: f64) -> Result<f64> {
    if biases.is_empty() {
        return Err(Error::InvalidInput("calibration needs at least one statistic".into()));
    }
    check_coverage(coverage)?;
    if let Some(b) = biases.iter().find(|b| !b.is_finite()) {
        return Err(Error::InvalidInput(format!("calibration statistic {b} is not finite")));
    }
    let mut sorted = biases.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    // smallest rank r with r / k >= coverage; the slack absorbs rounding in coverage * k
    let rank = ((coverage * k as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(k) - 1])
}

fn check_coverage(coverage: f64) -> Result<()> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Config(format!("coverage must lie in (0, 1], got {coverage}")));
    }
    Ok(())
}

impl DetectorState {
    pub fn uncalibrated(coverage: f64) -> Self {
        Self {
            tau: None,
            statistic: STATISTIC_NAME.to_string(),
            coverage,
            calibration_size: 0,
        }
    }

    /// A detector that never rejects: prediction reduces to the classifier.
    pub fn disabled() -> Self {
        Self {
            tau: Some(f64::INFINITY),
            ..Self::uncalibrated(DEFAULT_COVERAGE)
        }
    }

    pub fn calibrate(statistics: &[f64], coverage: f64) -> Result<Self> {
        let tau = calibrate_threshold(statistics, coverage)?;
        Ok(Self {
            tau: Some(tau),
            statistic: STATISTIC_NAME.to_string(),
            coverage,
            calibration_size: statistics.len(),
        })
    }

    pub fn is_calibrated(&self) -> bool {
        self.tau.is_some()
    }

    pub fn threshold(&self) -> Result<f64> {
        self.tau
            .ok_or_else(|| Error::State("detector threshold has not been calibrated".into()))
    }

    /// Applies the rejection rule to an already computed statistic and classifier probability.
    pub fn decide(&self, bias_statistic: f64, prob: f64) -> Result<Prediction> {
        let tau = self.threshold()?;
        Ok(if bias_statistic > tau {
            Prediction {
                label: 1,
                score: 1.0,
                route: Route::Rejected,
                bias_statistic,
            }
        } else {
            Prediction {
                label: u8::from(prob > 0.5),
                score: prob,
                route: Route::Classifier,
                bias_statistic,
            }
        })
    }

    /// Runs the network on each image and applies the rejection rule.
    pub fn predict(
        &self,
        net: &ForgeryNet,
        params: &Params,
        mode: ForwardMode,
        batch: &[FeatureMap],
    ) -> Result<Vec<Prediction>> {
        self.threshold()?;
        let bundle = net.forward(params, batch, mode)?;
        bundle
            .samples
            .iter()
            .map(|s| self.decide(bias_statistic(&s.bias), s.prob))
            .collect()
    }
}
