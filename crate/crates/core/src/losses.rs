//! Bias-expansion loss (real invariance, fake margin, same-class alignment),
//! binary cross-entropy and their λ-weighted combination, with gradients.
//!
//! Bias images are passed as flattened per-sample slices; labels are `0`
//! for real and `1` for fake.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
    pub l3_temperature: f64,
    /// Use the fake-margin term with a leading minus sign, which rewards
    /// shrinking fake bias. Off by default; kept for comparison runs.
    pub printed_l2_sign: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            lambda: 0.5,
            l3_temperature: 1.0,
            printed_l2_sign: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("loss.margin must be positive, got {}", self.margin)));
        }
        check_lambda(self.lambda)?;
        if !(self.l3_temperature > 0.0 && self.l3_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "loss.l3_temperature must be positive, got {}",
                self.l3_temperature
            )));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("loss.lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l_be: f64,
    pub l_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l1, self.l2, self.l3, self.l_be, self.l_c, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Which bias-expansion terms enter the optimised objective.
///
/// With no term enabled the objective is the cross-entropy alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub l1: bool,
    pub l2: bool,
    pub l3: bool,
}

impl Objective {
    pub const CROSS_ENTROPY: Self = Self {
        l1: false,
        l2: false,
        l3: false,
    };
    pub const REAL_RECONSTRUCTION: Self = Self {
        l1: true,
        l2: false,
        l3: false,
    };
    pub const BIAS_EXPANSION: Self = Self {
        l1: true,
        l2: true,
        l3: true,
    };

    pub fn any(&self) -> bool {
        self.l1 || self.l2 || self.l3
    }
}

fn check_batch(biases: &[&[f64]], labels: &[u8]) -> Result<()> {
    if biases.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if biases.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} bias images but {} labels",
            biases.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidInput(format!("label {l} is not 0 or 1")));
    }
    Ok(())
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `L1 = (1/N) Σ (1 - y_i) ‖x̂_i‖²`.
pub fn loss_real_invariance(biases: &[&[f64]], labels: &[u8]) -> Result<f64> {
    check_batch(biases, labels)?;
    let n = biases.len() as f64;
    Ok(biases
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 0)
        .map(|(b, _)| sq_norm(b))
        .sum::<f64>()
        / n)
}

/// `L2 = (1/N) Σ y_i max(m - ‖x̂_i‖, 0)²`.
pub fn loss_fake_margin(biases: &[&[f64]], labels: &[u8], margin: f64) -> Result<f64> {
    check_batch(biases, labels)?;
    if !(margin > 0.0) {
        return Err(Error::Config(format!("margin must be positive, got {margin}")));
    }
    let n = biases.len() as f64;
    Ok(biases
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(b, _)| (margin - sq_norm(b).sqrt()).max(0.0).powi(2))
        .sum::<f64>()
        / n)
}

static ZERO_NORM_WARNED: AtomicBool = AtomicBool::new(false);

/// Unit-normalised rows; zero rows stay zero.
fn normalize_rows(biases: &[&[f64]]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut units = Vec::with_capacity(biases.len());
    let mut norms = Vec::with_capacity(biases.len());
    for b in biases {
        let r = sq_norm(b).sqrt();
        if r > 0.0 {
            units.push(b.iter().map(|v| v / r).collect());
        } else {
            if !ZERO_NORM_WARNED.swap(true, Ordering::Relaxed) {
                log::warn!("zero-norm bias image in alignment loss; treating its similarities as 0");
            }
            units.push(vec![0.0; b.len()]);
        }
        norms.push(r);
    }
    (units, norms)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-anchor coefficients `∂ℓ_i/∂G_ik` plus the loss value.
struct Alignment {
    value: f64,
    coeff: Vec<Vec<f64>>,
    valid: usize,
}

fn alignment(units: &[Vec<f64>], labels: &[u8], temperature: f64) -> Alignment {
    let n = units.len();
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let g = dot(&units[i], &units[j]) / temperature;
            gram[i][j] = g;
            gram[j][i] = g;
        }
    }
    let mut coeff = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    let mut valid = 0;
    for i in 0..n {
        let partners = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        if partners == 0 {
            continue;
        }
        valid += 1;
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| gram[i][k])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (gram[i][k] - max).exp()).sum();
        let lse = max + denom.ln();
        let inv_m = 1.0 / partners as f64;
        let mut positive_mean = 0.0;
        for k in (0..n).filter(|&k| k != i) {
            let soft = (gram[i][k] - max).exp() / denom;
            let is_partner = labels[k] == labels[i];
            coeff[i][k] = soft - if is_partner { inv_m } else { 0.0 };
            if is_partner {
                positive_mean += gram[i][k] * inv_m;
            }
        }
        total += lse - positive_mean;
    }
    Alignment {
        value: if valid == 0 { 0.0 } else { total / valid as f64 },
        coeff,
        valid,
    }
}

/// Supervised-contrastive alignment of unit-normalised bias images.
/// Anchors without a same-class partner are skipped.
pub fn loss_alignment(biases: &[&[f64]], labels: &[u8], temperature: f64) -> Result<f64> {
    check_batch(biases, labels)?;
    if biases.len() < 2 {
        return Err(Error::InvalidInput("alignment loss needs at least two samples".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let (units, _) = normalize_rows(biases);
    Ok(alignment(&units, labels, temperature).value)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1 - ε]`.
pub fn loss_cross_entropy(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let n = probs.len() as f64;
    Ok(-probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n)
}

/// Assembles the breakdown for the full objective `λ L_c + (1 - λ)(L1 + L2 + L3)`.
pub fn total_loss(l_c: f64, l1: f64, l2: f64, l3: f64, lambda: f64) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let l_be = l1 + l2 + l3;
    Ok(LossBreakdown {
        l1,
        l2,
        l3,
        l_be,
        l_c,
        total: lambda * l_c + (1.0 - lambda) * l_be,
    })
}

/// Loss value and gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    /// `∂total/∂x̂_i`, `None` when no bias term is optimised.
    pub grad_bias: Option<Vec<Vec<f64>>>,
    /// `∂total/∂p_i`.
    pub grad_prob: Vec<f64>,
}

/// Evaluates every term for reporting and differentiates the selected objective.
pub fn evaluate_batch(
    config: &LossConfig,
    objective: Objective,
    biases: &[&[f64]],
    probs: &[f64],
    labels: &[u8],
) -> Result<BatchLoss> {
    config.validate()?;
    check_batch(biases, labels)?;
    let n = biases.len();
    let nf = n as f64;
    let m = config.margin;
    let sign = if config.printed_l2_sign { -1.0 } else { 1.0 };

    let l1 = loss_real_invariance(biases, labels)?;
    let norms: Vec<f64> = biases.iter().map(|b| sq_norm(b).sqrt()).collect();
    let l2 = sign
        * norms
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == 1)
            .map(|(r, _)| (m - r).max(0.0).powi(2))
            .sum::<f64>()
        / nf;
    let (units, _) = normalize_rows(biases);
    let align = if n >= 2 {
        Some(alignment(&units, labels, config.l3_temperature))
    } else {
        None
    };
    let l3 = align.as_ref().map_or(0.0, |a| a.value);
    let l_c = loss_cross_entropy(probs, labels)?;

    let mut breakdown = total_loss(l_c, l1, l2, l3, config.lambda)?;
    let (w_c, w_be) = if objective.any() {
        (config.lambda, 1.0 - config.lambda)
    } else {
        (1.0, 0.0)
    };
    breakdown.total = w_c * l_c
        + w_be
            * (if objective.l1 { l1 } else { 0.0 }
                + if objective.l2 { l2 } else { 0.0 }
                + if objective.l3 { l3 } else { 0.0 });

    let grad_prob = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                return 0.0;
            }
            let d = if y == 1 { -1.0 / p } else { 1.0 / (1.0 - p) };
            w_c * d / nf
        })
        .collect();

    let grad_bias = objective.any().then(|| {
        let mut grads: Vec<Vec<f64>> = biases.iter().map(|b| vec![0.0; b.len()]).collect();
        for i in 0..n {
            let g = &mut grads[i];
            if objective.l1 && labels[i] == 0 {
                let scale = w_be * 2.0 / nf;
                for (gv, b) in g.iter_mut().zip(biases[i]) {
                    *gv += scale * b;
                }
            }
            if objective.l2 && labels[i] == 1 && norms[i] > 0.0 && norms[i] < m {
                // d/dx̂ (m - r)² = -2 (m - r) x̂ / r
                let scale = w_be * sign * -2.0 * (m - norms[i]) / (norms[i] * nf);
                for (gv, b) in g.iter_mut().zip(biases[i]) {
                    *gv += scale * b;
                }
            }
        }
        if objective.l3 {
            if let Some(a) = align.as_ref().filter(|a| a.valid > 0) {
                let scale = w_be / (a.valid as f64 * config.l3_temperature);
                for i in 0..n {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let mut gu = vec![0.0; units[i].len()];
                    for k in 0..n {
                        let c = a.coeff[i][k] + a.coeff[k][i];
                        if c != 0.0 {
                            for (g, u) in gu.iter_mut().zip(&units[k]) {
                                *g += c * u;
                            }
                        }
                    }
                    let radial = dot(&gu, &units[i]);
                    for ((gv, g), u) in grads[i].iter_mut().zip(&gu).zip(&units[i]) {
                        *gv += scale * (g - radial * u) / norms[i];
                    }
                }
            }
        }
        grads
    });

    Ok(BatchLoss {
        breakdown,
        grad_bias,
        grad_prob,
    })
}
