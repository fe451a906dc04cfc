//! Entropy-based scoring loss and the joint objective `L = l_entr + λ · l_margin`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to `1 − e^{−ŝ}` inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Smooth rectification `ln(1 + e^x)` applied to raw anomaly-branch scores.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-sample term `(1 − y)·ŝ − y·ln(1 − e^{−ŝ})` and its derivative in `ŝ`.
pub fn entropy_term(score: f64, label: u8) -> (f64, f64) {
    if label == 0 {
        (score, 1.0)
    } else {
        let inner = -(-score).exp_m1();
        if inner <= LOG_FLOOR {
            (-LOG_FLOOR.ln(), 0.0)
        } else {
            (-inner.ln(), -1.0 / score.exp_m1())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyLoss {
    pub value: f64,
    /// `∂l_entr/∂ŝ_i` for every sample.
    pub grads: Vec<f64>,
    pub empty: bool,
}

/// Mean entropy loss over already-rectified scores (`ŝ ≥ 0`).
pub fn entropy_loss(scores: &[f64], labels: &[u8]) -> Result<EntropyLoss> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Ok(EntropyLoss {
            value: 0.0,
            grads: Vec::new(),
            empty: true,
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite anomaly score {bad}")));
    }
    let n = scores.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(labels) {
        let (v, g) = entropy_term(s, y);
        value += v;
        grads.push(g / n);
    }
    Ok(EntropyLoss {
        value: value / n,
        grads,
        empty: false,
    })
}

pub fn total_loss(l_entr: f64, l_margin: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::Domain(format!("lambda must be non-negative, got {lambda}")));
    }
    let total = l_entr + lambda * l_margin;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite total loss ({l_entr} + {lambda}·{l_margin})")));
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_entr: f64,
    pub l_margin: f64,
    pub lambda: f64,
    pub total: f64,
    pub n_normal: usize,
    pub n_anomalous: usize,
    /// Set when no pairs were available for the margin term.
    pub no_pairs: bool,
    /// Set when the batch was empty.
    pub empty: bool,
}

impl LossReport {
    pub fn new(l_entr: f64, l_margin: f64, lambda: f64, labels: &[u8]) -> Result<Self> {
        let n_anomalous = labels.iter().filter(|&&l| l == 1).count();
        Ok(Self {
            l_entr,
            l_margin,
            lambda,
            total: total_loss(l_entr, l_margin, lambda)?,
            n_normal: labels.len() - n_anomalous,
            n_anomalous,
            no_pairs: false,
            empty: labels.is_empty(),
        })
    }
}
