//! Class-balance weights and the AU detection losses.
//!
//! With `C` AUs, targets `Y ∈ {0,1}^C`, predictions `Ŷ ∈ (0,1)^C` and
//! weights `w`:
//!
//! * weights: `w_i = C·(1/r_i) / Σ_k (1/r_k)` from occurrence rates `r`
//! * weighted softmax loss: `-(1/C) Σ w_i [Y_i ln Ŷ_i + (1-Y_i) ln(1-Ŷ_i)]`,
//!   i.e. a two-way softmax cross-entropy per AU
//! * weighted Dice loss: `(1/C) Σ w_i (1 - (2 Y_i Ŷ_i + ε) / (Y_i² + Ŷ_i² + ε))`
//! * combined: `L_softmax + λ₂ L_dice`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predictions are clamped into `[PROB_EPS, 1 - PROB_EPS]` before taking
/// logs; the clamped region has zero gradient.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    pub rates: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(c: usize) -> Self {
        ClassWeights {
            w: vec![1.0; c],
            rates: vec![1.0; c],
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

pub fn class_weights(rates: &[f64]) -> Result<ClassWeights> {
    if rates.is_empty() {
        return Err(Error::domain("class weights need at least one rate"));
    }
    if let Some((i, r)) = rates.iter().enumerate().find(|(_, r)| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::domain(format!(
            "occurrence rate of AU {i} is {r}; rates must lie in (0,1] \
             (clamp rates upstream or drop AUs that never occur)"
        )));
    }
    let c = rates.len() as f64;
    let inv_sum: f64 = rates.iter().map(|r| 1.0 / r).sum();
    Ok(ClassWeights {
        w: rates.iter().map(|r| (1.0 / r) * c / inv_sum).collect(),
        rates: rates.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda2: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda2: 1.0,
            epsilon: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::domain(format!("dice smooth term must be > 0, got {}", self.epsilon)));
        }
        if !(self.lambda2 >= 0.0) {
            return Err(Error::domain(format!("lambda2 must be >= 0, got {}", self.lambda2)));
        }
        Ok(())
    }
}

fn check_lengths(y: &[u8], y_hat: &[f64], w: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() || y.len() != w.len() || y.is_empty() {
        return Err(Error::shape(format!(
            "label/prediction/weight lengths differ: {}, {}, {}",
            y.len(),
            y_hat.len(),
            w.len()
        )));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn weighted_softmax_loss(y: &[u8], y_hat: &[f64], w: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat, w)?;
    let c = y.len() as f64;
    let s: f64 = y
        .iter()
        .zip(y_hat)
        .zip(w)
        .map(|((&yi, &p), &wi)| {
            let p = clamp_prob(p);
            let yi = yi as f64;
            wi * (yi * p.ln() + (1.0 - yi) * (1.0 - p).ln())
        })
        .sum();
    Ok(-s / c)
}

/// `∂L_softmax / ∂Ŷ`.
pub fn weighted_softmax_grad(y: &[u8], y_hat: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    check_lengths(y, y_hat, w)?;
    let c = y.len() as f64;
    Ok(y.iter()
        .zip(y_hat)
        .zip(w)
        .map(|((&yi, &p), &wi)| {
            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                return 0.0;
            }
            let yi = yi as f64;
            -wi * (yi / p - (1.0 - yi) / (1.0 - p)) / c
        })
        .collect())
}

pub fn dice_loss(y: &[u8], y_hat: &[f64], w: &[f64], epsilon: f64) -> Result<f64> {
    check_lengths(y, y_hat, w)?;
    if !(epsilon > 0.0) {
        return Err(Error::domain(format!("dice smooth term must be > 0, got {epsilon}")));
    }
    let c = y.len() as f64;
    let s: f64 = y
        .iter()
        .zip(y_hat)
        .zip(w)
        .map(|((&yi, &p), &wi)| {
            let yi = yi as f64;
            wi * (1.0 - (2.0 * yi * p + epsilon) / (yi * yi + p * p + epsilon))
        })
        .sum();
    Ok(s / c)
}

/// `∂L_dice / ∂Ŷ`.
pub fn dice_grad(y: &[u8], y_hat: &[f64], w: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    check_lengths(y, y_hat, w)?;
    if !(epsilon > 0.0) {
        return Err(Error::domain(format!("dice smooth term must be > 0, got {epsilon}")));
    }
    let c = y.len() as f64;
    Ok(y.iter()
        .zip(y_hat)
        .zip(w)
        .map(|((&yi, &p), &wi)| {
            let yi = yi as f64;
            let num = 2.0 * yi * p + epsilon;
            let den = yi * yi + p * p + epsilon;
            -wi * (2.0 * yi * den - num * 2.0 * p) / (den * den) / c
        })
        .collect())
}

pub fn combined_loss(softmax_term: f64, dice_term: f64, cfg: &LossConfig) -> f64 {
    softmax_term + cfg.lambda2 * dice_term
}

/// Combined loss and its gradient with respect to `Ŷ`.
pub fn au_loss_and_grad(y: &[u8], y_hat: &[f64], w: &[f64], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let s = weighted_softmax_loss(y, y_hat, w)?;
    let d = dice_loss(y, y_hat, w, cfg.epsilon)?;
    let gs = weighted_softmax_grad(y, y_hat, w)?;
    let gd = dice_grad(y, y_hat, w, cfg.epsilon)?;
    let g = gs.iter().zip(&gd).map(|(a, b)| a + cfg.lambda2 * b).collect();
    Ok((combined_loss(s, d, cfg), g))
}

/// Occurrence probability of a two-class softmax head `[z_absent, z_present]`.
pub fn two_class_prob(z: [f64; 2]) -> f64 {
    crate::nn::ops::sigmoid(z[1] - z[0])
}

/// Back-propagates `∂L/∂p` through [`two_class_prob`].
pub fn two_class_prob_backward(z: [f64; 2], g_prob: f64) -> [f64; 2] {
    let p = two_class_prob(z);
    let g = g_prob * p * (1.0 - p);
    [-g, g]
}

/// `Σ_i w_i · (-ln softmax(z_i)[Y_i])` and its gradient w.r.t. each logit
/// pair.
pub fn local_supervision_loss(logits: &[[f64; 2]], labels: &[u8], w: &[f64]) -> (f64, Vec<[f64; 2]>) {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for ((z, &y), &wi) in logits.iter().zip(labels).zip(w) {
        let m = z[0].max(z[1]);
        let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
        let yi = y as usize;
        loss += wi * (lse - z[yi]);
        let p = [(z[0] - lse).exp(), (z[1] - lse).exp()];
        let mut g = [wi * p[0], wi * p[1]];
        g[yi] -= wi;
        grads.push(g);
    }
    (loss, grads)
}
