//! Replacement-detection, unlikelihood, likelihood and combined losses.
//!
//! Every loss is a pure function of probabilities and labels. Probabilities
//! are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logarithms; each loss
//! has a matching `*_grad` giving the derivative with respect to its input
//! probabilities (zero where the clamp is active). Token-level losses are
//! sums over positions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
    #[error("lambda {0} outside [0, 1]")]
    InvalidLambda(f64),
}

fn check_len(a: usize, b: usize) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

fn check_label(l: u8) -> Result<f64, LossError> {
    match l {
        0 => Ok(0.0),
        1 => Ok(1.0),
        other => Err(LossError::InvalidLabel(other)),
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
fn clamp_slope(p: f64) -> f64 {
    if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        1.0
    } else {
        0.0
    }
}

/// Binary cross-entropy of a single "entailed" probability.
pub fn rd_sentence_loss(p_entailed: f64, label: u8) -> Result<f64, LossError> {
    let l = check_label(label)?;
    let p = clamp_prob(p_entailed);
    Ok(-(l * p.ln() + (1.0 - l) * (1.0 - p).ln()))
}

pub fn rd_sentence_grad(p_entailed: f64, label: u8) -> Result<f64, LossError> {
    let l = check_label(label)?;
    let p = clamp_prob(p_entailed);
    Ok((-l / p + (1.0 - l) / (1.0 - p)) * clamp_slope(p_entailed))
}

/// Summed per-step binary cross-entropy.
pub fn rd_token_loss(token_probs: &[f64], labels: &[u8]) -> Result<f64, LossError> {
    check_len(token_probs.len(), labels.len())?;
    token_probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| rd_sentence_loss(p, l))
        .sum()
}

pub fn rd_token_grad(token_probs: &[f64], labels: &[u8]) -> Result<Vec<f64>, LossError> {
    check_len(token_probs.len(), labels.len())?;
    token_probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| rd_sentence_grad(p, l))
        .collect()
}

/// `Σ_{t∈C} −log(1 − ŷ_t) + Σ_{t∉C} −log ŷ_t`, with `C` marked by `span_mask`.
pub fn unlikelihood_loss(gold_token_probs: &[f64], span_mask: &[u8]) -> Result<f64, LossError> {
    check_len(gold_token_probs.len(), span_mask.len())?;
    let mut total = 0.0;
    for (&p, &m) in gold_token_probs.iter().zip(span_mask) {
        let p = clamp_prob(p);
        total -= if check_label(m)? == 1.0 {
            (1.0 - p).ln()
        } else {
            p.ln()
        };
    }
    Ok(total)
}

pub fn unlikelihood_grad(
    gold_token_probs: &[f64],
    span_mask: &[u8],
) -> Result<Vec<f64>, LossError> {
    check_len(gold_token_probs.len(), span_mask.len())?;
    gold_token_probs
        .iter()
        .zip(span_mask)
        .map(|(&raw, &m)| {
            let p = clamp_prob(raw);
            let g = if check_label(m)? == 1.0 {
                1.0 / (1.0 - p)
            } else {
                -1.0 / p
            };
            Ok(g * clamp_slope(raw))
        })
        .collect()
}

/// `Σ_t −log ŷ_t`.
pub fn nll_loss(gold_token_probs: &[f64]) -> f64 {
    gold_token_probs.iter().map(|&p| -clamp_prob(p).ln()).sum()
}

pub fn nll_grad(gold_token_probs: &[f64]) -> Vec<f64> {
    gold_token_probs
        .iter()
        .map(|&raw| -1.0 / clamp_prob(raw) * clamp_slope(raw))
        .collect()
}

/// Weights `(λ/(N+1), (1−λ)/(N+1))` applied to the generation and
/// discrimination terms of one example with `n_false` contradictory targets.
pub fn r2d2_weights(n_false: usize, lambda: f64) -> Result<(f64, f64), LossError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::InvalidLambda(lambda));
    }
    let norm = 1.0 / (n_false as f64 + 1.0);
    Ok((lambda * norm, (1.0 - lambda) * norm))
}

/// `1/(N+1) · [λ·(nll + Σ ul) + (1−λ)·(rd_true + Σ rd_false)]`.
pub fn r2d2_loss(
    nll: f64,
    ul_list: &[f64],
    rd_true: f64,
    rd_false_list: &[f64],
    lambda: f64,
) -> Result<f64, LossError> {
    check_len(ul_list.len(), rd_false_list.len())?;
    let (wg, wd) = r2d2_weights(ul_list.len(), lambda)?;
    let generation = nll + ul_list.iter().sum::<f64>();
    let discrimination = rd_true + rd_false_list.iter().sum::<f64>();
    Ok(wg * generation + wd * discrimination)
}

/// Per-example loss parts and their combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub ul: Vec<f64>,
    pub rd_true: f64,
    pub rd_false: Vec<f64>,
    pub combined: f64,
    pub lambda: f64,
    pub n_false: usize,
}

impl LossBreakdown {
    pub fn new(
        nll: f64,
        ul: Vec<f64>,
        rd_true: f64,
        rd_false: Vec<f64>,
        lambda: f64,
    ) -> Result<Self, LossError> {
        let combined = r2d2_loss(nll, &ul, rd_true, &rd_false, lambda)?;
        Ok(Self {
            nll,
            n_false: ul.len(),
            ul,
            rd_true,
            rd_false,
            combined,
            lambda,
        })
    }

    /// Plain likelihood training: the loss is the NLL itself.
    pub fn nll_only(nll: f64) -> Self {
        Self {
            nll,
            ul: Vec::new(),
            rd_true: 0.0,
            rd_false: Vec::new(),
            combined: nll,
            lambda: 1.0,
            n_false: 0,
        }
    }

    pub fn recombine(&self) -> f64 {
        r2d2_loss(
            self.nll,
            &self.ul,
            self.rd_true,
            &self.rd_false,
            self.lambda,
        )
        .unwrap_or(f64::NAN)
    }

    pub fn is_finite(&self) -> bool {
        self.combined.is_finite()
    }
}

/// How token-level sums are reduced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenReduction {
    #[default]
    Sum,
    Mean,
}

impl TokenReduction {
    /// Factor applied to a token-level sum over `n` positions.
    pub fn factor(self, n: usize) -> f64 {
        match self {
            TokenReduction::Sum => 1.0,
            TokenReduction::Mean => 1.0 / n.max(1) as f64,
        }
    }
}
