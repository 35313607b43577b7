//! Critic training losses: token log-likelihood plus a weighted binary
//! cross-entropy on the critic's correctness score.
//!
//! These are reference values for checking external trainers. Nothing here
//! touches model weights.

use thiserror::Error;

/// Scores are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("token probability sequence is empty")]
    EmptySequence,
    #[error("probability at position {index} is {value}, outside (0, 1]")]
    InvalidProbability { index: usize, value: f64 },
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(u8),
    #[error("loss weight must be finite and non-negative, got {0}")]
    InvalidWeight(f64),
}

/// Per-token probabilities the critic assigns to a target critique.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenProbSequence(Vec<f64>);

impl TokenProbSequence {
    pub fn new(probs: Vec<f64>) -> Result<Self, ObjectiveError> {
        if probs.is_empty() {
            return Err(ObjectiveError::EmptySequence);
        }
        if let Some((index, &value)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && **p > 0.0 && **p <= 1.0))
        {
            return Err(ObjectiveError::InvalidProbability { index, value });
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn concat(&self, other: &Self) -> Self {
        Self(self.0.iter().chain(&other.0).copied().collect())
    }
}

/// Negative log-likelihood summed (not averaged) over tokens.
pub fn lm_loss(seq: &TokenProbSequence) -> f64 {
    -seq.0.iter().map(|p| p.ln()).sum::<f64>()
}

/// Result of [`score_loss`]. `clamped` is set when the score sat on 0 or 1
/// and was pulled inside to keep the log finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreLoss {
    pub value: f64,
    pub clamped: bool,
}

fn check_score(v: u8, v_hat: f64) -> Result<(), ObjectiveError> {
    if v > 1 {
        return Err(ObjectiveError::InvalidLabel(v));
    }
    if !(0.0..=1.0).contains(&v_hat) {
        return Err(ObjectiveError::InvalidScore(v_hat));
    }
    Ok(())
}

fn clamp(v_hat: f64) -> (f64, bool) {
    let c = v_hat.clamp(EPS, 1.0 - EPS);
    (c, c != v_hat)
}

/// Binary cross-entropy of predicted score `v_hat` against label `v`.
pub fn score_loss(v: u8, v_hat: f64) -> Result<ScoreLoss, ObjectiveError> {
    check_score(v, v_hat)?;
    let (p, clamped) = clamp(v_hat);
    let value = if v == 1 { -p.ln() } else { -(1.0 - p).ln() };
    Ok(ScoreLoss { value, clamped })
}

/// d score_loss / d v_hat = (v_hat - v) / (v_hat (1 - v_hat)), at the
/// clamped score.
pub fn score_loss_grad(v: u8, v_hat: f64) -> Result<f64, ObjectiveError> {
    check_score(v, v_hat)?;
    let (p, _) = clamp(v_hat);
    Ok((p - f64::from(v)) / (p * (1.0 - p)))
}

/// `lm + lambda * score`.
pub fn total_loss(lm: f64, score: f64, lambda: f64) -> f64 {
    lm + lambda * score
}

/// All three losses for one training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub lm: f64,
    pub score: f64,
    pub total: f64,
    pub clamped: bool,
}

pub fn record_loss(seq: &TokenProbSequence, v: u8, v_hat: f64, lambda: f64) -> Result<LossBreakdown, ObjectiveError> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(ObjectiveError::InvalidWeight(lambda));
    }
    let lm = lm_loss(seq);
    let s = score_loss(v, v_hat)?;
    Ok(LossBreakdown {
        lm,
        score: s.value,
        total: total_loss(lm, s.value, lambda),
        clamped: s.clamped,
    })
}
