//! Numeric kernels for the verifiable reward and the policy-gradient
//! objectives, plus gradient self-checks.
//!
//! These kernels exist so every objective the harness is built around is
//! executable and testable at desk scale: no optimizer, no model, no
//! rollouts. All functions are pure, deterministic, and reentrant.
//!
//! Masking convention: per-sequence kernels (`gae_advantages`,
//! `reinforcepp_advantages`, `token_kl`, `policy_ratio`) operate on
//! unpadded token slices; batch-level kernels (the losses and the
//! normalizations) take a validity mask and ignore masked entries
//! entirely, so inserting masked padding never changes any output.

mod fixtures;
mod grad;
mod selfcheck;

pub use fixtures::{load_fixture, FixtureBatch, FixtureError};
pub use grad::{grad_check, GradCheckReport, LossKind};
pub use selfcheck::{run_self_check, SelfCheckOptions, SelfCheckReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Objective hyperparameters.
///
/// Clip parameters follow the dual-clip construction: ratios are clipped to
/// `[1 - eps_low, 1 + eps_high]` and, for negative advantages, the
/// surrogate is bounded below by `dual_clip_c * advantage`.
///
/// Naming note for the advantage-estimator parameters: `gae_gamma` is the
/// coefficient on the bootstrapped value inside the TD residual
/// (`delta_t = r_t + gamma * V_{t+1} - V_t`) and `gae_lambda` weights the
/// residual mixture (`sum (gamma * lambda)^l * delta_{t+l}`). The defaults
/// here are `gamma = 0.9`, `lambda = 0.99`; the conventional reading
/// (discount ~0.99, mixture ~0.9..0.95) swaps the two, so set both
/// explicitly if your setup follows that convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub dual_clip_c: f64,
    pub kl_beta: f64,
    pub gae_gamma: f64,
    pub gae_lambda: f64,
    /// Log-space cap for policy ratios; differences beyond it are clamped
    /// and counted instead of overflowing.
    pub ratio_log_cap: f64,
    /// Apply the lower clamp `dual_clip_c * advantage` unconditionally,
    /// exactly as the objective is sometimes written, instead of only for
    /// negative advantages. With `dual_clip_c > 1 + eps_high` the literal
    /// form replaces every positive-advantage term by `c * advantage`, so
    /// this mode exists for comparison, not for training.
    pub strict_literal_dual_clip: bool,
    /// KL estimator used by `token_kl`.
    pub kl_estimator: KlEstimator,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.2,
            dual_clip_c: 3.0,
            kl_beta: 0.001,
            gae_gamma: 0.9,
            gae_lambda: 0.99,
            ratio_log_cap: 20.0,
            strict_literal_dual_clip: false,
            kl_estimator: KlEstimator::LogRatio,
        }
    }
}

/// Token-level KL divergence estimators for `D_KL(pi_theta || pi_ref)`
/// under samples from `pi_theta`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// `log pi_theta - log pi_ref` (unbiased, can be negative).
    #[default]
    LogRatio,
    /// `exp(d) - d - 1` with `d = log pi_ref - log pi_theta`
    /// (unbiased and nonnegative).
    UnbiasedPositive,
}

#[derive(Debug, Error, PartialEq)]
pub enum RlError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("degenerate batch: standard deviation {sigma:e} below tolerance {tolerance:e}")]
    DegenerateBatch { sigma: f64, tolerance: f64 },
    #[error("batch needs at least 2 unmasked entries, found {0}")]
    TooFewEntries(usize),
    #[error("group {index} has {size} member(s); groups need at least 2")]
    GroupTooSmall { index: usize, size: usize },
    #[error("inputs sit on a clip boundary; retried {0} perturbations without escaping")]
    BoundaryStuck(u32),
    #[error("non-finite input: {0}")]
    NonFinite(String),
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        for (name, value) in [("eps_low", self.eps_low), ("eps_high", self.eps_high)] {
            if value.is_nan() || value < 0.0 {
                return Err(RlError::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        if self.dual_clip_c.is_nan() || self.dual_clip_c <= 1.0 {
            return Err(RlError::InvalidConfig("dual_clip_c must be > 1".into()));
        }
        if self.dual_clip_c.is_finite()
            && self.eps_high.is_finite()
            && self.dual_clip_c <= 1.0 + self.eps_high
        {
            return Err(RlError::InvalidConfig(format!(
                "dual_clip_c ({}) must exceed 1 + eps_high ({})",
                self.dual_clip_c,
                1.0 + self.eps_high
            )));
        }
        if self.kl_beta < 0.0 {
            return Err(RlError::InvalidConfig("kl_beta must be >= 0".into()));
        }
        for (name, value) in [("gae_gamma", self.gae_gamma), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(RlError::InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        if self.ratio_log_cap.is_nan() || self.ratio_log_cap <= 0.0 {
            return Err(RlError::InvalidConfig("ratio_log_cap must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-token log-probabilities under the current, behavior, and reference
/// policies, plus the validity mask. All four slices share one length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub new: Vec<f64>,
    pub old: Vec<f64>,
    pub reference: Vec<f64>,
    pub mask: Vec<bool>,
}

impl TokenLogProbs {
    pub fn new(
        new: Vec<f64>,
        old: Vec<f64>,
        reference: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self, RlError> {
        let len = new.len();
        if old.len() != len || reference.len() != len || mask.len() != len {
            return Err(RlError::LengthMismatch(format!(
                "new={} old={} reference={} mask={}",
                len,
                old.len(),
                reference.len(),
                mask.len()
            )));
        }
        for (name, values) in [("new", &new), ("old", &old), ("reference", &reference)] {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(RlError::NonFinite(format!("log-probs `{name}`")));
            }
        }
        Ok(Self {
            new,
            old,
            reference,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.new.len()
    }

    pub fn is_empty(&self) -> bool {
        self.new.is_empty()
    }
}

/// One trajectory's reward/value stream. `values` carries one bootstrap
/// tail beyond the rewards, and `outcome_reward` is the sequence-level
/// verifiable reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub outcome_reward: f64,
}

impl TrajectoryBatch {
    pub fn new(rewards: Vec<f64>, values: Vec<f64>, outcome_reward: f64) -> Result<Self, RlError> {
        if values.len() != rewards.len() + 1 {
            return Err(RlError::LengthMismatch(format!(
                "values must have len(rewards) + 1 entries: rewards={} values={}",
                rewards.len(),
                values.len()
            )));
        }
        Ok(Self {
            rewards,
            values,
            outcome_reward,
        })
    }
}

/// Binary verifiable reward: 1 iff the predicted preference equals the
/// ground truth.
pub fn verifiable_reward(predicted: u8, truth: u8) -> u8 {
    u8::from(predicted == truth)
}

/// Per-token ratios `exp(logp_new - logp_old)` together with the number of
/// entries whose log-space difference had to be clamped to `±cap`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioOutcome {
    pub ratios: Vec<f64>,
    pub clamped: usize,
}

/// Elementwise policy ratios with an overflow guard: log-differences beyond
/// `±cap` are clamped and counted rather than propagated into `exp`.
pub fn policy_ratio(logp_new: &[f64], logp_old: &[f64], cap: f64) -> Result<RatioOutcome, RlError> {
    if logp_new.len() != logp_old.len() {
        return Err(RlError::LengthMismatch(format!(
            "logp_new={} logp_old={}",
            logp_new.len(),
            logp_old.len()
        )));
    }
    let mut ratios = Vec::with_capacity(logp_new.len());
    let mut clamped = 0usize;
    for (&new, &old) in logp_new.iter().zip(logp_old) {
        let mut diff = new - old;
        if diff.abs() > cap {
            diff = diff.clamp(-cap, cap);
            clamped += 1;
        }
        ratios.push(diff.exp());
    }
    Ok(RatioOutcome { ratios, clamped })
}

/// Advantage estimation over TD residuals: `delta_t = r_t + gamma *
/// V_{t+1} - V_t`, `A_t = sum_l (gamma * lambda)^l * delta_{t+l}`,
/// evaluated by the exact backward recursion
/// `A_t = delta_t + gamma * lambda * A_{t+1}`.
pub fn gae_advantages(batch: &TrajectoryBatch, gamma: f64, lambda: f64) -> Vec<f64> {
    let steps = batch.rewards.len();
    let mut advantages = vec![0.0; steps];
    let mut carry = 0.0;
    for t in (0..steps).rev() {
        let delta = batch.rewards[t] + gamma * batch.values[t + 1] - batch.values[t];
        carry = delta + gamma * lambda * carry;
        advantages[t] = carry;
    }
    advantages
}

/// Per-token KL contributions between the current and reference policies.
pub fn token_kl(
    logp_new: &[f64],
    logp_ref: &[f64],
    estimator: KlEstimator,
) -> Result<Vec<f64>, RlError> {
    if logp_new.len() != logp_ref.len() {
        return Err(RlError::LengthMismatch(format!(
            "logp_new={} logp_ref={}",
            logp_new.len(),
            logp_ref.len()
        )));
    }
    let kl = logp_new
        .iter()
        .zip(logp_ref)
        .map(|(&new, &reference)| match estimator {
            KlEstimator::LogRatio => new - reference,
            KlEstimator::UnbiasedPositive => {
                let d = reference - new;
                d.exp() - d - 1.0
            }
        })
        .collect();
    Ok(kl)
}

/// Raw outcome-reward advantages with a KL suffix penalty:
/// `A_t = r(x, y) - beta * sum_{i=t}^{T} KL_i`.
pub fn reinforcepp_advantages(outcome_reward: f64, kl_tokens: &[f64], beta: f64) -> Vec<f64> {
    let mut advantages = vec![0.0; kl_tokens.len()];
    let mut suffix = 0.0;
    for t in (0..kl_tokens.len()).rev() {
        suffix += kl_tokens[t];
        advantages[t] = outcome_reward - beta * suffix;
    }
    advantages
}

const STD_TOLERANCE: f64 = 1e-8;

fn mean_and_population_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let count = values.clone().count();
    if count == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.clone().sum::<f64>() / count as f64;
    let variance = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    (mean, variance.sqrt(), count)
}

/// Normalize a batch of advantages to mean 0 and population standard
/// deviation 1 over the unmasked entries. Masked entries come back as 0.
/// A batch whose spread is below tolerance is degenerate and errors.
pub fn batch_normalize_masked(advantages: &[f64], mask: &[bool]) -> Result<Vec<f64>, RlError> {
    if advantages.len() != mask.len() {
        return Err(RlError::LengthMismatch(format!(
            "advantages={} mask={}",
            advantages.len(),
            mask.len()
        )));
    }
    let unmasked = advantages
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(&v, _)| v);
    let (mean, sigma, count) = mean_and_population_std(unmasked);
    if count < 2 {
        return Err(RlError::TooFewEntries(count));
    }
    if sigma < STD_TOLERANCE {
        return Err(RlError::DegenerateBatch {
            sigma,
            tolerance: STD_TOLERANCE,
        });
    }
    Ok(advantages
        .iter()
        .zip(mask)
        .map(|(&v, &keep)| if keep { (v - mean) / sigma } else { 0.0 })
        .collect())
}

/// [`batch_normalize_masked`] with every entry valid.
pub fn batch_normalize(advantages: &[f64]) -> Result<Vec<f64>, RlError> {
    batch_normalize_masked(advantages, &vec![true; advantages.len()])
}

/// Group-relative advantages plus the count of degenerate groups (all
/// rollouts in the group earned the same reward, so their advantages are
/// zeroed and flagged rather than divided by ~0).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantages {
    pub advantages: Vec<Vec<f64>>,
    pub degenerate_groups: usize,
}

/// Within-group mean/population-std normalization of rollout rewards. The
/// per-member scalar broadcasts to every token of that member at loss time.
pub fn grpo_advantages(group_rewards: &[Vec<f64>]) -> Result<GroupAdvantages, RlError> {
    let mut advantages = Vec::with_capacity(group_rewards.len());
    let mut degenerate_groups = 0usize;
    for (index, group) in group_rewards.iter().enumerate() {
        if group.len() < 2 {
            return Err(RlError::GroupTooSmall {
                index,
                size: group.len(),
            });
        }
        let (mean, sigma, _) = mean_and_population_std(group.iter().copied());
        if sigma < STD_TOLERANCE {
            degenerate_groups += 1;
            advantages.push(vec![0.0; group.len()]);
        } else {
            advantages.push(group.iter().map(|&r| (r - mean) / sigma).collect());
        }
    }
    Ok(GroupAdvantages {
        advantages,
        degenerate_groups,
    })
}

/// Per-token dual-clip surrogate value (the quantity inside the
/// expectation, before negation).
fn dual_clip_surrogate(ratio: f64, advantage: f64, cfg: &RlConfig) -> f64 {
    let clipped = ratio.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    let surrogate = (ratio * advantage).min(clipped * advantage);
    let clamp_applies = cfg.strict_literal_dual_clip || advantage < 0.0;
    if clamp_applies && cfg.dual_clip_c.is_finite() {
        surrogate.max(cfg.dual_clip_c * advantage)
    } else {
        surrogate
    }
}

fn check_loss_inputs(ratios: &[f64], advantages: &[f64], mask: &[bool]) -> Result<usize, RlError> {
    if ratios.len() != advantages.len() || ratios.len() != mask.len() {
        return Err(RlError::LengthMismatch(format!(
            "ratios={} advantages={} mask={}",
            ratios.len(),
            advantages.len(),
            mask.len()
        )));
    }
    let unmasked = mask.iter().filter(|&&keep| keep).count();
    if unmasked == 0 {
        return Err(RlError::TooFewEntries(0));
    }
    Ok(unmasked)
}

/// Dual-clip surrogate loss: the negated mean over unmasked tokens of
/// `min(r * A, clip(r, 1 - eps_low, 1 + eps_high) * A)`, bounded below by
/// `c * A` for negative advantages (or for every token in strict-literal
/// mode).
pub fn dual_clip_loss(
    ratios: &[f64],
    advantages: &[f64],
    mask: &[bool],
    cfg: &RlConfig,
) -> Result<f64, RlError> {
    let unmasked = check_loss_inputs(ratios, advantages, mask)?;
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|((&ratio, &advantage), _)| dual_clip_surrogate(ratio, advantage, cfg))
        .sum();
    Ok(-total / unmasked as f64)
}

/// Dual-clip surrogate with the KL penalty kept as a separate additive
/// term inside the expectation:
/// `-(mean over unmasked tokens of surrogate_t - beta * KL_t)`.
/// With `beta = 0` this equals [`dual_clip_loss`] exactly.
pub fn grpo_loss(
    ratios: &[f64],
    advantages: &[f64],
    kl_tokens: &[f64],
    mask: &[bool],
    cfg: &RlConfig,
) -> Result<f64, RlError> {
    let unmasked = check_loss_inputs(ratios, advantages, mask)?;
    if kl_tokens.len() != ratios.len() {
        return Err(RlError::LengthMismatch(format!(
            "ratios={} kl_tokens={}",
            ratios.len(),
            kl_tokens.len()
        )));
    }
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .zip(kl_tokens)
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(((&ratio, &advantage), &kl), _)| {
            dual_clip_surrogate(ratio, advantage, cfg) - cfg.kl_beta * kl
        })
        .sum();
    Ok(-total / unmasked as f64)
}
