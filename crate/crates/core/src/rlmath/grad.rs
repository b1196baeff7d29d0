//! Gradient self-checks: analytic derivatives of the loss kernels with
//! respect to the new-policy log-probabilities, verified against central
//! finite differences.
//!
//! The losses are piecewise linear in the ratio, so the analytic gradient
//! is exact everywhere except on the clip boundaries. Inputs that land
//! within a safety margin of a boundary are perturbed and retried a few
//! times before giving up.

use super::{
    dual_clip_loss, grpo_loss, policy_ratio, token_kl, KlEstimator, RlConfig, RlError,
    TokenLogProbs,
};

/// Which loss kernel to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    DualClip,
    Grpo,
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// How many perturbation retries were needed to escape clip boundaries.
    pub perturbations: u32,
    pub tokens_checked: usize,
}

fn loss_from_logps(
    kind: LossKind,
    logp_new: &[f64],
    logps: &TokenLogProbs,
    advantages: &[f64],
    cfg: &RlConfig,
) -> Result<f64, RlError> {
    let ratios = policy_ratio(logp_new, &logps.old, cfg.ratio_log_cap)?;
    match kind {
        LossKind::DualClip => dual_clip_loss(&ratios.ratios, advantages, &logps.mask, cfg),
        LossKind::Grpo => {
            let kl = token_kl(logp_new, &logps.reference, cfg.kl_estimator)?;
            grpo_loss(&ratios.ratios, advantages, &kl, &logps.mask, cfg)
        }
    }
}

/// Derivative of the per-token surrogate with respect to the new-policy
/// log-probability, assuming the token is off every clip boundary.
fn surrogate_grad(diff: f64, advantage: f64, cfg: &RlConfig) -> f64 {
    if diff.abs() >= cfg.ratio_log_cap {
        return 0.0; // ratio is clamped constant
    }
    let ratio = diff.exp();
    let ds_dr = if advantage == 0.0 {
        0.0
    } else if advantage > 0.0 {
        if cfg.strict_literal_dual_clip && cfg.dual_clip_c.is_finite() {
            // the literal outer max pins the surrogate at c * A
            0.0
        } else if cfg.eps_high.is_finite() && ratio > 1.0 + cfg.eps_high {
            0.0
        } else {
            advantage
        }
    } else {
        // advantage < 0: surrogate is A * max(r, clip(r)) clamped below,
        // flat both beyond the dual clamp and below the lower clip bound
        let beyond_clamp = cfg.dual_clip_c.is_finite() && ratio > cfg.dual_clip_c;
        let below_clip = cfg.eps_low.is_finite() && ratio < 1.0 - cfg.eps_low;
        if beyond_clamp || below_clip {
            0.0
        } else {
            advantage
        }
    };
    ds_dr * ratio // chain rule: dr/dlogp_new = r
}

/// Analytic gradient of the loss with respect to each new log-probability.
fn analytic_grad(
    kind: LossKind,
    logp_new: &[f64],
    logps: &TokenLogProbs,
    advantages: &[f64],
    cfg: &RlConfig,
) -> Vec<f64> {
    let unmasked = logps.mask.iter().filter(|&&keep| keep).count().max(1) as f64;
    logp_new
        .iter()
        .zip(&logps.old)
        .zip(&logps.reference)
        .zip(advantages)
        .zip(&logps.mask)
        .map(|((((&new, &old), &reference), &advantage), &keep)| {
            if !keep {
                return 0.0;
            }
            let mut grad = -surrogate_grad(new - old, advantage, cfg) / unmasked;
            if kind == LossKind::Grpo {
                let dkl = match cfg.kl_estimator {
                    KlEstimator::LogRatio => 1.0,
                    KlEstimator::UnbiasedPositive => 1.0 - (reference - new).exp(),
                };
                grad += cfg.kl_beta * dkl / unmasked;
            }
            grad
        })
        .collect()
}

/// True when any unmasked token sits close enough to a clip boundary that
/// a step of size `h` could cross it.
fn near_boundary(logp_new: &[f64], logps: &TokenLogProbs, advantages: &[f64], cfg: &RlConfig, h: f64) -> bool {
    for (((&new, &old), &advantage), &keep) in logp_new
        .iter()
        .zip(&logps.old)
        .zip(advantages)
        .zip(&logps.mask)
    {
        if !keep {
            continue;
        }
        let diff = new - old;
        if (diff.abs() - cfg.ratio_log_cap).abs() < 10.0 * h {
            return true;
        }
        if diff.abs() > cfg.ratio_log_cap {
            continue; // safely inside the clamped-flat region
        }
        let ratio = diff.exp();
        let margin = 50.0 * h * ratio.max(1.0) + 1e-9;
        let mut boundaries = Vec::with_capacity(3);
        if cfg.eps_low.is_finite() {
            boundaries.push(1.0 - cfg.eps_low);
        }
        if cfg.eps_high.is_finite() {
            boundaries.push(1.0 + cfg.eps_high);
        }
        if advantage < 0.0 && cfg.dual_clip_c.is_finite() {
            boundaries.push(cfg.dual_clip_c);
        }
        if boundaries.iter().any(|b| (ratio - b).abs() < margin) {
            return true;
        }
    }
    false
}

const MAX_PERTURBATIONS: u32 = 3;

/// Compare the analytic gradient of a loss kernel against central finite
/// differences with step `h` and return the maximum relative error over
/// unmasked tokens. Inputs on a clip boundary are nudged and retried up to
/// three times.
pub fn grad_check(
    kind: LossKind,
    logps: &TokenLogProbs,
    advantages: &[f64],
    cfg: &RlConfig,
    h: f64,
) -> Result<GradCheckReport, RlError> {
    if advantages.len() != logps.len() {
        return Err(RlError::LengthMismatch(format!(
            "logps={} advantages={}",
            logps.len(),
            advantages.len()
        )));
    }
    cfg.validate()?;

    let mut logp_new = logps.new.clone();
    let mut perturbations = 0u32;
    while near_boundary(&logp_new, logps, advantages, cfg, h) {
        if perturbations >= MAX_PERTURBATIONS {
            return Err(RlError::BoundaryStuck(perturbations));
        }
        perturbations += 1;
        // Deterministic nudge, alternating sign across tokens and growing
        // with the retry count so successive tries explore new offsets.
        let magnitude = 7.3e-4 * perturbations as f64;
        for (t, value) in logp_new.iter_mut().enumerate() {
            *value += if t % 2 == 0 { magnitude } else { -magnitude };
        }
    }

    let analytic = analytic_grad(kind, &logp_new, logps, advantages, cfg);
    let mut max_relative_error: f64 = 0.0;
    let mut tokens_checked = 0usize;
    for t in 0..logp_new.len() {
        if !logps.mask[t] {
            continue;
        }
        tokens_checked += 1;
        let mut plus = logp_new.clone();
        plus[t] += h;
        let mut minus = logp_new.clone();
        minus[t] -= h;
        let numeric = (loss_from_logps(kind, &plus, logps, advantages, cfg)?
            - loss_from_logps(kind, &minus, logps, advantages, cfg)?)
            / (2.0 * h);
        let denom = analytic[t].abs().max(numeric.abs());
        let error = if denom < 1e-8 {
            (analytic[t] - numeric).abs()
        } else {
            (analytic[t] - numeric).abs() / denom
        };
        max_relative_error = max_relative_error.max(error);
    }

    Ok(GradCheckReport {
        max_relative_error,
        perturbations,
        tokens_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logps(new: Vec<f64>, old: Vec<f64>, reference: Vec<f64>) -> TokenLogProbs {
        let n = new.len();
        TokenLogProbs::new(new, old, reference, vec![true; n]).unwrap()
    }

    #[test]
    fn linear_region_gradient_is_minus_advantage_times_ratio() {
        // r = 1, A = 1: loss = -r * A, d loss / d logp_new = -A * r = -1
        let tlp = logps(vec![-0.5], vec![-0.5], vec![-0.5]);
        let cfg = RlConfig::default();
        let report = grad_check(LossKind::DualClip, &tlp, &[1.0], &cfg, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        let grad = analytic_grad(LossKind::DualClip, &tlp.new, &tlp, &[1.0], &cfg);
        assert!((grad[0] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn clipped_region_gradient_is_zero() {
        // r = 10 with positive advantage: surrogate is flat in r
        let tlp = logps(vec![10.0_f64.ln()], vec![0.0], vec![0.0]);
        let cfg = RlConfig::default();
        let report = grad_check(LossKind::DualClip, &tlp, &[2.0], &cfg, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        let grad = analytic_grad(LossKind::DualClip, &tlp.new, &tlp, &[2.0], &cfg);
        assert_eq!(grad[0], 0.0);
    }

    #[test]
    fn boundary_inputs_get_perturbed() {
        // r exactly at 1 + eps_high
        let cfg = RlConfig::default();
        let tlp = logps(vec![1.2_f64.ln()], vec![0.0], vec![0.0]);
        let report = grad_check(LossKind::DualClip, &tlp, &[1.0], &cfg, 1e-5).unwrap();
        assert!(report.perturbations >= 1);
        assert!(report.max_relative_error < 1e-5);
    }

    #[test]
    fn grpo_kl_term_contributes_beta_over_m() {
        let cfg = RlConfig::default();
        let tlp = logps(vec![0.0, 0.0], vec![0.0, 0.0], vec![-1.0, -1.0]);
        let report = grad_check(LossKind::Grpo, &tlp, &[0.0, 0.0], &cfg, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        let grad = analytic_grad(LossKind::Grpo, &tlp.new, &tlp, &[0.0, 0.0], &cfg);
        // zero advantage: only the KL term moves; beta / M each
        assert!((grad[0] - cfg.kl_beta / 2.0).abs() < 1e-15);
    }

    #[test]
    fn unbiased_positive_estimator_also_checks_out() {
        let cfg = RlConfig {
            kl_estimator: KlEstimator::UnbiasedPositive,
            kl_beta: 0.05,
            ..RlConfig::default()
        };
        let tlp = logps(vec![-0.2, -1.1], vec![-0.3, -1.0], vec![-0.6, -0.9]);
        let report = grad_check(LossKind::Grpo, &tlp, &[0.4, -0.7], &cfg, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn hopeless_boundary_proximity_errors_after_retries() {
        // A huge step makes the safety margin swallow the whole clip
        // region, so no perturbation can escape it.
        let tlp = logps(vec![0.0], vec![0.0], vec![0.0]);
        let err = grad_check(LossKind::DualClip, &tlp, &[1.0], &RlConfig::default(), 0.1)
            .unwrap_err();
        assert!(matches!(err, RlError::BoundaryStuck(3)));
    }

    #[test]
    fn masked_tokens_are_skipped() {
        let tlp = TokenLogProbs::new(
            vec![0.0, 5.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![true, false],
        )
        .unwrap();
        let report =
            grad_check(LossKind::DualClip, &tlp, &[1.0, 3.0], &RlConfig::default(), 1e-5).unwrap();
        assert_eq!(report.tokens_checked, 1);
        assert!(report.max_relative_error < 1e-6);
    }
}
