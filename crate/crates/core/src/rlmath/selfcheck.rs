//! The kernel self-check suite behind the `rl-check` subcommand: every
//! invariant and gradient check over seeded random fixtures, with one
//! pass/fail line per check.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    batch_normalize, batch_normalize_masked, dual_clip_loss, gae_advantages, grad_check,
    grpo_advantages, grpo_loss, policy_ratio, reinforcepp_advantages, token_kl, FixtureBatch,
    KlEstimator, LossKind, RlConfig, RlError, TokenLogProbs, TrajectoryBatch,
};

#[derive(Debug, Clone)]
pub struct SelfCheckOptions {
    /// Number of seeded repetitions for the randomized checks.
    pub seeds: u64,
    /// Token count for the gradient-check batches.
    pub tokens: usize,
    /// Finite-difference step.
    pub h: f64,
    /// Test hook: force one check to fail so the nonzero exit path can be
    /// exercised.
    pub inject_failure: bool,
    /// Extra batch to run the kernel and gradient checks on.
    pub fixture: Option<FixtureBatch>,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self {
            seeds: 10,
            tokens: 32,
            h: 1e-5,
            inject_failure: false,
            fixture: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelfCheckReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelfCheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One line per check, suitable for terminal output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for check in &self.checks {
            out.push_str(&format!(
                "[{}] {:<38} max_err={:9.3e} tol={:7.1e} {}\n",
                if check.passed { "PASS" } else { "FAIL" },
                check.name,
                check.max_error,
                check.tolerance,
                check.detail
            ));
        }
        out
    }
}

fn random_logps(rng: &mut ChaCha8Rng, tokens: usize) -> TokenLogProbs {
    let new: Vec<f64> = (0..tokens).map(|_| rng.gen_range(-3.0..0.0)).collect();
    let old: Vec<f64> = new
        .iter()
        .map(|&v| v + rng.gen_range(-0.5..0.5))
        .collect();
    let reference: Vec<f64> = new
        .iter()
        .map(|&v| v + rng.gen_range(-0.5..0.5))
        .collect();
    let mask: Vec<bool> = (0..tokens).map(|_| rng.gen_bool(0.9)).collect();
    // keep at least two tokens alive
    let mut mask = mask;
    mask[0] = true;
    if tokens > 1 {
        mask[1] = true;
    }
    TokenLogProbs::new(new, old, reference, mask).expect("generated lengths agree")
}

fn random_advantages(rng: &mut ChaCha8Rng, tokens: usize) -> Vec<f64> {
    (0..tokens).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

struct Runner {
    checks: Vec<CheckOutcome>,
}

impl Runner {
    fn record(&mut self, name: &'static str, max_error: f64, tolerance: f64, detail: String) {
        self.checks.push(CheckOutcome {
            name,
            passed: max_error <= tolerance,
            max_error,
            tolerance,
            detail,
        });
    }

    fn record_bool(&mut self, name: &'static str, passed: bool, detail: String) {
        self.checks.push(CheckOutcome {
            name,
            passed,
            max_error: if passed { 0.0 } else { 1.0 },
            tolerance: 0.0,
            detail,
        });
    }
}

/// Run the whole suite. Pure given the options; the same seeds always
/// produce the same report.
// The oracle loops below are deliberately written as naive index-based
// summations, independent of the kernels' own iteration style.
#[allow(clippy::needless_range_loop)]
pub fn run_self_check(options: &SelfCheckOptions) -> Result<SelfCheckReport, RlError> {
    let cfg = RlConfig::default();
    cfg.validate()?;
    let mut runner = Runner { checks: Vec::new() };

    // Hand table for the dual-clip objective.
    {
        let cases = [
            (1.0, 1.0, -1.0),
            (10.0, -2.0, 6.0),
            (10.0, 2.0, -2.4),
        ];
        let mut max_error: f64 = 0.0;
        for (ratio, advantage, expected) in cases {
            let loss = dual_clip_loss(&[ratio], &[advantage], &[true], &cfg)?;
            max_error = max_error.max((loss - expected).abs());
        }
        let strict = RlConfig {
            strict_literal_dual_clip: true,
            ..cfg
        };
        let literal = dual_clip_loss(&[10.0], &[2.0], &[true], &strict)?;
        max_error = max_error.max((literal - (-6.0)).abs());
        runner.record(
            "dual-clip hand table",
            max_error,
            1e-12,
            "3 cases + strict-literal divergence".into(),
        );
    }

    // GAE backward recursion against the naive double-loop summation.
    {
        let mut max_error: f64 = 0.0;
        for seed in 0..options.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6AE0 + seed);
            let steps = rng.gen_range(1..=64);
            let rewards: Vec<f64> = (0..steps).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..=steps).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let batch = TrajectoryBatch::new(rewards, values, 0.0)?;
            let gamma = rng.gen_range(0.0..=1.0);
            let lambda = rng.gen_range(0.0..=1.0);
            let fast = gae_advantages(&batch, gamma, lambda);
            for t in 0..steps {
                let mut slow = 0.0;
                for l in 0..(steps - t) {
                    let i = t + l;
                    let delta = batch.rewards[i] + gamma * batch.values[i + 1] - batch.values[i];
                    slow += (gamma * lambda).powi(l as i32) * delta;
                }
                max_error = max_error.max((fast[t] - slow).abs());
            }
            // collapse identities must hold exactly
            let zero_lambda = gae_advantages(&batch, gamma, 0.0);
            for t in 0..steps {
                let delta = batch.rewards[t] + gamma * batch.values[t + 1] - batch.values[t];
                if zero_lambda[t] != delta {
                    max_error = max_error.max(f64::INFINITY);
                }
            }
            let zero_values =
                TrajectoryBatch::new(batch.rewards.clone(), vec![0.0; steps + 1], 0.0)?;
            let reversed_cumsum = gae_advantages(&zero_values, 1.0, 1.0);
            let mut suffix = 0.0;
            for t in (0..steps).rev() {
                suffix += zero_values.rewards[t];
                if reversed_cumsum[t] != suffix {
                    max_error = max_error.max(f64::INFINITY);
                }
            }
        }
        runner.record(
            "gae vs double-loop oracle",
            max_error,
            1e-10,
            format!("{} seeded sequences, len <= 64", options.seeds),
        );
    }

    // Suffix-sum advantages against a naive double loop.
    {
        let mut max_error: f64 = 0.0;
        for seed in 0..options.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5FF1 + seed);
            let tokens = rng.gen_range(1..=32);
            let kl: Vec<f64> = (0..tokens).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let reward = rng.gen_range(0.0..=1.0_f64).round();
            let beta = rng.gen_range(0.0..0.5);
            let fast = reinforcepp_advantages(reward, &kl, beta);
            for t in 0..tokens {
                let suffix: f64 = (t..tokens).map(|i| kl[i]).sum();
                max_error = max_error.max((fast[t] - (reward - beta * suffix)).abs());
            }
        }
        runner.record(
            "reinforce++ suffix-sum oracle",
            max_error,
            1e-12,
            format!("{} seeded batches", options.seeds),
        );
    }

    // Normalization properties on random batches.
    {
        let mut max_error: f64 = 0.0;
        for seed in 0..options.seeds.max(100) {
            let mut rng = ChaCha8Rng::seed_from_u64(0x401A + seed);
            let n = rng.gen_range(2..=64);
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            match batch_normalize(&values) {
                Ok(normalized) => {
                    let mean = normalized.iter().sum::<f64>() / n as f64;
                    let var = normalized.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    max_error = max_error.max(mean.abs()).max((var.sqrt() - 1.0).abs());
                }
                Err(RlError::DegenerateBatch { .. }) => {} // legitimately degenerate draw
                Err(e) => return Err(e),
            }
        }
        let degenerate_ok = matches!(
            batch_normalize(&[3.0, 3.0, 3.0]),
            Err(RlError::DegenerateBatch { .. })
        );
        if !degenerate_ok {
            max_error = f64::INFINITY;
        }
        runner.record(
            "batch normalization properties",
            max_error,
            1e-9,
            "mean 0 / population std 1; degenerate rejected".into(),
        );
    }

    // Group-relative normalization and its batch-normalize equivalence.
    {
        let mut max_error: f64 = 0.0;
        for seed in 0..options.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6409 + seed);
            let size = rng.gen_range(2..=8);
            let rewards: Vec<f64> = (0..size).map(|_| f64::from(rng.gen_bool(0.6))).collect();
            let out = grpo_advantages(std::slice::from_ref(&rewards))?;
            let all_same = rewards.iter().all(|&r| r == rewards[0]);
            if all_same {
                if out.degenerate_groups != 1 || out.advantages[0].iter().any(|&a| a != 0.0) {
                    max_error = f64::INFINITY;
                }
            } else {
                let raw: Vec<f64> = rewards
                    .iter()
                    .map(|&r| reinforcepp_advantages(r, &[0.0], 3.3)[0])
                    .collect();
                let normalized = batch_normalize(&raw)?;
                for (a, b) in out.advantages[0].iter().zip(&normalized) {
                    max_error = max_error.max((a - b).abs());
                }
            }
        }
        runner.record(
            "grpo group normalization",
            max_error,
            1e-9,
            "equivalence with batch normalize; degenerate zeroed".into(),
        );
    }

    // Mask consistency: inserting masked padding never changes outputs.
    {
        let mut max_error: f64 = 0.0;
        for seed in 0..options.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(0x3A5C + seed);
            let n = rng.gen_range(2..=16);
            let ratios: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
            let advantages: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let kl: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let mask = vec![true; n];
            let clean_dual = dual_clip_loss(&ratios, &advantages, &mask, &cfg)?;
            let clean_grpo = grpo_loss(&ratios, &advantages, &kl, &mask, &cfg)?;
            let clean_norm = batch_normalize_masked(&advantages, &mask)?;

            // splice junk padding at a random position
            let at = rng.gen_range(0..=n);
            let mut p_ratios = ratios.clone();
            let mut p_adv = advantages.clone();
            let mut p_kl = kl.clone();
            let mut p_mask = mask.clone();
            p_ratios.insert(at, 99.0);
            p_adv.insert(at, -99.0);
            p_kl.insert(at, 9.0);
            p_mask.insert(at, false);

            max_error = max_error
                .max((dual_clip_loss(&p_ratios, &p_adv, &p_mask, &cfg)? - clean_dual).abs())
                .max((grpo_loss(&p_ratios, &p_adv, &p_kl, &p_mask, &cfg)? - clean_grpo).abs());
            let padded_norm = batch_normalize_masked(&p_adv, &p_mask)?;
            let mut clean_iter = clean_norm.iter();
            for (value, &keep) in padded_norm.iter().zip(&p_mask) {
                if keep {
                    max_error =
                        max_error.max((value - clean_iter.next().expect("same count")).abs());
                }
            }
        }
        runner.record(
            "mask consistency",
            max_error,
            0.0,
            "losses and normalization ignore padding".into(),
        );
    }

    // Vanilla policy-gradient reduction with infinite clips.
    {
        let vanilla_cfg = RlConfig {
            eps_low: f64::INFINITY,
            eps_high: f64::INFINITY,
            dual_clip_c: f64::INFINITY,
            ..cfg
        };
        let mut max_error: f64 = 0.0;
        for seed in 0..options.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(0x7A11 + seed);
            let n = rng.gen_range(2..=16);
            let ratios: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..5.0)).collect();
            let advantages: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let loss = dual_clip_loss(&ratios, &advantages, &vec![true; n], &vanilla_cfg)?;
            let vanilla = -ratios
                .iter()
                .zip(&advantages)
                .map(|(r, a)| r * a)
                .sum::<f64>()
                / n as f64;
            max_error = max_error.max((loss - vanilla).abs());
        }
        runner.record(
            "vanilla reduction (eps, c -> inf)",
            max_error,
            1e-12,
            "dual clip collapses to -mean(r*A)".into(),
        );
    }

    // Composition: grpo loss = dual-clip loss + beta * mean(KL).
    {
        let mut max_error: f64 = 0.0;
        for seed in 0..options.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(0x9E0 + seed);
            let n = rng.gen_range(2..=16);
            let ratios: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
            let advantages: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let kl: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let mask = vec![true; n];
            let combined = grpo_loss(&ratios, &advantages, &kl, &mask, &cfg)?;
            let expected = dual_clip_loss(&ratios, &advantages, &mask, &cfg)?
                + cfg.kl_beta * kl.iter().sum::<f64>() / n as f64;
            max_error = max_error.max((combined - expected).abs());
        }
        runner.record(
            "grpo = dual-clip + beta*mean(KL)",
            max_error,
            1e-12,
            format!("{} seeded batches", options.seeds),
        );
    }

    // Ratio overflow guard.
    {
        let out = policy_ratio(&[50.0, 0.0], &[0.0, 0.0], cfg.ratio_log_cap)?;
        let ok = out.clamped == 1 && (out.ratios[0] - cfg.ratio_log_cap.exp()).abs() < 1e-6;
        runner.record_bool(
            "policy-ratio overflow guard",
            ok,
            format!("clamped {} of 2 entries", out.clamped),
        );
    }

    // Gradient checks for both losses over seeded random batches.
    {
        let mut max_error: f64 = 0.0;
        let mut total_perturbations = 0u32;
        for seed in 0..options.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(0x96AD + seed);
            let logps = random_logps(&mut rng, options.tokens);
            let advantages = random_advantages(&mut rng, options.tokens);
            for kind in [LossKind::DualClip, LossKind::Grpo] {
                let report = grad_check(kind, &logps, &advantages, &cfg, options.h)?;
                max_error = max_error.max(report.max_relative_error);
                total_perturbations += report.perturbations;
            }
        }
        runner.record(
            "gradient vs central differences",
            max_error,
            1e-5,
            format!(
                "{} seeds x {} tokens, h={:.0e}, {} boundary perturbations",
                options.seeds, options.tokens, options.h, total_perturbations
            ),
        );
    }

    // KL estimator sanity: log-ratio is exact, positive estimator >= 0.
    {
        let mut max_error: f64 = 0.0;
        let mut positive_ok = true;
        for seed in 0..options.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(0xC4E1 + seed);
            let n = rng.gen_range(1..=16);
            let new: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..0.0)).collect();
            let reference: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..0.0)).collect();
            let k1 = token_kl(&new, &reference, KlEstimator::LogRatio)?;
            for (i, value) in k1.iter().enumerate() {
                max_error = max_error.max((value - (new[i] - reference[i])).abs());
            }
            let k3 = token_kl(&new, &reference, KlEstimator::UnbiasedPositive)?;
            positive_ok &= k3.iter().all(|&v| v >= -1e-15);
        }
        if !positive_ok {
            max_error = f64::INFINITY;
        }
        runner.record(
            "token-KL estimators",
            max_error,
            1e-15,
            "k1 elementwise-exact; k3 nonnegative".into(),
        );
    }

    // Optional user-supplied fixture batch.
    if let Some(fixture) = &options.fixture {
        let ratios = policy_ratio(&fixture.logps.new, &fixture.logps.old, cfg.ratio_log_cap)?;
        let advantages = gae_advantages(&fixture.trajectory, cfg.gae_gamma, cfg.gae_lambda);
        let loss = dual_clip_loss(&ratios.ratios, &advantages, &fixture.logps.mask, &cfg)?;
        let grad = grad_check(LossKind::DualClip, &fixture.logps, &advantages, &cfg, options.h)?;
        runner.record(
            "fixture batch",
            grad.max_relative_error,
            1e-5,
            format!("{} tokens, loss={loss:.6}", fixture.logps.len()),
        );
    }

    if options.inject_failure {
        runner.record_bool(
            "injected failure (test hook)",
            false,
            "forced by --inject-failure".into(),
        );
    }

    Ok(SelfCheckReport {
        checks: runner.checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let report = run_self_check(&SelfCheckOptions::default()).unwrap();
        assert!(report.all_passed(), "\n{}", report.render());
    }

    #[test]
    fn injected_failure_fails() {
        let report = run_self_check(&SelfCheckOptions {
            inject_failure: true,
            ..SelfCheckOptions::default()
        })
        .unwrap();
        assert!(!report.all_passed());
    }

    #[test]
    fn report_prints_one_line_per_check() {
        let report = run_self_check(&SelfCheckOptions::default()).unwrap();
        assert_eq!(report.render().lines().count(), report.checks.len());
    }
}
