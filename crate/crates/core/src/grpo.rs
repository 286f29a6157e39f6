//! Group-relative policy objective with a sparse KL term.
//!
//! ```text
//! A_i  = (r_i - mean(r)) / (std(r) + eps)                  population std
//! L    = -mean_i min(rho_i A_i, clip(rho_i, 1-c, 1+c) A_i)
//!        + [A != 0] * beta * mean_i KL(pi || pi_ref)
//! ```
//!
//! The indicator drops the KL pull on reward-uniform groups, which would
//! otherwise be the only gradient those groups contribute.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::RolloutGroup;

/// Per-rollout rewards: accuracy plus format before the cutoff step, accuracy
/// alone from the cutoff on.
pub fn composite_reward(accuracy: &[f64], format: &[f64], step: u64, t_format_cutoff: u64) -> Result<Vec<f64>> {
    if accuracy.len() != format.len() {
        return Err(Error::contract(format!(
            "accuracy has {} rollouts, format has {}",
            accuracy.len(),
            format.len()
        )));
    }
    if let Some(bad) = accuracy.iter().chain(format).find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!("non-binary reward component {bad}")));
    }
    let with_format = step < t_format_cutoff;
    Ok(accuracy
        .iter()
        .zip(format)
        .map(|(&a, &f)| if with_format { a + f } else { a })
        .collect())
}

/// Group statistics: `(mean, population std)`.
pub fn group_stats(rewards: &[f64]) -> (f64, f64) {
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    (mean, var.sqrt())
}

fn is_uniform(rewards: &[f64]) -> bool {
    rewards.windows(2).all(|w| w[0] == w[1])
}

/// Group-relative advantages and the sparse-KL gate.
///
/// The gate is off exactly when the rewards are all equal; the advantages are
/// then the zero vector by construction rather than by floating-point luck.
pub fn group_advantage(rewards: &[f64], epsilon: f64) -> Result<(Vec<f64>, bool)> {
    if rewards.len() < 2 {
        return Err(Error::contract(format!("group of {} rollouts, need at least 2", rewards.len())));
    }
    if !(epsilon > 0.0) {
        return Err(Error::contract("advantage epsilon must be positive"));
    }
    if is_uniform(rewards) {
        return Ok((vec![0.0; rewards.len()], true));
    }
    let (mean, std) = group_stats(rewards);
    let denom = std + epsilon;
    Ok((rewards.iter().map(|r| (r - mean) / denom).collect(), false))
}

impl RolloutGroup {
    /// Build a group from its driving rewards. The accuracy mean is taken
    /// from `rewards`, which is right once the format reward is gone; use
    /// [`RolloutGroup::with_accuracy`] before that.
    pub fn from_rewards(sample_id: impl Into<String>, rewards: Vec<f64>, epsilon: f64) -> Result<Self> {
        let accuracy_mean = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
        Self::build(sample_id.into(), rewards, accuracy_mean, epsilon)
    }

    /// Build a group from binary accuracy and format rewards.
    pub fn with_accuracy(
        sample_id: impl Into<String>,
        accuracy: &[f64],
        format: &[f64],
        step: u64,
        t_format_cutoff: u64,
        epsilon: f64,
    ) -> Result<Self> {
        let rewards = composite_reward(accuracy, format, step, t_format_cutoff)?;
        let accuracy_mean = accuracy.iter().sum::<f64>() / accuracy.len().max(1) as f64;
        Self::build(sample_id.into(), rewards, accuracy_mean, epsilon)
    }

    fn build(sample_id: String, rewards: Vec<f64>, accuracy_mean: f64, epsilon: f64) -> Result<Self> {
        let (advantages, kl_gated_off) = group_advantage(&rewards, epsilon)?;
        let (mean, std) = group_stats(&rewards);
        Ok(RolloutGroup {
            sample_id,
            rewards,
            mean,
            std,
            advantages,
            kl_gated_off,
            accuracy_mean,
        })
    }
}

/// Inputs of [`grpo_loss`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossInputs {
    pub advantages: Vec<f64>,
    /// New-policy over rollout-policy probability of each sampled action.
    pub ratio: Vec<f64>,
    /// `None` disables clipping, leaving the plain ratio-weighted objective.
    pub clip_range: Option<f64>,
    pub kl_per_rollout: Vec<f64>,
    pub beta_kl: f64,
    pub kl_gated_off: bool,
}

/// Loss split into its two terms; `total = policy + kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub policy: f64,
    pub kl: f64,
}

fn clip(rho: f64, clip_range: Option<f64>) -> f64 {
    match clip_range {
        Some(c) => rho.clamp(1.0 - c, 1.0 + c),
        None => rho,
    }
}

/// Whether rollout `i` sits on the unclipped branch of the min. Ties go to
/// the unclipped branch.
fn unclipped_active(rho: f64, adv: f64, clip_range: Option<f64>) -> bool {
    rho * adv <= clip(rho, clip_range) * adv
}

fn kl_included(inputs: &LossInputs) -> bool {
    !(inputs.kl_gated_off && inputs.advantages.iter().all(|&a| a == 0.0))
}

pub fn grpo_loss_terms(inputs: &LossInputs) -> Result<LossTerms> {
    let g = inputs.advantages.len();
    if g == 0 || inputs.ratio.len() != g || inputs.kl_per_rollout.len() != g {
        return Err(Error::contract(format!(
            "loss vectors disagree: {} advantages, {} ratios, {} kl values",
            g,
            inputs.ratio.len(),
            inputs.kl_per_rollout.len()
        )));
    }
    if let Some(bad) = inputs.ratio.iter().find(|&&r| !(r > 0.0)) {
        return Err(Error::contract(format!("importance ratio must be positive, got {bad}")));
    }
    let n = g as f64;
    let surrogate = inputs
        .ratio
        .iter()
        .zip(&inputs.advantages)
        .map(|(&rho, &adv)| (rho * adv).min(clip(rho, inputs.clip_range) * adv))
        .sum::<f64>()
        / n;
    let kl = if kl_included(inputs) {
        inputs.beta_kl * inputs.kl_per_rollout.iter().sum::<f64>() / n
    } else {
        0.0
    };
    let policy = -surrogate;
    Ok(LossTerms { total: policy + kl, policy, kl })
}

pub fn grpo_loss(inputs: &LossInputs) -> Result<f64> {
    Ok(grpo_loss_terms(inputs)?.total)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Exact `KL(softmax(p_logits) || softmax(q_logits))`.
pub fn categorical_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    kl.max(0.0)
}

pub fn entropy(logits: &[f64]) -> f64 {
    log_softmax(logits).iter().map(|l| -l.exp() * l).sum()
}

/// Objective hyperparameters for [`softmax_policy_loss_and_grad`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyLossParams {
    pub clip_range: Option<f64>,
    pub beta_kl: f64,
}

/// Loss, its gradient with respect to the new-policy logits, and the pieces
/// that went into it.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub ratio: Vec<f64>,
    /// Exact categorical KL of the new policy from the reference.
    pub kl: f64,
}

/// Sparse-KL objective for a single-step categorical policy.
///
/// Every rollout samples one action from `softmax(logits_old)`; `chosen[i]`
/// is that action. The KL term is the exact divergence over all actions, so
/// it is the same for every rollout in the group.
pub fn softmax_policy_loss_and_grad(
    logits_new: &[f64],
    logits_old: &[f64],
    logits_ref: &[f64],
    chosen: &[usize],
    advantages: &[f64],
    kl_gated_off: bool,
    params: PolicyLossParams,
) -> Result<PolicyLossOutput> {
    let a = logits_new.len();
    if a == 0 || logits_old.len() != a || logits_ref.len() != a {
        return Err(Error::contract(format!(
            "logit dimensions disagree: new {}, old {}, ref {}",
            a,
            logits_old.len(),
            logits_ref.len()
        )));
    }
    if chosen.len() != advantages.len() || chosen.is_empty() {
        return Err(Error::contract(format!(
            "{} chosen actions for {} advantages",
            chosen.len(),
            advantages.len()
        )));
    }
    if let Some(bad) = chosen.iter().find(|&&c| c >= a) {
        return Err(Error::contract(format!("action {bad} out of range for {a} arms")));
    }

    let lp_new = log_softmax(logits_new);
    let lp_old = log_softmax(logits_old);
    let lp_ref = log_softmax(logits_ref);
    let p_new: Vec<f64> = lp_new.iter().map(|l| l.exp()).collect();
    let kl = lp_new
        .iter()
        .zip(&lp_ref)
        .map(|(ln, lr)| ln.exp() * (ln - lr))
        .sum::<f64>()
        .max(0.0);
    let ratio: Vec<f64> = chosen.iter().map(|&c| (lp_new[c] - lp_old[c]).exp()).collect();

    let inputs = LossInputs {
        advantages: advantages.to_vec(),
        ratio: ratio.clone(),
        clip_range: params.clip_range,
        kl_per_rollout: vec![kl; chosen.len()],
        beta_kl: params.beta_kl,
        kl_gated_off,
    };
    let loss = grpo_loss(&inputs)?;

    let n = chosen.len() as f64;
    let mut grad = vec![0.0; a];
    for ((&c, &rho), &adv) in chosen.iter().zip(&ratio).zip(advantages) {
        if adv == 0.0 || !unclipped_active(rho, adv, params.clip_range) {
            continue;
        }
        // d rho / d z_k = rho (1[k = c] - p_k)
        let w = -adv * rho / n;
        for (k, gk) in grad.iter_mut().enumerate() {
            let indicator = if k == c { 1.0 } else { 0.0 };
            *gk += w * (indicator - p_new[k]);
        }
    }
    if kl_included(&inputs) && params.beta_kl != 0.0 {
        // d KL / d z_k = p_k (log p_k - log r_k - KL)
        for k in 0..a {
            grad[k] += params.beta_kl * p_new[k] * (lp_new[k] - lp_ref[k] - kl);
        }
    }
    Ok(PolicyLossOutput { loss, grad, ratio, kl })
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-4;

    #[test]
    fn composite_reward_before_and_after_cutoff() {
        let acc = [1.0, 0.0];
        let fmt = [1.0, 1.0];
        assert_eq!(composite_reward(&acc, &fmt, 10, 64).unwrap(), vec![2.0, 1.0]);
        assert_eq!(composite_reward(&acc, &fmt, 64, 64).unwrap(), vec![1.0, 0.0]);
        assert_eq!(composite_reward(&[0.0, 0.0], &[0.0, 0.0], 3, 64).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn composite_reward_rejects_mismatch_and_non_binary() {
        assert!(composite_reward(&[1.0], &[1.0, 0.0], 0, 64).is_err());
        assert!(composite_reward(&[0.5], &[1.0], 0, 64).is_err());
    }

    #[test]
    fn uniform_group_is_gated() {
        let (adv, gated) = group_advantage(&[1.0; 6], EPS).unwrap();
        assert!(gated);
        assert!(adv.iter().all(|&a| a == 0.0));
        let (_, gated) = group_advantage(&[0.0; 6], EPS).unwrap();
        assert!(gated);
        // composite rewards of 2 everywhere are uniform as well
        let (_, gated) = group_advantage(&[2.0; 4], EPS).unwrap();
        assert!(gated);
    }

    #[test]
    fn two_rollout_advantage() {
        let (adv, gated) = group_advantage(&[1.0, 0.0], EPS).unwrap();
        assert!(!gated);
        let expected = 0.5 / 0.5001;
        assert_eq!(adv, vec![expected, -expected]);
        assert!((adv[0] - 0.999_800_039_992_001_6).abs() < 1e-15);
    }

    #[test]
    fn alternating_group_normalizes() {
        let (adv, _) = group_advantage(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], EPS).unwrap();
        let mean = adv.iter().sum::<f64>() / 6.0;
        assert_eq!(mean, 0.0);
        let (_, sd) = group_stats(&adv);
        // sd(A) = sigma / (sigma + eps) with sigma = 0.5
        assert!((sd - 0.5 / 0.5001).abs() < 1e-12);
    }

    #[test]
    fn group_too_small() {
        assert!(group_advantage(&[1.0], EPS).is_err());
    }

    fn inputs(adv: &[f64], rho: &[f64], kl: &[f64], gated: bool) -> LossInputs {
        LossInputs {
            advantages: adv.to_vec(),
            ratio: rho.to_vec(),
            clip_range: Some(0.2),
            kl_per_rollout: kl.to_vec(),
            beta_kl: 0.04,
            kl_gated_off: gated,
        }
    }

    #[test]
    fn gated_zero_advantage_loss_is_zero() {
        let l = grpo_loss(&inputs(&[0.0, 0.0, 0.0], &[1.7, 0.3, 1.0], &[0.4, 0.4, 0.4], true)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn ungated_zero_advantage_keeps_kl() {
        let l = grpo_loss(&inputs(&[0.0, 0.0], &[1.0, 1.0], &[0.5, 0.5], false)).unwrap();
        assert!((l - 0.02).abs() < 1e-15);
    }

    #[test]
    fn ratio_one_zero_kl() {
        assert_eq!(grpo_loss(&inputs(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], false)).unwrap(), 0.0);
    }

    #[test]
    fn clip_caps_positive_advantage() {
        let t = grpo_loss_terms(&inputs(&[1.0], &[2.0], &[0.0], false)).unwrap();
        assert_eq!(t.policy, -1.2);
        let mut unclipped = inputs(&[1.0], &[2.0], &[0.0], false);
        unclipped.clip_range = None;
        assert_eq!(grpo_loss(&unclipped).unwrap(), -2.0);
    }

    #[test]
    fn loss_rejects_bad_ratio_and_lengths() {
        assert!(grpo_loss(&inputs(&[1.0], &[0.0], &[0.0], false)).is_err());
        assert!(grpo_loss(&inputs(&[1.0, 0.0], &[1.0], &[0.0], false)).is_err());
    }

    #[test]
    fn kl_against_shifted_reference() {
        // KL(uniform || softmax([1, 0])), value from an independent script:
        // 0.5 * (ln 0.5 - ln(e/(1+e))) + 0.5 * (ln 0.5 - ln(1/(1+e)))
        let kl = categorical_kl(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((kl - 0.120_114_506_958_277_5).abs() < 1e-15, "{kl}");
        let out = softmax_policy_loss_and_grad(
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[1.0, 0.0],
            &[0],
            &[1.0],
            false,
            PolicyLossParams { clip_range: Some(0.2), beta_kl: 0.04 },
        )
        .unwrap();
        assert_eq!(out.kl, kl);
        assert!((out.loss - (-1.0 + 0.04 * kl)).abs() < 1e-15);
    }

    #[test]
    fn identical_policies() {
        let z = [0.3, -1.2, 0.8];
        let adv = [0.7, -0.2, -0.5];
        let out = softmax_policy_loss_and_grad(
            &z,
            &z,
            &z,
            &[0, 1, 2],
            &adv,
            false,
            PolicyLossParams { clip_range: Some(0.2), beta_kl: 0.04 },
        )
        .unwrap();
        assert!(out.ratio.iter().all(|&r| r == 1.0));
        assert_eq!(out.kl, 0.0);
        let mean_adv = adv.iter().sum::<f64>() / 3.0;
        assert!((out.loss + mean_adv).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let p = PolicyLossParams { clip_range: None, beta_kl: 0.0 };
        assert!(softmax_policy_loss_and_grad(&[0.0; 3], &[0.0; 2], &[0.0; 3], &[0], &[1.0], false, p).is_err());
        assert!(softmax_policy_loss_and_grad(&[0.0; 3], &[0.0; 3], &[0.0; 3], &[5], &[1.0], false, p).is_err());
    }

    #[test]
    fn entropy_of_uniform() {
        assert!((entropy(&[0.0; 4]) - 4f64.ln()).abs() < 1e-15);
    }
}
