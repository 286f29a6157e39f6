use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::difficulty::{OracleError, RolloutOracle};
use crate::grpo::{log_sum_exp, softmax};
use crate::sim::task::SynthTask;
use crate::types::Sample;

/// Softmax bandit policy with one logit vector per task family.
///
/// On task `q` the policy samples arms from `softmax(theta_f + u_q e_c)`
/// where `c` is the correct arm and
/// `u_q = a (kappa - b d_q) + ln(A - 1)`. The success probability is then
///
/// ```text
/// p(q) = sigmoid(margin_f + a (kappa - b d_q) + ln(A - 1)),
/// margin_f = theta_f[c] - logsumexp_{j != c} theta_f[j]
/// ```
///
/// so a task with `d_q = kappa / b` is a coin flip under uniform logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPolicy {
    pub logits: Vec<Vec<f64>>,
    /// Capability kappa.
    pub capability: f64,
    /// Slope a.
    pub success_scale: f64,
    /// Difficulty weight b.
    pub difficulty_weight: f64,
    pub learning_rate: f64,
}

impl SimPolicy {
    pub fn uniform(n_families: usize, n_arms: usize, capability: f64, success_scale: f64, difficulty_weight: f64, learning_rate: f64) -> Self {
        SimPolicy {
            logits: vec![vec![0.0; n_arms]; n_families],
            capability,
            success_scale,
            difficulty_weight,
            learning_rate,
        }
    }

    pub fn n_arms(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    /// Constant boost `u_q` of the correct arm.
    pub fn task_offset(&self, task: &SynthTask) -> f64 {
        let arms = self.n_arms().max(2) as f64;
        self.success_scale * (self.capability - self.difficulty_weight * task.true_difficulty) + (arms - 1.0).ln()
    }

    /// Task-level logits built on an arbitrary family parameter table (the
    /// current, rollout-time or reference one).
    pub fn logits_with(&self, family_logits: &[Vec<f64>], task: &SynthTask) -> Vec<f64> {
        let mut z = family_logits[task.family].clone();
        z[task.correct_arm] += self.task_offset(task);
        z
    }

    pub fn task_logits(&self, task: &SynthTask) -> Vec<f64> {
        self.logits_with(&self.logits, task)
    }

    pub fn success_probability(&self, task: &SynthTask) -> f64 {
        let z = self.task_logits(task);
        let c = task.correct_arm;
        let others: Vec<f64> = z.iter().enumerate().filter(|(j, _)| *j != c).map(|(_, v)| *v).collect();
        if others.is_empty() {
            return 1.0;
        }
        let margin = z[c] - log_sum_exp(&others);
        1.0 / (1.0 + (-margin).exp())
    }
}

/// Sampled arms and binary rewards of one rollout group.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollouts {
    pub chosen: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub format: Vec<f64>,
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draw `g` independent arms for `task`. Accuracy is 1 on the correct arm;
/// format is an independent Bernoulli(`format_prob`).
pub fn rollout(policy: &SimPolicy, task: &SynthTask, g: usize, format_prob: f64, seed: u64) -> Rollouts {
    let probs = softmax(&policy.task_logits(task));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Rollouts {
        chosen: Vec::with_capacity(g),
        accuracy: Vec::with_capacity(g),
        format: Vec::with_capacity(g),
    };
    for _ in 0..g {
        let arm = sample_categorical(&probs, &mut rng);
        out.chosen.push(arm);
        out.accuracy.push(if arm == task.correct_arm { 1.0 } else { 0.0 });
        out.format.push(if rng.gen::<f64>() < format_prob { 1.0 } else { 0.0 });
    }
    out
}

/// Format-reward model: the probability of a well-formed answer climbs
/// linearly from `initial` to 1 over `ramp_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormatModel {
    pub initial: f64,
    pub ramp_steps: u64,
}

impl FormatModel {
    pub fn probability(&self, step: u64) -> f64 {
        if self.ramp_steps == 0 {
            return 1.0;
        }
        (self.initial + (1.0 - self.initial) * step as f64 / self.ramp_steps as f64).min(1.0)
    }
}

/// Difficulty oracle bound to a frozen policy snapshot.
#[derive(Debug, Clone)]
pub struct SimOracle {
    policy: Arc<SimPolicy>,
    tasks: Arc<HashMap<String, SynthTask>>,
}

impl SimOracle {
    pub fn new(policy: SimPolicy, tasks: Arc<HashMap<String, SynthTask>>) -> Self {
        SimOracle {
            policy: Arc::new(policy),
            tasks,
        }
    }

    pub fn policy(&self) -> &SimPolicy {
        &self.policy
    }
}

impl RolloutOracle for SimOracle {
    fn evaluate(&self, sample: &Sample, n_attempts: u32, seed: u64) -> Result<u32, OracleError> {
        let task = self
            .tasks
            .get(&sample.id)
            .ok_or_else(|| OracleError(format!("unknown synthetic task `{}`", sample.id)))?;
        let p = self.policy.success_probability(task);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n_attempts).filter(|_| rng.gen::<f64>() < p).count() as u32)
    }
}
