use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::stream;
use crate::types::Sample;

/// A synthetic problem with known ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTask {
    pub sample_id: String,
    pub true_difficulty: f64,
    pub correct_arm: usize,
    pub family: usize,
    pub source: String,
}

/// One component of the difficulty mixture: `weight` of the corpus with
/// difficulty uniform on `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Default mixture: 2 parts easy, 3 parts medium, 5 parts hard.
pub fn default_mixture() -> Vec<MixtureComponent> {
    vec![
        MixtureComponent { weight: 0.2, lo: 0.0, hi: 1.0 / 3.0 },
        MixtureComponent { weight: 0.3, lo: 1.0 / 3.0, hi: 2.0 / 3.0 },
        MixtureComponent { weight: 0.5, lo: 2.0 / 3.0, hi: 1.0 },
    ]
}

/// Shape of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_tasks: usize,
    pub n_arms: usize,
    pub n_families: usize,
    /// Relative sizes of the synthetic source datasets.
    pub sources: Vec<f64>,
    pub mixture: Vec<MixtureComponent>,
}

/// Split `n` into parts proportional to `weights`; the last part absorbs
/// rounding.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut out: Vec<usize> = weights.iter().map(|w| (n as f64 * w / total).round() as usize).collect();
    let assigned: usize = out[..out.len() - 1].iter().sum();
    let last = out.len() - 1;
    out[last] = n.saturating_sub(assigned);
    out
}

/// Generate a corpus. Component sizes are exact proportions of `n_tasks`;
/// difficulties, families and sources are drawn from `seed`.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Vec<SynthTask> {
    let mut rng = stream(seed, "corpus", 0);
    let family_arm: Vec<usize> = (0..spec.n_families).map(|_| rng.gen_range(0..spec.n_arms)).collect();
    let weights: Vec<f64> = spec.mixture.iter().map(|c| c.weight).collect();
    let counts = apportion(spec.n_tasks, &weights);
    let mut difficulties = Vec::with_capacity(spec.n_tasks);
    for (c, &count) in spec.mixture.iter().zip(&counts) {
        for _ in 0..count {
            difficulties.push(rng.gen_range(c.lo..c.hi));
        }
    }
    difficulties.shuffle(&mut rng);
    let source_total: f64 = spec.sources.iter().sum();
    difficulties
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let family = rng.gen_range(0..spec.n_families);
            let mut u = rng.gen::<f64>() * source_total;
            let mut source = spec.sources.len() - 1;
            for (j, w) in spec.sources.iter().enumerate() {
                if u < *w {
                    source = j;
                    break;
                }
                u -= w;
            }
            SynthTask {
                sample_id: format!("t{i:05}"),
                true_difficulty: d,
                correct_arm: family_arm[family],
                family,
                source: format!("synth-{source}"),
            }
        })
        .collect()
}

impl SynthTask {
    /// Dataset-file view of the task. The ground truth rides along in `meta`.
    pub fn to_sample(&self) -> Sample {
        let mut meta = BTreeMap::new();
        meta.insert("true_difficulty".into(), self.true_difficulty.into());
        meta.insert("family".into(), self.family.into());
        meta.insert("correct_arm".into(), self.correct_arm.into());
        Sample {
            id: self.sample_id.clone(),
            dataset: self.source.clone(),
            prompt: format!("family {}", self.family),
            answer: self.correct_arm.to_string(),
            meta,
        }
    }

    /// Inverse of [`SynthTask::to_sample`].
    pub fn from_sample(s: &Sample) -> Option<SynthTask> {
        Some(SynthTask {
            sample_id: s.id.clone(),
            true_difficulty: s.meta.get("true_difficulty")?.as_f64()?,
            correct_arm: s.meta.get("correct_arm")?.as_u64()? as usize,
            family: s.meta.get("family")?.as_u64()? as usize,
            source: s.dataset.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CorpusSpec {
        CorpusSpec {
            n_tasks: 2000,
            n_arms: 4,
            n_families: 8,
            sources: vec![4.0, 3.0, 2.0, 1.0],
            mixture: default_mixture(),
        }
    }

    #[test]
    fn mixture_counts_are_exact() {
        let tasks = generate_corpus(&spec(), 3);
        let easy = tasks.iter().filter(|t| t.true_difficulty < 1.0 / 3.0).count();
        let hard = tasks.iter().filter(|t| t.true_difficulty >= 2.0 / 3.0).count();
        assert_eq!((easy, 2000 - easy - hard, hard), (400, 600, 1000));
    }

    #[test]
    fn families_share_their_arm() {
        let tasks = generate_corpus(&spec(), 3);
        let mut arm = BTreeMap::new();
        for t in &tasks {
            assert_eq!(*arm.entry(t.family).or_insert(t.correct_arm), t.correct_arm);
        }
    }

    #[test]
    fn sample_roundtrip() {
        let t = &generate_corpus(&spec(), 1)[7];
        assert_eq!(SynthTask::from_sample(&t.to_sample()).as_ref(), Some(t));
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_corpus(&spec(), 9), generate_corpus(&spec(), 9));
        assert_ne!(generate_corpus(&spec(), 9), generate_corpus(&spec(), 10));
    }
}
