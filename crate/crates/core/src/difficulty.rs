//! Coarse-to-fine difficulty estimation.
//!
//! A cheap pass with a handful of rollouts bins every problem, a stratified
//! draw from the bins fixes the target difficulty mix, and a second pass with
//! many rollouts scores the drawn problems precisely. Problems that are
//! almost always or almost never solved are then dropped and the rest sorted
//! from easy to hard.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_sample_seed, stream};
use crate::types::{CoarseBin, DifficultyRecord, Sample};

pub const DEFAULT_COARSE_ATTEMPTS: u32 = 5;
pub const DEFAULT_FINE_ATTEMPTS: u32 = 100;
pub const DEFAULT_LO: f64 = 0.05;
pub const DEFAULT_HI: f64 = 0.95;

/// Failure reported by an oracle for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleError(pub String);

/// Something that attempts a sample `n` times and counts the successes.
///
/// Implementations must be deterministic in `(sample, n_attempts, seed)`
/// and return a count in `0..=n_attempts`. Answer judging lives entirely on
/// this side of the interface.
pub trait RolloutOracle: Send + Sync {
    fn evaluate(&self, sample: &Sample, n_attempts: u32, seed: u64) -> std::result::Result<u32, OracleError>;

    /// Oracles that cannot take concurrent calls return `false`; the
    /// estimator then evaluates samples one at a time.
    fn is_concurrent(&self) -> bool {
        true
    }
}

impl<T: RolloutOracle + ?Sized> RolloutOracle for &T {
    fn evaluate(&self, sample: &Sample, n_attempts: u32, seed: u64) -> std::result::Result<u32, OracleError> {
        (**self).evaluate(sample, n_attempts, seed)
    }
    fn is_concurrent(&self) -> bool {
        (**self).is_concurrent()
    }
}

/// Estimation output: one record per input sample, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimation {
    pub records: Vec<DifficultyRecord>,
    pub failures: usize,
}

/// Runs oracle passes over samples, optionally on a worker pool.
pub struct Estimator<'a, O: RolloutOracle + ?Sized> {
    oracle: &'a O,
    workers: usize,
    coarse_attempts: u32,
}

impl<'a, O: RolloutOracle + ?Sized> Estimator<'a, O> {
    pub fn new(oracle: &'a O) -> Self {
        Estimator {
            oracle,
            workers: 1,
            coarse_attempts: DEFAULT_COARSE_ATTEMPTS,
        }
    }

    pub fn workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn coarse_attempts(mut self, attempts: u32) -> Self {
        self.coarse_attempts = attempts;
        self
    }

    fn run<F>(&self, samples: &[Sample], f: F) -> Result<Vec<DifficultyRecord>>
    where
        F: Fn(&Sample) -> DifficultyRecord + Send + Sync,
    {
        if self.workers <= 1 || !self.oracle.is_concurrent() {
            return Ok(samples.iter().map(f).collect());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        // par_iter().collect() keeps input order, whatever the interleaving.
        Ok(pool.install(|| samples.par_iter().map(&f).collect()))
    }

    /// Bin every sample from `coarse_attempts` rollouts.
    pub fn coarse(&self, samples: &[Sample], seed: u64) -> Result<Estimation> {
        if samples.is_empty() {
            return Err(Error::contract("coarse estimation needs at least one sample"));
        }
        let attempts = self.coarse_attempts;
        let records = self.run(samples, |s| {
            let sample_seed = derive_sample_seed(seed, &format!("coarse/{}", s.id), 0);
            match checked_eval(self.oracle, s, attempts, sample_seed) {
                Ok(c) => DifficultyRecord::coarse(s.id.clone(), c, attempts),
                Err(_) => DifficultyRecord::failed(s.id.clone()),
            }
        })?;
        Ok(finish(records))
    }

    /// Score every sample as `1 - correct / n` from `n` fresh rollouts.
    pub fn fine(&self, samples: &[Sample], n: u32, seed: u64) -> Result<Estimation> {
        if n == 0 {
            return Err(Error::contract("fine estimation needs n >= 1"));
        }
        if samples.is_empty() {
            return Err(Error::contract("fine estimation needs at least one sample"));
        }
        let records = self.run(samples, |s| {
            let sample_seed = derive_sample_seed(seed, &format!("fine/{}", s.id), 0);
            match checked_eval(self.oracle, s, n, sample_seed) {
                Ok(c) => DifficultyRecord::fine(s.id.clone(), c, n),
                Err(_) => DifficultyRecord::failed(s.id.clone()),
            }
        })?;
        Ok(finish(records))
    }
}

fn checked_eval<O: RolloutOracle + ?Sized>(
    oracle: &O,
    sample: &Sample,
    n: u32,
    seed: u64,
) -> std::result::Result<u32, OracleError> {
    let c = oracle.evaluate(sample, n, seed)?;
    if c > n {
        return Err(OracleError(format!("{c} successes out of {n} attempts")));
    }
    Ok(c)
}

fn finish(records: Vec<DifficultyRecord>) -> Estimation {
    let failures = records.iter().filter(|r| r.failed).count();
    Estimation { records, failures }
}

pub fn coarse_estimate<O: RolloutOracle + ?Sized>(samples: &[Sample], oracle: &O, seed: u64) -> Result<Estimation> {
    Estimator::new(oracle).coarse(samples, seed)
}

pub fn fine_estimate<O: RolloutOracle + ?Sized>(samples: &[Sample], oracle: &O, n: u32, seed: u64) -> Result<Estimation> {
    Estimator::new(oracle).fine(samples, n, seed)
}

/// Copy coarse fields from `coarse` into fine records with the same id.
pub fn attach_coarse(fine: &mut [DifficultyRecord], coarse: &[DifficultyRecord]) {
    let by_id: HashMap<&str, &DifficultyRecord> = coarse.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    for rec in fine.iter_mut() {
        if let Some(c) = by_id.get(rec.sample_id.as_str()) {
            rec.coarse_correct = c.coarse_correct;
            rec.coarse_bin = c.coarse_bin;
        }
    }
}

/// How many samples to draw from each coarse bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingTargets {
    /// `n_k = floor(ratio_k * |G_k|)`.
    Ratios([f64; 3]),
    Counts([usize; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub targets: SamplingTargets,
    /// Spread each bin's draw evenly over source datasets.
    pub per_dataset_balance: bool,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            targets: SamplingTargets::Ratios([1.0; 3]),
            per_dataset_balance: true,
        }
    }
}

impl SamplingPlan {
    pub fn resolve(&self, bin_sizes: [usize; 3]) -> Result<[usize; 3]> {
        match &self.targets {
            SamplingTargets::Counts(c) => Ok(*c),
            SamplingTargets::Ratios(r) => {
                let mut out = [0; 3];
                for k in 0..3 {
                    if !(r[k] >= 0.0) {
                        return Err(Error::Config(format!("sampling ratio {} is negative", r[k])));
                    }
                    out[k] = (r[k] * bin_sizes[k] as f64).floor() as usize;
                }
                Ok(out)
            }
        }
    }
}

/// Split `target` over groups of the given sizes by capped equal shares:
/// groups are visited smallest first, each takes its equal share of what is
/// left or everything it has, whichever is smaller.
///
/// Returns allocations in the order of `sizes`. Whenever
/// `target <= sizes.sum()` the allocations add up to `target`.
pub fn capped_equal_shares(sizes: &[usize], target: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| (sizes[i], i));
    let mut out = vec![0; sizes.len()];
    let mut remaining = target;
    for (pos, &i) in order.iter().enumerate() {
        let left = order.len() - pos;
        let share = remaining / left;
        let grant = share.min(sizes[i]);
        out[i] = grant;
        remaining -= grant;
    }
    out
}

/// Result of a stratified draw.
#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedSample {
    pub samples: Vec<Sample>,
    pub bin_sizes: [usize; 3],
    pub targets: [usize; 3],
    /// Per bin, the number of samples each source dataset contributed.
    pub contributions: [BTreeMap<String, usize>; 3],
}

/// Draw `n_k` samples from every coarse bin without replacement.
///
/// Output order: bins G1, G2, G3; within a bin, the order of appearance in
/// `records`.
pub fn stratified_sample(
    records: &[DifficultyRecord],
    samples_by_id: &HashMap<String, Sample>,
    plan: &SamplingPlan,
    seed: u64,
) -> Result<StratifiedSample> {
    let mut bins: [Vec<&Sample>; 3] = Default::default();
    for rec in records.iter().filter(|r| !r.failed) {
        let bin = rec
            .coarse_bin
            .ok_or_else(|| Error::contract(format!("record `{}` has no coarse bin", rec.sample_id)))?;
        let sample = samples_by_id
            .get(&rec.sample_id)
            .ok_or_else(|| Error::contract(format!("record `{}` has no matching sample", rec.sample_id)))?;
        bins[bin.index()].push(sample);
    }
    let bin_sizes = [bins[0].len(), bins[1].len(), bins[2].len()];
    let targets = plan.resolve(bin_sizes)?;

    let mut samples = Vec::new();
    let mut contributions: [BTreeMap<String, usize>; 3] = Default::default();
    for bin in CoarseBin::ALL {
        let k = bin.index();
        let members = &bins[k];
        if targets[k] > members.len() {
            return Err(Error::BinExhausted {
                bin,
                requested: targets[k],
                available: members.len(),
            });
        }
        let mut picked: Vec<usize> = if plan.per_dataset_balance {
            let mut by_dataset: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, s) in members.iter().enumerate() {
                by_dataset.entry(s.dataset.as_str()).or_default().push(i);
            }
            let names: Vec<&str> = by_dataset.keys().copied().collect();
            let sizes: Vec<usize> = by_dataset.values().map(Vec::len).collect();
            let shares = capped_equal_shares(&sizes, targets[k]);
            let mut picked = Vec::with_capacity(targets[k]);
            for ((name, share), idx) in names.iter().zip(&shares).zip(by_dataset.values()) {
                let mut rng = stream(seed, &format!("stratified/{bin}/{name}"), 0);
                picked.extend(index::sample(&mut rng, idx.len(), *share).into_iter().map(|j| idx[j]));
            }
            picked
        } else {
            let mut rng = stream(seed, &format!("stratified/{bin}"), 0);
            index::sample(&mut rng, members.len(), targets[k]).into_vec()
        };
        picked.sort_unstable();
        for i in picked {
            let s = members[i];
            *contributions[k].entry(s.dataset.clone()).or_insert(0) += 1;
            samples.push(s.clone());
        }
    }
    Ok(StratifiedSample {
        samples,
        bin_sizes,
        targets,
        contributions,
    })
}

/// Records surviving the difficulty band, plus what was dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub records: Vec<DifficultyRecord>,
    pub below: usize,
    pub above: usize,
    pub failed: usize,
}

/// Keep records with `lo <= difficulty <= hi`, sorted by ascending difficulty
/// and then by sample id.
pub fn filter_and_sort(records: &[DifficultyRecord], lo: f64, hi: f64) -> Result<Filtered> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::Config(format!("difficulty band [{lo}, {hi}] is not within [0, 1]")));
    }
    let (mut below, mut above, mut failed) = (0, 0, 0);
    let mut kept = Vec::new();
    for rec in records {
        match rec.difficulty {
            None => failed += 1,
            Some(_) if rec.failed => failed += 1,
            Some(d) if d < lo => below += 1,
            Some(d) if d > hi => above += 1,
            Some(_) => kept.push(rec.clone()),
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyCurriculum { lo, hi });
    }
    kept.sort_by(|a, b| {
        let (da, db) = (a.difficulty.unwrap_or(0.0), b.difficulty.unwrap_or(0.0));
        da.total_cmp(&db).then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    Ok(Filtered {
        records: kept,
        below,
        above,
        failed,
    })
}

/// Sidecar summary of an estimation run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EstimationSummary {
    pub coarse_samples: usize,
    pub coarse_failures: usize,
    /// G1, G2, G3 sizes after the coarse pass.
    pub bin_sizes: [usize; 3],
    pub targets: [usize; 3],
    /// Source-dataset contributions to the stratified draw, per bin.
    pub contributions: BTreeMap<String, BTreeMap<String, usize>>,
    pub fine_samples: usize,
    pub fine_failures: usize,
    pub n_fine: u32,
    pub filtered_below: usize,
    pub filtered_above: usize,
    pub retained: usize,
    /// Fine rollouts are drawn with seeds independent of the coarse ones;
    /// the coarse attempts are never reused.
    pub fine_reuses_coarse: bool,
}

impl EstimationSummary {
    pub fn record_stratified(&mut self, s: &StratifiedSample) {
        self.bin_sizes = s.bin_sizes;
        self.targets = s.targets;
        for bin in CoarseBin::ALL {
            self.contributions.insert(bin.to_string(), s.contributions[bin.index()].clone());
        }
    }
}

/// Parameters of the full coarse, sample, fine, filter pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub coarse_attempts: u32,
    pub n_fine: u32,
    pub lo: f64,
    pub hi: f64,
    pub plan: SamplingPlan,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            coarse_attempts: DEFAULT_COARSE_ATTEMPTS,
            n_fine: DEFAULT_FINE_ATTEMPTS,
            lo: DEFAULT_LO,
            hi: DEFAULT_HI,
            plan: SamplingPlan::default(),
            workers: 1,
        }
    }
}

/// Output of [`coarse_to_fine`]: the sorted curriculum and its summary.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub curriculum: Vec<DifficultyRecord>,
    pub coarse: Vec<DifficultyRecord>,
    pub fine: Vec<DifficultyRecord>,
    pub summary: EstimationSummary,
}

/// Coarse pass over `samples`, stratified draw, fine pass, band filter, sort.
pub fn coarse_to_fine<O: RolloutOracle + ?Sized>(
    samples: &[Sample],
    oracle: &O,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<PipelineOutput> {
    let est = Estimator::new(oracle)
        .workers(cfg.workers)
        .coarse_attempts(cfg.coarse_attempts);
    let coarse = est.coarse(samples, derive_sample_seed(seed, "pipeline/coarse", 0))?;
    let by_id: HashMap<String, Sample> = samples.iter().map(|s| (s.id.clone(), s.clone())).collect();
    let drawn = stratified_sample(
        &coarse.records,
        &by_id,
        &cfg.plan,
        derive_sample_seed(seed, "pipeline/sample", 0),
    )?;
    let mut fine = est.fine(&drawn.samples, cfg.n_fine, derive_sample_seed(seed, "pipeline/fine", 0))?;
    attach_coarse(&mut fine.records, &coarse.records);
    let filtered = filter_and_sort(&fine.records, cfg.lo, cfg.hi)?;

    let mut summary = EstimationSummary {
        coarse_samples: samples.len(),
        coarse_failures: coarse.failures,
        fine_samples: drawn.samples.len(),
        fine_failures: fine.failures,
        n_fine: cfg.n_fine,
        filtered_below: filtered.below,
        filtered_above: filtered.above,
        retained: filtered.records.len(),
        ..Default::default()
    };
    summary.record_stratified(&drawn);
    Ok(PipelineOutput {
        curriculum: filtered.records,
        coarse: coarse.records,
        fine: fine.records,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(u32);
    impl RolloutOracle for Fixed {
        fn evaluate(&self, _: &Sample, n: u32, _: u64) -> std::result::Result<u32, OracleError> {
            Ok(self.0.min(n))
        }
    }

    struct FailsOn(&'static str);
    impl RolloutOracle for FailsOn {
        fn evaluate(&self, s: &Sample, n: u32, _: u64) -> std::result::Result<u32, OracleError> {
            if s.id == self.0 {
                Err(OracleError("boom".into()))
            } else {
                Ok(n)
            }
        }
    }

    struct Overcount;
    impl RolloutOracle for Overcount {
        fn evaluate(&self, _: &Sample, n: u32, _: u64) -> std::result::Result<u32, OracleError> {
            Ok(n + 1)
        }
    }

    fn sample(id: &str, dataset: &str) -> Sample {
        Sample {
            id: id.into(),
            dataset: dataset.into(),
            prompt: String::new(),
            answer: "x".into(),
            meta: Default::default(),
        }
    }

    fn samples(n: usize) -> Vec<Sample> {
        (0..n).map(|i| sample(&format!("q{i:03}"), "d")).collect()
    }

    fn with_difficulty(id: &str, d: f64) -> DifficultyRecord {
        DifficultyRecord {
            difficulty: Some(d),
            ..DifficultyRecord::fine(id, 0, 100)
        }
    }

    #[test]
    fn coarse_zero_and_five() {
        let s = samples(3);
        let r = coarse_estimate(&s, &Fixed(0), 1).unwrap();
        assert!(r.records.iter().all(|r| r.coarse_bin == Some(CoarseBin::G1)));
        let r = coarse_estimate(&s, &Fixed(5), 1).unwrap();
        assert!(r.records.iter().all(|r| r.coarse_bin == Some(CoarseBin::G3) && r.coarse_correct == Some(5)));
        assert!(r.records.iter().all(|r| r.difficulty.is_none()));
    }

    #[test]
    fn constant_oracle_over_hundred() {
        let r = coarse_estimate(&samples(100), &Fixed(u32::MAX), 3).unwrap();
        assert_eq!(r.records.len(), 100);
        assert!(r.records.iter().all(|r| r.coarse_correct == Some(5)));
    }

    #[test]
    fn oracle_failure_is_marked() {
        let s = samples(4);
        let r = coarse_estimate(&s, &FailsOn("q002"), 0).unwrap();
        assert_eq!(r.failures, 1);
        assert!(r.records[2].failed);
        assert_eq!(r.records[2].sample_id, "q002");
        let f = fine_estimate(&s, &Overcount, 10, 0).unwrap();
        assert_eq!(f.failures, 4);
    }

    #[test]
    fn fine_values() {
        let r = fine_estimate(&samples(2), &Fixed(50), 100, 0).unwrap();
        assert_eq!(r.records[0].difficulty, Some(0.5));
        let r = fine_estimate(&samples(2), &Fixed(0), 100, 0).unwrap();
        assert_eq!(r.records[0].difficulty, Some(1.0));
        assert!(fine_estimate(&samples(2), &Fixed(0), 0, 0).is_err());
    }

    #[test]
    fn ratio_floor_arithmetic() {
        let plan = SamplingPlan {
            targets: SamplingTargets::Ratios([0.5; 3]),
            per_dataset_balance: false,
        };
        assert_eq!(plan.resolve([40, 30, 30]).unwrap(), [20, 15, 15]);
        assert_eq!(plan.resolve([41, 31, 1]).unwrap(), [20, 15, 0]);
    }

    #[test]
    fn capped_shares_small_source_gives_everything() {
        // A has 100 in-bin, B has 10; target 60
        assert_eq!(capped_equal_shares(&[100, 10], 60), vec![50, 10]);
        assert_eq!(capped_equal_shares(&[5, 5, 5], 10), vec![3, 3, 4]);
        assert_eq!(capped_equal_shares(&[], 0), Vec::<usize>::new());
    }

    #[test]
    fn stratified_balance_between_two_sources() {
        let mut all = Vec::new();
        let mut recs = Vec::new();
        for i in 0..100 {
            all.push(sample(&format!("a{i:03}"), "A"));
        }
        for i in 0..10 {
            all.push(sample(&format!("b{i:03}"), "B"));
        }
        for s in &all {
            recs.push(DifficultyRecord::coarse(s.id.clone(), 2, 5));
        }
        let by_id = all.iter().map(|s| (s.id.clone(), s.clone())).collect();
        let plan = SamplingPlan {
            targets: SamplingTargets::Counts([0, 60, 0]),
            per_dataset_balance: true,
        };
        let out = stratified_sample(&recs, &by_id, &plan, 9).unwrap();
        assert_eq!(out.samples.len(), 60);
        assert_eq!(out.contributions[1]["A"], 50);
        assert_eq!(out.contributions[1]["B"], 10);
        let again = stratified_sample(&recs, &by_id, &plan, 9).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn bin_exhaustion_names_bin() {
        let all = samples(3);
        let recs: Vec<_> = all.iter().map(|s| DifficultyRecord::coarse(s.id.clone(), 5, 5)).collect();
        let by_id = all.iter().map(|s| (s.id.clone(), s.clone())).collect();
        let plan = SamplingPlan {
            targets: SamplingTargets::Counts([1, 0, 0]),
            per_dataset_balance: false,
        };
        match stratified_sample(&recs, &by_id, &plan, 0) {
            Err(Error::BinExhausted { bin, requested, available }) => {
                assert_eq!((bin, requested, available), (CoarseBin::G1, 1, 0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn band_filter() {
        let recs: Vec<_> = [0.0, 0.04, 0.5, 0.96, 1.0]
            .iter()
            .enumerate()
            .map(|(i, &d)| with_difficulty(&format!("q{i}"), d))
            .collect();
        let out = filter_and_sort(&recs, DEFAULT_LO, DEFAULT_HI).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].difficulty, Some(0.5));
        assert_eq!((out.below, out.above), (2, 2));
    }

    #[test]
    fn band_is_inclusive() {
        let recs = vec![with_difficulty("a", 0.05), with_difficulty("b", 0.95)];
        assert_eq!(filter_and_sort(&recs, 0.05, 0.95).unwrap().records.len(), 2);
    }

    #[test]
    fn empty_curriculum() {
        assert!(matches!(filter_and_sort(&[], 0.05, 0.95), Err(Error::EmptyCurriculum { .. })));
    }

    #[test]
    fn ties_broken_by_id() {
        let recs = vec![with_difficulty("b", 0.3), with_difficulty("a", 0.3), with_difficulty("c", 0.2)];
        let ids: Vec<_> = filter_and_sort(&recs, 0.05, 0.95)
            .unwrap()
            .records
            .into_iter()
            .map(|r| r.sample_id)
            .collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }
}
