//! Iterative attack driver.
//!
//! One SBFA iteration: gradients on the gradient split, SKIP search for the
//! global top-k, evaluation of every candidate flip on the evaluation split,
//! and permanent application of the candidate leaving the lowest accuracy.
//! Gradient-BFA baselines skip the candidate evaluation and apply the single
//! best-ranked flip of their variant each iteration.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BundleError, NumericalError, Result};
use crate::impact::FlipCandidate;
use crate::nnet::{self, Batch, Split, TaskSpec};
use crate::search::{self, BaselineVariant, SearchStats, DEFAULT_K};
use crate::tensormodel::{self, AttackMode, Exclusions, ModelBundle, RangePolicy};

pub const DEFAULT_GRAD_SAMPLES: usize = 200;
pub const DEFAULT_EVAL_SAMPLES: usize = 100;
pub const DEFAULT_MAX_ITERATIONS: usize = 500;
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

/// Attack algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Sbfa,
    Bfa(BaselineVariant),
}

impl Method {
    /// Whether applied flips must satisfy the range constraint.
    pub fn is_sneaky(&self) -> bool {
        matches!(self, Method::Sbfa | Method::Bfa(BaselineVariant::InRange))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Sbfa => f.write_str("sbfa"),
            Method::Bfa(v) => write!(f, "bfa-{v}"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "sbfa" {
            return Ok(Method::Sbfa);
        }
        s.strip_prefix("bfa-")
            .and_then(|v| v.parse().ok())
            .map(Method::Bfa)
            .ok_or_else(|| format!("unknown method `{s}` (sbfa, bfa-no-range, bfa-in-range, bfa-sign-only)"))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub task: String,
    pub method: Method,
    pub mode: AttackMode,
    pub k: usize,
    pub grad_samples: usize,
    pub eval_samples: usize,
    /// Accuracy strictly below this ends the attack successfully.
    pub critical_threshold: f64,
    pub max_iterations: usize,
    pub seeds: Vec<u64>,
    pub exclusions: Vec<String>,
    pub freeze_range: bool,
    /// Evaluate candidates on only the first N evaluation samples.
    pub fast_eval: Option<usize>,
}

impl AttackConfig {
    /// Defaults for `task`, threshold at its chance level.
    pub fn for_task(task: &TaskSpec, mode: AttackMode) -> AttackConfig {
        AttackConfig {
            task: task.name.clone(),
            method: Method::Sbfa,
            mode,
            k: DEFAULT_K,
            grad_samples: DEFAULT_GRAD_SAMPLES,
            eval_samples: DEFAULT_EVAL_SAMPLES,
            critical_threshold: task.chance_level,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            seeds: DEFAULT_SEEDS.to_vec(),
            exclusions: Vec::new(),
            freeze_range: false,
            fast_eval: None,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.critical_threshold > 0.0 && self.critical_threshold < 1.0) {
            return Err(format!("threshold {} outside (0, 1)", self.critical_threshold));
        }
        if self.k == 0 {
            return Err("k must be positive".into());
        }
        if self.grad_samples == 0 || self.eval_samples == 0 {
            return Err("sample counts must be positive".into());
        }
        if self.fast_eval == Some(0) {
            return Err("--fast-eval must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Termination {
    BelowThreshold,
    MaxIter,
    NumericalError,
    /// No target weight admitted any candidate flip.
    NoCandidates,
    /// The weights returned to an earlier state. Every phase is a pure
    /// function of the weights, so the run would cycle without progress.
    Stalled,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::BelowThreshold => "BELOW_THRESHOLD",
            Termination::MaxIter => "MAX_ITER",
            Termination::NumericalError => "NUMERICAL_ERROR",
            Termination::NoCandidates => "NO_CANDIDATES",
            Termination::Stalled => "STALLED",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Termination::BelowThreshold => 0,
            Termination::MaxIter | Termination::NoCandidates | Termination::Stalled => 2,
            Termination::NumericalError => 3,
        }
    }
}

/// A candidate evaluated in isolation during an iteration sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEval {
    pub rank: usize,
    pub tensor: String,
    pub candidate: FlipCandidate,
    /// None when the forward pass hit a numerical error.
    pub post_acc: Option<f64>,
    pub numerical_error: Option<String>,
    /// Post-flip value inside the range in force at evaluation time.
    pub sneaky: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedFlip {
    pub iteration: usize,
    pub tensor: String,
    pub layer_index: usize,
    pub param_kind: String,
    pub candidate: FlipCandidate,
    pub sneaky: bool,
    /// Accuracy after application; None when evaluation failed numerically.
    pub accuracy_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub weights_considered: usize,
    pub weights_scored: usize,
    pub layers_early_broken: usize,
    /// Skip events whose bound was not strictly below the k-th score.
    pub skip_audit_failures: usize,
}

impl From<&SearchStats> for SearchSummary {
    fn from(s: &SearchStats) -> Self {
        SearchSummary {
            weights_considered: s.weights_considered,
            weights_scored: s.weights_scored,
            layers_early_broken: s.layers_early_broken,
            skip_audit_failures: s.skips.iter().filter(|e| e.bound.partial_cmp(&e.kth_score) != Some(std::cmp::Ordering::Less)).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub search: Option<SearchSummary>,
    pub candidates: Vec<CandidateEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusEntry {
    pub rank: usize,
    pub tensor: String,
    pub layer_index: usize,
    pub param_kind: String,
    pub flat_index: usize,
    pub bit_position: u32,
    #[serde(with = "crate::serde_ext::ieee")]
    pub delta: f64,
    #[serde(with = "crate::serde_ext::ieee")]
    pub impact_score: f64,
    pub post_acc: Option<f64>,
    pub critical: bool,
}

/// Single-flip census over the first iteration's candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub threshold: f64,
    pub count: usize,
    pub entries: Vec<CensusEntry>,
}

impl Census {
    /// Count, or "F" when no single flip crosses the threshold.
    pub fn display_count(&self) -> String {
        if self.count == 0 {
            "F".to_string()
        } else {
            self.count.to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub task: String,
    pub pre_acc: f64,
    pub post_acc: Option<f64>,
    pub numerical_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub config: AttackConfig,
    pub seed: u64,
    pub bundle_checksum: String,
    pub num_weights: usize,
    pub target_weights: usize,
    pub pre_acc: f64,
    /// Accuracy after the last applied flip that evaluated finitely.
    pub post_acc: f64,
    pub termination: Termination,
    pub numerical_error: Option<NumericalError>,
    pub iterations: Vec<IterationRecord>,
    pub applied_flips: Vec<AppliedFlip>,
    pub census: Census,
    pub sneaky_violations: usize,
    pub transfer: Vec<TransferResult>,
}

impl AttackReport {
    pub fn flip_count(&self) -> usize {
        self.applied_flips.len()
    }
}

/// Wall-clock phase durations; kept apart from the deterministic report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    /// Data/model load and setup.
    pub setup: f64,
    pub gradients: f64,
    pub ranking: f64,
    pub evaluation: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.setup + self.gradients + self.ranking + self.evaluation
    }

    pub fn rows(&self) -> [(u8, &'static str, f64); 4] {
        [
            (1, "data/model load + initial setup", self.setup),
            (2, "calculating gradient", self.gradients),
            (3, "rank top-k candidates", self.ranking),
            (4, "evaluation of candidate flips", self.evaluation),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AttackRun {
    pub report: AttackReport,
    pub timings: PhaseTimings,
    pub final_bundle: ModelBundle,
}

impl From<NumericalError> for BundleError {
    fn from(e: NumericalError) -> Self {
        BundleError::Architecture(e.to_string())
    }
}

fn split_batches(task: &TaskSpec, config: &AttackConfig, seed: u64) -> (Batch, Batch) {
    let mut sized = task.clone();
    sized.grad_samples = config.grad_samples;
    sized.eval_samples = config.eval_samples;
    (sized.batch(Split::Grad { run_seed: seed }), sized.batch(Split::Eval { run_seed: seed }))
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    *slot += t.elapsed().as_secs_f64();
    out
}

fn evaluate_candidates(
    bundle: &ModelBundle,
    candidates: &[FlipCandidate],
    batch: &Batch,
) -> Vec<std::result::Result<f64, NumericalError>> {
    let base_params = bundle.effective_params();
    // Each rayon job owns a bundle copy and a parameter copy; a candidate is
    // applied by XOR on the copy, evaluated, then undone.
    candidates
        .par_iter()
        .map_init(
            || (bundle.clone(), base_params.clone()),
            |(local, params), c| {
                let w = c.weight;
                let token = local.apply_flip(w, c.bit_position).expect("candidate addresses bundle");
                params[w.tensor_id][w.flat_index] = local.effective_value(w).expect("in bounds");
                let acc = nnet::evaluate_params(&local.architecture, params, batch);
                local.undo(token);
                params[w.tensor_id][w.flat_index] = base_params[w.tensor_id][w.flat_index];
                acc
            },
        )
        .collect()
}

/// Runs one seeded attack on a copy of `bundle`.
pub fn run_attack(bundle: &ModelBundle, task: &TaskSpec, config: &AttackConfig, seed: u64) -> Result<AttackRun> {
    config.validate().map_err(|e| BundleError::Mode { mode: config.mode.to_string(), reason: e })?;
    let batch_check = |b: &Batch| {
        nnet::check_compatible(&bundle.architecture, b).map_err(BundleError::Architecture)
    };
    let mut timings = PhaseTimings::default();
    let setup_start = Instant::now();

    let mut work = bundle.clone();
    work.clear_gradients();
    work.set_range_policy(if config.freeze_range { RangePolicy::Frozen } else { RangePolicy::Live });
    let exclusions = Exclusions::new(&config.exclusions)?;
    let targets = tensormodel::targets(&work, config.mode, &exclusions)?;
    let (grad_batch, eval_batch) = split_batches(task, config, seed);
    batch_check(&grad_batch)?;
    let candidate_batch = match config.fast_eval {
        Some(n) => eval_batch.truncated(n),
        None => eval_batch.clone(),
    };
    let pre_acc = nnet::evaluate(&work, &eval_batch)?;
    timings.setup += setup_start.elapsed().as_secs_f64();

    let mut report = AttackReport {
        config: config.clone(),
        seed,
        bundle_checksum: bundle.checksum(),
        num_weights: bundle.num_weights(),
        target_weights: targets.iter().map(|&t| bundle.tensors[t].len()).sum(),
        pre_acc,
        post_acc: pre_acc,
        termination: Termination::MaxIter,
        numerical_error: None,
        iterations: Vec::new(),
        applied_flips: Vec::new(),
        census: Census { threshold: config.critical_threshold, count: 0, entries: Vec::new() },
        sneaky_violations: 0,
        transfer: Vec::new(),
    };

    let mut acc = pre_acc;
    let mut visited = HashSet::new();
    report.termination = loop {
        if acc < config.critical_threshold {
            break Termination::BelowThreshold;
        }
        if report.iterations.len() >= config.max_iterations {
            break Termination::MaxIter;
        }
        if !visited.insert(work.checksum()) {
            break Termination::Stalled;
        }
        let iteration = report.iterations.len();

        let loss = match timed(&mut timings.gradients, || nnet::loss_and_grads(&mut work, &grad_batch)) {
            Ok(l) => l,
            Err(e) => {
                report.numerical_error = Some(e);
                break Termination::NumericalError;
            }
        };

        let (ranked, summary) = timed(&mut timings.ranking, || match config.method {
            Method::Sbfa => {
                let (q, stats) = search::skip_search(&work, &targets, config.k);
                (q.into_vec(), Some(SearchSummary::from(&stats)))
            }
            Method::Bfa(variant) => (search::baseline_rank(&work, &targets, variant, 1).into_vec(), None),
        });
        let mut record = IterationRecord { iteration, loss, search: summary, candidates: Vec::new() };

        let chosen = match config.method {
            Method::Sbfa => {
                let results = timed(&mut timings.evaluation, || evaluate_candidates(&work, &ranked, &candidate_batch));
                for (rank, (c, r)) in ranked.iter().zip(results).enumerate() {
                    let stats = work.layer_stats(c.weight.tensor_id);
                    let sneaky = stats.contains(c.new_value);
                    if !sneaky {
                        report.sneaky_violations += 1;
                    }
                    record.candidates.push(CandidateEval {
                        rank,
                        tensor: work.tensors[c.weight.tensor_id].meta.name.clone(),
                        candidate: *c,
                        post_acc: r.as_ref().ok().copied(),
                        numerical_error: r.err().map(|e| e.to_string()),
                        sneaky,
                    });
                }
                // Lowest accuracy wins; the first in queue order on ties.
                let mut best: Option<(usize, f64)> = None;
                for (i, ce) in record.candidates.iter().enumerate() {
                    if let Some(a) = ce.post_acc {
                        if best.is_none_or(|(_, b)| a < b) {
                            best = Some((i, a));
                        }
                    }
                }
                best.map(|(i, _)| ranked[i])
            }
            Method::Bfa(_) => ranked.first().copied(),
        };
        report.iterations.push(record);
        work.clear_gradients();

        let Some(c) = chosen else {
            break Termination::NoCandidates;
        };
        let sneaky = work.layer_stats(c.weight.tensor_id).contains(c.new_value);
        if config.method.is_sneaky() && !sneaky {
            report.sneaky_violations += 1;
        }
        let _permanent = work.apply_flip(c.weight, c.bit_position)?;
        let meta = &work.tensors[c.weight.tensor_id].meta;
        let mut applied = AppliedFlip {
            iteration,
            tensor: meta.name.clone(),
            layer_index: meta.layer_index,
            param_kind: meta.param_kind.clone(),
            candidate: c,
            sneaky,
            accuracy_after: None,
        };
        match nnet::evaluate(&work, &eval_batch) {
            Ok(a) => {
                acc = a;
                applied.accuracy_after = Some(a);
                report.applied_flips.push(applied);
            }
            Err(e) => {
                report.applied_flips.push(applied);
                report.numerical_error = Some(e);
                break Termination::NumericalError;
            }
        }
    };
    report.post_acc = acc;
    report.census = census_from_records(&report, &work);

    Ok(AttackRun { report, timings, final_bundle: work })
}

/// Recounts the single-flip census from the first iteration's evaluations.
pub fn census_from_records(report: &AttackReport, bundle: &ModelBundle) -> Census {
    let threshold = report.config.critical_threshold;
    let entries: Vec<CensusEntry> = report
        .iterations
        .first()
        .map(|it| {
            it.candidates
                .iter()
                .map(|ce| {
                    let meta = &bundle.tensors[ce.candidate.weight.tensor_id].meta;
                    CensusEntry {
                        rank: ce.rank,
                        tensor: ce.tensor.clone(),
                        layer_index: meta.layer_index,
                        param_kind: meta.param_kind.clone(),
                        flat_index: ce.candidate.weight.flat_index,
                        bit_position: ce.candidate.bit_position,
                        delta: ce.candidate.delta,
                        impact_score: ce.candidate.impact_score,
                        post_acc: ce.post_acc,
                        critical: ce.post_acc.is_some_and(|a| a < threshold),
                    }
                })
                .collect()
        })
        .unwrap_or_default();
    let count = entries.iter().filter(|e| e.critical).count();
    Census { threshold, count, entries }
}

/// Runs phases 2-4 once and returns the census, without applying anything.
pub fn census_crit_1flip(bundle: &ModelBundle, task: &TaskSpec, config: &AttackConfig, seed: u64) -> Result<Census> {
    // The smallest positive threshold keeps the pre-attack check from ending
    // the run before its first sweep (unless accuracy is already zero).
    let single = AttackConfig { method: Method::Sbfa, max_iterations: 1, critical_threshold: f64::MIN_POSITIVE, ..config.clone() };
    let mut run = run_attack(bundle, task, &single, seed)?;
    run.report.config.critical_threshold = config.critical_threshold;
    Ok(census_from_records(&run.report, bundle))
}

/// Critical-flip counts per (layer_index, param_kind), sorted by key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub layer_index: usize,
    pub param_kind: String,
    pub count: usize,
}

pub fn distribution_report(census: &Census) -> Vec<DistributionRow> {
    let mut counts: BTreeMap<(usize, String), usize> = BTreeMap::new();
    for e in census.entries.iter().filter(|e| e.critical) {
        *counts.entry((e.layer_index, e.param_kind.clone())).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|((layer_index, param_kind), count)| DistributionRow { layer_index, param_kind, count })
        .collect()
}

/// Replays `flips` on a fresh copy of the pre-attack bundle and evaluates
/// each task's evaluation split for `seed` before and after.
pub fn transfer_eval(
    bundle: &ModelBundle,
    flips: &[AppliedFlip],
    tasks: &[&TaskSpec],
    eval_samples: usize,
    seed: u64,
) -> Result<Vec<TransferResult>> {
    let mut attacked = bundle.clone();
    attacked.clear_gradients();
    for f in flips {
        let w = f.candidate.weight;
        let current = attacked.effective_value(w)?;
        if current.to_bits() != f.candidate.old_value.to_bits() && !(current.is_nan() && f.candidate.old_value.is_nan()) {
            return Err(BundleError::Architecture(format!(
                "flip on `{}`[{}] expects value {}, bundle holds {current}",
                f.tensor, w.flat_index, f.candidate.old_value
            )));
        }
        let _ = attacked.apply_flip(w, f.candidate.bit_position)?;
    }
    tasks
        .iter()
        .map(|task| {
            let mut sized = (*task).clone();
            sized.eval_samples = eval_samples;
            let batch = sized.batch(Split::Eval { run_seed: seed });
            nnet::check_compatible(&bundle.architecture, &batch).map_err(BundleError::Architecture)?;
            let pre_acc = nnet::evaluate(bundle, &batch)?;
            let post = nnet::evaluate(&attacked, &batch);
            Ok(TransferResult {
                task: task.name.clone(),
                pre_acc,
                post_acc: post.as_ref().ok().copied(),
                numerical_error: post.err().map(|e| e.to_string()),
            })
        })
        .collect()
}

/// Index of the best run: lowest post-attack accuracy, then fewest flips,
/// then earliest seed.
pub fn best_run(reports: &[AttackReport]) -> Option<usize> {
    (0..reports.len()).min_by(|&a, &b| {
        let (ra, rb) = (&reports[a], &reports[b]);
        ra.post_acc
            .total_cmp(&rb.post_acc)
            .then(ra.flip_count().cmp(&rb.flip_count()))
            .then(a.cmp(&b))
    })
}

/// Runs every configured seed.
pub fn run_seeds(bundle: &ModelBundle, task: &TaskSpec, config: &AttackConfig) -> Result<Vec<AttackRun>> {
    config.seeds.iter().map(|&s| run_attack(bundle, task, config, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcodec::FormatSpec;
    use crate::nnet::{Architecture, TaskSuite};

    fn tiny() -> (ModelBundle, TaskSuite) {
        let suite = TaskSuite::toy(4, 6);
        let arch = Architecture::Mlp { input_dim: suite.input_dim(), width: 8, hidden: 8, blocks: 1, num_classes: 4 };
        let cfg = nnet::TrainConfig { epochs: 3, ..Default::default() };
        let params = nnet::train(&arch, &suite, &cfg).unwrap();
        (ModelBundle::from_params(arch, &params, FormatSpec::BF16).unwrap(), suite)
    }

    #[test]
    fn zero_iterations_leave_model_untouched() {
        let (b, suite) = tiny();
        let task = suite.get("toy-mmlu").unwrap();
        let mut cfg = AttackConfig::for_task(task, AttackMode::Float);
        cfg.max_iterations = 0;
        cfg.critical_threshold = 0.01;
        let run = run_attack(&b, task, &cfg, 1).unwrap();
        assert!(run.report.applied_flips.is_empty());
        assert_eq!(run.report.post_acc, run.report.pre_acc);
        assert_eq!(run.report.termination, Termination::MaxIter);
        assert_eq!(run.report.census.display_count(), "F");
        assert!(run.final_bundle.same_weights(&b));
    }

    #[test]
    fn method_names_roundtrip() {
        for m in ["sbfa", "bfa-no-range", "bfa-in-range", "bfa-sign-only"] {
            assert_eq!(m.parse::<Method>().unwrap().to_string(), m);
        }
        assert!("bfa-nope".parse::<Method>().is_err());
    }

    #[test]
    fn census_counts_only_critical() {
        let c = Census { threshold: 0.25, count: 0, entries: Vec::new() };
        assert_eq!(c.display_count(), "F");
        assert!(distribution_report(&c).is_empty());
    }

    #[test]
    fn empty_transfer_is_identity() {
        let (b, suite) = tiny();
        let tasks: Vec<&TaskSpec> = suite.tasks.iter().collect();
        for r in transfer_eval(&b, &[], &tasks, 100, 1).unwrap() {
            assert_eq!(Some(r.pre_acc), r.post_acc);
        }
    }

    #[test]
    fn best_run_prefers_lower_accuracy_then_fewer_flips() {
        let (b, suite) = tiny();
        let task = suite.get("toy-mmlu").unwrap();
        let mut cfg = AttackConfig::for_task(task, AttackMode::Float);
        cfg.max_iterations = 0;
        let base = run_attack(&b, task, &cfg, 1).unwrap().report;
        let mut worse = base.clone();
        worse.post_acc = 0.5;
        let mut better = base.clone();
        better.post_acc = 0.1;
        assert_eq!(best_run(&[worse.clone(), better.clone(), better]), Some(1));
    }
}
