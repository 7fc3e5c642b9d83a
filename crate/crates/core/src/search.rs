//! The outer loop: an NSGA-II search over binary masks.
//!
//! Each trial fine-tunes deltas under a candidate mask (the inner loop) and
//! reports the two minimized objectives: memorization on the duplicated
//! prompts and quality against the validation split. The sampler keeps an
//! elitist archive ranked by non-dominated sorting with crowding-distance
//! diversity, proposes offspring by binary tournament, uniform crossover
//! and per-bit mutation, and records every trial for the append-only log.
//!
//! The search always spends its full trial budget; [`converged`] is a
//! monitor over the recorded log, not an early-stopping rule.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionedSample, Corpus, EmbeddingTable};
use crate::denoiser::{
    effective_params, train_inner, DenoiserParams, Mask, MaskSpace, TrainConfig, TrainJob,
    TrainResult,
};
use crate::diffusion::NoiseSchedule;
use crate::metrics::{
    evaluate_model, evaluate_objectives, EvalContext, EvalSplit, MetricConfig, MetricsRow,
    Objectives,
};
use crate::mitigation::MitigationConfig;
use crate::rng::{index_seed, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Diverged,
    Error,
}

/// One completed outer-loop trial; the unit of the archive and the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub mask: Mask,
    /// Present iff the trial completed; failed trials rank behind every
    /// completed trial.
    pub objectives: Option<Objectives>,
    pub seed: u64,
    pub status: TrialStatus,
    pub wall_seconds: f64,
    pub generation: usize,
}

impl TrialRecord {
    pub fn is_ok(&self) -> bool {
        self.status == TrialStatus::Ok
    }

    /// Arithmetic mean of the objective pair.
    pub fn scalarized(&self) -> Option<f64> {
        self.objectives.map(|o| 0.5 * (o.d_mem + o.d_fid))
    }
}

/// Outer-loop search configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub space: MaskSpace,
    pub population: usize,
    /// Nominal generation count; the binding limit is `trial_budget`, spent
    /// in population-sized waves.
    pub generations: usize,
    pub trial_budget: usize,
    pub crossover_prob: f64,
    /// Per-bit flip probability; `None` means `1 / mask_len`.
    pub mutation_prob: Option<f64>,
    pub seed: u64,
    /// Trailing non-improving trials before the convergence monitor fires.
    pub patience: usize,
    /// Min-max normalize objectives over the front before scalarizing.
    pub normalize_scalarization: bool,
}

impl SearchConfig {
    pub fn desk_default(space: MaskSpace, seed: u64) -> Self {
        Self {
            space,
            population: 6,
            generations: 5,
            trial_budget: 30,
            crossover_prob: 0.9,
            mutation_prob: None,
            seed,
            patience: 12,
            normalize_scalarization: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config {
                field: "search.population",
                reason: "must be >= 2".to_string(),
            });
        }
        if self.trial_budget < self.population {
            return Err(Error::Config {
                field: "search.trial_budget",
                reason: "must be >= population".to_string(),
            });
        }
        if !(0.0..=1.0).contains(&self.crossover_prob) {
            return Err(Error::Config {
                field: "search.crossover_prob",
                reason: "must be in [0, 1]".to_string(),
            });
        }
        if let Some(p) = self.mutation_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config {
                    field: "search.mutation_prob",
                    reason: "must be in [0, 1]".to_string(),
                });
            }
        }
        if self.patience == 0 {
            return Err(Error::Config {
                field: "search.patience",
                reason: "must be >= 1".to_string(),
            });
        }
        Ok(())
    }
}

/// Mutually non-dominated trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub members: Vec<TrialRecord>,
}

/// `a` dominates `b` when it is no worse in both objectives and strictly
/// better in at least one (both minimized).
pub fn dominates(a: &Objectives, b: &Objectives) -> bool {
    a.d_mem <= b.d_mem && a.d_fid <= b.d_fid && (a.d_mem < b.d_mem || a.d_fid < b.d_fid)
}

/// Fast non-dominated sort: partitions indices into fronts, front 0 being
/// the non-dominated set. Order within a front follows input order.
pub fn fast_non_dominated_sort(objectives: &[Objectives]) -> Vec<Vec<usize>> {
    let n = objectives.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if dominates(&objectives[i], &objectives[j]) {
                dominated_by[i].push(j);
            } else if dominates(&objectives[j], &objectives[i]) {
                domination_count[i] += 1;
            }
        }
    }
    let mut fronts: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| domination_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by[i] {
                domination_count[j] -= 1;
                if domination_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(core::mem::replace(&mut current, next));
    }
    fronts
}

/// Crowding distance per member of one front: boundary members get
/// infinity, interior members accumulate normalized neighbour gaps, and a
/// constant objective contributes zero.
pub fn crowding_distance(front: &[Objectives]) -> Vec<f64> {
    let n = front.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let mut dist = vec![0.0f64; n];
    for dim in 0..2 {
        let value = |o: &Objectives| if dim == 0 { o.d_mem } else { o.d_fid };
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| value(&front[a]).partial_cmp(&value(&front[b])).unwrap());
        let lo = value(&front[order[0]]);
        let hi = value(&front[order[n - 1]]);
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if hi - lo <= 0.0 {
            continue;
        }
        for k in 1..n - 1 {
            let gap = value(&front[order[k + 1]]) - value(&front[order[k - 1]]);
            let d = &mut dist[order[k]];
            if d.is_finite() {
                *d += gap / (hi - lo);
            }
        }
    }
    dist
}

/// Exact non-dominated filter over the completed trials of a log.
pub fn pareto_front(log: &[TrialRecord]) -> Result<ParetoFront> {
    let ok: Vec<&TrialRecord> = log.iter().filter(|t| t.is_ok()).collect();
    if ok.is_empty() {
        return Err(Error::NoOkTrials);
    }
    let mut members = Vec::new();
    for a in &ok {
        let oa = a.objectives.expect("ok trial has objectives");
        let dominated = ok
            .iter()
            .any(|b| b.trial_id != a.trial_id && dominates(&b.objectives.expect("ok"), &oa));
        if !dominated {
            members.push((*a).clone());
        }
    }
    members.sort_by_key(|t| t.trial_id);
    Ok(ParetoFront { members })
}

/// Dominance filter over the union of several fronts (the approximate
/// global search over all spaces).
pub fn merge_fronts(fronts: &[ParetoFront]) -> ParetoFront {
    let all: Vec<TrialRecord> = fronts.iter().flat_map(|f| f.members.clone()).collect();
    let mut members = Vec::new();
    for (i, a) in all.iter().enumerate() {
        let oa = a.objectives.expect("front member has objectives");
        let dominated = all
            .iter()
            .enumerate()
            .any(|(j, b)| j != i && dominates(&b.objectives.expect("front"), &oa));
        if !dominated {
            members.push(a.clone());
        }
    }
    ParetoFront { members }
}

/// Scalarized pick from a front: lowest arithmetic mean of the objective
/// pair, ties by lower memorization then lower trial id. With
/// `normalize`, objectives are min-max rescaled over the front first.
pub fn select_scalarized(front: &ParetoFront, normalize: bool) -> Result<TrialRecord> {
    if front.members.is_empty() {
        return Err(Error::NoOkTrials);
    }
    let objs: Vec<Objectives> = front
        .members
        .iter()
        .map(|m| m.objectives.expect("front member has objectives"))
        .collect();
    let score: Vec<f64> = if normalize {
        let (mut lo_m, mut hi_m) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut lo_f, mut hi_f) = (f64::INFINITY, f64::NEG_INFINITY);
        for o in &objs {
            lo_m = lo_m.min(o.d_mem);
            hi_m = hi_m.max(o.d_mem);
            lo_f = lo_f.min(o.d_fid);
            hi_f = hi_f.max(o.d_fid);
        }
        let norm = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        objs.iter()
            .map(|o| 0.5 * (norm(o.d_mem, lo_m, hi_m) + norm(o.d_fid, lo_f, hi_f)))
            .collect()
    } else {
        objs.iter().map(|o| 0.5 * (o.d_mem + o.d_fid)).collect()
    };
    let mut best = 0usize;
    for i in 1..front.members.len() {
        let better = score[i] < score[best]
            || (score[i] == score[best] && objs[i].d_mem < objs[best].d_mem)
            || (score[i] == score[best]
                && objs[i].d_mem == objs[best].d_mem
                && front.members[i].trial_id < front.members[best].trial_id);
        if better {
            best = i;
        }
    }
    Ok(front.members[best].clone())
}

/// True when the best scalarized value has not improved by more than 1e-6
/// for `patience` consecutive trials.
pub fn converged(log: &[TrialRecord], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut since_improvement = 0usize;
    let mut fired = false;
    for trial in log {
        match trial.scalarized() {
            Some(s) if s < best - 1e-6 => {
                best = s;
                since_improvement = 0;
            }
            _ => {
                since_improvement += 1;
                if since_improvement >= patience {
                    fired = true;
                }
            }
        }
    }
    fired
}

/// Outcome of evaluating one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub status: TrialStatus,
    pub objectives: Option<Objectives>,
    pub wall_seconds: f64,
}

/// The inner-loop evaluation contract of the search.
///
/// `evaluate_batch` exists so a driver can fan a generation's trials out to
/// worker threads; results must come back in job order.
pub trait EvaluateMask: Sync {
    fn evaluate(&self, trial_id: usize, mask: &Mask, eval_seed: u64) -> TrialOutcome;

    fn evaluate_batch(&self, jobs: &[(usize, Mask, u64)]) -> Vec<TrialOutcome> {
        jobs.iter()
            .map(|(id, mask, seed)| self.evaluate(*id, mask, *seed))
            .collect()
    }

    /// Checksum of evaluator-owned shared state, compared around every
    /// generation to prove trials never mutate the frozen base.
    fn state_checksum(&self) -> u64 {
        0
    }
}

/// Elitist selection pool: log indices ordered best-first.
pub struct RankedArchive {
    selected: Vec<usize>,
}

/// Truncate the whole log to `population` entries by (front rank, crowding
/// distance, trial id). Failed trials rank behind every completed trial,
/// and the best-scalarized completed trial is always retained.
pub fn rank_archive(log: &[TrialRecord], population: usize) -> RankedArchive {
    let ok_idx: Vec<usize> = (0..log.len()).filter(|&i| log[i].is_ok()).collect();
    let objs: Vec<Objectives> = ok_idx
        .iter()
        .map(|&i| log[i].objectives.expect("ok"))
        .collect();
    let fronts = fast_non_dominated_sort(&objs);

    let mut keyed: Vec<(usize, f64, usize)> = Vec::new(); // (rank, crowding, log idx)
    for (rank, front) in fronts.iter().enumerate() {
        let front_objs: Vec<Objectives> = front.iter().map(|&k| objs[k]).collect();
        let crowd = crowding_distance(&front_objs);
        for (pos, &k) in front.iter().enumerate() {
            keyed.push((rank, crowd[pos], ok_idx[k]));
        }
    }
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal))
            .then(log[a.2].trial_id.cmp(&log[b.2].trial_id))
    });

    for i in 0..log.len() {
        if !log[i].is_ok() {
            keyed.push((usize::MAX, 0.0, i));
        }
    }
    keyed.truncate(population);

    // Scalarized elitism: keep the best-mean trial alive in the archive.
    if let Some(best) = ok_idx.iter().copied().min_by(|&a, &b| {
        let sa = log[a].scalarized().unwrap();
        let sb = log[b].scalarized().unwrap();
        sa.partial_cmp(&sb)
            .unwrap()
            .then(log[a].trial_id.cmp(&log[b].trial_id))
    }) {
        if !keyed.iter().any(|(_, _, i)| *i == best) {
            let last = keyed.len() - 1;
            keyed[last] = (0, f64::INFINITY, best);
        }
    }

    RankedArchive {
        selected: keyed.iter().map(|(_, _, i)| *i).collect(),
    }
}

fn random_mask(space: MaskSpace, len: usize, rng: &mut Rng) -> Mask {
    Mask {
        space,
        bits: (0..len).map(|_| u8::from(rng.flip(0.5))).collect(),
    }
}

fn mutate(mask: &mut Mask, prob: f64, rng: &mut Rng) {
    for b in &mut mask.bits {
        if rng.flip(prob) {
            *b ^= 1;
        }
    }
}

/// Binary tournament on archive order (rank asc, crowding desc).
fn tournament<'a>(log: &'a [TrialRecord], archive: &RankedArchive, rng: &mut Rng) -> &'a TrialRecord {
    let pick_a = rng.below(archive.selected.len());
    let pick_b = rng.below(archive.selected.len());
    &log[archive.selected[pick_a.min(pick_b)]]
}

/// Propose the next wave of masks: tournament parents, uniform crossover,
/// per-bit mutation. Masks already evaluated are re-mutated up to 10 times,
/// then admitted anyway (duplicate evaluation with a fresh seed).
pub fn propose_offspring(
    log: &[TrialRecord],
    archive: &RankedArchive,
    count: usize,
    cfg: &SearchConfig,
    mask_len: usize,
    rng: &mut Rng,
) -> Vec<Mask> {
    let mutation_prob = cfg.mutation_prob.unwrap_or(1.0 / mask_len as f64);
    let seen: Vec<&[u8]> = log.iter().map(|t| t.mask.bits.as_slice()).collect();
    let mut offspring: Vec<Mask> = Vec::with_capacity(count);
    for _ in 0..count {
        let parent_a = tournament(log, archive, rng).mask.clone();
        let parent_b = tournament(log, archive, rng).mask.clone();
        let mut child = if rng.flip(cfg.crossover_prob) {
            let bits = parent_a
                .bits
                .iter()
                .zip(&parent_b.bits)
                .map(|(a, b)| if rng.flip(0.5) { *a } else { *b })
                .collect();
            Mask {
                space: cfg.space,
                bits,
            }
        } else {
            parent_a
        };
        mutate(&mut child, mutation_prob, rng);
        let mut attempts = 0;
        while attempts < 10
            && (seen.contains(&child.bits.as_slice())
                || offspring.iter().any(|m| m.bits == child.bits))
        {
            mutate(&mut child, mutation_prob, rng);
            attempts += 1;
        }
        offspring.push(child);
    }
    offspring
}

/// Search outcome: the full append-only log and the final front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub log: Vec<TrialRecord>,
    pub front: ParetoFront,
}

/// Run the outer loop until the trial budget is spent.
///
/// Generation 0 is uniform random masks (deduplicated best-effort); later
/// waves come from [`propose_offspring`] over the elitist archive. Trial
/// seeds derive from the search seed and trial id, so results do not depend
/// on evaluation order or worker scheduling.
pub fn run_search<E: EvaluateMask + ?Sized>(
    cfg: &SearchConfig,
    mask_len: usize,
    evaluator: &E,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if mask_len == 0 {
        return Err(Error::InvalidArgument("mask length must be >= 1".to_string()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut log: Vec<TrialRecord> = Vec::with_capacity(cfg.trial_budget);
    let mut generation = 0usize;

    while log.len() < cfg.trial_budget {
        let wave = cfg.population.min(cfg.trial_budget - log.len());
        let masks: Vec<Mask> = if generation == 0 {
            let mut batch: Vec<Mask> = Vec::with_capacity(wave);
            for _ in 0..wave {
                let mut m = random_mask(cfg.space, mask_len, &mut rng);
                let mut attempts = 0;
                while attempts < 10 && batch.iter().any(|b| b.bits == m.bits) {
                    m = random_mask(cfg.space, mask_len, &mut rng);
                    attempts += 1;
                }
                batch.push(m);
            }
            batch
        } else {
            let archive = rank_archive(&log, cfg.population);
            propose_offspring(&log, &archive, wave, cfg, mask_len, &mut rng)
        };

        let jobs: Vec<(usize, Mask, u64)> = masks
            .into_iter()
            .enumerate()
            .map(|(k, m)| {
                let trial_id = log.len() + k;
                (trial_id, m, index_seed(cfg.seed, trial_id as u64))
            })
            .collect();

        let before = evaluator.state_checksum();
        let outcomes = evaluator.evaluate_batch(&jobs);
        if evaluator.state_checksum() != before {
            return Err(Error::InvalidArgument(
                "trial evaluation mutated shared state".to_string(),
            ));
        }
        if outcomes.len() != jobs.len() {
            return Err(Error::InvalidArgument(
                "evaluator returned wrong number of outcomes".to_string(),
            ));
        }

        for ((trial_id, mask, seed), outcome) in jobs.into_iter().zip(outcomes) {
            let objectives = match outcome.status {
                TrialStatus::Ok => match outcome.objectives {
                    Some(o) if o.is_finite() => Some(o),
                    _ => None,
                },
                _ => None,
            };
            let status = if outcome.status == TrialStatus::Ok && objectives.is_none() {
                TrialStatus::Error
            } else {
                outcome.status
            };
            log.push(TrialRecord {
                trial_id,
                mask,
                objectives,
                seed,
                status,
                wall_seconds: outcome.wall_seconds,
                generation,
            });
        }
        generation += 1;
    }

    let front = pareto_front(&log)?;
    Ok(SearchOutcome { log, front })
}

/// The production inner-loop evaluator: fine-tune from the frozen base on
/// the search subset, then score the objective pair.
pub struct TrialEvaluator<'a> {
    pub theta0: &'a DenoiserParams,
    pub hpo_train: &'a [CaptionedSample],
    pub corpus: &'a Corpus,
    pub schedule: &'a NoiseSchedule,
    pub embed: &'a EmbeddingTable,
    pub train_cfg: TrainConfig,
    pub metric_cfg: MetricConfig,
    pub mitigation: MitigationConfig,
}

impl EvaluateMask for TrialEvaluator<'_> {
    fn evaluate(&self, _trial_id: usize, mask: &Mask, eval_seed: u64) -> TrialOutcome {
        let job = TrainJob {
            data: self.hpo_train,
            schedule: self.schedule,
            embed: self.embed,
            mitigation: &self.mitigation,
            calibration: &self.corpus.val,
        };
        let trained = match train_inner(self.theta0, mask, &job, &self.train_cfg) {
            Ok(result) => result,
            Err(Error::Diverged { .. }) => {
                return TrialOutcome {
                    status: TrialStatus::Diverged,
                    objectives: None,
                    wall_seconds: 0.0,
                }
            }
            Err(_) => {
                return TrialOutcome {
                    status: TrialStatus::Error,
                    objectives: None,
                    wall_seconds: 0.0,
                }
            }
        };
        let metric_cfg = MetricConfig {
            eval_seed,
            ..self.metric_cfg.clone()
        };
        let ctx = EvalContext {
            corpus: self.corpus,
            embed: self.embed,
            schedule: self.schedule,
            config: &metric_cfg,
        };
        let model = match effective_params(&trained.params, mask) {
            Ok(m) => m,
            Err(_) => {
                return TrialOutcome {
                    status: TrialStatus::Error,
                    objectives: None,
                    wall_seconds: 0.0,
                }
            }
        };
        match evaluate_objectives(&model, &ctx) {
            Ok(obj) if obj.is_finite() => TrialOutcome {
                status: TrialStatus::Ok,
                objectives: Some(obj),
                wall_seconds: 0.0,
            },
            _ => TrialOutcome {
                status: TrialStatus::Error,
                objectives: None,
                wall_seconds: 0.0,
            },
        }
    }

    fn state_checksum(&self) -> u64 {
        self.theta0.base_checksum()
    }
}

/// Apply a serialized mask to a different model/corpus: fine-tune on the
/// target's full (augmented) train set and emit the full metrics row on the
/// target's test split.
pub fn transfer_evaluate(
    mask: &Mask,
    theta0: &DenoiserParams,
    corpus: &Corpus,
    embed: &EmbeddingTable,
    schedule: &NoiseSchedule,
    train_cfg: &TrainConfig,
    metric_cfg: &MetricConfig,
    mitigation: &MitigationConfig,
) -> Result<(TrainResult, MetricsRow)> {
    mask.validate_for(&theta0.arch)
        .map_err(|e| Error::Transfer {
            reason: format!("mask does not fit the target layout: {e}"),
        })?;
    let job = TrainJob {
        data: &corpus.train,
        schedule,
        embed,
        mitigation,
        calibration: &corpus.val,
    };
    let result = train_inner(theta0, mask, &job, train_cfg)?;
    let model = effective_params(&result.params, mask)?;
    let ctx = EvalContext {
        corpus,
        embed,
        schedule,
        config: metric_cfg,
    };
    let row = evaluate_model(&model, &ctx, EvalSplit::Test)?;
    Ok((result, row))
}

/// Human-readable mask interpretation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub space: MaskSpace,
    pub bits: String,
    pub units_on: Vec<String>,
    pub units_off: Vec<String>,
    pub trainable_scalars: usize,
    pub total_scalars: usize,
    pub trainable_fraction: f64,
}

impl core::fmt::Display for MaskReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        writeln!(f, "mask space: {}", self.space.as_str())?;
        writeln!(f, "bits:       {}", self.bits)?;
        writeln!(
            f,
            "tuned:      {}",
            if self.units_on.is_empty() {
                "(none)".to_string()
            } else {
                self.units_on.join(", ")
            }
        )?;
        writeln!(
            f,
            "frozen:     {}",
            if self.units_off.is_empty() {
                "(none)".to_string()
            } else {
                self.units_off.join(", ")
            }
        )?;
        writeln!(
            f,
            "trainable:  {} of {} scalars ({:.4}%)",
            self.trainable_scalars,
            self.total_scalars,
            100.0 * self.trainable_fraction
        )
    }
}

/// Map mask bits to named units and report the trainable parameter count.
pub fn analyze_mask(mask: &Mask, params: &DenoiserParams) -> Result<MaskReport> {
    mask.validate_for(&params.arch)?;
    let mut units_on = Vec::new();
    let mut units_off = Vec::new();
    for bit in 0..mask.len() {
        let name = params.arch.unit_name(mask.space, bit);
        if mask.is_set(bit) {
            units_on.push(name);
        } else {
            units_off.push(name);
        }
    }
    let trainable = params.trainable_scalars(mask);
    let total = params.total_scalars();
    Ok(MaskReport {
        space: mask.space,
        bits: mask.bit_string(),
        units_on,
        units_off,
        trainable_scalars: trainable,
        total_scalars: total,
        trainable_fraction: trainable as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_params, svd_decompose, ArchConfig};

    fn obj(m: f64, f: f64) -> Objectives {
        Objectives { d_mem: m, d_fid: f }
    }

    fn record(id: usize, m: f64, f: f64) -> TrialRecord {
        TrialRecord {
            trial_id: id,
            mask: Mask {
                space: MaskSpace::Spectral,
                bits: vec![0, 1],
            },
            objectives: Some(obj(m, f)),
            seed: id as u64,
            status: TrialStatus::Ok,
            wall_seconds: 0.0,
            generation: 0,
        }
    }

    #[test]
    fn dominates_cases() {
        assert!(dominates(&obj(1.0, 1.0), &obj(2.0, 2.0)));
        assert!(!dominates(&obj(1.0, 2.0), &obj(2.0, 1.0)));
        assert!(!dominates(&obj(2.0, 1.0), &obj(1.0, 2.0)));
        assert!(!dominates(&obj(1.0, 1.0), &obj(1.0, 1.0)));
        // Equal in one coordinate, better in the other still dominates.
        assert!(dominates(&obj(1.0, 1.0), &obj(1.0, 2.0)));
    }

    #[test]
    fn sort_example_fronts() {
        let objs = vec![obj(1.0, 2.0), obj(2.0, 1.0), obj(2.0, 2.0)];
        let fronts = fast_non_dominated_sort(&objs);
        assert_eq!(fronts, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn sort_all_equal_is_single_front() {
        let objs = vec![obj(1.0, 1.0); 5];
        let fronts = fast_non_dominated_sort(&objs);
        assert_eq!(fronts.len(), 1);
        assert_eq!(fronts[0], vec![0, 1, 2, 3, 4]);
    }

    /// Brute-force front peeling: front 0 by pairwise scans, remove, repeat.
    fn brute_force_fronts(objs: &[Objectives]) -> Vec<Vec<usize>> {
        let mut remaining: Vec<usize> = (0..objs.len()).collect();
        let mut fronts = Vec::new();
        while !remaining.is_empty() {
            let front: Vec<usize> = remaining
                .iter()
                .copied()
                .filter(|&i| {
                    !remaining
                        .iter()
                        .any(|&j| j != i && dominates(&objs[j], &objs[i]))
                })
                .collect();
            remaining.retain(|i| !front.contains(i));
            fronts.push(front);
        }
        fronts
    }

    #[test]
    fn sort_matches_brute_force_on_random_instances() {
        let mut rng = Rng::new(1);
        for case in 0..40 {
            let n = 2 + rng.below(60);
            let objs: Vec<Objectives> = (0..n)
                .map(|_| obj(rng.uniform_in(0.0, 4.0), rng.uniform_in(0.0, 4.0)))
                .collect();
            let fast = fast_non_dominated_sort(&objs);
            let brute = brute_force_fronts(&objs);
            assert_eq!(fast, brute, "case {case}");
        }
    }

    #[test]
    fn crowding_two_member_front_is_infinite() {
        let d = crowding_distance(&[obj(1.0, 2.0), obj(2.0, 1.0)]);
        assert!(d.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn crowding_collinear_middle_point() {
        // Three evenly spaced collinear points: the middle one accumulates
        // a full normalized gap per objective.
        let d = crowding_distance(&[obj(0.0, 2.0), obj(1.0, 1.0), obj(2.0, 0.0)]);
        assert!(d[0].is_infinite());
        assert!(d[2].is_infinite());
        assert!((d[1] - 2.0).abs() < 1e-12, "{}", d[1]);
    }

    #[test]
    fn crowding_duplicates_interior_are_finite_equal() {
        let d = crowding_distance(&[obj(0.0, 3.0), obj(1.0, 2.0), obj(1.0, 2.0), obj(3.0, 0.0)]);
        assert!(d[1].is_finite() && d[2].is_finite());
        assert!((d[1] - d[2]).abs() < 1e-12);
    }

    #[test]
    fn crowding_constant_dimension_contributes_zero() {
        let d = crowding_distance(&[obj(0.0, 1.0), obj(1.0, 1.0), obj(2.0, 1.0)]);
        // d_fid is constant; the middle point only accumulates the d_mem gap.
        assert!((d[1] - 1.0).abs() < 1e-12, "{}", d[1]);
    }

    #[test]
    fn pareto_front_matches_sort_front_zero() {
        let log = vec![record(0, 1.0, 2.0), record(1, 2.0, 1.0), record(2, 2.0, 2.0)];
        let front = pareto_front(&log).unwrap();
        let ids: Vec<usize> = front.members.iter().map(|m| m.trial_id).collect();
        assert_eq!(ids, vec![0, 1]);
        assert!(pareto_front(&[]).is_err());
    }

    #[test]
    fn select_scalarized_cases() {
        let single = ParetoFront {
            members: vec![record(0, 1.0, 3.0)],
        };
        assert_eq!(select_scalarized(&single, false).unwrap().trial_id, 0);

        let two = ParetoFront {
            members: vec![record(0, 1.0, 3.0), record(1, 2.0, 1.0)],
        };
        assert_eq!(select_scalarized(&two, false).unwrap().trial_id, 1);

        // Tie on the mean: lower d_mem wins.
        let tie = ParetoFront {
            members: vec![record(0, 3.0, 1.0), record(1, 1.0, 3.0)],
        };
        assert_eq!(select_scalarized(&tie, false).unwrap().trial_id, 1);
    }

    #[test]
    fn converged_rules() {
        // Monotone improvement never fires.
        let log: Vec<TrialRecord> = (0..20)
            .map(|i| record(i, 10.0 - i as f64, 10.0 - i as f64))
            .collect();
        assert!(!converged(&log, 5));

        // Constant log longer than patience fires.
        let log: Vec<TrialRecord> = (0..8).map(|i| record(i, 1.0, 1.0)).collect();
        assert!(converged(&log, 5));
        assert!(!converged(&log[..5], 5));

        // Improvements at trials 1, 5, 17 (1-based), patience 12: fires only
        // once trial 29 has been recorded.
        let mut log = Vec::new();
        let mut level = 10.0;
        for i in 1..=30usize {
            if i == 1 || i == 5 || i == 17 {
                level -= 1.0;
            }
            log.push(record(i - 1, level, level));
        }
        for upto in 1..=30usize {
            let fired = converged(&log[..upto], 12);
            assert_eq!(fired, upto >= 29, "prefix {upto}");
        }
    }

    /// Deterministic stub: d_mem = popcount, d_fid = len - popcount.
    struct PopcountEval;
    impl EvaluateMask for PopcountEval {
        fn evaluate(&self, _id: usize, mask: &Mask, _seed: u64) -> TrialOutcome {
            let pc = mask.popcount() as f64;
            TrialOutcome {
                status: TrialStatus::Ok,
                objectives: Some(obj(pc, mask.len() as f64 - pc)),
                wall_seconds: 0.0,
            }
        }
    }

    #[test]
    fn exhaustive_two_bit_search_recovers_brute_force_front() {
        let cfg = SearchConfig {
            space: MaskSpace::Spectral,
            population: 4,
            generations: 1,
            trial_budget: 4,
            crossover_prob: 0.9,
            mutation_prob: None,
            seed: 3,
            patience: 12,
            normalize_scalarization: false,
        };
        let outcome = run_search(&cfg, 2, &PopcountEval).unwrap();
        assert_eq!(outcome.log.len(), 4);
        // All four masks evaluated (generation-0 dedup).
        let mut seen: Vec<Vec<u8>> = outcome.log.iter().map(|t| t.mask.bits.clone()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 4, "dedup should cover the whole 2-bit space");
        // Brute-force Pareto set over all four masks: popcount k trades off
        // against 2-k exactly, so every distinct mask is non-dominated.
        assert_eq!(outcome.front.members.len(), 4);
    }

    #[test]
    fn search_is_deterministic() {
        let cfg = SearchConfig {
            space: MaskSpace::Spectral,
            population: 4,
            generations: 3,
            trial_budget: 12,
            crossover_prob: 0.9,
            mutation_prob: None,
            seed: 9,
            patience: 12,
            normalize_scalarization: false,
        };
        let a = run_search(&cfg, 5, &PopcountEval).unwrap();
        let b = run_search(&cfg, 5, &PopcountEval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn front_members_dominate_or_tie_every_ok_trial() {
        let cfg = SearchConfig {
            space: MaskSpace::Spectral,
            population: 5,
            generations: 4,
            trial_budget: 20,
            crossover_prob: 0.8,
            mutation_prob: Some(0.2),
            seed: 21,
            patience: 12,
            normalize_scalarization: false,
        };
        let outcome = run_search(&cfg, 6, &PopcountEval).unwrap();
        // Pairwise non-domination inside the front.
        for a in &outcome.front.members {
            for b in &outcome.front.members {
                if a.trial_id != b.trial_id {
                    assert!(!dominates(&a.objectives.unwrap(), &b.objectives.unwrap()));
                }
            }
        }
        // Every ok trial is dominated by or ties a front member.
        for t in outcome.log.iter().filter(|t| t.is_ok()) {
            let ot = t.objectives.unwrap();
            let covered = outcome.front.members.iter().any(|m| {
                let om = m.objectives.unwrap();
                dominates(&om, &ot) || (om.d_mem == ot.d_mem && om.d_fid == ot.d_fid)
            });
            assert!(covered, "trial {} escapes the front", t.trial_id);
        }
    }

    #[test]
    fn proposer_edge_cases() {
        // mutation 0 + crossover 0: offspring are copies of tournament
        // winners.
        let log = vec![record(0, 0.0, 0.0), record(1, 5.0, 5.0)];
        let archive = rank_archive(&log, 2);
        let cfg = SearchConfig {
            space: MaskSpace::Spectral,
            population: 2,
            generations: 1,
            trial_budget: 2,
            crossover_prob: 0.0,
            mutation_prob: Some(0.0),
            seed: 4,
            patience: 12,
            normalize_scalarization: false,
        };
        let mut rng = Rng::new(7);
        let kids = propose_offspring(&log, &archive, 3, &cfg, 2, &mut rng);
        for kid in &kids {
            assert!(kid.bits == log[0].mask.bits || kid.bits == log[1].mask.bits);
        }

        // mutation 1: the child is the bitwise complement of the crossover
        // output; with crossover 0 that is the complement of a winner.
        let cfg_flip = SearchConfig {
            crossover_prob: 0.0,
            mutation_prob: Some(1.0),
            ..cfg
        };
        let mut rng = Rng::new(8);
        let kids = propose_offspring(&log, &archive, 3, &cfg_flip, 2, &mut rng);
        for kid in &kids {
            let comp0: Vec<u8> = log[0].mask.bits.iter().map(|b| 1 - b).collect();
            let comp1: Vec<u8> = log[1].mask.bits.iter().map(|b| 1 - b).collect();
            assert!(kid.bits == comp0 || kid.bits == comp1);
        }
    }

    #[test]
    fn merged_front_has_no_dominated_member() {
        let f1 = ParetoFront {
            members: vec![record(0, 1.0, 3.0), record(1, 3.0, 1.0)],
        };
        let f2 = ParetoFront {
            members: vec![record(10, 0.5, 3.5), record(11, 2.0, 2.0)],
        };
        let merged = merge_fronts(&[f1, f2]);
        for a in &merged.members {
            for b in &merged.members {
                if a.trial_id != b.trial_id {
                    assert!(!dominates(&a.objectives.unwrap(), &b.objectives.unwrap()));
                }
            }
        }
        let ids: Vec<usize> = merged.members.iter().map(|m| m.trial_id).collect();
        assert!(ids.contains(&0) && ids.contains(&1) && ids.contains(&10) && ids.contains(&11));
    }

    #[test]
    fn archive_elitism_keeps_best_scalarized() {
        // Crowding would normally drop an interior point; the best-mean
        // trial must survive truncation anyway.
        let log = vec![
            record(0, 0.0, 10.0),
            record(1, 10.0, 0.0),
            record(2, 2.0, 2.1),
            record(3, 4.9, 5.0),
            record(4, 5.0, 4.9),
        ];
        let archive = rank_archive(&log, 2);
        assert!(archive.selected.contains(&2), "best-mean member dropped");
    }

    #[test]
    fn best_archive_scalarization_never_worsens() {
        let cfg = SearchConfig {
            space: MaskSpace::Spectral,
            population: 4,
            generations: 5,
            trial_budget: 20,
            crossover_prob: 0.9,
            mutation_prob: None,
            seed: 13,
            patience: 12,
            normalize_scalarization: false,
        };
        let outcome = run_search(&cfg, 8, &PopcountEval).unwrap();
        let mut best_per_gen: Vec<f64> = Vec::new();
        let max_gen = outcome.log.iter().map(|t| t.generation).max().unwrap();
        for g in 0..=max_gen {
            let upto: Vec<TrialRecord> = outcome
                .log
                .iter()
                .filter(|t| t.generation <= g)
                .cloned()
                .collect();
            let archive = rank_archive(&upto, cfg.population);
            let best = archive
                .selected
                .iter()
                .filter_map(|&i| upto[i].scalarized())
                .fold(f64::INFINITY, f64::min);
            best_per_gen.push(best);
        }
        for pair in best_per_gen.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "elitism violated: {best_per_gen:?}");
        }
    }

    #[test]
    fn analyze_mask_reports() {
        let arch = ArchConfig::desk_default();
        let mut params = init_params(&arch, 1).unwrap();
        svd_decompose(&mut params).unwrap();

        let zero = Mask::zeros(MaskSpace::Spectral, &arch);
        let report = analyze_mask(&zero, &params).unwrap();
        assert_eq!(report.trainable_scalars, 0);
        assert_eq!(report.trainable_fraction, 0.0);
        assert!(report.units_on.is_empty());

        let full = Mask::ones(MaskSpace::Spectral, &arch);
        let report = analyze_mask(&full, &params).unwrap();
        // Sum of min(rows, cols) over the block matrices.
        assert_eq!(report.trainable_scalars, 13 * 64);
        assert_eq!(report.units_off.len(), 0);

        let mut one = Mask::zeros(MaskSpace::Attention, &arch);
        one.bits[15] = 1;
        let report = analyze_mask(&one, &params).unwrap();
        assert_eq!(report.units_on, vec!["out-head".to_string()]);
        let text = format!("{report}");
        assert!(text.contains("out-head"));
    }

    #[test]
    fn failed_trials_rank_behind_and_stay_off_front() {
        let mut log = vec![record(0, 1.0, 1.0)];
        log.push(TrialRecord {
            trial_id: 1,
            mask: Mask {
                space: MaskSpace::Spectral,
                bits: vec![1, 1],
            },
            objectives: None,
            seed: 1,
            status: TrialStatus::Diverged,
            wall_seconds: 0.0,
            generation: 0,
        });
        let front = pareto_front(&log).unwrap();
        assert_eq!(front.members.len(), 1);
        assert_eq!(front.members[0].trial_id, 0);
        let archive = rank_archive(&log, 1);
        assert_eq!(archive.selected, vec![0]);
    }
}
