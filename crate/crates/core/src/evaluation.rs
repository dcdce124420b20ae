//! Success metrics and the three analyses: where targets fall in a
//! trajectory, where feedback is placed, and which feedback source is used.

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TeacherMode};
use crate::data::{HindsightReport, Source, Variant};
use crate::envs::{run_episode, Environment, Split, Task};
use crate::error::{Error, Result};
use crate::hindsight::analyze;
use crate::parallel::{self, Exec};
use crate::policy::{ActionSpace, DecodingLimits, PolicyParameters};
use crate::seed::{SeedTree, Stream};
use crate::training::{train, PolicyAgent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `outcomes[task][run]`
    pub outcomes: Vec<Vec<u8>>,
    pub avg_at_k: f64,
    pub best_at_k: f64,
}

impl EvalResult {
    pub fn from_outcomes(outcomes: Vec<Vec<u8>>) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Contract("evaluation over an empty task set".into()));
        }
        let k = outcomes[0].len();
        if k == 0 || outcomes.iter().any(|o| o.len() != k) {
            return Err(Error::Dimension("every task needs the same k >= 1 runs".into()));
        }
        let bits: usize = outcomes.iter().flatten().map(|&b| b as usize).sum();
        let solved = outcomes.iter().filter(|o| o.contains(&1)).count();
        Ok(EvalResult {
            avg_at_k: bits as f64 / (outcomes.len() * k) as f64,
            best_at_k: solved as f64 / outcomes.len() as f64,
            outcomes,
        })
    }

    pub fn k(&self) -> usize {
        self.outcomes.first().map_or(0, Vec::len)
    }
}

/// Runs every task `k` times; run `r` of task `i` is seeded from
/// `root.derive(i).derive(r)`.
pub fn evaluate(
    params: &PolicyParameters,
    space: &ActionSpace,
    limits: DecodingLimits,
    tasks: &[Task],
    k: usize,
    root: SeedTree,
    exec: Exec,
) -> Result<EvalResult> {
    if k == 0 {
        return Err(Error::config("eval_runs", "k must be at least 1"));
    }
    if tasks.is_empty() {
        return Err(Error::Contract("evaluation over an empty task set".into()));
    }
    let bits = parallel::map_range(exec, tasks.len() * k, |idx| {
        let (i, r) = (idx / k, idx % k);
        let seed = root.derive(i as u64).derive(r as u64);
        let mut agent = PolicyAgent::new(params, space, limits, seed);
        run_episode(&tasks[i], &mut agent, seed.value()).map(|t| t.terminal_reward)
    });
    let bits: Vec<u8> = bits.into_iter().collect::<Result<_>>()?;
    EvalResult::from_outcomes(bits.chunks(k).map(<[u8]>::to_vec).collect())
}

/// Number of per-turn bins; the last one collects turn 11 and later.
pub const TURN_BINS: usize = 11;
pub const REGION_LABELS: [&str; 3] = ["1-3", "4-8", "9+"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnHistogram {
    pub total: usize,
    pub regions: [usize; 3],
    pub region_fractions: [f64; 3],
    /// Turns 1..=10, then 11+.
    pub per_turn: [usize; TURN_BINS],
    pub per_turn_fractions: [f64; TURN_BINS],
    /// Absent on empty input.
    pub mean_turn: Option<f64>,
}

impl TurnHistogram {
    pub fn from_steps(steps: &[usize]) -> Self {
        let mut regions = [0; 3];
        let mut per_turn = [0; TURN_BINS];
        for &s in steps {
            let r = match s {
                0..=3 => 0,
                4..=8 => 1,
                _ => 2,
            };
            regions[r] += 1;
            per_turn[s.clamp(1, TURN_BINS) - 1] += 1;
        }
        let total = steps.len();
        let frac = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
        TurnHistogram {
            total,
            regions,
            region_fractions: regions.map(frac),
            per_turn,
            per_turn_fractions: per_turn.map(frac),
            mean_turn: (total > 0).then(|| steps.iter().sum::<usize>() as f64 / total as f64),
        }
    }

    pub fn per_turn_label(bin: usize) -> String {
        if bin + 1 == TURN_BINS {
            format!("{TURN_BINS}+")
        } else {
            (bin + 1).to_string()
        }
    }
}

/// Histogram over the target steps of every report.
pub fn target_turn_histogram<'a>(reports: impl IntoIterator<Item = &'a HindsightReport>) -> TurnHistogram {
    let steps: Vec<usize> = reports.into_iter().flat_map(HindsightReport::steps).collect();
    TurnHistogram::from_steps(&steps)
}

fn points(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

/// Success rates of the three conditions, with gains in percentage points
/// rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    /// Failed base rollouts the conditions were run on.
    pub failed: usize,
    /// No-feedback control paired with the start condition.
    pub start_base: f64,
    pub start_rate: f64,
    /// No-feedback control paired with the target condition.
    pub target_base: f64,
    pub target_rate: f64,
    pub start_gain: f64,
    pub target_gain: f64,
    pub target_minus_start: f64,
}

impl PlacementResult {
    pub fn from_rates(failed: usize, start_base: f64, start: f64, target_base: f64, target: f64) -> Self {
        let start_gain = points(start - start_base);
        let target_gain = points(target - target_base);
        PlacementResult {
            failed,
            start_base,
            start_rate: start,
            target_base,
            target_rate: target,
            start_gain,
            target_gain,
            target_minus_start: points((target - target_base) - (start - start_base)),
        }
    }

    pub fn empty() -> Self {
        Self::from_rates(0, 0.0, 0.0, 0.0, 0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.failed == 0
    }
}

/// Outcome bits of one failed base rollout under the four conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PlacementTrial {
    start_base: bool,
    start: bool,
    target_base: bool,
    target: bool,
}

fn placement_trial(
    params: &PolicyParameters,
    space: &ActionSpace,
    limits: DecodingLimits,
    env: &Environment,
    task: &Task,
    source: Source,
    seeds: SeedTree,
) -> Result<Option<PlacementTrial>> {
    let agent = |s: u64| PolicyAgent::new(params, space, limits, seeds.derive(s));
    let base = run_episode(task, &mut agent(0), seeds.derive(0).value())?;
    if base.success {
        return Ok(None);
    }
    let report = analyze(task, &base, source, Variant::Single, 1, env.vocab())?;
    let item = &report.items[0];
    let prefix: Vec<_> = base.actions()[..item.step - 1].to_vec();
    let fresh = seeds.derive(1).value();
    let start = run_episode(task, &mut agent(1).with_prefix(item.feedback_tokens.clone()), fresh)?;
    let start_base = run_episode(task, &mut agent(1), fresh)?;
    let replay = seeds.derive(2).value();
    let target = run_episode(
        task,
        &mut agent(2)
            .with_forced(prefix.clone())
            .with_insertion(item.step, item.feedback_tokens.clone()),
        replay,
    )?;
    let target_base = run_episode(task, &mut agent(2).with_forced(prefix), replay)?;
    for t in [&target, &target_base] {
        if t.turns.get(..item.step - 1) != base.turns.get(..item.step - 1) {
            return Err(Error::Contract(format!(
                "replay of {} diverged before step {}",
                base.task_id, item.step
            )));
        }
    }
    Ok(Some(PlacementTrial {
        start_base: start_base.success,
        start: start.success,
        target_base: target_base.success,
        target: target.success,
    }))
}

/// For every failed base rollout: feedback at the start of a fresh
/// rollout, or right before the target action after replaying the failed
/// prefix, each against a paired no-feedback rollout with the same seed.
#[allow(clippy::too_many_arguments)]
pub fn placement_experiment(
    params: &PolicyParameters,
    space: &ActionSpace,
    limits: DecodingLimits,
    env: &Environment,
    tasks: &[Task],
    source: Source,
    root: SeedTree,
    exec: Exec,
) -> Result<PlacementResult> {
    let trials = parallel::map_range(exec, tasks.len(), |i| {
        placement_trial(params, space, limits, env, &tasks[i], source, root.derive(i as u64))
    });
    let trials: Vec<PlacementTrial> = trials
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if trials.is_empty() {
        tracing::info!("no failed base rollouts; placement result is empty");
        return Ok(PlacementResult::empty());
    }
    let n = trials.len() as f64;
    let rate = |f: fn(&PlacementTrial) -> bool| trials.iter().filter(|t| f(t)).count() as f64 / n;
    Ok(PlacementResult::from_rates(
        trials.len(),
        rate(|t| t.start_base),
        rate(|t| t.start),
        rate(|t| t.target_base),
        rate(|t| t.target),
    ))
}

/// Placement on `config.analysis_tasks` held-out tasks for each of
/// `seeds`, with the task set and rollout seeds derived from each seed.
pub fn placement_by_seed(
    params: &PolicyParameters,
    config: &ExperimentConfig,
    seeds: &[u64],
    exec: Exec,
) -> Result<Vec<(u64, PlacementResult)>> {
    let env = Environment::new(&config.environment)?;
    let space = ActionSpace::new(env.vocab());
    seeds
        .iter()
        .map(|&s| {
            let tasks = env.tasks(s, Split::Analysis, config.analysis_tasks);
            let root = SeedTree::new(s).stream(Stream::Placement);
            let r = placement_experiment(
                params,
                &space,
                config.decoding_limits(),
                &env,
                &tasks,
                config.feedback_source,
                root,
                exec,
            )?;
            Ok((s, r))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub source: Source,
    pub teacher: TeacherMode,
    pub best_epoch: usize,
    pub eval: EvalResult,
}

/// The feedback-source settings compared by [`source_ablation`].
pub const ABLATION_SETTINGS: [(&str, Source, TeacherMode); 3] = [
    ("oracle-ema", Source::Oracle, TeacherMode::Ema),
    ("environment", Source::Environment, TeacherMode::Ema),
    ("initial-teacher", Source::Oracle, TeacherMode::Initial),
];

/// One train run per setting under identical seeds and budget; each row
/// is the best checkpoint evaluated on the shared eval split.
pub fn source_ablation(config: &ExperimentConfig, exec: Exec) -> Result<Vec<AblationRow>> {
    let env = Environment::new(&config.environment)?;
    let space = ActionSpace::new(env.vocab());
    let eval_tasks = env.tasks(config.seed, Split::Eval, config.eval_tasks);
    let eval_root = SeedTree::new(config.seed).stream(Stream::EvalRollouts).derive(u64::MAX);
    ABLATION_SETTINGS
        .iter()
        .map(|&(label, source, teacher)| {
            let mut cfg = config.clone();
            cfg.feedback_source = source;
            cfg.teacher = teacher;
            let outcome = train(&cfg, exec, &mut |_| Ok(()))?;
            let eval = evaluate(
                &outcome.best.params,
                &space,
                cfg.decoding_limits(),
                &eval_tasks,
                cfg.eval_runs,
                eval_root,
                exec,
            )?;
            Ok(AblationRow {
                label: label.to_string(),
                source,
                teacher,
                best_epoch: outcome.best.epoch as usize,
                eval,
            })
        })
        .collect()
}
