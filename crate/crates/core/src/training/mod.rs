//! Rollouts, losses, optimizer and the epoch loop.

mod adam;
pub mod objectives;
mod rollout;
mod warmstart;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use objectives::{
    denseturn_distill_loss, fulltraj_distill_loss, global_feedback, grpo_advantages, grpo_loss,
    masked_token_losses, refocus_loss, sft_loss, teacher_logits_by_step, LossOutput,
};
pub use rollout::{collect_rollouts, PolicyAgent, RolloutBatch};
pub use warmstart::{demonstration, warmstart, NoisyOracle};

use crate::config::{ExperimentConfig, Method, TeacherMode};
use crate::data::{HindsightReport, Trajectory};
use crate::envs::{Environment, Split, Task};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalResult};
use crate::hindsight::{analyze, build_spans};
use crate::parallel::Exec;
use crate::policy::{ema_update_in_place, ActionSpace, Checkpoint, PolicyParameters};
use crate::seed::{SeedTree, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub method: Method,
    pub loss: f64,
    pub supervised_tokens: usize,
    pub spans: usize,
    pub grad_norm: f64,
    pub wall_ms: u64,
    pub teacher_grad_buffers: usize,
    /// No supervised position this epoch, so no optimizer step.
    pub skipped: bool,
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub method: Method,
    pub avg_at_k: f64,
    pub best_at_k: f64,
    pub loss: f64,
    pub supervised_tokens: usize,
    pub spans: usize,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

/// A trajectory of the epoch's batch with its hindsight report, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedTrajectory {
    pub trajectory: Trajectory,
    pub hindsight: Option<HindsightReport>,
}

/// Everything observable about one finished epoch.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub metrics: EpochMetrics,
    pub step: TrainStepReport,
    pub eval: EvalResult,
    pub trajectories: Vec<LoggedTrajectory>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Highest eval Avg@k, earliest epoch on ties; the starting policy when
    /// no epoch ran.
    pub best: Checkpoint,
    pub best_avg: Option<f64>,
    pub metrics: Vec<EpochMetrics>,
    pub initial: PolicyParameters,
    pub last: PolicyParameters,
}

/// The starting policy: seeded init followed by the warm-start.
pub fn initial_policy(
    cfg: &ExperimentConfig,
    env: &Environment,
    space: &ActionSpace,
    exec: Exec,
) -> Result<PolicyParameters> {
    let root = SeedTree::new(cfg.seed);
    let mut params = PolicyParameters::init(
        env.vocab().size(),
        cfg.policy.embed_dim,
        cfg.policy.hidden_dim,
        cfg.policy.init_scale,
        &mut root.stream(Stream::Init).rng(),
    );
    if cfg.warmstart.steps > 0 {
        warmstart(&mut params, env, space, &cfg.warmstart, root.stream(Stream::Warmstart), exec)?;
    }
    Ok(params)
}

struct EpochLoss {
    out: Option<LossOutput>,
    logged: Vec<LoggedTrajectory>,
}

/// Reports for the failures of every group; repeated failures share the
/// report of their first occurrence but are marked as repeats.
fn analyzed(
    cfg: &ExperimentConfig,
    env: &Environment,
    tasks: &[Task],
    batch: &RolloutBatch,
) -> Result<Vec<(LoggedTrajectory, bool)>> {
    let mut out = Vec::with_capacity(batch.len());
    for (task, group) in tasks.iter().zip(&batch.groups) {
        let start = out.len();
        for t in group {
            if t.success {
                out.push((LoggedTrajectory { trajectory: t.clone(), hindsight: None }, false));
                continue;
            }
            let earlier = out[start..]
                .iter()
                .find(|(l, _): &&(LoggedTrajectory, bool)| !l.trajectory.success && l.trajectory.turns == t.turns)
                .map(|(l, _)| l.hindsight.clone());
            let (hindsight, fresh) = match earlier {
                Some(h) => (h, false),
                None => (
                    Some(analyze(
                        task,
                        t,
                        cfg.feedback_source,
                        cfg.method.variant(),
                        cfg.max_feedback_steps,
                        env.vocab(),
                    )?),
                    true,
                ),
            };
            out.push((LoggedTrajectory { trajectory: t.clone(), hindsight }, fresh));
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn epoch_loss(
    cfg: &ExperimentConfig,
    env: &Environment,
    space: &ActionSpace,
    tasks: &[Task],
    batch: &RolloutBatch,
    student: &PolicyParameters,
    teacher: &PolicyParameters,
    epoch: usize,
    exec: Exec,
) -> Result<EpochLoss> {
    let plain = || {
        batch
            .trajectories()
            .map(|t| LoggedTrajectory { trajectory: t.clone(), hindsight: None })
            .collect()
    };
    let root = SeedTree::new(cfg.seed);
    match cfg.method {
        Method::RefocusSingle | Method::RefocusMulti | Method::FullTrajDistill => {
            let items = analyzed(cfg, env, tasks, batch)?;
            let fresh: Vec<(&Trajectory, &HindsightReport)> = items
                .iter()
                .filter(|(_, fresh)| *fresh)
                .map(|(l, _)| (&l.trajectory, l.hindsight.as_ref().expect("failures are analyzed")))
                .collect();
            let out = if fresh.is_empty() {
                None
            } else if cfg.method == Method::FullTrajDistill {
                let failures: Vec<(&Trajectory, _)> =
                    fresh.iter().map(|(t, r)| (*t, global_feedback(r))).collect();
                Some(fulltraj_distill_loss(student, teacher, space, &failures, exec)?)
            } else {
                let mut spans = Vec::new();
                for (t, r) in &fresh {
                    spans.extend(build_spans(t, r)?);
                }
                Some(refocus_loss(student, teacher, space, &spans, exec)?)
            };
            Ok(EpochLoss {
                out,
                logged: items.into_iter().map(|(l, _)| l).collect(),
            })
        }
        Method::DenseTurnDistill => {
            let failures: Vec<&Trajectory> = (0..batch.groups.len())
                .flat_map(|g| batch.distinct_failures(g))
                .collect();
            let out = if failures.is_empty() {
                None
            } else {
                Some(denseturn_distill_loss(
                    student,
                    teacher,
                    space,
                    &failures,
                    env.vocab(),
                    cfg.dense_pg_coef,
                    exec,
                )?)
            };
            Ok(EpochLoss { out, logged: plain() })
        }
        Method::Sft => {
            let seeds = root.stream(Stream::Demonstrations).derive(epoch as u64);
            let demos = tasks
                .iter()
                .enumerate()
                .map(|(i, task)| {
                    demonstration(env, task, cfg.demo_candidates, cfg.demo_noise, seeds.derive(i as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EpochLoss {
                out: Some(sft_loss(student, space, &demos, exec)?),
                logged: plain(),
            })
        }
        Method::Grpo => Ok(EpochLoss {
            out: Some(grpo_loss(student, space, &batch.groups, exec)?),
            logged: plain(),
        }),
    }
}

fn divergence(epoch: usize, what: &str, loss: f64, grad_norm: f64, params: &PolicyParameters) -> Error {
    Error::Divergence {
        epoch,
        detail: format!(
            "{what}: loss={loss} grad_norm={grad_norm} param_norm={}",
            params.sq_norm().sqrt()
        ),
    }
}

/// Runs `cfg.epochs` epochs of collect, loss, optimizer step, EMA update
/// and evaluation. `on_epoch` sees each epoch as it finishes.
pub fn train(
    cfg: &ExperimentConfig,
    exec: Exec,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let env = Environment::new(&cfg.environment)?;
    let space = ActionSpace::new(env.vocab());
    let limits = cfg.decoding_limits();
    let root = SeedTree::new(cfg.seed);
    let config_hash = cfg.hash();

    let mut student = initial_policy(cfg, &env, &space, exec)?;
    let initial = student.clone();
    let mut ema = student.clone();
    let mut opt = Adam::new(&student, cfg.learning_rate);
    let train_tasks = env.tasks(cfg.seed, Split::Train, cfg.train_tasks);
    let eval_tasks = env.tasks(cfg.seed, Split::Eval, cfg.eval_tasks);

    let mut best = Checkpoint {
        params: student.clone(),
        config_hash: config_hash.clone(),
        epoch: 0,
    };
    let mut best_avg: Option<f64> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        let batch = collect_rollouts(
            &student,
            &space,
            limits,
            &train_tasks,
            cfg.rollouts_per_task,
            root.stream(Stream::TrainRollouts).derive(epoch as u64),
            exec,
        )?;
        let snapshot;
        let teacher = match cfg.teacher {
            TeacherMode::Ema => &ema,
            TeacherMode::Initial => &initial,
            TeacherMode::Current => {
                snapshot = student.clone();
                &snapshot
            }
        };
        let EpochLoss { out, logged } =
            epoch_loss(cfg, &env, &space, &train_tasks, &batch, &student, teacher, epoch, exec)?;

        let mut step = TrainStepReport {
            method: cfg.method,
            loss: 0.0,
            supervised_tokens: 0,
            spans: 0,
            grad_norm: 0.0,
            wall_ms: 0,
            teacher_grad_buffers: 0,
            skipped: true,
        };
        if let Some(out) = out.filter(|o| o.supervised_tokens > 0) {
            let grad_norm = out.grad_norm();
            if !out.loss.is_finite() || !grad_norm.is_finite() {
                return Err(divergence(epoch, "non-finite loss", out.loss, grad_norm, &student));
            }
            opt.step(&mut student, &out.grads)?;
            if !student.is_finite() {
                return Err(divergence(epoch, "non-finite parameters", out.loss, grad_norm, &student));
            }
            step = TrainStepReport {
                loss: out.loss,
                supervised_tokens: out.supervised_tokens,
                spans: out.spans,
                grad_norm,
                teacher_grad_buffers: out.teacher_grad_buffers,
                skipped: false,
                ..step
            };
        } else {
            tracing::debug!(epoch, "no supervised positions; update skipped");
        }
        ema_update_in_place(&mut ema, &student, cfg.ema_rate)?;

        let eval = evaluate(
            &student,
            &space,
            limits,
            &eval_tasks,
            cfg.eval_runs,
            root.stream(Stream::EvalRollouts).derive(epoch as u64),
            exec,
        )?;
        if cfg.record_wall_time {
            step.wall_ms = clock.elapsed().as_millis() as u64;
        }
        let row = EpochMetrics {
            epoch,
            method: cfg.method,
            avg_at_k: eval.avg_at_k,
            best_at_k: eval.best_at_k,
            loss: step.loss,
            supervised_tokens: step.supervised_tokens,
            spans: step.spans,
            grad_norm: step.grad_norm,
            wall_ms: step.wall_ms,
        };
        tracing::info!(
            epoch,
            method = %cfg.method,
            avg = eval.avg_at_k,
            best = eval.best_at_k,
            loss = step.loss,
            tokens = step.supervised_tokens,
            "epoch done"
        );
        if best_avg.is_none_or(|b| eval.avg_at_k > b) {
            best_avg = Some(eval.avg_at_k);
            best = Checkpoint {
                params: student.clone(),
                config_hash: config_hash.clone(),
                epoch: epoch as u64,
            };
        }
        on_epoch(&EpochLog {
            metrics: row.clone(),
            step,
            eval,
            trajectories: logged,
        })?;
        metrics.push(row);
    }
    Ok(TrainOutcome {
        best,
        best_avg,
        metrics,
        initial,
        last: student,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::WarmstartConfig;

    fn small(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            method,
            epochs: 2,
            train_tasks: 3,
            eval_tasks: 3,
            warmstart: WarmstartConfig {
                steps: 2,
                batch_size: 4,
                learning_rate: 1e-2,
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_the_initial_policy() {
        let cfg = ExperimentConfig {
            epochs: 0,
            ..small(Method::RefocusMulti)
        };
        let out = train(&cfg, Exec::default(), &mut |_| Ok(())).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.best.epoch, 0);
        assert_eq!(out.best.params, out.initial);
    }

    #[test]
    fn every_method_runs_and_keeps_teacher_gradient_free() {
        for m in Method::ALL {
            let mut steps = Vec::new();
            let out = train(&small(m), Exec::default(), &mut |log| {
                steps.push(log.step.clone());
                Ok(())
            })
            .unwrap();
            assert_eq!(out.metrics.len(), 2);
            assert!(steps.iter().all(|s| s.teacher_grad_buffers == 0));
        }
    }

    #[test]
    fn reruns_are_bit_identical() {
        let cfg = small(Method::RefocusMulti);
        let a = train(&cfg, Exec::default(), &mut |_| Ok(())).unwrap();
        let b = train(&cfg, Exec::Sequential, &mut |_| Ok(())).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.last, b.last);
    }
}
