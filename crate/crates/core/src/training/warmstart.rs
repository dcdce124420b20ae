//! Feedback-following pre-training and the SFT demonstrator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::WarmstartConfig;
use crate::data::{flatten_context, FeedbackItem, TokenId, TokenSequence, Trajectory, CORRECT_IS};
use crate::envs::{run_episode, Agent, EnvState, Environment, Task};
use crate::error::Result;
use crate::parallel::{self, Exec};
use crate::policy::{ActionSpace, PolicyParameters};
use crate::seed::SeedTree;

use super::adam::Adam;
use super::objectives::{evaluate_passes, Pass, Target};

/// Plays uniformly drawn well-formed actions.
struct RandomAgent<'a> {
    env: &'a Environment,
    rng: ChaCha8Rng,
}

impl Agent for RandomAgent<'_> {
    fn observe(&mut self, _turn: usize, _tokens: &[TokenId]) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _turn: usize) -> Result<TokenSequence> {
        Ok(self.env.random_action(&mut self.rng))
    }
}

/// One example: a random-play history, a quoted action after `s_i`, and
/// the quoted action as the target. Half of the examples carry no quote and
/// imitate the random player instead, which keeps the unprompted policy
/// near uniform.
fn quote_example(env: &Environment, seed: SeedTree) -> Result<Pass> {
    let mut rng = seed.rng();
    let task = env.task(rng.gen());
    let traj = run_episode(
        &task,
        &mut RandomAgent {
            env,
            rng: seed.derive(1).rng(),
        },
        seed.value(),
    )?;
    let step = rng.gen_range(1..=traj.horizon());
    let quoted = env.random_action(&mut rng);
    let body = &quoted[..quoted.len() - 1];
    let mut interior = vec![CORRECT_IS];
    interior.extend_from_slice(body);
    let fb = FeedbackItem::wrap(step, &interior);
    let quote = rng.gen_bool(0.5);
    let mut tokens = flatten_context(&traj, step, quote.then_some(&fb))?;
    let start = tokens.len();
    tokens.extend_from_slice(&quoted);
    let targets = (0..quoted.len())
        .map(|t| Target {
            pos: start + t,
            teacher_logits: None,
            weight: 1.0,
        })
        .collect();
    Ok(Pass { tokens, targets })
}

/// Teaches the policy to emit the action quoted in a feedback block placed
/// right before the decision. Returns the loss of the last batch.
pub fn warmstart(
    params: &mut PolicyParameters,
    env: &Environment,
    space: &ActionSpace,
    cfg: &WarmstartConfig,
    root: SeedTree,
    exec: Exec,
) -> Result<f64> {
    let mut opt = Adam::new(params, cfg.learning_rate);
    let mut last = 0.0;
    for step in 0..cfg.steps {
        let seeds = root.derive(step as u64);
        let passes: Vec<Pass> = parallel::map_range(exec, cfg.batch_size, |b| {
            quote_example(env, seeds.derive(b as u64))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let out = evaluate_passes(params, space, &passes, passes.len(), exec)?;
        opt.step(params, &out.grads)?;
        last = out.loss;
    }
    tracing::debug!(loss = last, steps = cfg.steps, "warm-start finished");
    Ok(last)
}

/// Canonical actor that deviates with probability `noise`.
pub struct NoisyOracle<'a> {
    env: &'a Environment,
    task: &'a Task,
    state: EnvState,
    noise: f64,
    rng: ChaCha8Rng,
}

impl<'a> NoisyOracle<'a> {
    pub fn new(env: &'a Environment, task: &'a Task, noise: f64, seed: SeedTree) -> Self {
        NoisyOracle {
            env,
            task,
            state: task.reset().0,
            noise,
            rng: seed.rng(),
        }
    }
}

impl Agent for NoisyOracle<'_> {
    fn observe(&mut self, _turn: usize, _tokens: &[TokenId]) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _turn: usize) -> Result<TokenSequence> {
        let a = if self.rng.gen::<f64>() < self.noise {
            self.env.random_action(&mut self.rng)
        } else {
            self.task.oracle_action(&self.state)
        };
        self.task.step(&mut self.state, &a)?;
        Ok(a)
    }
}

/// Samples up to `candidates` demonstrator episodes and keeps the first
/// success, or the best-rewarded one when none succeeds.
pub fn demonstration(
    env: &Environment,
    task: &Task,
    candidates: usize,
    noise: f64,
    seed: SeedTree,
) -> Result<Trajectory> {
    let mut best: Option<Trajectory> = None;
    for c in 0..candidates.max(1) {
        let s = seed.derive(c as u64);
        let t = run_episode(task, &mut NoisyOracle::new(env, task, noise, s), s.value())?;
        if t.success {
            return Ok(t);
        }
        if best.as_ref().is_none_or(|b| t.terminal_reward > b.terminal_reward) {
            best = Some(t);
        }
    }
    Ok(best.expect("at least one candidate"))
}
