//! Deterministic multi-turn environments with a binary terminal judge and
//! ground-truth failure attribution.
//!
//! * [`codelock`]: one symbol per turn; each turn's clue determines the
//!   right symbol through a fixed hidden mapping.
//! * [`toolchain`]: credentialed tool calls with argument dependencies;
//!   errors surface several turns after the decision that caused them.

pub mod codelock;
pub mod toolchain;

use serde::{Deserialize, Serialize};

use crate::data::{FeedbackItem, TokenId, TokenSequence, Trajectory, Turn, Vocab};
use crate::error::{Error, Result};
use crate::seed::{SeedTree, Stream};

pub use codelock::{CodeLock, CodeLockSpec, CodeLockTask};
pub use toolchain::{ToolChain, ToolChainSpec, ToolChainTask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    CodeLock(CodeLockSpec),
    ToolChain(ToolChainSpec),
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            EnvSpec::CodeLock(s) => s.validate(),
            EnvSpec::ToolChain(s) => s.validate(),
        }
    }
}

/// A built environment: vocabulary plus task factory.
#[derive(Debug, Clone)]
pub enum Environment {
    CodeLock(CodeLock),
    ToolChain(ToolChain),
}

impl Environment {
    pub fn new(spec: &EnvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(match spec {
            EnvSpec::CodeLock(s) => Environment::CodeLock(CodeLock::new(s.clone())),
            EnvSpec::ToolChain(s) => Environment::ToolChain(ToolChain::new(s.clone())),
        })
    }

    pub fn vocab(&self) -> &Vocab {
        match self {
            Environment::CodeLock(e) => e.vocab(),
            Environment::ToolChain(e) => e.vocab(),
        }
    }

    pub fn task(&self, task_seed: u64) -> Task {
        match self {
            Environment::CodeLock(e) => Task::CodeLock(e.task(task_seed)),
            Environment::ToolChain(e) => Task::ToolChain(e.task(task_seed)),
        }
    }

    pub fn random_action<R: rand::Rng>(&self, rng: &mut R) -> TokenSequence {
        match self {
            Environment::CodeLock(e) => e.random_action(rng),
            Environment::ToolChain(e) => e.random_action(rng),
        }
    }

    /// Task seeds enumerated from the base seed; splits never overlap.
    pub fn tasks(&self, base_seed: u64, split: Split, count: usize) -> Vec<Task> {
        let root = SeedTree::new(base_seed)
            .stream(Stream::Tasks)
            .derive(split as u64);
        (0..count)
            .map(|i| self.task(root.derive(i as u64).value()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Split {
    Train = 0,
    Eval = 1,
    Analysis = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub observation: TokenSequence,
    pub done: bool,
}

/// Mutable per-episode state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvState {
    CodeLock(codelock::LockState),
    ToolChain(toolchain::ChainState),
}

/// Ground-truth failure steps with corrective feedback, earliest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleAttribution {
    pub failure_steps: Vec<FeedbackItem>,
}

/// One concrete task instance.
#[derive(Debug, Clone)]
pub enum Task {
    CodeLock(CodeLockTask),
    ToolChain(ToolChainTask),
}

impl Task {
    pub fn id(&self) -> String {
        match self {
            Task::CodeLock(t) => format!("codelock-{}", t.seed()),
            Task::ToolChain(t) => format!("toolchain-{}", t.seed()),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Task::CodeLock(t) => t.seed(),
            Task::ToolChain(t) => t.seed(),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Task::CodeLock(t) => t.horizon(),
            Task::ToolChain(t) => t.horizon(),
        }
    }

    pub fn reset(&self) -> (EnvState, TokenSequence) {
        match self {
            Task::CodeLock(t) => {
                let (s, o) = t.reset();
                (EnvState::CodeLock(s), o)
            }
            Task::ToolChain(t) => {
                let (s, o) = t.reset();
                (EnvState::ToolChain(s), o)
            }
        }
    }

    pub fn step(&self, state: &mut EnvState, action: &[TokenId]) -> Result<StepOutcome> {
        match (self, state) {
            (Task::CodeLock(t), EnvState::CodeLock(s)) => t.step(s, action),
            (Task::ToolChain(t), EnvState::ToolChain(s)) => t.step(s, action),
            _ => Err(Error::Contract("state belongs to another environment".into())),
        }
    }

    pub fn is_success(&self, state: &EnvState) -> bool {
        match (self, state) {
            (Task::CodeLock(t), EnvState::CodeLock(s)) => t.is_success(s),
            (Task::ToolChain(t), EnvState::ToolChain(s)) => t.is_success(s),
            _ => false,
        }
    }

    /// The canonical next action from `state`.
    pub fn oracle_action(&self, state: &EnvState) -> TokenSequence {
        match (self, state) {
            (Task::CodeLock(t), EnvState::CodeLock(s)) => t.oracle_action(s),
            (Task::ToolChain(t), EnvState::ToolChain(s)) => t.oracle_action(s),
            _ => panic!("state belongs to another environment"),
        }
    }

    /// Replays the recorded actions and returns the terminal reward.
    pub fn judge(&self, trajectory: &Trajectory) -> Result<u8> {
        let (state, done) = self.replay_checked(trajectory)?;
        if !done {
            return Err(Error::Contract(format!(
                "trajectory for {} stopped before the episode ended",
                trajectory.task_id
            )));
        }
        Ok(self.is_success(&state) as u8)
    }

    fn replay_checked(&self, trajectory: &Trajectory) -> Result<(EnvState, bool)> {
        let (mut state, mut obs) = self.reset();
        let mut done = false;
        for (i, turn) in trajectory.turns.iter().enumerate() {
            if done {
                return Err(Error::Contract(format!("turn {} after episode end", i + 1)));
            }
            if turn.state_tokens != obs {
                return Err(Error::Contract(format!(
                    "replay diverged at turn {}: recorded state differs",
                    i + 1
                )));
            }
            let out = self.step(&mut state, &turn.action_tokens)?;
            obs = out.observation;
            done = out.done;
        }
        if done && trajectory.final_observation != obs {
            return Err(Error::Contract("final observation differs on replay".into()));
        }
        Ok((state, done))
    }

    pub fn oracle_attribution(&self, trajectory: &Trajectory) -> Result<OracleAttribution> {
        if self.judge(trajectory)? == 1 {
            return Err(Error::Contract(
                "oracle attribution requested for a successful trajectory".into(),
            ));
        }
        match self {
            Task::CodeLock(t) => t.attribution(trajectory),
            Task::ToolChain(t) => t.attribution(trajectory),
        }
    }

    /// Runs the recorded actions, substituting `corrections` (step ->
    /// action) where given, and returns the resulting trajectory.
    pub fn replay_with(
        &self,
        actions: &[TokenSequence],
        corrections: &[(usize, TokenSequence)],
    ) -> Result<Trajectory> {
        let mut agent = ScriptedAgent::new(actions.to_vec());
        for (step, a) in corrections {
            if *step == 0 || *step > agent.script.len() {
                return Err(Error::Index(format!("correction at step {step}")));
            }
            agent.script[step - 1] = a.clone();
        }
        run_episode(self, &mut agent, 0)
    }
}

/// A decision maker driven by the episode loop.
pub trait Agent {
    /// Feeds the state tokens of the upcoming turn (1-based).
    fn observe(&mut self, turn: usize, tokens: &[TokenId]) -> Result<()>;
    fn act(&mut self, turn: usize) -> Result<TokenSequence>;
}

/// Plays back a fixed action script; past its end it emits bare EOS.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    pub script: Vec<TokenSequence>,
}

impl ScriptedAgent {
    pub fn new(script: Vec<TokenSequence>) -> Self {
        ScriptedAgent { script }
    }
}

impl Agent for ScriptedAgent {
    fn observe(&mut self, _turn: usize, _tokens: &[TokenId]) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, turn: usize) -> Result<TokenSequence> {
        Ok(self
            .script
            .get(turn - 1)
            .cloned()
            .unwrap_or_else(|| vec![crate::data::EOS]))
    }
}

/// Always plays the canonical action.
pub struct OracleAgent<'a> {
    task: &'a Task,
    state: EnvState,
}

impl<'a> OracleAgent<'a> {
    pub fn new(task: &'a Task) -> Self {
        OracleAgent {
            task,
            state: task.reset().0,
        }
    }
}

impl Agent for OracleAgent<'_> {
    fn observe(&mut self, _turn: usize, _tokens: &[TokenId]) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _turn: usize) -> Result<TokenSequence> {
        let a = self.task.oracle_action(&self.state);
        self.task.step(&mut self.state, &a)?;
        Ok(a)
    }
}

/// Plays one episode to completion. The reward is set from the judge's
/// view of the final state.
pub fn run_episode(task: &Task, agent: &mut dyn Agent, rollout_seed: u64) -> Result<Trajectory> {
    let (mut state, mut obs) = task.reset();
    let mut turns = Vec::new();
    for turn in 1..=task.horizon() {
        agent.observe(turn, &obs)?;
        let action = agent.act(turn)?;
        let out = task.step(&mut state, &action)?;
        turns.push(Turn::new(std::mem::take(&mut obs), action)?);
        obs = out.observation;
        if out.done {
            break;
        }
    }
    let success = task.is_success(&state);
    Ok(Trajectory {
        task_id: task.id(),
        seed: rollout_seed,
        turns,
        final_observation: obs,
        terminal_reward: success as u8,
        success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_splits_are_disjoint_and_deterministic() {
        let env = Environment::new(&EnvSpec::CodeLock(CodeLockSpec::default())).unwrap();
        let a: Vec<u64> = env.tasks(0, Split::Train, 20).iter().map(Task::seed).collect();
        let b: Vec<u64> = env.tasks(0, Split::Eval, 20).iter().map(Task::seed).collect();
        assert!(a.iter().all(|s| !b.contains(s)));
        let again: Vec<u64> = env.tasks(0, Split::Train, 20).iter().map(Task::seed).collect();
        assert_eq!(a, again);
    }

    #[test]
    fn oracle_agent_succeeds_everywhere() {
        for spec in [
            EnvSpec::CodeLock(CodeLockSpec::default()),
            EnvSpec::ToolChain(ToolChainSpec::default()),
        ] {
            let env = Environment::new(&spec).unwrap();
            for task in env.tasks(3, Split::Train, 50) {
                let t = run_episode(&task, &mut OracleAgent::new(&task), 0).unwrap();
                assert!(t.success);
                assert_eq!(task.judge(&t).unwrap(), 1);
            }
        }
    }

    #[test]
    fn judge_rejects_incomplete_and_tampered() {
        let env = Environment::new(&EnvSpec::CodeLock(CodeLockSpec::default())).unwrap();
        let task = env.task(1);
        let mut t = run_episode(&task, &mut OracleAgent::new(&task), 0).unwrap();
        let full = t.clone();
        t.turns.pop();
        assert!(matches!(task.judge(&t), Err(Error::Contract(_))));
        let mut tampered = full.clone();
        tampered.turns[1].state_tokens.push(9);
        assert!(task.judge(&tampered).is_err());
        assert!(matches!(task.oracle_attribution(&full), Err(Error::Contract(_))));
    }
}
