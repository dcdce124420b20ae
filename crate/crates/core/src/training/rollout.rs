use rand_chacha::ChaCha8Rng;

use crate::data::{TokenId, TokenSequence, Trajectory};
use crate::envs::{run_episode, Agent, Task};
use crate::error::Result;
use crate::parallel::{self, Exec};
use crate::policy::{sample_action_from, ActionSpace, DecodingLimits, PolicyParameters};
use crate::seed::SeedTree;

/// Samples actions from a policy, carrying the recurrent state across
/// turns. Extra context can be placed before the first observation or
/// right after the state tokens of one turn; either stays in the context
/// for the rest of the episode. Forced actions replace sampling for the
/// first turns.
pub struct PolicyAgent<'a> {
    params: &'a PolicyParameters,
    space: &'a ActionSpace,
    limits: DecodingLimits,
    rng: ChaCha8Rng,
    hidden: Vec<f64>,
    prefix: TokenSequence,
    insertion: Option<(usize, TokenSequence)>,
    forced: Vec<TokenSequence>,
}

impl<'a> PolicyAgent<'a> {
    pub fn new(
        params: &'a PolicyParameters,
        space: &'a ActionSpace,
        limits: DecodingLimits,
        seed: SeedTree,
    ) -> Self {
        PolicyAgent {
            params,
            space,
            limits,
            rng: seed.rng(),
            hidden: params.initial_hidden(),
            prefix: Vec::new(),
            insertion: None,
            forced: Vec::new(),
        }
    }

    pub fn with_prefix(mut self, tokens: TokenSequence) -> Self {
        self.prefix = tokens;
        self
    }

    /// Appends `tokens` after the state tokens of `turn`.
    pub fn with_insertion(mut self, turn: usize, tokens: TokenSequence) -> Self {
        self.insertion = Some((turn, tokens));
        self
    }

    pub fn with_forced(mut self, actions: Vec<TokenSequence>) -> Self {
        self.forced = actions;
        self
    }
}

impl Agent for PolicyAgent<'_> {
    fn observe(&mut self, turn: usize, tokens: &[TokenId]) -> Result<()> {
        if turn == 1 {
            self.params.run_from(&mut self.hidden, &self.prefix)?;
        }
        self.params.run_from(&mut self.hidden, tokens)?;
        if let Some((t, fb)) = &self.insertion {
            if *t == turn {
                self.params.run_from(&mut self.hidden, fb)?;
            }
        }
        Ok(())
    }

    fn act(&mut self, turn: usize) -> Result<TokenSequence> {
        if let Some(a) = self.forced.get(turn - 1) {
            self.params.run_from(&mut self.hidden, a)?;
            return Ok(a.clone());
        }
        sample_action_from(
            self.params,
            self.space,
            &mut self.hidden,
            self.limits,
            &mut self.rng,
        )
    }
}

/// `G` trajectories per task, in task order.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub groups: Vec<Vec<Trajectory>>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.groups.iter().flatten()
    }

    pub fn successes(&self) -> usize {
        self.trajectories().filter(|t| t.success).count()
    }

    /// Failed trajectories of group `g`, duplicates dropped, first
    /// occurrence kept.
    pub fn distinct_failures(&self, g: usize) -> Vec<&Trajectory> {
        let mut out: Vec<&Trajectory> = Vec::new();
        for t in self.groups[g].iter().filter(|t| !t.success) {
            if !out.iter().any(|u| u.turns == t.turns) {
                out.push(t);
            }
        }
        out
    }
}

/// Rollout `r` of task `i` is seeded from `root.derive(i).derive(r)`.
pub fn collect_rollouts(
    params: &PolicyParameters,
    space: &ActionSpace,
    limits: DecodingLimits,
    tasks: &[Task],
    group_size: usize,
    root: SeedTree,
    exec: Exec,
) -> Result<RolloutBatch> {
    let n = tasks.len() * group_size;
    let flat = parallel::map_range(exec, n, |idx| {
        let (i, r) = (idx / group_size, idx % group_size);
        let seed = root.derive(i as u64).derive(r as u64);
        let mut agent = PolicyAgent::new(params, space, limits, seed);
        run_episode(&tasks[i], &mut agent, seed.value())
    });
    let mut groups: Vec<Vec<Trajectory>> = Vec::with_capacity(tasks.len());
    let mut it = flat.into_iter();
    for _ in 0..tasks.len() {
        groups.push(it.by_ref().take(group_size).collect::<Result<_>>()?);
    }
    Ok(RolloutBatch { groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{CodeLockSpec, EnvSpec, Environment, OracleAgent, Split};

    fn setup() -> (Environment, ActionSpace, PolicyParameters) {
        let env = Environment::new(&EnvSpec::CodeLock(CodeLockSpec::default())).unwrap();
        let space = ActionSpace::new(env.vocab());
        let params = PolicyParameters::init(
            env.vocab().size(),
            8,
            8,
            0.08,
            &mut SeedTree::new(1).rng(),
        );
        (env, space, params)
    }

    #[test]
    fn batch_shape_and_determinism() {
        let (env, space, params) = setup();
        let tasks = env.tasks(0, Split::Train, 5);
        let limits = DecodingLimits::new(2).unwrap();
        let a = collect_rollouts(&params, &space, limits, &tasks, 4, SeedTree::new(9), Exec::default())
            .unwrap();
        assert_eq!(a.len(), 20);
        assert!(a.groups.iter().all(|g| g.len() == 4));
        let b = collect_rollouts(&params, &space, limits, &tasks, 4, SeedTree::new(9), Exec::Sequential)
            .unwrap();
        assert_eq!(a, b);
        for (g, task) in a.groups.iter().zip(&tasks) {
            for t in g {
                assert_eq!(task.judge(t).unwrap(), t.terminal_reward);
            }
        }
    }

    #[test]
    fn oracle_policy_always_succeeds() {
        let (env, _, _) = setup();
        for task in env.tasks(3, Split::Train, 10) {
            let t = run_episode(&task, &mut OracleAgent::new(&task), 0).unwrap();
            assert_eq!(t.terminal_reward, 1);
        }
    }

    #[test]
    fn forced_actions_are_replayed() {
        let (env, space, params) = setup();
        let task = env.task(4);
        let limits = DecodingLimits::new(2).unwrap();
        let first = run_episode(
            &task,
            &mut PolicyAgent::new(&params, &space, limits, SeedTree::new(1)),
            0,
        )
        .unwrap();
        let prefix: Vec<TokenSequence> = first.actions()[..2].to_vec();
        let again = run_episode(
            &task,
            &mut PolicyAgent::new(&params, &space, limits, SeedTree::new(2))
                .with_forced(prefix.clone())
                .with_insertion(3, vec![crate::data::FB_BEGIN, crate::data::FB_END]),
            0,
        )
        .unwrap();
        assert_eq!(again.actions()[..2], prefix[..]);
        assert_eq!(again.turns[..2], first.turns[..2]);
    }
}
