//! Credentialed tool-call chains.
//!
//! A task asks for a handful of items. Each item belongs to a service and
//! can only be fetched with that service's credential, which a `login`
//! call yields. The episode succeeds once every goal item is fetched and
//! `submit` is called. Actions:
//!
//! ```text
//! login  svc-s            -> res cred-s
//! fetch  item-j cred-s    -> res item-j  | err <class>
//! submit                  -> res done    | err incomplete
//! ```

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{OracleAttribution, StepOutcome};
use crate::data::{FeedbackItem, Role, TokenId, TokenSequence, Trajectory, Vocab, CORRECT_IS, EOS, ERR};
use crate::error::{Error, Result};
use crate::seed::SeedTree;

pub const MAX_HORIZON: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToolChainSpec {
    pub n_services: usize,
    pub n_items: usize,
    pub min_goal_items: usize,
    pub max_goal_items: usize,
}

impl Default for ToolChainSpec {
    fn default() -> Self {
        ToolChainSpec {
            n_services: 3,
            n_items: 8,
            min_goal_items: 2,
            max_goal_items: 4,
        }
    }
}

impl ToolChainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.n_services) {
            return Err(Error::config("environment.n_services", "must be in 1..=3"));
        }
        if self.min_goal_items < 2 || self.min_goal_items > self.max_goal_items {
            return Err(Error::config(
                "environment.min_goal_items",
                "need 2 <= min_goal_items <= max_goal_items",
            ));
        }
        if self.max_goal_items > self.n_items {
            return Err(Error::config("environment.max_goal_items", "exceeds n_items"));
        }
        if self.max_goal_items + self.n_services.min(self.max_goal_items) + 1 > 8 {
            return Err(Error::config(
                "environment.max_goal_items",
                "tasks would need more than 8 calls",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Tokens {
    goal: TokenId,
    res: TokenId,
    done: TokenId,
    obs_cred0: TokenId,
    obs_item0: TokenId,
    e_missing: TokenId,
    e_undefined: TokenId,
    e_wrong: TokenId,
    e_malformed: TokenId,
    e_incomplete: TokenId,
    login: TokenId,
    fetch: TokenId,
    submit: TokenId,
    svc0: TokenId,
    item0: TokenId,
    cred0: TokenId,
    n_services: usize,
    n_items: usize,
}

/// Error classes that follow the ERR marker in an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    MissingCredential,
    UndefinedCredential,
    WrongCredential,
    Malformed,
    Incomplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Call {
    Login(usize),
    Fetch { item: usize, cred: Option<usize> },
    Submit,
}

#[derive(Debug, Clone)]
pub struct ToolChain {
    spec: ToolChainSpec,
    vocab: Vocab,
    tokens: Tokens,
}

impl ToolChain {
    pub fn new(spec: ToolChainSpec) -> Self {
        let mut v = Vocab::new();
        let goal = v.push("goal", Role::Observation);
        let res = v.push("res", Role::Observation);
        let done = v.push("done", Role::Observation);
        let obs_cred0 = v.push("got-cred-0", Role::Observation);
        for s in 1..spec.n_services {
            v.push(format!("got-cred-{s}"), Role::Observation);
        }
        let obs_item0 = v.push("got-item-0", Role::Observation);
        for j in 1..spec.n_items {
            v.push(format!("got-item-{j}"), Role::Observation);
        }
        let e_missing = v.push("missing-credential", Role::Observation);
        let e_undefined = v.push("undefined-credential", Role::Observation);
        let e_wrong = v.push("wrong-credential", Role::Observation);
        let e_malformed = v.push("malformed-call", Role::Observation);
        let e_incomplete = v.push("incomplete", Role::Observation);
        let login = v.push("login", Role::Action);
        let fetch = v.push("fetch", Role::Action);
        let submit = v.push("submit", Role::Action);
        let svc0 = v.push("svc-0", Role::Action);
        for s in 1..spec.n_services {
            v.push(format!("svc-{s}"), Role::Action);
        }
        let item0 = v.push("item-0", Role::Action);
        for j in 1..spec.n_items {
            v.push(format!("item-{j}"), Role::Action);
        }
        let cred0 = v.push("cred-0", Role::Action);
        for s in 1..spec.n_services {
            v.push(format!("cred-{s}"), Role::Action);
        }
        let tokens = Tokens {
            goal,
            res,
            done,
            obs_cred0,
            obs_item0,
            e_missing,
            e_undefined,
            e_wrong,
            e_malformed,
            e_incomplete,
            login,
            fetch,
            submit,
            svc0,
            item0,
            cred0,
            n_services: spec.n_services,
            n_items: spec.n_items,
        };
        ToolChain { spec, vocab: v, tokens }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn spec(&self) -> &ToolChainSpec {
        &self.spec
    }

    /// A well-formed call with uniformly drawn operation and arguments.
    pub fn random_action<R: Rng>(&self, rng: &mut R) -> TokenSequence {
        let t = &self.tokens;
        let s = rng.gen_range(0..t.n_services) as TokenId;
        match rng.gen_range(0..3) {
            0 => vec![t.login, t.svc0 + s, EOS],
            1 => {
                let j = rng.gen_range(0..t.n_items) as TokenId;
                vec![t.fetch, t.item0 + j, t.cred0 + s, EOS]
            }
            _ => vec![t.submit, EOS],
        }
    }

    pub fn task(&self, seed: u64) -> ToolChainTask {
        let mut rng = SeedTree::new(seed).rng();
        let k = rng.gen_range(self.spec.min_goal_items..=self.spec.max_goal_items);
        let mut items: Vec<usize> = (0..self.spec.n_items).collect();
        items.shuffle(&mut rng);
        items.truncate(k);
        self.task_with_goal(seed, items)
    }

    pub fn task_with_goal(&self, seed: u64, goal: Vec<usize>) -> ToolChainTask {
        let owner = |j: usize| j % self.spec.n_services;
        let mut canonical = Vec::new();
        let mut services: Vec<usize> = Vec::new();
        for &j in &goal {
            if !services.contains(&owner(j)) {
                services.push(owner(j));
            }
        }
        for &s in &services {
            canonical.push(Call::Login(s));
            for &j in goal.iter().filter(|&&j| owner(j) == s) {
                canonical.push(Call::Fetch { item: j, cred: Some(s) });
            }
        }
        canonical.push(Call::Submit);
        let horizon = (2 * canonical.len()).min(MAX_HORIZON);
        ToolChainTask {
            seed,
            goal,
            canonical,
            horizon,
            tokens: self.tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainState {
    turn: usize,
    logged_in: Vec<bool>,
    fetched: Vec<bool>,
    submitted: bool,
}

#[derive(Debug, Clone)]
pub struct ToolChainTask {
    seed: u64,
    goal: Vec<usize>,
    canonical: Vec<Call>,
    horizon: usize,
    tokens: Tokens,
}

impl ToolChainTask {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn goal(&self) -> &[usize] {
        &self.goal
    }

    pub fn canonical(&self) -> &[Call] {
        &self.canonical
    }

    fn owner(&self, item: usize) -> usize {
        item % self.tokens.n_services
    }

    pub fn encode(&self, call: Call) -> TokenSequence {
        let t = &self.tokens;
        match call {
            Call::Login(s) => vec![t.login, t.svc0 + s as TokenId, EOS],
            Call::Fetch { item, cred } => {
                let mut a = vec![t.fetch, t.item0 + item as TokenId];
                if let Some(s) = cred {
                    a.push(t.cred0 + s as TokenId);
                }
                a.push(EOS);
                a
            }
            Call::Submit => vec![t.submit, EOS],
        }
    }

    pub fn parse(&self, action: &[TokenId]) -> Option<Call> {
        let t = &self.tokens;
        let body = action.strip_suffix(&[EOS])?;
        let in_range = |tok: TokenId, base: TokenId, n: usize| {
            (tok >= base && tok < base + n as TokenId).then(|| (tok - base) as usize)
        };
        match body {
            [op, s] if *op == t.login => in_range(*s, t.svc0, t.n_services).map(Call::Login),
            [op, j] if *op == t.fetch => {
                in_range(*j, t.item0, t.n_items).map(|item| Call::Fetch { item, cred: None })
            }
            [op, j, c] if *op == t.fetch => {
                let item = in_range(*j, t.item0, t.n_items)?;
                let cred = in_range(*c, t.cred0, t.n_services)?;
                Some(Call::Fetch { item, cred: Some(cred) })
            }
            [op] if *op == t.submit => Some(Call::Submit),
            _ => None,
        }
    }

    pub fn error_class(&self, observation: &[TokenId]) -> Option<ErrorClass> {
        let t = &self.tokens;
        match observation {
            [ERR, c, ..] if *c == t.e_missing => Some(ErrorClass::MissingCredential),
            [ERR, c, ..] if *c == t.e_undefined => Some(ErrorClass::UndefinedCredential),
            [ERR, c, ..] if *c == t.e_wrong => Some(ErrorClass::WrongCredential),
            [ERR, c, ..] if *c == t.e_malformed => Some(ErrorClass::Malformed),
            [ERR, c, ..] if *c == t.e_incomplete => Some(ErrorClass::Incomplete),
            _ => None,
        }
    }

    pub fn reset(&self) -> (ChainState, TokenSequence) {
        let mut obs = vec![self.tokens.goal];
        obs.extend(self.goal.iter().map(|&j| self.tokens.obs_item0 + j as TokenId));
        (
            ChainState {
                turn: 0,
                logged_in: vec![false; self.tokens.n_services],
                fetched: vec![false; self.tokens.n_items],
                submitted: false,
            },
            obs,
        )
    }

    fn complete(&self, state: &ChainState) -> bool {
        self.goal.iter().all(|&j| state.fetched[j])
    }

    /// Applies a call; returns the observation and whether it raised an error.
    fn apply(&self, state: &mut ChainState, call: Option<Call>) -> (TokenSequence, bool) {
        let t = &self.tokens;
        let err = |class: TokenId| (vec![ERR, class], true);
        match call {
            None => err(t.e_malformed),
            Some(Call::Login(s)) => {
                state.logged_in[s] = true;
                (vec![t.res, t.obs_cred0 + s as TokenId], false)
            }
            Some(Call::Fetch { cred: None, .. }) => err(t.e_missing),
            Some(Call::Fetch { item, cred: Some(s) }) => {
                if !state.logged_in[s] {
                    err(t.e_undefined)
                } else if s != self.owner(item) {
                    err(t.e_wrong)
                } else {
                    state.fetched[item] = true;
                    (vec![t.res, t.obs_item0 + item as TokenId], false)
                }
            }
            Some(Call::Submit) => {
                if self.complete(state) {
                    state.submitted = true;
                    (vec![t.res, t.done], false)
                } else {
                    err(t.e_incomplete)
                }
            }
        }
    }

    pub fn step(&self, state: &mut ChainState, action: &[TokenId]) -> Result<StepOutcome> {
        if state.submitted || state.turn >= self.horizon {
            return Err(Error::Contract("step after the episode ended".into()));
        }
        state.turn += 1;
        let (observation, _) = self.apply(state, self.parse(action));
        Ok(StepOutcome {
            observation,
            done: state.submitted || state.turn == self.horizon,
        })
    }

    pub fn is_success(&self, state: &ChainState) -> bool {
        state.submitted
    }

    fn satisfied(&self, state: &ChainState, call: Call) -> bool {
        match call {
            Call::Login(s) => state.logged_in[s],
            Call::Fetch { item, .. } => state.fetched[item],
            Call::Submit => state.submitted,
        }
    }

    fn outstanding(&self, state: &ChainState) -> usize {
        self.canonical
            .iter()
            .filter(|&&c| !self.satisfied(state, c))
            .count()
    }

    fn next_needed(&self, state: &ChainState) -> Call {
        *self
            .canonical
            .iter()
            .find(|&&c| !self.satisfied(state, c))
            .unwrap_or(&Call::Submit)
    }

    pub fn oracle_action(&self, state: &ChainState) -> TokenSequence {
        self.encode(self.next_needed(state))
    }

    /// Corrected replay. Walking the recorded actions in order, a step is
    /// attributed when, given the corrections already made, its action
    /// raises an error or wastes a turn the remaining calls cannot spare.
    /// The attributed step is then replaced by the next outstanding
    /// canonical call. Errors that vanish once an earlier step is
    /// corrected are never attributed.
    pub(super) fn attribution(&self, trajectory: &Trajectory) -> Result<OracleAttribution> {
        if trajectory.horizon() != self.horizon {
            return Err(Error::Contract(format!(
                "failed trajectory has {} turns, horizon is {}",
                trajectory.horizon(),
                self.horizon
            )));
        }
        let (mut state, _) = self.reset();
        let mut failure_steps = Vec::new();
        for (i, turn) in trajectory.turns.iter().enumerate() {
            if state.submitted {
                break;
            }
            let steps_left = self.horizon - i;
            let before = self.outstanding(&state);
            let mut trial = state.clone();
            let (_, errored) = self.apply(&mut trial, self.parse(&turn.action_tokens));
            let progressed = self.outstanding(&trial) < before;
            let wasteful = !progressed && steps_left - 1 < before;
            if errored || wasteful {
                let fix = self.next_needed(&state);
                let mut interior = vec![CORRECT_IS];
                let encoded = self.encode(fix);
                interior.extend_from_slice(&encoded[..encoded.len() - 1]);
                failure_steps.push(FeedbackItem::wrap(i + 1, &interior));
                self.apply(&mut state, Some(fix));
            } else {
                state = trial;
            }
        }
        Ok(OracleAttribution { failure_steps })
    }
}
