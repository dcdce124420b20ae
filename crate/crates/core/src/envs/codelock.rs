use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{OracleAttribution, StepOutcome};
use crate::data::{
    FeedbackItem, Role, TokenId, TokenSequence, Trajectory, Vocab, CORRECT_IS, EOS, ERR,
};
use crate::error::{Error, Result};
use crate::seed::SeedTree;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeLockSpec {
    /// Code length L; also the horizon.
    pub code_length: usize,
    /// Number of symbols V_a.
    pub alphabet: usize,
    /// Seeds the clue -> symbol mapping shared by all tasks.
    #[serde(default)]
    pub mapping_seed: u64,
}

impl Default for CodeLockSpec {
    fn default() -> Self {
        CodeLockSpec {
            code_length: 5,
            alphabet: 8,
            mapping_seed: 0,
        }
    }
}

impl CodeLockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.code_length == 0 {
            return Err(Error::config("environment.code_length", "must be positive"));
        }
        if self.alphabet < 2 {
            return Err(Error::config("environment.alphabet", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Tokens {
    lock: TokenId,
    ok: TokenId,
    clue0: TokenId,
    sym0: TokenId,
}

#[derive(Debug, Clone)]
pub struct CodeLock {
    spec: CodeLockSpec,
    vocab: Vocab,
    tokens: Tokens,
    /// `symbol_of_clue[c]` is the symbol a clue `c` asks for.
    symbol_of_clue: Vec<usize>,
}

impl CodeLock {
    pub fn new(spec: CodeLockSpec) -> Self {
        let mut vocab = Vocab::new();
        let lock = vocab.push("lock", Role::Observation);
        let ok = vocab.push("ok", Role::Observation);
        let clue0 = vocab.push("clue-0", Role::Observation);
        for c in 1..spec.alphabet {
            vocab.push(format!("clue-{c}"), Role::Observation);
        }
        let sym0 = vocab.push("sym-0", Role::Action);
        for s in 1..spec.alphabet {
            vocab.push(format!("sym-{s}"), Role::Action);
        }
        let mut symbol_of_clue: Vec<usize> = (0..spec.alphabet).collect();
        symbol_of_clue.shuffle(&mut SeedTree::new(spec.mapping_seed).derive(0xC0DE).rng());
        CodeLock {
            tokens: Tokens {
                lock,
                ok,
                clue0,
                sym0,
            },
            spec,
            vocab,
            symbol_of_clue,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn spec(&self) -> &CodeLockSpec {
        &self.spec
    }

    pub fn symbol_token(&self, symbol: usize) -> TokenId {
        self.tokens.sym0 + symbol as TokenId
    }

    pub fn ok_token(&self) -> TokenId {
        self.tokens.ok
    }

    /// A uniformly drawn symbol, as an action.
    pub fn random_action<R: Rng>(&self, rng: &mut R) -> TokenSequence {
        vec![self.symbol_token(rng.gen_range(0..self.spec.alphabet)), EOS]
    }

    pub fn task(&self, seed: u64) -> CodeLockTask {
        let mut rng = SeedTree::new(seed).rng();
        let code = (0..self.spec.code_length)
            .map(|_| rng.gen_range(0..self.spec.alphabet))
            .collect();
        self.task_with_code(seed, code)
    }

    pub fn task_with_code(&self, seed: u64, code: Vec<usize>) -> CodeLockTask {
        assert_eq!(code.len(), self.spec.code_length);
        let clues = code
            .iter()
            .map(|&sym| {
                let c = self.symbol_of_clue.iter().position(|&s| s == sym).unwrap();
                self.tokens.clue0 + c as TokenId
            })
            .collect();
        CodeLockTask {
            seed,
            code,
            clues,
            tokens: self.tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockState {
    turn: usize,
    correct: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct CodeLockTask {
    seed: u64,
    code: Vec<usize>,
    clues: Vec<TokenId>,
    tokens: Tokens,
}

impl CodeLockTask {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn code(&self) -> &[usize] {
        &self.code
    }

    pub fn horizon(&self) -> usize {
        self.code.len()
    }

    fn symbol_token(&self, turn_index: usize) -> TokenId {
        self.tokens.sym0 + self.code[turn_index] as TokenId
    }

    pub fn reset(&self) -> (LockState, TokenSequence) {
        (
            LockState {
                turn: 0,
                correct: Vec::new(),
            },
            vec![self.tokens.lock, self.clues[0]],
        )
    }

    pub fn step(&self, state: &mut LockState, action: &[TokenId]) -> Result<StepOutcome> {
        if state.turn >= self.horizon() {
            return Err(Error::Contract("step after the lock closed".into()));
        }
        let right = action.first() == Some(&self.symbol_token(state.turn));
        state.correct.push(right);
        state.turn += 1;
        let mut observation = vec![if right { self.tokens.ok } else { ERR }];
        let done = state.turn == self.horizon();
        if !done {
            observation.push(self.clues[state.turn]);
        }
        Ok(StepOutcome { observation, done })
    }

    pub fn is_success(&self, state: &LockState) -> bool {
        state.turn == self.horizon() && state.correct.iter().all(|&c| c)
    }

    pub fn oracle_action(&self, state: &LockState) -> TokenSequence {
        vec![self.symbol_token(state.turn.min(self.horizon() - 1)), EOS]
    }

    /// Every wrong turn, earliest first, with the symbol it needed.
    pub(super) fn attribution(&self, trajectory: &Trajectory) -> Result<OracleAttribution> {
        let failure_steps = trajectory
            .turns
            .iter()
            .enumerate()
            .filter(|(i, t)| t.action_tokens.first() != Some(&self.symbol_token(*i)))
            .map(|(i, _)| FeedbackItem::wrap(i + 1, &[CORRECT_IS, self.symbol_token(i)]))
            .collect();
        Ok(OracleAttribution { failure_steps })
    }
}
