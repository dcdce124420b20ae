//! Token vocabulary, trajectories and hindsight feedback records.
//!
//! Steps are 1-based everywhere: step `i` refers to `turns[i - 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type TokenSequence = Vec<TokenId>;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const FB_BEGIN: TokenId = 2;
pub const FB_END: TokenId = 3;
pub const ERR: TokenId = 4;
/// Feedback token introducing a quoted corrective action.
pub const CORRECT_IS: TokenId = 5;
/// Feedback token introducing an echoed error observation.
pub const SAW_ERR: TokenId = 6;
pub const SAW_OK: TokenId = 7;
pub const GENERIC_FB: TokenId = 8;
/// First id available to environment-specific tokens.
pub const FIRST_ENV_TOKEN: TokenId = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Observation,
    Action,
    Feedback,
    Control,
}

/// Dense token alphabet. Ids are `0..size()`, each with one role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    roles: Vec<Role>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Vocabulary holding only the reserved control and feedback tokens.
    pub fn new() -> Self {
        let mut v = Vocab {
            names: Vec::new(),
            roles: Vec::new(),
        };
        for (name, role) in [
            ("<pad>", Role::Control),
            ("<eos>", Role::Control),
            ("<fb>", Role::Control),
            ("</fb>", Role::Control),
            ("<err>", Role::Control),
            ("correct-is", Role::Feedback),
            ("saw-err", Role::Feedback),
            ("saw-ok", Role::Feedback),
            ("generic-hint", Role::Feedback),
        ] {
            v.push(name, role);
        }
        debug_assert_eq!(v.size() as TokenId, FIRST_ENV_TOKEN);
        v
    }

    pub fn push(&mut self, name: impl Into<String>, role: Role) -> TokenId {
        let id = self.names.len() as TokenId;
        self.names.push(name.into());
        self.roles.push(role);
        id
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn role(&self, id: TokenId) -> Option<Role> {
        self.roles.get(id as usize).copied()
    }

    pub fn name(&self, id: TokenId) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<TokenId> {
        self.names.iter().position(|n| n == name).map(|i| i as TokenId)
    }

    /// Tokens a policy may emit while decoding an action: every
    /// action-role token plus EOS, in increasing id order.
    pub fn decodable(&self) -> Vec<TokenId> {
        (0..self.size() as TokenId)
            .filter(|&t| t == EOS || self.roles[t as usize] == Role::Action)
            .collect()
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.name(t).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.size()) {
            Some(t) => Err(Error::Index(format!(
                "token {t} outside vocabulary of size {}",
                self.size()
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(rename = "state")]
    pub state_tokens: TokenSequence,
    #[serde(rename = "action")]
    pub action_tokens: TokenSequence,
}

impl Turn {
    pub fn new(state_tokens: TokenSequence, action_tokens: TokenSequence) -> Result<Self> {
        if action_tokens.last() != Some(&EOS) {
            return Err(Error::Contract(
                "action must be non-empty and end with EOS".into(),
            ));
        }
        Ok(Turn {
            state_tokens,
            action_tokens,
        })
    }
}

/// One complete episode. `final_observation` is the observation emitted
/// after the last action; it is never part of any policy context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub seed: u64,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub final_observation: TokenSequence,
    #[serde(rename = "reward")]
    pub terminal_reward: u8,
    pub success: bool,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.turns.len()
    }

    pub fn turn(&self, step: usize) -> Result<&Turn> {
        if step == 0 || step > self.turns.len() {
            return Err(Error::Index(format!(
                "step {step} outside 1..={}",
                self.turns.len()
            )));
        }
        Ok(&self.turns[step - 1])
    }

    /// Observation that followed the action at `step`.
    pub fn next_observation(&self, step: usize) -> Result<&[TokenId]> {
        self.turn(step)?;
        Ok(if step == self.turns.len() {
            &self.final_observation
        } else {
            &self.turns[step].state_tokens
        })
    }

    pub fn action_token_count(&self) -> usize {
        self.turns.iter().map(|t| t.action_tokens.len()).sum()
    }

    pub fn actions(&self) -> Vec<TokenSequence> {
        self.turns.iter().map(|t| t.action_tokens.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub step: usize,
    #[serde(rename = "feedback")]
    pub feedback_tokens: TokenSequence,
}

impl FeedbackItem {
    /// Wraps `interior` in FB-BEGIN/FB-END.
    pub fn wrap(step: usize, interior: &[TokenId]) -> Self {
        let mut feedback_tokens = Vec::with_capacity(interior.len() + 2);
        feedback_tokens.push(FB_BEGIN);
        feedback_tokens.extend_from_slice(interior);
        feedback_tokens.push(FB_END);
        FeedbackItem {
            step,
            feedback_tokens,
        }
    }

    pub fn interior(&self) -> &[TokenId] {
        let n = self.feedback_tokens.len();
        if n < 2 {
            return &[];
        }
        &self.feedback_tokens[1..n - 1]
    }

    /// Structural validity: one non-empty FB block with no markers,
    /// padding or EOS inside it.
    pub fn is_well_formed(&self) -> bool {
        let toks = &self.feedback_tokens;
        toks.len() >= 3
            && toks[0] == FB_BEGIN
            && toks[toks.len() - 1] == FB_END
            && self
                .interior()
                .iter()
                .all(|&t| !matches!(t, PAD | EOS | FB_BEGIN | FB_END))
    }

    /// Role check against a vocabulary. The ERR marker is allowed inside
    /// feedback so raw environment observations can be quoted verbatim.
    pub fn roles_ok(&self, vocab: &Vocab) -> bool {
        self.is_well_formed()
            && self.interior().iter().all(|&t| match vocab.role(t) {
                Some(Role::Control) => t == ERR,
                Some(_) => true,
                None => false,
            })
    }

    /// The corrected action quoted by a `correct-is` block, with EOS.
    pub fn implied_action(&self) -> Option<TokenSequence> {
        let interior = self.interior();
        if interior.first() != Some(&CORRECT_IS) || interior.len() < 2 {
            return None;
        }
        let mut action = interior[1..].to_vec();
        action.push(EOS);
        Some(action)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Oracle,
    Heuristic,
    Environment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Single,
    Multi,
}

/// Sparse, ordered set of failure-relevant steps with their feedback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HindsightReport {
    pub items: Vec<FeedbackItem>,
    pub source: Source,
    pub variant: Variant,
}

impl HindsightReport {
    pub fn steps(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.step).collect()
    }
}

/// `h_i = s_1 a_1 ... a_{i-1} s_i`, optionally followed by the feedback
/// block for step `i`.
pub fn flatten_context(
    trajectory: &Trajectory,
    step: usize,
    feedback: Option<&FeedbackItem>,
) -> Result<TokenSequence> {
    let turn = trajectory.turn(step)?;
    let mut out = Vec::new();
    for t in &trajectory.turns[..step - 1] {
        out.extend_from_slice(&t.state_tokens);
        out.extend_from_slice(&t.action_tokens);
    }
    out.extend_from_slice(&turn.state_tokens);
    if let Some(fb) = feedback {
        if fb.step != step {
            return Err(Error::Contract(format!(
                "feedback for step {} used at step {step}",
                fb.step
            )));
        }
        out.extend_from_slice(&fb.feedback_tokens);
    }
    Ok(out)
}

/// Removes every FB-BEGIN ... FB-END block (markers included).
pub fn strip_feedback(tokens: &[TokenId]) -> TokenSequence {
    let mut out = Vec::with_capacity(tokens.len());
    let mut inside = false;
    for &t in tokens {
        match (inside, t) {
            (false, FB_BEGIN) => inside = true,
            (true, FB_END) => inside = false,
            (false, _) => out.push(t),
            (true, _) => {}
        }
    }
    out
}

/// Checks every report invariant against the trajectory horizon and `k`.
pub fn validate_report(report: &HindsightReport, trajectory: &Trajectory, k: usize) -> bool {
    let n = report.items.len();
    if n == 0 || n > k {
        return false;
    }
    if report.variant == Variant::Single && n != 1 {
        return false;
    }
    let horizon = trajectory.horizon();
    let in_range = report
        .items
        .iter()
        .all(|i| i.step >= 1 && i.step <= horizon && i.is_well_formed());
    let increasing = report.items.windows(2).all(|w| w[0].step < w[1].step);
    in_range && increasing
}
