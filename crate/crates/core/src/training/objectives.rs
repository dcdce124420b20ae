//! Token-level losses.
//!
//! Every objective is lowered to a list of [`Pass`]es. A pass is one token
//! sequence the student reads left to right, plus the positions whose
//! next-token distribution is scored. A scored position can carry teacher
//! logits (reverse-KL term) and a weight `w` (adds `-w log p(token)`).
//! Passes are independent and run on their own tapes; the reduction into
//! the mean over scored positions is done in pass order.

use crate::data::{
    flatten_context, FeedbackItem, HindsightReport, Role, TokenId, TokenSequence, Trajectory,
    Vocab, ERR, SAW_ERR, SAW_OK,
};
use crate::diffmath::{reverse_kl_value, Tape};
use crate::error::{Error, Result};
use crate::hindsight::SupervisionSpan;
use crate::parallel::{self, Exec};
use crate::policy::{
    taped_initial_hidden, taped_advance, taped_masked_logits, ActionSpace, ParamVars,
    PolicyParameters,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    /// Index into the pass tokens of the token being predicted.
    pub pos: usize,
    /// Masked teacher logits at this position.
    pub teacher_logits: Option<Vec<f64>>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pass {
    pub tokens: TokenSequence,
    pub targets: Vec<Target>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: PolicyParameters,
    pub supervised_tokens: usize,
    pub spans: usize,
    /// Per pass, the loss at each scored position.
    pub token_losses: Vec<Vec<f64>>,
    /// Constant leaves (teacher terms) that received a gradient buffer.
    pub teacher_grad_buffers: usize,
}

impl LossOutput {
    pub fn grad_norm(&self) -> f64 {
        self.grads.sq_norm().sqrt()
    }
}

/// Masked teacher logits at each of `positions` along `tokens`.
pub fn logits_along(
    params: &PolicyParameters,
    space: &ActionSpace,
    tokens: &[TokenId],
    positions: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(positions.len());
    let mut hidden = params.initial_hidden();
    let mut next = positions.iter().peekable();
    for (p, &tok) in tokens.iter().enumerate() {
        while next.peek() == Some(&&p) {
            out.push(space.masked(&params.head(&hidden)));
            next.next();
        }
        if next.peek().is_none() {
            break;
        }
        hidden = params.advance(&hidden, tok)?;
    }
    if out.len() != positions.len() {
        return Err(Error::Index("target position past the end of the pass".into()));
    }
    Ok(out)
}

struct PassResult {
    total: f64,
    token_losses: Vec<f64>,
    grads: PolicyParameters,
    const_buffers: usize,
}

fn run_pass(student: &PolicyParameters, space: &ActionSpace, pass: &Pass) -> Result<PassResult> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, student);
    let mut hidden = taped_initial_hidden(&mut tape, student);
    let mut terms = Vec::with_capacity(pass.targets.len());
    let mut targets = pass.targets.iter().peekable();
    for (p, &tok) in pass.tokens.iter().enumerate() {
        while let Some(t) = targets.next_if(|t| t.pos == p) {
            let logits = taped_masked_logits(&mut tape, &vars, space, hidden)?;
            let mut term = None;
            if let Some(q) = &t.teacher_logits {
                term = Some(tape.reverse_kl(logits, q)?);
            }
            if t.weight != 0.0 {
                let lp = tape.log_softmax(logits);
                let picked = tape.gather(lp, &[space.slot(tok)?])?;
                let nll = tape.scale(picked, -t.weight);
                term = Some(match term {
                    Some(kl) => tape.add(kl, nll)?,
                    None => nll,
                });
            }
            let term = match term {
                Some(v) => v,
                None => {
                    let z = tape.scale(logits, 0.0);
                    tape.sum(z)
                }
            };
            terms.push(term);
        }
        if targets.peek().is_none() {
            break;
        }
        hidden = taped_advance(&mut tape, &vars, hidden, tok)?;
    }
    if terms.len() != pass.targets.len() {
        return Err(Error::Index("targets out of order or past the end of the pass".into()));
    }
    let token_losses: Vec<f64> = terms.iter().map(|&v| tape.scalar(v)).collect();
    let total = tape.sum_scalars(&terms)?;
    let grads = tape.backward(total)?;
    Ok(PassResult {
        total: tape.scalar(total),
        token_losses,
        const_buffers: tape.constant_gradient_count(&grads),
        grads: vars.gradients(&grads, student),
    })
}

/// Mean loss over every scored position of every pass, with gradients.
pub fn evaluate_passes(
    student: &PolicyParameters,
    space: &ActionSpace,
    passes: &[Pass],
    spans: usize,
    exec: Exec,
) -> Result<LossOutput> {
    let results = parallel::map(exec, passes, |p| {
        if p.targets.is_empty() {
            return Ok(None);
        }
        run_pass(student, space, p).map(Some)
    });
    let mut grads = student.zeros_like();
    let mut total = 0.0;
    let mut count = 0;
    let mut token_losses = Vec::with_capacity(passes.len());
    let mut teacher_grad_buffers = 0;
    for r in results {
        match r? {
            Some(r) => {
                total += r.total;
                count += r.token_losses.len();
                grads.add_scaled(&r.grads, 1.0);
                teacher_grad_buffers += r.const_buffers;
                token_losses.push(r.token_losses);
            }
            None => token_losses.push(Vec::new()),
        }
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        grads = {
            let mut g = student.zeros_like();
            g.add_scaled(&grads, inv);
            g
        };
        total *= inv;
    }
    Ok(LossOutput {
        loss: total,
        grads,
        supervised_tokens: count,
        spans,
        token_losses,
        teacher_grad_buffers,
    })
}

/// A student context and a teacher context that score the same action.
fn distill_pass(
    teacher: &PolicyParameters,
    space: &ActionSpace,
    student_context: &[TokenId],
    teacher_context: &[TokenId],
    action: &[TokenId],
    weight: f64,
) -> Result<Pass> {
    let mut teacher_tokens = teacher_context.to_vec();
    teacher_tokens.extend_from_slice(action);
    let tpos: Vec<usize> = (0..action.len()).map(|t| teacher_context.len() + t).collect();
    let q = logits_along(teacher, space, &teacher_tokens, &tpos)?;
    let mut tokens = student_context.to_vec();
    tokens.extend_from_slice(action);
    let targets = q
        .into_iter()
        .enumerate()
        .map(|(t, q)| Target {
            pos: student_context.len() + t,
            teacher_logits: Some(q),
            weight,
        })
        .collect();
    Ok(Pass { tokens, targets })
}

pub fn refocus_passes(
    teacher: &PolicyParameters,
    space: &ActionSpace,
    spans: &[SupervisionSpan],
    exec: Exec,
) -> Result<Vec<Pass>> {
    parallel::map(exec, spans, |s| {
        distill_pass(teacher, space, &s.student_context, &s.teacher_context, &s.action, 0.0)
    })
    .into_iter()
    .collect()
}

/// Reverse KL between the student on `h_i + a_{i,<t}` and the teacher on
/// `h_i + f_i + a_{i,<t}`, averaged over the tokens of the selected spans.
pub fn refocus_loss(
    student: &PolicyParameters,
    teacher: &PolicyParameters,
    space: &ActionSpace,
    spans: &[SupervisionSpan],
    exec: Exec,
) -> Result<LossOutput> {
    let passes = refocus_passes(teacher, space, spans, exec)?;
    evaluate_passes(student, space, &passes, spans.len(), exec)
}

/// `s_1 a_1 ... s_T a_T` and the index of every action token in it.
pub fn flatten_full(trajectory: &Trajectory) -> (TokenSequence, Vec<usize>) {
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    for turn in &trajectory.turns {
        tokens.extend_from_slice(&turn.state_tokens);
        for &a in &turn.action_tokens {
            positions.push(tokens.len());
            tokens.push(a);
        }
    }
    (tokens, positions)
}

/// All feedback blocks of a report, concatenated.
pub fn global_feedback(report: &HindsightReport) -> TokenSequence {
    report
        .items
        .iter()
        .flat_map(|i| i.feedback_tokens.iter().copied())
        .collect()
}

pub fn fulltraj_pass(
    teacher: &PolicyParameters,
    space: &ActionSpace,
    trajectory: &Trajectory,
    feedback: &[TokenId],
) -> Result<Pass> {
    let (tokens, positions) = flatten_full(trajectory);
    let mut teacher_tokens = feedback.to_vec();
    teacher_tokens.extend_from_slice(&tokens);
    let tpos: Vec<usize> = positions.iter().map(|p| p + feedback.len()).collect();
    let q = logits_along(teacher, space, &teacher_tokens, &tpos)?;
    let targets = positions
        .into_iter()
        .zip(q)
        .map(|(pos, q)| Target {
            pos,
            teacher_logits: Some(q),
            weight: 0.0,
        })
        .collect();
    Ok(Pass { tokens, targets })
}

/// Whole-trajectory distillation with the global feedback placed before
/// `s_1` in the teacher context.
pub fn fulltraj_distill_loss(
    student: &PolicyParameters,
    teacher: &PolicyParameters,
    space: &ActionSpace,
    failures: &[(&Trajectory, TokenSequence)],
    exec: Exec,
) -> Result<LossOutput> {
    let passes: Vec<Pass> = parallel::map(exec, failures, |(t, fb)| {
        fulltraj_pass(teacher, space, t, fb)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let spans = failures.iter().map(|(t, _)| t.horizon()).sum();
    evaluate_passes(student, space, &passes, spans, exec)
}

/// Per-turn judge of the dense baseline: `(+1, [SAW_OK])` after a clean
/// observation, `(-1, [SAW_ERR, ..])` after an error.
pub fn turn_judgement(
    trajectory: &Trajectory,
    step: usize,
    vocab: &Vocab,
) -> Result<(f64, FeedbackItem)> {
    let obs = trajectory.next_observation(step)?;
    if obs.contains(&ERR) {
        let mut interior = vec![SAW_ERR];
        interior.extend(obs.iter().filter(|&&t| vocab.role(t) != Some(Role::Control)));
        Ok((-1.0, FeedbackItem::wrap(step, &interior)))
    } else {
        Ok((1.0, FeedbackItem::wrap(step, &[SAW_OK])))
    }
}

pub fn denseturn_pass(
    teacher: &PolicyParameters,
    space: &ActionSpace,
    trajectory: &Trajectory,
    vocab: &Vocab,
    pg_coef: f64,
) -> Result<Pass> {
    let (tokens, positions) = flatten_full(trajectory);
    let mut targets = Vec::with_capacity(positions.len());
    let mut next = positions.into_iter();
    for step in 1..=trajectory.horizon() {
        let (reward, fb) = turn_judgement(trajectory, step, vocab)?;
        let action = &trajectory.turn(step)?.action_tokens;
        let mut teacher_tokens = flatten_context(trajectory, step, Some(&fb))?;
        let start = teacher_tokens.len();
        teacher_tokens.extend_from_slice(action);
        let tpos: Vec<usize> = (0..action.len()).map(|t| start + t).collect();
        for q in logits_along(teacher, space, &teacher_tokens, &tpos)? {
            targets.push(Target {
                pos: next.next().expect("one position per action token"),
                teacher_logits: Some(q),
                weight: pg_coef * reward,
            });
        }
    }
    Ok(Pass { tokens, targets })
}

/// Distillation at every turn with that turn's own feedback, plus a
/// token-level policy-gradient term on the per-turn reward.
pub fn denseturn_distill_loss(
    student: &PolicyParameters,
    teacher: &PolicyParameters,
    space: &ActionSpace,
    trajectories: &[&Trajectory],
    vocab: &Vocab,
    pg_coef: f64,
    exec: Exec,
) -> Result<LossOutput> {
    let passes: Vec<Pass> = parallel::map(exec, trajectories, |t| {
        denseturn_pass(teacher, space, t, vocab, pg_coef)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let spans = trajectories.iter().map(|t| t.horizon()).sum();
    evaluate_passes(student, space, &passes, spans, exec)
}

/// Every action token of the trajectory scored with weight `weight`.
pub fn weighted_pass(trajectory: &Trajectory, weight: f64) -> Pass {
    let (tokens, positions) = flatten_full(trajectory);
    let targets = positions
        .into_iter()
        .map(|pos| Target {
            pos,
            teacher_logits: None,
            weight,
        })
        .collect();
    Pass { tokens, targets }
}

/// Mean negative log-likelihood of the demonstrated action tokens.
pub fn sft_loss(
    student: &PolicyParameters,
    space: &ActionSpace,
    demonstrations: &[Trajectory],
    exec: Exec,
) -> Result<LossOutput> {
    if demonstrations.is_empty() {
        return Err(Error::Contract("no demonstrations".into()));
    }
    let passes: Vec<Pass> = demonstrations.iter().map(|t| weighted_pass(t, 1.0)).collect();
    let spans = demonstrations.iter().map(Trajectory::horizon).sum();
    evaluate_passes(student, space, &passes, spans, exec)
}

/// Group-normalized advantages with the population standard deviation.
/// `None` when the rewards are all equal.
pub fn grpo_advantages(rewards: &[f64]) -> Option<Vec<f64>> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return None;
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return None;
    }
    Some(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `-mean(A * log p)` over the action tokens of every non-degenerate group.
pub fn grpo_loss(
    student: &PolicyParameters,
    space: &ActionSpace,
    groups: &[Vec<Trajectory>],
    exec: Exec,
) -> Result<LossOutput> {
    let mut passes = Vec::new();
    let mut spans = 0;
    for g in groups {
        let rewards: Vec<f64> = g.iter().map(|t| t.terminal_reward as f64).collect();
        let Some(adv) = grpo_advantages(&rewards) else {
            continue;
        };
        for (t, a) in g.iter().zip(adv) {
            passes.push(weighted_pass(t, a));
            spans += t.horizon();
        }
    }
    evaluate_passes(student, space, &passes, spans, exec)
}

/// Teacher logits at every action token of the trajectory. Selected steps
/// see their own feedback block; every other step sees the plain history.
pub fn teacher_logits_by_step(
    teacher: &PolicyParameters,
    space: &ActionSpace,
    trajectory: &Trajectory,
    report: &HindsightReport,
) -> Result<Vec<Vec<Vec<f64>>>> {
    (1..=trajectory.horizon())
        .map(|step| {
            let fb = report.items.iter().find(|i| i.step == step);
            let mut tokens = flatten_context(trajectory, step, fb)?;
            let start = tokens.len();
            let action = &trajectory.turn(step)?.action_tokens;
            tokens.extend_from_slice(action);
            let pos: Vec<usize> = (0..action.len()).map(|t| start + t).collect();
            logits_along(teacher, space, &tokens, &pos)
        })
        .collect()
}

/// Reverse KL at every action token of the trajectory, multiplied by the
/// selection mask (1 inside the report's steps, 0 elsewhere).
pub fn masked_token_losses(
    student: &PolicyParameters,
    teacher: &PolicyParameters,
    space: &ActionSpace,
    trajectory: &Trajectory,
    report: &HindsightReport,
) -> Result<Vec<Vec<f64>>> {
    let q = teacher_logits_by_step(teacher, space, trajectory, report)?;
    (1..=trajectory.horizon())
        .map(|step| {
            let mask = if report.items.iter().any(|i| i.step == step) { 1.0 } else { 0.0 };
            let mut tokens = flatten_context(trajectory, step, None)?;
            let start = tokens.len();
            let action = &trajectory.turn(step)?.action_tokens;
            tokens.extend_from_slice(action);
            let pos: Vec<usize> = (0..action.len()).map(|t| start + t).collect();
            let p = logits_along(student, space, &tokens, &pos)?;
            Ok(p.iter()
                .zip(&q[step - 1])
                .map(|(p, q)| mask * reverse_kl_value(p, q))
                .collect())
        })
        .collect()
}
