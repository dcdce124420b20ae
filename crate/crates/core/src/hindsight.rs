//! Hindsight analyzers and the teacher/student contexts built from them.
//!
//! An analyzer reads a whole failed trajectory and names at most `k`
//! failure-relevant steps, each with a feedback block:
//!
//! * `oracle`: the environment's ground-truth attribution, whose feedback
//!   quotes the corrected action;
//! * `heuristic`: every step whose next observation carries the ERR
//!   marker, with the error echoed back;
//! * `environment`: the same steps, with the raw observation as feedback.

use serde::{Deserialize, Serialize};

use crate::data::{
    flatten_context, validate_report, FeedbackItem, HindsightReport, Role, Source,
    TokenSequence, Trajectory, Variant, Vocab, ERR, GENERIC_FB, SAW_ERR,
};
use crate::envs::Task;
use crate::error::{Error, Result};

/// The pair of contexts one selected action is distilled under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisionSpan {
    pub task_id: String,
    pub step: usize,
    /// `h_i`
    pub student_context: TokenSequence,
    /// `h_i` followed by the feedback block for step `i`
    pub teacher_context: TokenSequence,
    /// `a_i` as recorded
    pub action: TokenSequence,
}

fn cap(variant: Variant, k: usize) -> usize {
    match variant {
        Variant::Single => 1,
        Variant::Multi => k,
    }
}

/// Steps whose following observation contains the ERR marker.
pub fn error_steps(trajectory: &Trajectory) -> Vec<usize> {
    (1..=trajectory.horizon())
        .filter(|&s| {
            trajectory
                .next_observation(s)
                .map(|o| o.contains(&ERR))
                .unwrap_or(false)
        })
        .collect()
}

pub fn analyze(
    task: &Task,
    trajectory: &Trajectory,
    source: Source,
    variant: Variant,
    k: usize,
    vocab: &Vocab,
) -> Result<HindsightReport> {
    if trajectory.success {
        return Err(Error::Contract("hindsight analysis of a successful trajectory".into()));
    }
    if k == 0 {
        return Err(Error::config("max_feedback_steps", "must be at least 1"));
    }
    let limit = cap(variant, k);
    let mut items: Vec<FeedbackItem> = match source {
        Source::Oracle => task.oracle_attribution(trajectory)?.failure_steps,
        Source::Heuristic | Source::Environment => error_steps(trajectory)
            .into_iter()
            .take(limit)
            .map(|step| {
                let obs = trajectory.next_observation(step).expect("step in range");
                match source {
                    Source::Environment => FeedbackItem::wrap(step, obs),
                    _ => {
                        let mut interior = vec![SAW_ERR];
                        interior.extend(obs.iter().filter(|&&t| vocab.role(t) != Some(Role::Control)));
                        FeedbackItem::wrap(step, &interior)
                    }
                }
            })
            .collect(),
    };
    if items.is_empty() {
        // no local error signal: hint at the final step
        tracing::debug!(task = %trajectory.task_id, "no ERR step found; falling back to last step");
        items.push(FeedbackItem::wrap(trajectory.horizon(), &[GENERIC_FB]));
    }
    items.truncate(limit);
    Ok(HindsightReport {
        items,
        source,
        variant,
    })
}

pub fn build_spans(trajectory: &Trajectory, report: &HindsightReport) -> Result<Vec<SupervisionSpan>> {
    if !validate_report(report, trajectory, report.items.len().max(1)) {
        return Err(Error::Contract(format!(
            "invalid hindsight report for {}",
            trajectory.task_id
        )));
    }
    report
        .items
        .iter()
        .map(|item| {
            Ok(SupervisionSpan {
                task_id: trajectory.task_id.clone(),
                step: item.step,
                student_context: flatten_context(trajectory, item.step, None)?,
                teacher_context: flatten_context(trajectory, item.step, Some(item))?,
                action: trajectory.turn(item.step)?.action_tokens.clone(),
            })
        })
        .collect()
}

/// Analyzer output record, `{"failures": [{"step": .., "feedback": [..]}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerOutput {
    pub failures: Vec<FeedbackItem>,
}

impl AnalyzerOutput {
    pub fn into_report(self, source: Source, variant: Variant) -> HindsightReport {
        HindsightReport {
            items: self.failures,
            source,
            variant,
        }
    }

    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))
    }
}
