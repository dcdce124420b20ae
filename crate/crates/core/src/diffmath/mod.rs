//! Reverse-mode autodiff over small dense tensors, plus the softmax and
//! reverse-KL helpers used by the distillation objective.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Floor applied to teacher log-probabilities inside the reverse KL.
pub const LOG_Q_FLOOR: f64 = -80.0;

pub fn clamped_log_softmax(logits: &[f64]) -> Vec<f64> {
    kernels::log_softmax(logits)
        .into_iter()
        .map(|v| v.max(LOG_Q_FLOOR))
        .collect()
}

/// `KL(p || q)` for `p = softmax(student)`, `q = softmax(teacher)`, untaped.
pub fn reverse_kl_value(student: &[f64], teacher: &[f64]) -> f64 {
    let log_p = kernels::log_softmax(student);
    let log_q = clamped_log_softmax(teacher);
    log_p
        .iter()
        .zip(&log_q)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum()
}

/// Closed-form gradient of the reverse KL w.r.t. the student logits:
/// `p_v (ln(p_v / q_v) - KL)`.
pub fn reverse_kl_grad(student: &[f64], teacher: &[f64]) -> Vec<f64> {
    let log_p = kernels::log_softmax(student);
    let log_q = clamped_log_softmax(teacher);
    let kl = reverse_kl_value(student, teacher);
    log_p
        .iter()
        .zip(&log_q)
        .map(|(lp, lq)| lp.exp() * (lp - lq - kl))
        .collect()
}
