//! Targeted hindsight self-distillation for multi-turn token agents.
//!
//! A small recurrent token policy acts in synthetic tool environments.
//! Failed episodes are analyzed in hindsight to find the few steps that
//! caused the failure; the policy is then distilled, on those action spans
//! only, toward its own feedback-conditioned distribution.

pub mod config;
pub mod data;
pub mod diffmath;
pub mod envs;
pub mod error;
pub mod evaluation;
pub mod hindsight;
pub mod io;
pub mod parallel;
pub mod policy;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
