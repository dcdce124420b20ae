//! Experiment configuration, read from TOML.
//!
//! ```toml
//! method = "refocus-multi"
//! seed = 0
//! epochs = 15
//!
//! [environment]
//! kind = "codelock"
//! code_length = 5
//! alphabet = 8
//!
//! [policy]
//! embed_dim = 16
//! hidden_dim = 32
//! ```
//!
//! Every field except `environment` has a default.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Source, Variant};
use crate::envs::{CodeLockSpec, EnvSpec};
use crate::error::{Error, Result};
use crate::policy::DecodingLimits;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "refocus-single")]
    RefocusSingle,
    #[serde(rename = "refocus-multi")]
    RefocusMulti,
    #[serde(rename = "sft")]
    Sft,
    #[serde(rename = "grpo")]
    Grpo,
    #[serde(rename = "fulltraj-distill")]
    FullTrajDistill,
    #[serde(rename = "denseturn-distill")]
    DenseTurnDistill,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::RefocusSingle,
        Method::RefocusMulti,
        Method::Sft,
        Method::Grpo,
        Method::FullTrajDistill,
        Method::DenseTurnDistill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::RefocusSingle => "refocus-single",
            Method::RefocusMulti => "refocus-multi",
            Method::Sft => "sft",
            Method::Grpo => "grpo",
            Method::FullTrajDistill => "fulltraj-distill",
            Method::DenseTurnDistill => "denseturn-distill",
        }
    }

    /// Analyzer variant the method runs with.
    pub fn variant(self) -> Variant {
        match self {
            Method::RefocusSingle => Variant::Single,
            _ => Variant::Multi,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which parameters produce the teacher distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMode {
    /// EMA copy of the student, updated after every step.
    Ema,
    /// The student itself, held constant for the step.
    Current,
    /// The policy as it was before training, frozen.
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Action length cap including EOS; environment default when absent.
    pub max_action_tokens: Option<usize>,
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_dim: 32,
            hidden_dim: 64,
            max_action_tokens: None,
            init_scale: 0.08,
        }
    }
}

/// Feedback-following pre-training applied to the initial policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmstartConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for WarmstartConfig {
    fn default() -> Self {
        WarmstartConfig {
            steps: 1000,
            batch_size: 32,
            learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    /// G
    pub rollouts_per_task: usize,
    /// K
    pub max_feedback_steps: usize,
    /// eta
    pub ema_rate: f64,
    pub learning_rate: f64,
    pub feedback_source: Source,
    pub teacher: TeacherMode,
    /// Parameters a policy-dependent analyzer would use. The built-in
    /// analyzers are parameter-free and do not read it.
    pub analyzer_teacher: TeacherMode,
    pub train_tasks: usize,
    pub eval_tasks: usize,
    /// k in Avg@k / Best@k.
    pub eval_runs: usize,
    /// Tasks used by the placement analysis.
    pub analysis_tasks: usize,
    /// Weight of the per-turn reward term in the dense baseline.
    pub dense_pg_coef: f64,
    pub demo_candidates: usize,
    /// Probability the demonstrator deviates from the canonical action.
    pub demo_noise: f64,
    /// Fill the `wall_ms` metrics column from the clock (breaks
    /// byte-identical reruns).
    pub record_wall_time: bool,
    pub warmstart: WarmstartConfig,
    pub environment: EnvSpec,
    pub policy: PolicyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::RefocusMulti,
            seed: 0,
            epochs: 15,
            rollouts_per_task: 4,
            max_feedback_steps: 3,
            ema_rate: 0.001,
            learning_rate: 1e-2,
            feedback_source: Source::Oracle,
            teacher: TeacherMode::Ema,
            analyzer_teacher: TeacherMode::Ema,
            train_tasks: 64,
            eval_tasks: 16,
            eval_runs: 4,
            analysis_tasks: 200,
            dense_pg_coef: 0.1,
            demo_candidates: 10,
            demo_noise: 0.1,
            record_wall_time: false,
            warmstart: WarmstartConfig::default(),
            environment: EnvSpec::CodeLock(CodeLockSpec::default()),
            policy: PolicyConfig::default(),
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(field, "must be positive"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = e
                .span()
                .map(|s| text[s].lines().next().unwrap_or("").trim().to_string())
                .unwrap_or_default();
            Error::Config { field, message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        positive("rollouts_per_task", self.rollouts_per_task)?;
        positive("max_feedback_steps", self.max_feedback_steps)?;
        positive("train_tasks", self.train_tasks)?;
        positive("eval_tasks", self.eval_tasks)?;
        positive("eval_runs", self.eval_runs)?;
        positive("analysis_tasks", self.analysis_tasks)?;
        positive("demo_candidates", self.demo_candidates)?;
        positive("policy.embed_dim", self.policy.embed_dim)?;
        positive("policy.hidden_dim", self.policy.hidden_dim)?;
        positive("warmstart.batch_size", self.warmstart.batch_size)?;
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(Error::config("ema_rate", "must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if !(self.warmstart.learning_rate > 0.0 && self.warmstart.learning_rate.is_finite()) {
            return Err(Error::config("warmstart.learning_rate", "must be positive and finite"));
        }
        if !(0.0..=1.0).contains(&self.demo_noise) {
            return Err(Error::config("demo_noise", "must lie in [0, 1]"));
        }
        if !(self.dense_pg_coef >= 0.0 && self.dense_pg_coef.is_finite()) {
            return Err(Error::config("dense_pg_coef", "must be non-negative"));
        }
        if !(self.policy.init_scale >= 0.0 && self.policy.init_scale.is_finite()) {
            return Err(Error::config("policy.init_scale", "must be non-negative"));
        }
        if let Some(m) = self.policy.max_action_tokens {
            DecodingLimits::new(m).map_err(|_| {
                Error::config("policy.max_action_tokens", "must be at least 2")
            })?;
        }
        self.environment.validate()
    }

    pub fn decoding_limits(&self) -> DecodingLimits {
        let default = match self.environment {
            EnvSpec::CodeLock(_) => 2,
            EnvSpec::ToolChain(_) => 4,
        };
        DecodingLimits {
            max_action_tokens: self.policy.max_action_tokens.unwrap_or(default),
        }
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
