//! Run configuration: one TOML document covering the environment, budget,
//! valuation and training. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::EnvConfig;
use crate::valuation::{DensityConfig, SingleCandidateMode, TierThresholds};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub episode_budget: u64,
    pub hard_cap: u64,
    /// Dynamic round budget; `false` is the fixed-share ablation.
    pub dynamic: bool,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            episode_budget: 48,
            hard_cap: 32,
            dynamic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValuationConfig {
    pub epsilon: f64,
    pub single_candidate: SingleCandidateMode,
    pub raw_value_scale: f64,
    pub thresholds: TierThresholds,
    pub encoder_width: usize,
    pub head_width: usize,
    /// Values closer than this tie in winner determination.
    pub wdp_tolerance: f64,
}

impl Default for ValuationConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            single_candidate: SingleCandidateMode::Fallback,
            raw_value_scale: 1.0,
            thresholds: TierThresholds::default(),
            encoder_width: 32,
            head_width: 32,
            wdp_tolerance: 0.0,
        }
    }
}

impl ValuationConfig {
    pub fn density(&self) -> DensityConfig {
        DensityConfig {
            epsilon: self.epsilon,
            single_candidate: self.single_candidate,
            raw_value_scale: self.raw_value_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    /// Shared critic over the global state and agent identity.
    Centralized,
    /// Each agent's message-value network with a zero message embedding.
    ValueNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub alpha: f64,
    /// Payment weight. Payments are in bid (value density) units, far below
    /// per-round task rewards, so useful values are large.
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub epsilon_vf: f64,
    pub c1: f64,
    pub c2: f64,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    pub epochs: u32,
    pub episodes_per_epoch: u32,
    /// Gradient steps per epoch on each objective.
    pub update_steps: u32,
    pub policy_hidden: usize,
    pub critic_hidden: usize,
    pub critic: CriticMode,
    pub share_parameters: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 50.0,
            gamma: 0.99,
            lambda: 0.95,
            epsilon: 0.2,
            epsilon_vf: 0.2,
            c1: 0.5,
            c2: 0.01,
            lr: 3e-3,
            momentum: 0.9,
            grad_clip: 1.0,
            epochs: 200,
            episodes_per_epoch: 16,
            update_steps: 4,
            policy_hidden: 32,
            critic_hidden: 64,
            critic: CriticMode::Centralized,
            share_parameters: false,
        }
    }
}

/// Component switches for ablation runs. All on by default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Off: bid a heuristic value proportional to message length.
    pub value_learning: bool,
    /// Off: drop the per-token normalisation from bids.
    pub value_density: bool,
    /// Off: binary Full / Silence messages.
    pub tiered_content: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            value_learning: true,
            value_density: true,
            tiered_content: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: u32,
    /// Take the most likely action instead of sampling.
    pub greedy: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            greedy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub env: EnvConfig,
    pub budget: BudgetConfig,
    pub valuation: ValuationConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            seed: 0,
            env: EnvConfig::default(),
            budget: BudgetConfig::default(),
            valuation: ValuationConfig::default(),
            training: TrainingConfig::default(),
            ablation: AblationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.env.problems();
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.run_id.starts_with('.')
        {
            p.push(
                "run_id must be a non-empty name of [A-Za-z0-9._-] not starting with '.'".into(),
            );
        }
        if self.budget.hard_cap == 0 {
            p.push("budget.hard_cap must be positive".into());
        }
        let v = &self.valuation;
        if !(v.epsilon > 0.0) {
            p.push("valuation.epsilon must be positive".into());
        }
        if !(v.raw_value_scale.is_finite() && v.raw_value_scale != 0.0) {
            p.push("valuation.raw_value_scale must be finite and non-zero".into());
        }
        if !v.thresholds.is_ordered() {
            p.push("valuation.thresholds must satisfy full > summary > keywords >= 0".into());
        }
        if v.encoder_width == 0 || v.head_width == 0 {
            p.push("valuation widths must be positive".into());
        }
        if !(v.wdp_tolerance >= 0.0) {
            p.push("valuation.wdp_tolerance must be non-negative".into());
        }
        let t = &self.training;
        if !(t.alpha >= 0.0 && t.beta >= 0.0) {
            p.push("training.alpha and training.beta must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&t.gamma) || !(0.0..=1.0).contains(&t.lambda) {
            p.push("training.gamma and training.lambda must lie in [0, 1]".into());
        }
        if !(t.epsilon > 0.0 && t.epsilon < 1.0) {
            p.push("training.epsilon must lie in (0, 1)".into());
        }
        if !(t.epsilon_vf > 0.0) {
            p.push("training.epsilon_vf must be positive".into());
        }
        if !(t.c1 >= 0.0 && t.c2 >= 0.0) {
            p.push("training.c1 and training.c2 must be non-negative".into());
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.momentum) || !(t.grad_clip >= 0.0) {
            p.push(
                "training.lr must be positive, momentum in [0, 1), grad_clip non-negative".into(),
            );
        }
        if t.episodes_per_epoch == 0 || t.update_steps == 0 {
            p.push("training.episodes_per_epoch and training.update_steps must be positive".into());
        }
        if t.policy_hidden == 0 || t.critic_hidden == 0 {
            p.push("training hidden widths must be positive".into());
        }
        if self.eval.episodes == 0 {
            p.push("eval.episodes must be positive".into());
        }
        p
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn density(&self) -> DensityConfig {
        self.valuation.density()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        digest(&serde_json::to_vec(self).expect("config serialises"))
    }

    /// Hash of everything a trained checkpoint depends on: the config with
    /// the run id, budget, seed and evaluation settings neutralised.
    pub fn compat_hash(&self) -> String {
        let mut c = self.clone();
        c.run_id = String::new();
        c.budget = BudgetConfig::default();
        c.seed = 0;
        c.eval = EvalConfig::default();
        c.hash()
    }
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
