//! Multi-agent PPO: losses, advantage estimation, networks and trainer.

pub mod gae;
pub mod loss;
pub mod policy;
pub mod trainer;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{CriticMode, RunConfig};
use crate::nn::{Activation, Mlp};
use crate::valuation::{ValueNet, ValueNetParams, ValueNetShape};

pub use gae::{compute_advantages, Advantages};
pub use loss::{clipped_policy_loss, mappo_objective, policy_ratio, reward, value_fn_loss};
pub use policy::PolicyNet;
pub use trainer::{evaluate, train, EpochStats, EvalOutput, TrainOutput};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarlError {
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("non-finite {what} at epoch {epoch}; training aborted")]
    Diverged { what: &'static str, epoch: u32 },
    #[error("parameters do not match the configured networks: {0}")]
    ParamShape(String),
    #[error("episode failed: {0}")]
    Episode(String),
}

/// One agent's step, as collected during a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub global_state: Vec<f64>,
    pub mask: Vec<bool>,
    pub action_index: usize,
    pub log_prob_old: f64,
    pub reward: f64,
    pub value_estimate: f64,
    pub done: bool,
    pub payment: f64,
    pub is_winner: bool,
    pub task_delta: f64,
    /// Features of the proposed message, when the agent proposed one.
    pub message_features: Option<Vec<f64>>,
}

/// Policy parameters per agent group, plus the snapshot taken at the start
/// of the current update epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub current: Vec<Vec<f64>>,
    pub old: Vec<Vec<f64>>,
}

impl PolicyParams {
    pub fn new(current: Vec<Vec<f64>>) -> Self {
        Self {
            old: current.clone(),
            current,
        }
    }

    pub fn snapshot(&mut self) {
        self.old = self.current.clone();
    }
}

/// Network layouts derived from a run config.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub policy: PolicyNet,
    pub value_net: ValueNet,
    pub critic: Mlp,
    pub critic_mode: CriticMode,
    pub num_agents: usize,
    pub shared: bool,
}

/// All learnable parameters of a team.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub policy: PolicyParams,
    pub value_nets: Vec<ValueNetParams>,
    /// Centralised critic; empty when the value network doubles as critic.
    pub critic: Vec<f64>,
}

impl Params {
    pub fn is_finite(&self) -> bool {
        self.policy.current.iter().flatten().all(|p| p.is_finite())
            && self.value_nets.iter().all(ValueNetParams::is_finite)
            && self.critic.iter().all(|p| p.is_finite())
    }
}

impl Model {
    pub fn new(config: &RunConfig) -> Self {
        let env = &config.env;
        let mut shape = ValueNetShape::new(env.message_dim(), env.observation_dim());
        shape.encoder_width = config.valuation.encoder_width;
        shape.head_width = config.valuation.head_width;
        Self {
            policy: PolicyNet::new(
                env.observation_dim(),
                config.training.policy_hidden,
                env.num_actions(),
            ),
            value_net: ValueNet::new(shape),
            critic: Mlp::new(
                env.global_state_dim() + env.num_agents as usize,
                &[
                    (config.training.critic_hidden, Activation::Tanh),
                    (1, Activation::Identity),
                ],
            ),
            critic_mode: config.training.critic,
            num_agents: env.num_agents as usize,
            shared: config.training.share_parameters,
        }
    }

    pub fn groups(&self) -> usize {
        if self.shared {
            1
        } else {
            self.num_agents
        }
    }

    /// Parameter group used by `agent`.
    pub fn group(&self, agent: usize) -> usize {
        if self.shared {
            0
        } else {
            agent
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Params {
        let policies = (0..self.groups()).map(|_| self.policy.init(rng)).collect();
        let value_nets = (0..self.groups())
            .map(|_| self.value_net.init(rng))
            .collect();
        let critic = match self.critic_mode {
            CriticMode::Centralized => self.critic.init(rng, 0.1),
            CriticMode::ValueNet => Vec::new(),
        };
        Params {
            policy: PolicyParams::new(policies),
            value_nets,
            critic,
        }
    }

    pub fn check(&self, params: &Params) -> Result<(), MarlError> {
        let groups = self.groups();
        if params.policy.current.len() != groups || params.value_nets.len() != groups {
            return Err(MarlError::ParamShape(format!(
                "expected {groups} parameter groups"
            )));
        }
        if params
            .policy
            .current
            .iter()
            .any(|p| p.len() != self.policy.num_params())
        {
            return Err(MarlError::ParamShape("policy size".into()));
        }
        for v in &params.value_nets {
            self.value_net
                .check_params(v)
                .map_err(|e| MarlError::ParamShape(e.to_string()))?;
        }
        let critic_len = match self.critic_mode {
            CriticMode::Centralized => self.critic.num_params(),
            CriticMode::ValueNet => 0,
        };
        if params.critic.len() != critic_len {
            return Err(MarlError::ParamShape("critic size".into()));
        }
        Ok(())
    }

    pub fn critic_input(&self, global_state: &[f64], agent: usize) -> Vec<f64> {
        let mut x = global_state.to_vec();
        x.extend((0..self.num_agents).map(|a| if a == agent { 1.0 } else { 0.0 }));
        x
    }

    /// `V(o_i)` under the configured critic.
    pub fn state_value(
        &self,
        params: &Params,
        agent: usize,
        observation: &[f64],
        global_state: &[f64],
    ) -> f64 {
        match self.critic_mode {
            CriticMode::Centralized => {
                let x = self.critic_input(global_state, agent);
                self.critic.forward(&params.critic, &x).output()[0]
            }
            CriticMode::ValueNet => {
                let g = self.group(agent);
                self.value_net
                    .forward(&params.value_nets[g], None, observation)
                    .value()
            }
        }
    }
}
