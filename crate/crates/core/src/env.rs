//! Synthetic cooperative task with distributed information.
//!
//! A task is a set of information shards, each held privately by one agent.
//! Some shards are critical; the team solves the task once enough critical
//! shards have been broadcast. No agent holds enough critical shards alone,
//! so the shared channel (and the auction that rations it) is the
//! bottleneck.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::AgentId;
use crate::seed;
use crate::valuation::{Tier, TierLengths};

const NOISE: u64 = 11;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("invalid environment config: {}", .0.join("; "))]
    Config(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub num_agents: u32,
    pub num_shards: u32,
    /// Fraction of shards flagged critical (rounded to a count).
    pub critical_ratio: f64,
    /// Critical shards needed to solve; defaults to all of them.
    #[serde(default)]
    pub required_critical: Option<u32>,
    pub horizon: u32,
    pub feature_dim: usize,
    /// Added to every feature of a critical shard.
    pub critical_offset: f64,
    pub max_subset_size: usize,
    pub tier_lengths: TierLengths,
    /// Progress credit of a shard revealed only as keywords.
    pub keywords_credit: f64,
    /// Std of the noise receivers see on summarised shard features.
    pub summary_noise: f64,
    /// End the episode as soon as the task is solved instead of playing
    /// out the horizon.
    #[serde(default)]
    pub stop_when_solved: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_agents: 4,
            num_shards: 8,
            critical_ratio: 0.5,
            required_critical: None,
            horizon: 6,
            feature_dim: 4,
            critical_offset: 1.0,
            max_subset_size: 2,
            tier_lengths: TierLengths::default(),
            keywords_credit: 1.0,
            summary_noise: 0.1,
            stop_when_solved: false,
        }
    }
}

impl EnvConfig {
    pub fn critical_count(&self) -> u32 {
        (self.critical_ratio * self.num_shards as f64).round() as u32
    }

    pub fn required_count(&self) -> u32 {
        self.required_critical
            .unwrap_or_else(|| self.critical_count())
    }

    /// Largest number of shards any agent holds.
    pub fn max_shards_per_agent(&self) -> usize {
        (self.num_shards as usize).div_ceil(self.num_agents.max(1) as usize)
    }

    /// Shard-position subsets an agent may propose, in action order.
    pub fn action_slots(&self) -> Vec<Vec<usize>> {
        let k = self.max_shards_per_agent();
        let mut slots = Vec::new();
        for size in 1..=self.max_subset_size.min(k) {
            let mut combo: Vec<usize> = (0..size).collect();
            loop {
                slots.push(combo.clone());
                // next combination in lexicographic order
                let mut i = size;
                while i > 0 && combo[i - 1] == k - size + i - 1 {
                    i -= 1;
                }
                if i == 0 {
                    break;
                }
                combo[i - 1] += 1;
                for j in i..size {
                    combo[j] = combo[j - 1] + 1;
                }
            }
        }
        slots
    }

    /// Action count including the leading "no proposal" action.
    pub fn num_actions(&self) -> usize {
        self.action_slots().len() + 1
    }

    pub fn observation_dim(&self) -> usize {
        let k = self.max_shards_per_agent();
        k * self.feature_dim + k + 1 + 2
    }

    pub fn message_dim(&self) -> usize {
        self.feature_dim + 1
    }

    pub fn global_state_dim(&self) -> usize {
        self.num_agents as usize * self.observation_dim()
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.num_agents == 0 {
            p.push("env.num_agents must be positive".into());
        }
        if self.num_shards < self.num_agents {
            p.push("env.num_shards must be at least env.num_agents".into());
        }
        if !(0.0..=1.0).contains(&self.critical_ratio) {
            p.push("env.critical_ratio must lie in [0, 1]".into());
        }
        if self.required_count() == 0 {
            p.push(
                "no critical shards are required (check critical_ratio / required_critical)".into(),
            );
        }
        if self.required_count() > self.critical_count() {
            p.push(format!(
                "env.required_critical ({}) exceeds the critical shard supply ({})",
                self.required_count(),
                self.critical_count()
            ));
        }
        if self.horizon == 0 {
            p.push("env.horizon must be positive".into());
        }
        if self.feature_dim == 0 {
            p.push("env.feature_dim must be positive".into());
        }
        if self.max_subset_size == 0 {
            p.push("env.max_subset_size must be positive".into());
        } else if self.num_agents > 0
            && (self.horizon as usize) < self.max_shards_per_agent().div_ceil(self.max_subset_size)
        {
            p.push("env.horizon too short to broadcast every shard at full budget".into());
        }
        if !self.tier_lengths.is_ordered() {
            p.push("env.tier_lengths must satisfy full > summary > keywords > 0".into());
        }
        if !(0.0..=1.0).contains(&self.keywords_credit) {
            p.push("env.keywords_credit must lie in [0, 1]".into());
        }
        if !(self.summary_noise >= 0.0 && self.critical_offset.is_finite()) {
            p.push("env.summary_noise must be non-negative and critical_offset finite".into());
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub shard_id: u32,
    pub holder: AgentId,
    pub critical: bool,
    pub feature_vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub shards: Vec<Shard>,
    pub required_critical_count: u32,
    pub horizon: u32,
    pub num_agents: u32,
    pub seed: u64,
}

impl TaskInstance {
    pub fn shard(&self, id: u32) -> &Shard {
        &self.shards[id as usize]
    }

    /// Shards held by `agent`, by ascending id.
    pub fn agent_shards(&self, agent: AgentId) -> Vec<&Shard> {
        self.shards.iter().filter(|s| s.holder == agent).collect()
    }

    pub fn critical_count(&self) -> u32 {
        self.shards.iter().filter(|s| s.critical).count() as u32
    }

    /// Critical shards left if `agent` never speaks.
    pub fn critical_supply_without(&self, agent: AgentId) -> u32 {
        self.shards
            .iter()
            .filter(|s| s.critical && s.holder != agent)
            .count() as u32
    }

    pub fn solvable_without(&self, agent: AgentId) -> bool {
        self.critical_supply_without(agent) >= self.required_critical_count
    }

    pub fn has_critical(&self, shard_ids: &[u32]) -> bool {
        shard_ids.iter().any(|&id| self.shard(id).critical)
    }
}

/// Builds a task deterministically from `seed`.
pub fn generate_instance(config: &EnvConfig, seed: u64) -> Result<TaskInstance, EnvError> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(EnvError::Config(problems));
    }
    let mut rng = seed::rng(seed, &[seed::INSTANCE]);
    let n = config.num_shards as usize;

    let mut holders: Vec<AgentId> = (0..config.num_shards)
        .map(|k| k % config.num_agents)
        .collect();
    holders.shuffle(&mut rng);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut critical = vec![false; n];
    for &k in order.iter().take(config.critical_count() as usize) {
        critical[k] = true;
    }

    let shards = (0..n)
        .map(|k| {
            let offset = if critical[k] {
                config.critical_offset
            } else {
                0.0
            };
            let feature_vector = (0..config.feature_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z + offset
                })
                .collect();
            Shard {
                shard_id: k as u32,
                holder: holders[k],
                critical: critical[k],
                feature_vector,
            }
        })
        .collect();

    Ok(TaskInstance {
        shards,
        required_critical_count: config.required_count(),
        horizon: config.horizon,
        num_agents: config.num_agents,
        seed,
    })
}

/// A message an agent could broadcast: shard content at a verbosity tier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateMessage {
    pub shard_ids: Vec<u32>,
    pub tier: Tier,
    pub token_len: u64,
}

impl CandidateMessage {
    pub fn new(shard_ids: Vec<u32>, tier: Tier, lengths: &TierLengths) -> Self {
        let token_len = lengths.per_shard(tier) * shard_ids.len() as u64;
        Self {
            shard_ids,
            tier,
            token_len,
        }
    }

    pub fn with_tier(&self, tier: Tier, lengths: &TierLengths) -> Self {
        Self::new(self.shard_ids.clone(), tier, lengths)
    }
}

/// A candidate together with the policy action that proposes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    /// Action index; 0 is reserved for "no proposal".
    pub action: usize,
    pub message: CandidateMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub instance: TaskInstance,
    pub revealed: BTreeSet<u32>,
    /// Progress credit per revealed shard.
    pub credit: BTreeMap<u32, f64>,
    /// Shard features as received by the team (noisy for summaries,
    /// absent for keywords).
    pub received: BTreeMap<u32, Vec<f64>>,
    /// Completed rounds.
    pub round: u32,
    pub progress: f64,
}

impl EnvState {
    pub fn new(instance: TaskInstance) -> Self {
        Self {
            instance,
            revealed: BTreeSet::new(),
            credit: BTreeMap::new(),
            received: BTreeMap::new(),
            round: 0,
            progress: 0.0,
        }
    }

    fn compute_progress(&self) -> f64 {
        let credited: f64 = self
            .credit
            .iter()
            .filter(|(id, _)| self.instance.shard(**id).critical)
            .map(|(_, c)| c)
            .sum();
        (credited / self.instance.required_critical_count as f64).min(1.0)
    }

    pub fn is_solved(&self) -> bool {
        self.progress >= 1.0
    }

    /// Broadcasts the winning messages and returns the new state with the
    /// progress gained.
    pub fn step(&self, winning: &[CandidateMessage], config: &EnvConfig) -> (EnvState, f64) {
        let mut next = self.clone();
        next.round += 1;
        for msg in winning {
            let credit = match msg.tier {
                Tier::Full | Tier::Summary => 1.0,
                Tier::Keywords => config.keywords_credit,
                Tier::Silence => continue,
            };
            for &id in &msg.shard_ids {
                next.revealed.insert(id);
                let entry = next.credit.entry(id).or_insert(0.0);
                *entry = entry.max(credit);
                match msg.tier {
                    Tier::Full => {
                        next.received
                            .insert(id, self.instance.shard(id).feature_vector.clone());
                    }
                    Tier::Summary if !next.received.contains_key(&id) => {
                        let mut rng =
                            seed::rng(self.instance.seed, &[NOISE, next.round as u64, id as u64]);
                        let noisy = self
                            .instance
                            .shard(id)
                            .feature_vector
                            .iter()
                            .map(|x| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                x + config.summary_noise * z
                            })
                            .collect();
                        next.received.insert(id, noisy);
                    }
                    _ => {}
                }
            }
        }
        next.progress = next.compute_progress();
        let delta = next.progress - self.progress;
        (next, delta)
    }

    /// Proposable messages of `agent` with their action indices. Subsets
    /// touching an already revealed shard are excluded.
    pub fn candidate_actions(&self, agent: AgentId, config: &EnvConfig) -> Vec<Candidate> {
        let own = self.instance.agent_shards(agent);
        config
            .action_slots()
            .into_iter()
            .enumerate()
            .filter_map(|(slot, positions)| {
                if positions.iter().any(|&p| p >= own.len()) {
                    return None;
                }
                let ids: Vec<u32> = positions.iter().map(|&p| own[p].shard_id).collect();
                if ids.iter().any(|id| self.revealed.contains(id)) {
                    return None;
                }
                Some(Candidate {
                    action: slot + 1,
                    message: CandidateMessage::new(ids, Tier::Full, &config.tier_lengths),
                })
            })
            .collect()
    }

    pub fn candidate_messages(&self, agent: AgentId, config: &EnvConfig) -> Vec<CandidateMessage> {
        self.candidate_actions(agent, config)
            .into_iter()
            .map(|c| c.message)
            .collect()
    }

    pub fn observe(&self, agent: AgentId, budget_warning: f64, config: &EnvConfig) -> Observation {
        let k = config.max_shards_per_agent();
        let own = self.instance.agent_shards(agent);
        let mut own_shard_features = vec![0.0; k * config.feature_dim];
        let mut revealed_summary = vec![0.0; k + 1];
        for (slot, shard) in own.iter().enumerate() {
            own_shard_features[slot * config.feature_dim..(slot + 1) * config.feature_dim]
                .copy_from_slice(&shard.feature_vector);
            if self.revealed.contains(&shard.shard_id) {
                revealed_summary[slot] = 1.0;
            }
        }
        revealed_summary[k] = self.revealed.len() as f64 / self.instance.shards.len() as f64;
        Observation {
            own_shard_features,
            revealed_summary,
            budget_warning,
            round_fraction: self.round as f64 / self.instance.horizon as f64,
        }
    }

    /// All agents' observations, concatenated.
    pub fn global_state(&self, budget_warning: f64, config: &EnvConfig) -> Vec<f64> {
        (0..config.num_agents)
            .flat_map(|a| self.observe(a, budget_warning, config).to_vector())
            .collect()
    }
}

/// Message features fed to the value network: mean shard features and
/// relative message size.
pub fn message_features(
    instance: &TaskInstance,
    message: &CandidateMessage,
    config: &EnvConfig,
) -> Vec<f64> {
    let mut f = vec![0.0; config.feature_dim + 1];
    let count = message.shard_ids.len() as f64;
    for &id in &message.shard_ids {
        for (acc, x) in f.iter_mut().zip(&instance.shard(id).feature_vector) {
            *acc += x / count;
        }
    }
    f[config.feature_dim] = count / config.max_subset_size as f64;
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub own_shard_features: Vec<f64>,
    /// Revealed flag per own shard slot, then the public fraction of all
    /// shards.
    pub revealed_summary: Vec<f64>,
    pub budget_warning: f64,
    pub round_fraction: f64,
}

impl Observation {
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.own_shard_features.clone();
        v.extend_from_slice(&self.revealed_summary);
        v.push(self.budget_warning);
        v.push(self.round_fraction);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_instance_shape() {
        let cfg = EnvConfig::default();
        let inst = generate_instance(&cfg, 7).unwrap();
        assert_eq!(inst.shards.len(), 8);
        assert_eq!(inst.critical_count(), 4);
        for agent in 0..4 {
            assert_eq!(inst.agent_shards(agent).len(), 2);
        }
        assert_eq!(inst, generate_instance(&cfg, 7).unwrap());
        assert_ne!(inst, generate_instance(&cfg, 8).unwrap());
    }

    #[test]
    fn critical_features_carry_offset() {
        let cfg = EnvConfig {
            num_shards: 400,
            num_agents: 4,
            critical_offset: 2.0,
            horizon: 50,
            ..EnvConfig::default()
        };
        let inst = generate_instance(&cfg, 1).unwrap();
        let mean = |crit: bool| {
            let xs: Vec<f64> = inst
                .shards
                .iter()
                .filter(|s| s.critical == crit)
                .flat_map(|s| s.feature_vector.clone())
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!(mean(true) - mean(false) > 1.5);
    }

    #[test]
    fn config_errors() {
        let cfg = EnvConfig {
            critical_ratio: 0.0,
            required_critical: Some(1),
            ..EnvConfig::default()
        };
        assert!(matches!(
            generate_instance(&cfg, 0),
            Err(EnvError::Config(_))
        ));
        let cfg = EnvConfig {
            required_critical: Some(5),
            ..EnvConfig::default()
        };
        let Err(EnvError::Config(p)) = generate_instance(&cfg, 0) else {
            panic!("expected config error")
        };
        assert!(p[0].contains("exceeds the critical shard supply"));
    }

    #[test]
    fn action_slots_enumerate_subsets() {
        let cfg = EnvConfig::default();
        assert_eq!(cfg.action_slots(), vec![vec![0], vec![1], vec![0, 1]]);
        let cfg = EnvConfig {
            num_shards: 12,
            max_subset_size: 2,
            ..EnvConfig::default()
        };
        assert_eq!(cfg.action_slots().len(), 3 + 3);
        assert_eq!(cfg.num_actions(), 7);
    }

    #[test]
    fn candidates_shrink_as_shards_reveal() {
        let cfg = EnvConfig::default();
        let state = EnvState::new(generate_instance(&cfg, 3).unwrap());
        let cands = state.candidate_messages(0, &cfg);
        assert_eq!(cands.len(), 3);
        assert_eq!(cands[2].shard_ids.len(), 2);
        assert_eq!(cands[2].token_len, 16);

        let all: Vec<CandidateMessage> = cands[2..].to_vec();
        let (next, _) = state.step(&all, &cfg);
        assert!(next.candidate_messages(0, &cfg).is_empty());

        let singles = EnvConfig {
            num_shards: 12,
            max_subset_size: 1,
            ..EnvConfig::default()
        };
        let state = EnvState::new(generate_instance(&singles, 3).unwrap());
        assert_eq!(state.candidate_messages(0, &singles).len(), 3);
    }

    #[test]
    fn step_progress() {
        let cfg = EnvConfig {
            required_critical: Some(2),
            ..EnvConfig::default()
        };
        let inst = generate_instance(&cfg, 5).unwrap();
        let crit: Vec<u32> = inst
            .shards
            .iter()
            .filter(|s| s.critical)
            .map(|s| s.shard_id)
            .collect();
        let plain: Vec<u32> = inst
            .shards
            .iter()
            .filter(|s| !s.critical)
            .map(|s| s.shard_id)
            .collect();
        let state = EnvState::new(inst);
        assert!(!state.is_solved());

        let msg = |ids: Vec<u32>| CandidateMessage::new(ids, Tier::Full, &cfg.tier_lengths);
        let (s1, d1) = state.step(&[msg(vec![crit[0]])], &cfg);
        assert_eq!(d1, 0.5);
        let (s2, d2) = s1.step(&[msg(vec![plain[0]])], &cfg);
        assert_eq!(d2, 0.0);
        let (s3, d3) = s2.step(&[], &cfg);
        assert_eq!(d3, 0.0);
        assert_eq!(s3.revealed, s2.revealed);
        let (s4, d4) = s3.step(&[msg(vec![crit[1]])], &cfg);
        assert_eq!(d4, 0.5);
        assert!(s4.is_solved());
    }

    #[test]
    fn tier_reveal_semantics() {
        let cfg = EnvConfig {
            keywords_credit: 0.5,
            ..EnvConfig::default()
        };
        let inst = generate_instance(&cfg, 9).unwrap();
        let crit: Vec<u32> = inst
            .shards
            .iter()
            .filter(|s| s.critical)
            .map(|s| s.shard_id)
            .collect();
        let state = EnvState::new(inst);
        let m = |id, tier| CandidateMessage::new(vec![id], tier, &cfg.tier_lengths);
        let (s, d) = state.step(&[m(crit[0], Tier::Keywords)], &cfg);
        assert_eq!(d, 0.5 / 4.0);
        assert!(!s.received.contains_key(&crit[0]));
        let (s, d) = s.step(&[m(crit[0], Tier::Summary)], &cfg);
        assert_eq!(d, 0.5 / 4.0);
        let exact = &s.instance.shard(crit[0]).feature_vector;
        assert_ne!(&s.received[&crit[0]], exact);
        let (s, _) = s.step(&[m(crit[0], Tier::Full)], &cfg);
        assert_eq!(&s.received[&crit[0]], exact);
    }

    #[test]
    fn every_agent_is_necessary_when_all_critical_required() {
        let cfg = EnvConfig::default();
        let inst = generate_instance(&cfg, 21).unwrap();
        for agent in 0..cfg.num_agents {
            let holds_critical = inst.agent_shards(agent).iter().any(|s| s.critical);
            assert_eq!(inst.solvable_without(agent), !holds_critical);
        }
        assert!((0..cfg.num_agents).any(|a| !inst.solvable_without(a)));
    }

    #[test]
    fn observation_layout() {
        let cfg = EnvConfig::default();
        let state = EnvState::new(generate_instance(&cfg, 2).unwrap());
        let obs = state.observe(1, 0.75, &cfg);
        let v = obs.to_vector();
        assert_eq!(v.len(), cfg.observation_dim());
        assert_eq!(v[v.len() - 2], 0.75);
        assert_eq!(v[v.len() - 1], 0.0);
        assert_eq!(state.global_state(1.0, &cfg).len(), cfg.global_state_dim());
    }
}
