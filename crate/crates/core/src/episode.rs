//! One episode of the communication market: per round, agents pick a
//! candidate, value it, bid its density, the auction clears under the
//! round cap, winners broadcast, and the budget is charged.

use crate::budget::BudgetState;
use crate::config::RunConfig;
use crate::env::{message_features, Candidate, EnvState, TaskInstance};
use crate::market::{run_auction_with_tolerance, AgentId, Bid};
use crate::marl::{loss, MarlError, Model, Params, Transition};
use crate::seed::SimRng;
use crate::telemetry::{AgentRecord, RoundRecord, ValueTally};
use crate::valuation::{
    assign_tier, compute_bid, density_from_stats, downgrade_to_fit, round_statistics, Tier,
};

/// How agents choose actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    /// Per-agent transitions, one per round played.
    pub trajectories: Vec<Vec<Transition>>,
    pub records: Vec<RoundRecord>,
    pub budget: BudgetState,
    pub final_state: EnvState,
}

impl EpisodeOutput {
    pub fn solved(&self) -> bool {
        self.final_state.is_solved()
    }
}

pub fn initial_budget(config: &RunConfig) -> BudgetState {
    BudgetState {
        episode_budget: config.budget.episode_budget,
        horizon: config.env.horizon,
        current_round: 1,
        spend_history: Vec::new(),
        hard_cap: config.budget.hard_cap,
        dynamic: config.budget.dynamic,
    }
}

/// Identifies an episode in telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeTag {
    pub epoch: u32,
    pub episode_id: u64,
}

struct Proposal {
    agent: AgentId,
    candidate: Candidate,
    /// Index of the candidate in the round's value list.
    index: usize,
}

/// Plays one episode to completion (solved or horizon reached).
pub fn run_episode(
    model: &Model,
    params: &Params,
    config: &RunConfig,
    instance: TaskInstance,
    rng: &mut SimRng,
    mode: ActionMode,
    tag: EpisodeTag,
) -> Result<EpisodeOutput, MarlError> {
    let EpisodeTag { epoch, episode_id } = tag;
    let env_cfg = &config.env;
    let n = env_cfg.num_agents as usize;
    let density_cfg = config.density();
    let lengths = env_cfg.tier_lengths;
    let train = &config.training;
    let ablation = &config.ablation;

    let mut state = EnvState::new(instance);
    let mut budget = initial_budget(config);
    let mut trajectories: Vec<Vec<Transition>> = vec![Vec::new(); n];
    let mut records = Vec::new();
    let fail = |e: &dyn std::fmt::Display| MarlError::Episode(e.to_string());

    while budget.current_round <= budget.horizon && !(env_cfg.stop_when_solved && state.is_solved())
    {
        let cap = budget.effective_cap().map_err(|e| fail(&e))?;
        let warning = budget.budget_warning_level();
        let global = state.global_state(warning, env_cfg);

        // Valuation of every candidate this round.
        let mut values = Vec::new();
        let mut lens = Vec::new();
        let mut per_agent = Vec::with_capacity(n);
        let mut tally = ValueTally::default();
        for agent in 0..n {
            let obs = state
                .observe(agent as AgentId, warning, env_cfg)
                .to_vector();
            let candidates = state.candidate_actions(agent as AgentId, env_cfg);
            let vnet = &params.value_nets[model.group(agent)];
            let encoded = model.value_net.encode_observation(vnet, &obs);
            let first = values.len();
            for c in &candidates {
                let v = if ablation.value_learning {
                    let m = message_features(&state.instance, &c.message, env_cfg);
                    model
                        .value_net
                        .forward_with_observation(vnet, Some(&m), encoded.clone())
                        .value()
                } else {
                    c.message.token_len as f64
                };
                tally.add(state.instance.has_critical(&c.message.shard_ids), v);
                values.push(v);
                lens.push(if ablation.value_density {
                    c.message.token_len
                } else {
                    1
                });
            }
            per_agent.push((obs, candidates, first));
        }
        let (mean, std) = if values.is_empty() {
            (0.0, 0.0)
        } else {
            round_statistics(&values)
        };
        let densities: Vec<_> = values
            .iter()
            .zip(&lens)
            .map(|(v, l)| density_from_stats(*v, mean, std, values.len(), *l, &density_cfg))
            .collect::<Result<_, _>>()
            .map_err(|e| fail(&e))?;
        let positives: Vec<f64> = densities
            .iter()
            .map(|d| d.density)
            .filter(|d| *d > 0.0)
            .collect();

        // Policy step.
        let mut steps = Vec::with_capacity(n);
        let mut proposals = Vec::new();
        for (agent, (obs, candidates, first)) in per_agent.into_iter().enumerate() {
            let mut mask = vec![false; env_cfg.num_actions()];
            mask[0] = true;
            for c in &candidates {
                mask[c.action] = true;
            }
            let policy = &params.policy.current[model.group(agent)];
            let dist = model.policy.distribution(policy, &obs, &mask);
            let action = match mode {
                ActionMode::Sample => dist.sample(rng),
                ActionMode::Greedy => dist.greedy(),
            };
            let log_prob = dist.log_prob(action);
            let value = model.state_value(params, agent, &obs, &global);
            if let Some(pos) = candidates.iter().position(|c| c.action == action) {
                proposals.push(Proposal {
                    agent: agent as AgentId,
                    candidate: candidates[pos].clone(),
                    index: first + pos,
                });
            }
            steps.push((obs, mask, action, log_prob, value));
        }

        // Tiering, compression and bids.
        let mut agent_records: Vec<AgentRecord> = (0..n)
            .map(|agent| AgentRecord {
                agent_id: agent as AgentId,
                action: steps[agent].2,
                candidates: steps[agent].1.iter().skip(1).filter(|m| **m).count(),
                shard_ids: Vec::new(),
                critical: false,
                density: None,
                tier: Tier::Silence,
                bid: 0.0,
                won: false,
                payment: 0.0,
                message_len: 0,
            })
            .collect();
        let mut bids = Vec::new();
        let mut messages = Vec::with_capacity(proposals.len());
        for p in &proposals {
            let report = densities[p.index];
            let tier = if ablation.tiered_content {
                assign_tier(report.density, &positives, &config.valuation.thresholds)
            } else if report.density > 0.0 {
                Tier::Full
            } else {
                Tier::Silence
            };
            let msg = downgrade_to_fit(
                &p.candidate.message.with_tier(tier, &lengths),
                cap,
                &lengths,
            );
            let rec = &mut agent_records[p.agent as usize];
            rec.shard_ids = p.candidate.message.shard_ids.clone();
            rec.critical = state.instance.has_critical(&rec.shard_ids);
            rec.density = Some(report);
            rec.tier = msg.tier;
            if msg.tier != Tier::Silence {
                rec.bid = compute_bid(report.density);
                rec.message_len = msg.token_len;
                bids.push(Bid {
                    agent_id: p.agent,
                    bid_value: rec.bid,
                    message_len: msg.token_len,
                    message_ref: messages.len(),
                });
            }
            messages.push(msg);
        }

        let outcome = run_auction_with_tolerance(&bids, cap, config.valuation.wdp_tolerance)
            .map_err(|e| fail(&e))?;
        let winning: Vec<_> = bids
            .iter()
            .filter(|b| outcome.is_winner(b.agent_id))
            .map(|b| messages[b.message_ref].clone())
            .collect();
        let (next_state, delta) = state.step(&winning, env_cfg);
        let next_budget = budget.charge(outcome.total_cost).map_err(|e| fail(&e))?;
        let done = next_budget.current_round > next_budget.horizon
            || (env_cfg.stop_when_solved && next_state.is_solved());

        for (agent, (obs, mask, action, log_prob, value)) in steps.into_iter().enumerate() {
            let id = agent as AgentId;
            let won = outcome.is_winner(id);
            let payment = outcome.payment(id);
            let rec = &mut agent_records[agent];
            rec.won = won;
            rec.payment = payment;
            let message_features = proposals
                .iter()
                .find(|p| p.agent == id)
                .map(|p| message_features(&state.instance, &p.candidate.message, env_cfg));
            trajectories[agent].push(Transition {
                observation: obs,
                global_state: global.clone(),
                mask,
                action_index: action,
                log_prob_old: log_prob,
                reward: loss::reward(delta, payment, won, train.alpha, train.beta),
                value_estimate: value,
                done,
                payment,
                is_winner: won,
                task_delta: delta,
                message_features,
            });
        }

        records.push(RoundRecord {
            epoch,
            episode_id,
            round: budget.current_round,
            effective_cap: cap,
            total_cost: outcome.total_cost,
            task_delta: delta,
            progress: next_state.progress,
            agents: agent_records,
            candidate_values: tally,
        });
        state = next_state;
        budget = next_budget;
    }

    Ok(EpisodeOutput {
        trajectories,
        records,
        budget,
        final_state: state,
    })
}
