//! MAPPO training loop and frozen-policy evaluation.
//!
//! Each epoch snapshots the policy, collects `episodes_per_epoch` episodes,
//! computes rewards and GAE advantages, then takes `update_steps` gradient
//! steps on the clipped objective (policy), the clipped value loss
//! (critic) and the squared message-value error (value network).

use serde::{Deserialize, Serialize};

use super::gae::{compute_advantages, normalize};
use super::loss::{
    clipped_policy_loss, clipped_policy_loss_grad, mappo_objective, policy_ratio,
    policy_ratio_grad, value_fn_loss, value_fn_loss_grad,
};
use super::{MarlError, Model, Params, Transition};
use crate::config::{CriticMode, RunConfig};
use crate::env::generate_instance;
use crate::episode::{run_episode, ActionMode, EpisodeOutput, EpisodeTag};
use crate::nn::Momentum;
use crate::seed;
use crate::telemetry::{
    strategy_distribution, token_accounting, value_gap_curve, RoundRecord, StrategyDistribution,
};
use crate::valuation::{value_loss, value_loss_grad, ValueNetParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub mean_episode_reward: f64,
    pub tokens_per_episode: f64,
    pub success_rate: f64,
    /// Objective value at the first update step of the epoch.
    pub objective: f64,
    pub value_fn_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub value_critical: Option<f64>,
    pub value_non_critical: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub initial: Params,
    pub params: Params,
    pub records: Vec<RoundRecord>,
    pub epochs: Vec<EpochStats>,
}

/// One transition with its advantage and return target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub agent: usize,
    pub transition: Transition,
    pub advantage: f64,
    pub target: f64,
}

/// Rollouts of one epoch prepared for updating.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<Sample>,
}

impl Batch {
    /// Advantages are normalised over the whole batch.
    pub fn from_episodes(
        config: &RunConfig,
        episodes: &[EpisodeOutput],
    ) -> Result<Self, MarlError> {
        let t = &config.training;
        let mut samples = Vec::new();
        for ep in episodes {
            for (agent, traj) in ep.trajectories.iter().enumerate() {
                if traj.is_empty() {
                    continue;
                }
                let adv = compute_advantages(traj, t.gamma, t.lambda)?;
                for ((tr, a), r) in traj.iter().zip(adv.advantages).zip(adv.returns) {
                    samples.push(Sample {
                        agent,
                        transition: tr.clone(),
                        advantage: a,
                        target: r,
                    });
                }
            }
        }
        let mut advs: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
        normalize(&mut advs);
        for (s, a) in samples.iter_mut().zip(advs) {
            s.advantage = a;
        }
        Ok(Self { samples })
    }

    /// Policy ratios of every sample under `params`.
    pub fn ratios(&self, model: &Model, params: &Params) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| {
                let tr = &s.transition;
                let dist = model.policy.distribution(
                    &params.policy.current[model.group(s.agent)],
                    &tr.observation,
                    &tr.mask,
                );
                policy_ratio(dist.log_prob(tr.action_index), tr.log_prob_old)
            })
            .collect()
    }
}

struct Optimizers {
    policy: Vec<Momentum>,
    value_nets: Vec<Momentum>,
    critic: Momentum,
}

impl Optimizers {
    fn new(params: &Params, config: &RunConfig) -> Self {
        let t = &config.training;
        let make = |n| Momentum::new(n, t.lr, t.momentum, t.grad_clip);
        Self {
            policy: params
                .policy
                .current
                .iter()
                .map(|p| make(p.len()))
                .collect(),
            value_nets: params
                .value_nets
                .iter()
                .map(|v| make(v.num_params()))
                .collect(),
            critic: make(params.critic.len()),
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct StepStats {
    objective: f64,
    value_fn_loss: f64,
    value_loss: f64,
    entropy: f64,
}

fn update_step(
    model: &Model,
    params: &mut Params,
    opts: &mut Optimizers,
    batch: &Batch,
    config: &RunConfig,
) -> StepStats {
    let t = &config.training;
    let groups = model.groups();
    let mut stats = StepStats::default();
    let n = batch.samples.len().max(1) as f64;

    // Policy: ascend L_clip + c2 S.
    let mut policy_grads: Vec<Vec<f64>> = params
        .policy
        .current
        .iter()
        .map(|p| vec![0.0; p.len()])
        .collect();
    let mut group_sizes = vec![0usize; groups];
    for s in &batch.samples {
        group_sizes[model.group(s.agent)] += 1;
    }
    let mut clip_sum = 0.0;
    let mut entropy_sum = 0.0;
    for s in &batch.samples {
        let g = model.group(s.agent);
        let tr = &s.transition;
        let params_g = &params.policy.current[g];
        let dist = model
            .policy
            .distribution(params_g, &tr.observation, &tr.mask);
        let log_prob = dist.log_prob(tr.action_index);
        let ratio = policy_ratio(log_prob, tr.log_prob_old);
        clip_sum += clipped_policy_loss(ratio, s.advantage, t.epsilon);
        entropy_sum += dist.entropy();
        let d_logp = clipped_policy_loss_grad(ratio, s.advantage, t.epsilon)
            * policy_ratio_grad(log_prob, tr.log_prob_old);
        let scale = 1.0 / group_sizes[g] as f64;
        let grad_logits: Vec<f64> = dist
            .log_prob_grad(tr.action_index)
            .iter()
            .zip(dist.entropy_grad())
            .map(|(lp, h)| scale * (d_logp * lp + t.c2 * h))
            .collect();
        model
            .policy
            .backward(params_g, &dist, &grad_logits, &mut policy_grads[g]);
    }

    // Value network: descend the message-value error, plus the critic loss
    // when the network doubles as critic.
    let mut value_grads: Vec<ValueNetParams> =
        (0..groups).map(|_| model.value_net.zeros()).collect();
    let mut message_counts = vec![0usize; groups];
    for s in &batch.samples {
        if s.transition.message_features.is_some() {
            message_counts[model.group(s.agent)] += 1;
        }
    }
    let mut value_loss_sum = 0.0;
    let mut value_loss_n = 0usize;
    if config.ablation.value_learning {
        for s in &batch.samples {
            let Some(m) = &s.transition.message_features else {
                continue;
            };
            let g = model.group(s.agent);
            let vp = &params.value_nets[g];
            let trace = model
                .value_net
                .forward(vp, Some(m), &s.transition.observation);
            let v = trace.value();
            value_loss_sum += value_loss(v, s.target);
            value_loss_n += 1;
            let grad = -value_loss_grad(v, s.target) / message_counts[g] as f64;
            model
                .value_net
                .backward(vp, &trace, grad, &mut value_grads[g]);
        }
    }

    // Critic: ascend -c1 L_vf.
    let mut critic_grad = vec![0.0; params.critic.len()];
    let mut vf_sum = 0.0;
    for s in &batch.samples {
        let tr = &s.transition;
        match model.critic_mode {
            CriticMode::Centralized => {
                let x = model.critic_input(&tr.global_state, s.agent);
                let trace = model.critic.forward(&params.critic, &x);
                let v = trace.output()[0];
                vf_sum += value_fn_loss(v, tr.value_estimate, s.target, t.epsilon_vf);
                let d =
                    -t.c1 * value_fn_loss_grad(v, tr.value_estimate, s.target, t.epsilon_vf) / n;
                model
                    .critic
                    .backward(&params.critic, &trace, &[d], &mut critic_grad);
            }
            CriticMode::ValueNet => {
                let g = model.group(s.agent);
                let vp = &params.value_nets[g];
                let trace = model.value_net.forward(vp, None, &tr.observation);
                let v = trace.value();
                vf_sum += value_fn_loss(v, tr.value_estimate, s.target, t.epsilon_vf);
                let d = -t.c1 * value_fn_loss_grad(v, tr.value_estimate, s.target, t.epsilon_vf)
                    / group_sizes[g] as f64;
                model.value_net.backward(vp, &trace, d, &mut value_grads[g]);
            }
        }
    }

    for g in 0..groups {
        opts.policy[g].step(&mut params.policy.current[g], &policy_grads[g]);
        let mut flat = params.value_nets[g].to_flat();
        opts.value_nets[g].step(&mut flat, &value_grads[g].to_flat());
        params.value_nets[g] = ValueNetParams::from_flat(&model.value_net, &flat);
    }
    if !params.critic.is_empty() {
        opts.critic.step(&mut params.critic, &critic_grad);
    }

    stats.value_fn_loss = vf_sum / n;
    stats.entropy = entropy_sum / n;
    stats.value_loss = if value_loss_n > 0 {
        value_loss_sum / value_loss_n as f64
    } else {
        0.0
    };
    stats.objective = mappo_objective(clip_sum / n, stats.value_fn_loss, stats.entropy, t.c1, t.c2);
    stats
}

/// Plays `count` episodes, in parallel over `workers` threads. Output order
/// (and content) does not depend on the worker count.
pub fn collect<F>(
    model: &Model,
    params: &Params,
    config: &RunConfig,
    count: usize,
    workers: usize,
    mode: ActionMode,
    seeds: F,
) -> Result<Vec<EpisodeOutput>, MarlError>
where
    F: Fn(usize) -> (u64, u64, EpisodeTag) + Sync,
{
    let play = |i: usize| -> Result<EpisodeOutput, MarlError> {
        let (instance_seed, rollout_seed, tag) = seeds(i);
        let instance = generate_instance(&config.env, instance_seed)
            .map_err(|e| MarlError::Episode(e.to_string()))?;
        let mut rng = seed::rng(rollout_seed, &[]);
        run_episode(model, params, config, instance, &mut rng, mode, tag)
    };
    let workers = workers.clamp(1, count.max(1));
    if workers == 1 {
        return (0..count).map(play).collect();
    }
    let mut slots: Vec<Option<Result<EpisodeOutput, MarlError>>> =
        (0..count).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = count.div_ceil(workers);
        for (w, part) in slots.chunks_mut(chunk).enumerate() {
            let play = &play;
            scope.spawn(move || {
                for (k, slot) in part.iter_mut().enumerate() {
                    *slot = Some(play(w * chunk + k));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every episode played"))
        .collect()
}

fn training_seeds(
    config: &RunConfig,
    epoch: u32,
) -> impl Fn(usize) -> (u64, u64, EpisodeTag) + Sync + '_ {
    move |i| {
        let path = [epoch as u64, i as u64];
        (
            seed::derive(config.seed, &[seed::INSTANCE, path[0], path[1]]),
            seed::derive(config.seed, &[seed::ROLLOUT, path[0], path[1]]),
            EpisodeTag {
                epoch,
                episode_id: i as u64,
            },
        )
    }
}

/// Initial parameters for a run, derived from its seed.
pub fn initial_params(model: &Model, config: &RunConfig) -> Params {
    model.init(&mut seed::rng(config.seed, &[seed::INIT]))
}

pub fn train(config: &RunConfig, workers: usize) -> Result<TrainOutput, MarlError> {
    let model = Model::new(config);
    let initial = initial_params(&model, config);
    let mut params = initial.clone();
    let mut opts = Optimizers::new(&params, config);
    let t = &config.training;
    let mut records = Vec::new();
    let mut epochs = Vec::new();

    for epoch in 0..t.epochs {
        params.policy.snapshot();
        let episodes = collect(
            &model,
            &params,
            config,
            t.episodes_per_epoch as usize,
            workers,
            ActionMode::Sample,
            training_seeds(config, epoch),
        )?;
        let batch = Batch::from_episodes(config, &episodes)?;

        let mut first = None;
        for _ in 0..t.update_steps {
            let s = update_step(&model, &mut params, &mut opts, &batch, config);
            if !(s.objective.is_finite() && s.value_loss.is_finite()) {
                return Err(MarlError::Diverged {
                    what: "loss",
                    epoch,
                });
            }
            first.get_or_insert(s);
        }
        if !params.is_finite() {
            return Err(MarlError::Diverged {
                what: "parameters",
                epoch,
            });
        }

        let epoch_records: Vec<RoundRecord> = episodes
            .iter()
            .flat_map(|e| e.records.iter().cloned())
            .collect();
        let stats = first.unwrap_or_default();
        let gap = value_gap_curve(&epoch_records).first().copied();
        let n = episodes.len() as f64;
        epochs.push(EpochStats {
            epoch,
            mean_episode_reward: episodes
                .iter()
                .map(|e| {
                    e.trajectories
                        .iter()
                        .flatten()
                        .map(|t| t.reward)
                        .sum::<f64>()
                })
                .sum::<f64>()
                / n,
            tokens_per_episode: token_accounting(&epoch_records).tokens_spent as f64 / n,
            success_rate: episodes.iter().filter(|e| e.solved()).count() as f64 / n,
            objective: stats.objective,
            value_fn_loss: stats.value_fn_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            value_critical: gap.map(|g| g.critical),
            value_non_critical: gap.map(|g| g.non_critical),
        });
        records.extend(epoch_records);
    }
    params.policy.snapshot();

    Ok(TrainOutput {
        initial,
        params,
        records,
        epochs,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub records: Vec<RoundRecord>,
    pub episodes: usize,
    pub success_rate: f64,
    pub tokens_per_episode: f64,
    pub strategy: Option<StrategyDistribution>,
}

/// Runs frozen policies on fresh instances derived from `seed`.
pub fn evaluate(
    config: &RunConfig,
    params: &Params,
    seed_value: u64,
    workers: usize,
) -> Result<EvalOutput, MarlError> {
    let model = Model::new(config);
    model.check(params)?;
    let count = config.eval.episodes as usize;
    let mode = if config.eval.greedy {
        ActionMode::Greedy
    } else {
        ActionMode::Sample
    };
    let episodes = collect(&model, params, config, count, workers, mode, |i| {
        (
            seed::derive(seed_value, &[seed::EVAL, seed::INSTANCE, i as u64]),
            seed::derive(seed_value, &[seed::EVAL, seed::ROLLOUT, i as u64]),
            EpisodeTag {
                epoch: 0,
                episode_id: i as u64,
            },
        )
    })?;
    let records: Vec<RoundRecord> = episodes
        .iter()
        .flat_map(|e| e.records.iter().cloned())
        .collect();
    Ok(EvalOutput {
        success_rate: episodes.iter().filter(|e| e.solved()).count() as f64 / count as f64,
        tokens_per_episode: token_accounting(&records).tokens_spent as f64 / count as f64,
        strategy: strategy_distribution(&records).ok(),
        episodes: count,
        records,
    })
}
