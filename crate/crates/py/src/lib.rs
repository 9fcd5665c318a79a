//! Python bindings: auction, valuation, budget, MAPPO losses, advantage
//! estimation, training and evaluation.

use std::collections::BTreeMap;

use dala_core::checkpoint::Checkpoint;
use dala_core::marl::{self, gae, loss, Params};
use dala_core::valuation::{self, DensityConfig, TierThresholds};
use dala_core::{market, BudgetState as CoreBudget, RunConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(frozen, get_all)]
#[derive(Clone)]
struct Bid {
    agent_id: u32,
    bid_value: f64,
    message_len: u64,
}

#[pymethods]
impl Bid {
    #[new]
    fn new(agent_id: u32, bid_value: f64, message_len: u64) -> PyResult<Self> {
        market::Bid::new(agent_id, bid_value, message_len).map_err(value_error)?;
        Ok(Self {
            agent_id,
            bid_value,
            message_len,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Bid(agent_id={}, bid_value={}, message_len={})",
            self.agent_id, self.bid_value, self.message_len
        )
    }
}

#[pyclass(frozen, get_all)]
struct AuctionOutcome {
    winners: Vec<u32>,
    payments: BTreeMap<u32, f64>,
    total_cost: u64,
    total_value: f64,
}

#[pymethods]
impl AuctionOutcome {
    fn __repr__(&self) -> String {
        format!(
            "AuctionOutcome(winners={:?}, payments={:?}, total_cost={}, total_value={})",
            self.winners, self.payments, self.total_cost, self.total_value
        )
    }
}

/// Budget-constrained VCG auction over `bids` with token capacity `b_max`.
#[pyfunction]
fn run_auction(bids: Vec<PyRef<'_, Bid>>, b_max: u64) -> PyResult<AuctionOutcome> {
    let bids: Vec<market::Bid> = bids
        .iter()
        .map(|b| market::Bid::new(b.agent_id, b.bid_value, b.message_len))
        .collect::<Result<_, _>>()
        .map_err(value_error)?;
    let out = market::run_auction(&bids, b_max).map_err(value_error)?;
    Ok(AuctionOutcome {
        winners: out.winners,
        payments: out.payments,
        total_cost: out.total_cost,
        total_value: out.total_value,
    })
}

/// Value density of candidate `index` among the round's raw values.
#[pyfunction]
#[pyo3(signature = (values, index, length, epsilon=1e-8))]
fn value_density(values: Vec<f64>, index: usize, length: u64, epsilon: f64) -> PyResult<f64> {
    let config = DensityConfig {
        epsilon,
        ..DensityConfig::default()
    };
    let report = valuation::value_density(&values, index, length, &config).map_err(value_error)?;
    Ok(report.density)
}

#[pyfunction]
fn compute_bid(density: f64) -> f64 {
    valuation::compute_bid(density)
}

/// Tier name for `density` given the round's positive densities.
#[pyfunction]
fn assign_tier(density: f64, round_positive_densities: Vec<f64>) -> &'static str {
    valuation::assign_tier(
        density,
        &round_positive_densities,
        &TierThresholds::default(),
    )
    .name()
}

#[pyclass]
struct BudgetState {
    inner: CoreBudget,
}

#[pymethods]
impl BudgetState {
    #[new]
    #[pyo3(signature = (episode_budget, horizon, hard_cap, dynamic=true))]
    fn new(episode_budget: u64, horizon: u32, hard_cap: u64, dynamic: bool) -> PyResult<Self> {
        let inner = CoreBudget::new(episode_budget, horizon, hard_cap)
            .map_err(value_error)?
            .with_dynamic(dynamic);
        Ok(Self { inner })
    }

    #[getter]
    fn current_round(&self) -> u32 {
        self.inner.current_round
    }

    #[getter]
    fn spend_history(&self) -> Vec<u64> {
        self.inner.spend_history.clone()
    }

    #[getter]
    fn remaining(&self) -> u64 {
        self.inner.remaining()
    }

    fn round_budget(&self) -> PyResult<f64> {
        self.inner.round_budget().map_err(value_error)
    }

    fn effective_cap(&self) -> PyResult<u64> {
        self.inner.effective_cap().map_err(value_error)
    }

    fn warning_level(&self) -> f64 {
        self.inner.budget_warning_level()
    }

    /// Records a round's spend and advances to the next round.
    fn charge(&mut self, cost: u64) -> PyResult<()> {
        self.inner = self.inner.charge(cost).map_err(value_error)?;
        Ok(())
    }
}

#[pyfunction]
fn reward(task_delta: f64, payment: f64, is_winner: bool, alpha: f64, beta: f64) -> f64 {
    loss::reward(task_delta, payment, is_winner, alpha, beta)
}

#[pyfunction]
fn clipped_policy_loss(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    loss::clipped_policy_loss(ratio, advantage, epsilon)
}

#[pyfunction]
fn value_fn_loss(v_new: f64, v_old: f64, return_target: f64, epsilon_vf: f64) -> f64 {
    loss::value_fn_loss(v_new, v_old, return_target, epsilon_vf)
}

/// Generalised advantage estimates; returns `(advantages, returns)`.
#[pyfunction]
fn compute_gae(
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    gamma: f64,
    lam: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if rewards.is_empty() || rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(PyValueError::new_err(
            "rewards, values and dones must be non-empty and equally long",
        ));
    }
    let out = gae::gae(&rewards, &values, &dones, gamma, lam);
    Ok((out.advantages, out.returns))
}

/// The default run configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml_string()
}

#[pyclass]
struct Trained {
    config: RunConfig,
    params: Params,
    #[pyo3(get)]
    epochs: Vec<BTreeMap<String, f64>>,
}

#[pymethods]
impl Trained {
    /// Evaluates the trained policies on fresh instances. Returns success
    /// rate, tokens per episode and the strategy distribution.
    #[pyo3(signature = (seed, episode_budget=None, episodes=None))]
    fn evaluate(
        &self,
        seed: u64,
        episode_budget: Option<u64>,
        episodes: Option<u32>,
    ) -> PyResult<BTreeMap<String, f64>> {
        let mut config = self.config.clone();
        if let Some(b) = episode_budget {
            config.budget.episode_budget = b;
        }
        if let Some(n) = episodes {
            config.eval.episodes = n;
        }
        let out = marl::evaluate(&config, &self.params, seed, 1).map_err(value_error)?;
        let mut row = BTreeMap::from([
            ("success_rate".to_string(), out.success_rate),
            ("tokens_per_episode".to_string(), out.tokens_per_episode),
        ]);
        if let Some(s) = out.strategy {
            row.insert("full".into(), s.full);
            row.insert("summary".into(), s.summary);
            row.insert("keywords".into(), s.keywords);
            row.insert("silence".into(), s.silence);
        }
        Ok(row)
    }

    fn checkpoint_json(&self) -> String {
        Checkpoint::new(&self.config, self.epochs.len() as u32, self.params.clone()).to_json()
    }
}

/// Trains from a TOML config; `epochs` overrides the configured count.
#[pyfunction]
#[pyo3(signature = (config_toml, epochs=None, workers=1))]
fn train(
    py: Python<'_>,
    config_toml: &str,
    epochs: Option<u32>,
    workers: usize,
) -> PyResult<Trained> {
    let mut config = RunConfig::from_toml_str(config_toml).map_err(value_error)?;
    if let Some(e) = epochs {
        config.training.epochs = e;
    }
    config.validate().map_err(value_error)?;
    let out = py
        .detach(|| marl::train(&config, workers.max(1)))
        .map_err(value_error)?;
    let epochs = out
        .epochs
        .iter()
        .map(|e| {
            BTreeMap::from([
                ("epoch".to_string(), e.epoch as f64),
                ("mean_episode_reward".to_string(), e.mean_episode_reward),
                ("tokens_per_episode".to_string(), e.tokens_per_episode),
                ("success_rate".to_string(), e.success_rate),
                ("entropy".to_string(), e.entropy),
            ])
        })
        .collect();
    Ok(Trained {
        config,
        params: out.params,
        epochs,
    })
}

#[pymodule]
fn dala(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Bid>()?;
    m.add_class::<AuctionOutcome>()?;
    m.add_class::<BudgetState>()?;
    m.add_class::<Trained>()?;
    m.add_function(wrap_pyfunction!(run_auction, m)?)?;
    m.add_function(wrap_pyfunction!(value_density, m)?)?;
    m.add_function(wrap_pyfunction!(compute_bid, m)?)?;
    m.add_function(wrap_pyfunction!(assign_tier, m)?)?;
    m.add_function(wrap_pyfunction!(reward, m)?)?;
    m.add_function(wrap_pyfunction!(clipped_policy_loss, m)?)?;
    m.add_function(wrap_pyfunction!(value_fn_loss, m)?)?;
    m.add_function(wrap_pyfunction!(compute_gae, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
