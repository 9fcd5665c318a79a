//! Three-level token budget: episode budget, dynamic round budget and the
//! instantaneous hard cap that bounds each auction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BudgetError {
    #[error("round {round} is past the horizon of {horizon} rounds")]
    PastHorizon { round: u32, horizon: u32 },
    #[error("round cost {cost} exceeds the effective cap {cap}")]
    Overdraft { cost: u64, cap: u64 },
    #[error("invalid budget parameters: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetState {
    pub episode_budget: u64,
    pub horizon: u32,
    /// 1-based index of the round about to be auctioned.
    pub current_round: u32,
    /// Tokens spent in each completed round.
    pub spend_history: Vec<u64>,
    pub hard_cap: u64,
    /// When false the round budget is the fixed share `episode_budget /
    /// horizon` (still bounded by what remains).
    #[serde(default = "default_dynamic")]
    pub dynamic: bool,
}

fn default_dynamic() -> bool {
    true
}

impl BudgetState {
    pub fn new(episode_budget: u64, horizon: u32, hard_cap: u64) -> Result<Self, BudgetError> {
        if horizon == 0 {
            return Err(BudgetError::Invalid("horizon must be positive"));
        }
        Ok(Self {
            episode_budget,
            horizon,
            current_round: 1,
            spend_history: Vec::new(),
            hard_cap,
            dynamic: true,
        })
    }

    pub fn with_dynamic(mut self, dynamic: bool) -> Self {
        self.dynamic = dynamic;
        self
    }

    pub fn spent(&self) -> u64 {
        self.spend_history.iter().sum()
    }

    pub fn remaining(&self) -> u64 {
        self.episode_budget.saturating_sub(self.spent())
    }

    fn check_round(&self) -> Result<(), BudgetError> {
        if self.current_round > self.horizon {
            return Err(BudgetError::PastHorizon {
                round: self.current_round,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    /// Remaining budget spread evenly over the remaining rounds.
    pub fn round_budget(&self) -> Result<f64, BudgetError> {
        self.check_round()?;
        let remaining = self.remaining() as f64;
        if self.dynamic {
            let rounds_left = (self.horizon - self.current_round + 1) as f64;
            Ok(remaining / rounds_left)
        } else {
            Ok((self.episode_budget as f64 / self.horizon as f64).min(remaining))
        }
    }

    /// Knapsack capacity for the current round.
    pub fn effective_cap(&self) -> Result<u64, BudgetError> {
        let round = self.round_budget()?;
        Ok(round.min(self.hard_cap as f64).floor() as u64)
    }

    /// Records the round's spend and advances to the next round.
    pub fn charge(&self, cost: u64) -> Result<BudgetState, BudgetError> {
        let cap = self.effective_cap()?;
        if cost > cap {
            return Err(BudgetError::Overdraft { cost, cap });
        }
        let mut next = self.clone();
        next.spend_history.push(cost);
        next.current_round += 1;
        Ok(next)
    }

    /// Fraction of the episode budget still unspent, in `[0, 1]`.
    pub fn budget_warning_level(&self) -> f64 {
        if self.episode_budget == 0 {
            return 0.0;
        }
        self.remaining() as f64 / self.episode_budget as f64
    }
}
