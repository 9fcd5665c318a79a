//! A token-budgeted communication market for cooperative agent teams.
//!
//! Agents holding private information bid for the right to broadcast a
//! message. Bids are value densities predicted by a learned message-value
//! network; a budget-constrained VCG combinatorial auction picks the winning
//! set each round, and policies are trained with MAPPO against a reward that
//! trades task progress for auction payments.
//!
//! Module map:
//!
//! - [`market`]: winner determination (exact knapsack DP) and VCG payments.
//! - [`valuation`]: message-value network, value density, bids and tiers.
//! - [`budget`]: episode / round / hard-cap budget hierarchy.
//! - [`env`]: synthetic distributed-information task.
//! - [`marl`]: MAPPO losses, advantage estimation and the trainer.
//! - [`telemetry`]: per-round records and the analysis aggregations.
//! - [`cli`]: command implementations behind the `dala` binary.

pub mod budget;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod env;
pub mod episode;
pub mod market;
pub mod marl;
pub mod nn;
pub mod seed;
pub mod telemetry;
pub mod valuation;

pub use budget::{BudgetError, BudgetState};
pub use config::RunConfig;
pub use env::{CandidateMessage, EnvConfig, EnvState, TaskInstance};
pub use market::{run_auction, AgentId, AuctionOutcome, Bid, MarketError};
pub use valuation::{DensityReport, Tier, ValueNet, ValueNetParams};
