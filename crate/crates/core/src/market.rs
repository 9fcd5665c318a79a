//! Budget-constrained combinatorial auction.
//!
//! Each agent submits one sealed bid for one message. The winner
//! determination problem (WDP) is a 0/1 knapsack over integer token lengths
//! and is solved exactly by dynamic programming; every winner then pays its
//! VCG externality, found by re-solving the WDP without it.
//!
//! Ties between value-optimal winner sets are broken deterministically:
//! smaller total message length first, then the lexicographically smallest
//! sorted tuple of agent ids.
//!
//! The value of a set is always accumulated in one canonical order (from the
//! highest agent id down to the lowest) so that the DP and the brute-force
//! oracle produce bit-identical totals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type AgentId = u32;

/// Largest instance [`brute_force_wdp`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarketError {
    #[error("agent {0} submitted more than one bid")]
    DuplicateAgent(AgentId),
    #[error("bid from agent {agent} has invalid value {value}")]
    InvalidValue { agent: AgentId, value: f64 },
    #[error("bid from agent {0} has zero message length")]
    EmptyMessage(AgentId),
    #[error("agent {0} is not in the winning set")]
    NotAWinner(AgentId),
    #[error("brute-force solver accepts at most {max} bids, got {got}")]
    TooManyBids { got: usize, max: usize },
}

/// A sealed offer for the right to broadcast one message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    pub agent_id: AgentId,
    /// Non-negative value density.
    pub bid_value: f64,
    /// Token length of the message.
    pub message_len: u64,
    /// Caller-side handle to the message this bid is for.
    #[serde(skip)]
    pub message_ref: usize,
}

impl Bid {
    pub fn new(agent_id: AgentId, bid_value: f64, message_len: u64) -> Result<Self, MarketError> {
        let bid = Self {
            agent_id,
            bid_value,
            message_len,
            message_ref: 0,
        };
        bid.validate()?;
        Ok(bid)
    }

    pub fn with_ref(mut self, message_ref: usize) -> Self {
        self.message_ref = message_ref;
        self
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        if !(self.bid_value.is_finite() && self.bid_value >= 0.0) {
            return Err(MarketError::InvalidValue {
                agent: self.agent_id,
                value: self.bid_value,
            });
        }
        if self.message_len == 0 {
            return Err(MarketError::EmptyMessage(self.agent_id));
        }
        Ok(())
    }
}

/// Result of one auction round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    /// Winning agents in ascending id order.
    pub winners: Vec<AgentId>,
    /// VCG payment per winner. Agents absent from the map pay 0.
    pub payments: BTreeMap<AgentId, f64>,
    /// Tokens consumed by the winning messages.
    pub total_cost: u64,
    /// Sum of the winners' bid values.
    pub total_value: f64,
}

impl AuctionOutcome {
    pub fn empty() -> Self {
        Self {
            winners: Vec::new(),
            payments: BTreeMap::new(),
            total_cost: 0,
            total_value: 0.0,
        }
    }

    pub fn is_winner(&self, agent: AgentId) -> bool {
        self.winners.binary_search(&agent).is_ok()
    }

    pub fn payment(&self, agent: AgentId) -> f64 {
        self.payments.get(&agent).copied().unwrap_or(0.0)
    }
}

/// An auction instance as read by the one-shot solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuctionInstance {
    pub bids: Vec<Bid>,
    pub b_max: u64,
}

impl AuctionInstance {
    pub fn solve(&self) -> Result<AuctionOutcome, MarketError> {
        run_auction(&self.bids, self.b_max)
    }
}

/// Bids whose message fits the round cap, in input order.
pub fn filter_valid_bids(bids: &[Bid], b_max: u64) -> Vec<Bid> {
    bids.iter()
        .filter(|bid| bid.message_len <= b_max)
        .cloned()
        .collect()
}

/// Canonical set value: bids of `members` summed from the highest agent id
/// down to the lowest.
pub fn set_value(bids: &[Bid], members: &[AgentId]) -> f64 {
    let mut chosen: Vec<&Bid> = bids
        .iter()
        .filter(|bid| members.contains(&bid.agent_id))
        .collect();
    chosen.sort_by_key(|bid| bid.agent_id);
    chosen
        .iter()
        .rev()
        .fold(0.0, |acc, bid| bid.bid_value + acc)
}

fn set_length(bids: &[Bid], members: &[AgentId]) -> u64 {
    bids.iter()
        .filter(|bid| members.contains(&bid.agent_id))
        .map(|bid| bid.message_len)
        .sum()
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    value: f64,
    len: u64,
}

impl Cell {
    const EMPTY: Cell = Cell { value: 0.0, len: 0 };

    /// Strictly better under (value desc, length asc), values within
    /// `tolerance` counting as equal.
    fn beats(self, other: Cell, tolerance: f64) -> bool {
        if self.value > other.value + tolerance {
            true
        } else if other.value > self.value + tolerance {
            false
        } else {
            self.len < other.len
        }
    }
}

/// Exact WDP solver. Returns the winning agent ids in ascending order.
///
/// Items longer than `b_max` are ignored. Agent ids are expected to be
/// unique; [`run_auction`] enforces this.
pub fn solve_wdp(bids: &[Bid], b_max: u64) -> Vec<AgentId> {
    solve_wdp_with_tolerance(bids, b_max, 0.0)
}

/// [`solve_wdp`] with values closer than `tolerance` treated as ties.
pub fn solve_wdp_with_tolerance(bids: &[Bid], b_max: u64, tolerance: f64) -> Vec<AgentId> {
    let mut items: Vec<&Bid> = bids.iter().filter(|b| b.message_len <= b_max).collect();
    items.sort_by_key(|b| b.agent_id);
    if items.is_empty() {
        return Vec::new();
    }

    let total_len: u64 = items.iter().map(|b| b.message_len).sum();
    let cap = b_max.min(total_len) as usize;
    let width = cap + 1;
    let n = items.len();

    // best[i][c]: optimum over items i.. with capacity c.
    let mut best = vec![Cell::EMPTY; (n + 1) * width];
    for i in (0..n).rev() {
        let len = items[i].message_len as usize;
        let value = items[i].bid_value;
        for c in 0..width {
            let skip = best[(i + 1) * width + c];
            let mut cell = skip;
            if len <= c {
                let rest = best[(i + 1) * width + c - len];
                let take = Cell {
                    value: value + rest.value,
                    len: len as u64 + rest.len,
                };
                if take.beats(skip, tolerance) {
                    cell = take;
                }
            }
            best[i * width + c] = cell;
        }
    }

    // Walk ids in ascending order, taking an item whenever some optimal
    // completion includes it; this yields the lexicographically smallest
    // optimal id tuple.
    let mut winners = Vec::new();
    let mut c = cap;
    for (i, item) in items.iter().enumerate() {
        let len = item.message_len as usize;
        if len > c {
            continue;
        }
        let target = best[i * width + c];
        let rest = best[(i + 1) * width + c - len];
        let take = Cell {
            value: item.bid_value + rest.value,
            len: len as u64 + rest.len,
        };
        if !target.beats(take, tolerance) {
            winners.push(item.agent_id);
            c -= len;
        }
    }
    winners
}

/// Exhaustive WDP over all subsets, with the same tie-break as
/// [`solve_wdp`]. Test oracle; limited to [`BRUTE_FORCE_LIMIT`] bids.
pub fn brute_force_wdp(bids: &[Bid], b_max: u64) -> Result<Vec<AgentId>, MarketError> {
    if bids.len() > BRUTE_FORCE_LIMIT {
        return Err(MarketError::TooManyBids {
            got: bids.len(),
            max: BRUTE_FORCE_LIMIT,
        });
    }
    let mut items: Vec<&Bid> = bids.iter().collect();
    items.sort_by_key(|b| b.agent_id);

    let mut best: Option<(f64, u64, Vec<AgentId>)> = None;
    for mask in 0u32..(1u32 << items.len()) {
        let members: Vec<&Bid> = items
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, b)| *b)
            .collect();
        let len: u64 = members.iter().map(|b| b.message_len).sum();
        if len > b_max {
            continue;
        }
        let value = members.iter().rev().fold(0.0, |acc, b| b.bid_value + acc);
        let ids: Vec<AgentId> = members.iter().map(|b| b.agent_id).collect();
        let better = match &best {
            None => true,
            Some((bv, bl, bids)) => {
                value > *bv || (value == *bv && (len < *bl || (len == *bl && ids < *bids)))
            }
        };
        if better {
            best = Some((value, len, ids));
        }
    }
    Ok(best.map(|(_, _, ids)| ids).unwrap_or_default())
}

/// VCG payment of winner `agent`: the optimal value the others could reach
/// without it, minus what the other winners actually receive.
///
/// `winners` must be the WDP solution for `valid_bids` at `b_max`. The
/// result lies in `[0, bid_value]`; it is clamped there to absorb
/// floating-point rounding.
pub fn vcg_payment(
    valid_bids: &[Bid],
    winners: &[AgentId],
    agent: AgentId,
    b_max: u64,
) -> Result<f64, MarketError> {
    vcg_payment_with_tolerance(valid_bids, winners, agent, b_max, 0.0)
}

pub fn vcg_payment_with_tolerance(
    valid_bids: &[Bid],
    winners: &[AgentId],
    agent: AgentId,
    b_max: u64,
    tolerance: f64,
) -> Result<f64, MarketError> {
    if !winners.contains(&agent) {
        return Err(MarketError::NotAWinner(agent));
    }
    let own = valid_bids
        .iter()
        .find(|b| b.agent_id == agent)
        .map(|b| b.bid_value)
        .ok_or(MarketError::NotAWinner(agent))?;

    let others: Vec<Bid> = valid_bids
        .iter()
        .filter(|b| b.agent_id != agent)
        .cloned()
        .collect();
    let without = solve_wdp_with_tolerance(&others, b_max, tolerance);
    let value_without = set_value(&others, &without);
    let value_with = set_value(valid_bids, winners);
    let payment = value_without - (value_with - own);
    Ok(payment.clamp(0.0, own))
}

/// One full auction round: budget filtering, winner determination, VCG
/// payments and cost accounting.
pub fn run_auction(bids: &[Bid], b_max: u64) -> Result<AuctionOutcome, MarketError> {
    run_auction_with_tolerance(bids, b_max, 0.0)
}

pub fn run_auction_with_tolerance(
    bids: &[Bid],
    b_max: u64,
    tolerance: f64,
) -> Result<AuctionOutcome, MarketError> {
    let mut seen = std::collections::BTreeSet::new();
    for bid in bids {
        bid.validate()?;
        if !seen.insert(bid.agent_id) {
            return Err(MarketError::DuplicateAgent(bid.agent_id));
        }
    }

    let valid = filter_valid_bids(bids, b_max);
    let winners = solve_wdp_with_tolerance(&valid, b_max, tolerance);
    if winners.is_empty() {
        return Ok(AuctionOutcome::empty());
    }

    let mut payments = BTreeMap::new();
    for &agent in &winners {
        let p = vcg_payment_with_tolerance(&valid, &winners, agent, b_max, tolerance)?;
        payments.insert(agent, p);
    }
    Ok(AuctionOutcome {
        total_cost: set_length(&valid, &winners),
        total_value: set_value(&valid, &winners),
        winners,
        payments,
    })
}
