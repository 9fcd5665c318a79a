//! Per-round market records and the aggregations computed from them.
//!
//! Records are written as one JSON object per line (`rounds.jsonl`);
//! summaries as comma-separated tables.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::AgentId;
use crate::valuation::{DensityReport, Tier};

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("no decisions to aggregate")]
    Empty,
    #[error("record line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One agent's part in an auction round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: AgentId,
    /// Candidate messages the agent could have proposed.
    pub candidates: usize,
    /// Policy action; 0 is "no proposal".
    pub action: usize,
    pub shard_ids: Vec<u32>,
    /// The proposed message carries at least one critical shard.
    pub critical: bool,
    pub density: Option<DensityReport>,
    /// Tier after budget compression; Silence when nothing was bid.
    pub tier: Tier,
    pub bid: f64,
    pub won: bool,
    pub payment: f64,
    pub message_len: u64,
}

impl AgentRecord {
    pub fn broadcast_tier(&self) -> Tier {
        if self.won {
            self.tier
        } else {
            Tier::Silence
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub epoch: u32,
    pub episode_id: u64,
    pub round: u32,
    pub effective_cap: u64,
    pub total_cost: u64,
    pub task_delta: f64,
    pub progress: f64,
    pub agents: Vec<AgentRecord>,
    pub candidate_values: ValueTally,
}

/// Raw values of every candidate valued in a round, split by whether the
/// candidate carries a critical shard.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ValueTally {
    pub critical_sum: f64,
    pub critical_count: u64,
    pub non_critical_sum: f64,
    pub non_critical_count: u64,
}

impl ValueTally {
    pub fn add(&mut self, critical: bool, value: f64) {
        if critical {
            self.critical_sum += value;
            self.critical_count += 1;
        } else {
            self.non_critical_sum += value;
            self.non_critical_count += 1;
        }
    }

    pub fn merge(&mut self, other: &ValueTally) {
        self.critical_sum += other.critical_sum;
        self.critical_count += other.critical_count;
        self.non_critical_sum += other.non_critical_sum;
        self.non_critical_count += other.non_critical_count;
    }
}

/// Fractions of agent-round decisions per tier. Only rounds where the agent
/// had something to propose count; the decision is the tier it actually
/// broadcast, Silence unless it won the auction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyDistribution {
    pub full: f64,
    pub summary: f64,
    pub keywords: f64,
    pub silence: f64,
    pub decisions: u64,
}

impl StrategyDistribution {
    pub fn fraction(&self, tier: Tier) -> f64 {
        match tier {
            Tier::Full => self.full,
            Tier::Summary => self.summary,
            Tier::Keywords => self.keywords,
            Tier::Silence => self.silence,
        }
    }
}

pub fn strategy_distribution<'a, I>(records: I) -> Result<StrategyDistribution, TelemetryError>
where
    I: IntoIterator<Item = &'a RoundRecord>,
{
    let mut counts = [0u64; 4];
    for record in records {
        for agent in record.agents.iter().filter(|a| a.candidates > 0) {
            counts[agent.broadcast_tier() as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(TelemetryError::Empty);
    }
    let f = |t: Tier| counts[t as usize] as f64 / total as f64;
    Ok(StrategyDistribution {
        full: f(Tier::Full),
        summary: f(Tier::Summary),
        keywords: f(Tier::Keywords),
        silence: f(Tier::Silence),
        decisions: total,
    })
}

/// Mean predicted value of proposed messages, split by criticality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueGapPoint {
    pub epoch: u32,
    pub critical: f64,
    pub non_critical: f64,
}

impl ValueGapPoint {
    pub fn gap(&self) -> f64 {
        self.critical - self.non_critical
    }
}

/// Per-epoch mean raw value over candidates with at least one critical
/// shard versus none. Epochs lacking either kind are skipped.
pub fn value_gap_curve<'a, I>(records: I) -> Vec<ValueGapPoint>
where
    I: IntoIterator<Item = &'a RoundRecord>,
{
    let mut tallies: BTreeMap<u32, ValueTally> = BTreeMap::new();
    for record in records {
        tallies
            .entry(record.epoch)
            .or_default()
            .merge(&record.candidate_values);
    }
    tallies
        .into_iter()
        .filter(|(_, t)| t.critical_count > 0 && t.non_critical_count > 0)
        .map(|(epoch, t)| ValueGapPoint {
            epoch,
            critical: t.critical_sum / t.critical_count as f64,
            non_critical: t.non_critical_sum / t.non_critical_count as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAccounting {
    pub tokens_spent: u64,
    pub episodes: u64,
    pub per_episode_mean: f64,
    /// Tokens spent on winning messages of each tier.
    pub per_tier: BTreeMap<Tier, u64>,
}

pub fn token_accounting<'a, I>(records: I) -> TokenAccounting
where
    I: IntoIterator<Item = &'a RoundRecord>,
{
    let mut tokens_spent = 0;
    let mut episodes = std::collections::BTreeSet::new();
    let mut per_tier: BTreeMap<Tier, u64> = Tier::ALL.iter().map(|t| (*t, 0)).collect();
    for record in records {
        episodes.insert((record.epoch, record.episode_id));
        for agent in record.agents.iter().filter(|a| a.won) {
            tokens_spent += agent.message_len;
            *per_tier.entry(agent.tier).or_default() += agent.message_len;
        }
    }
    let n = episodes.len() as u64;
    TokenAccounting {
        tokens_spent,
        episodes: n,
        per_episode_mean: if n == 0 {
            0.0
        } else {
            tokens_spent as f64 / n as f64
        },
        per_tier,
    }
}

/// First line of a telemetry file: identifies the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryHeader {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
}

impl TelemetryHeader {
    pub fn new(config: &crate::config::RunConfig) -> Self {
        Self {
            run_id: config.run_id.clone(),
            seed: config.seed,
            config_hash: config.hash(),
        }
    }
}

pub fn write_jsonl<W: Write>(
    mut out: W,
    header: Option<&TelemetryHeader>,
    records: &[RoundRecord],
) -> io::Result<()> {
    if let Some(h) = header {
        serde_json::to_writer(&mut out, h)?;
        out.write_all(b"\n")?;
    }
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<RoundRecord>, TelemetryError> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty()
            || (i == 0 && serde_json::from_str::<TelemetryHeader>(&line).is_ok())
        {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|source| TelemetryError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(records)
}

/// Two-column `metric,value` table.
pub fn write_summary_csv<W: Write>(out: W, rows: &[(String, String)]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value"])?;
    for (k, v) in rows {
        w.write_record([k, v])?;
    }
    w.flush()
}
