//! Message valuation: the message-conditioned value network, round-level
//! value density, bids and verbosity tiers.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::CandidateMessage;
use crate::nn::{Activation, Mlp, Trace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValuationError {
    #[error("{what} has dimension {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("candidate index {index} out of range for a round of {len} values")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("message length must be at least 1")]
    ZeroLength,
    #[error("parameter block {0} has the wrong size or non-finite entries")]
    BadParams(&'static str),
}

/// Widths of the value network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueNetShape {
    pub message_dim: usize,
    pub observation_dim: usize,
    pub encoder_width: usize,
    pub head_width: usize,
}

impl ValueNetShape {
    pub fn new(message_dim: usize, observation_dim: usize) -> Self {
        Self {
            message_dim,
            observation_dim,
            encoder_width: 32,
            head_width: 32,
        }
    }
}

/// Parameters of one agent's message-value network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNetParams {
    pub message_encoder_weights: Vec<f64>,
    pub observation_encoder_weights: Vec<f64>,
    pub fusion_and_head_weights: Vec<f64>,
}

impl ValueNetParams {
    pub fn num_params(&self) -> usize {
        self.message_encoder_weights.len()
            + self.observation_encoder_weights.len()
            + self.fusion_and_head_weights.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        flat.extend_from_slice(&self.message_encoder_weights);
        flat.extend_from_slice(&self.observation_encoder_weights);
        flat.extend_from_slice(&self.fusion_and_head_weights);
        flat
    }

    pub fn from_flat(net: &ValueNet, flat: &[f64]) -> Self {
        let m = net.message_encoder.num_params();
        let o = net.observation_encoder.num_params();
        Self {
            message_encoder_weights: flat[..m].to_vec(),
            observation_encoder_weights: flat[m..m + o].to_vec(),
            fusion_and_head_weights: flat[m + o..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|p| p.is_finite())
    }
}

/// Output-layer init scale: untrained predictions start close together.
pub const HEAD_INIT_SCALE: f64 = 0.1;

/// `v = g_V(phi_M(message) ++ phi_O(observation))`: two tanh encoders,
/// concatenation, and a two-layer perceptron head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    shape: ValueNetShape,
    message_encoder: Mlp,
    observation_encoder: Mlp,
    head: Mlp,
}

/// Intermediate values of one value-network evaluation.
#[derive(Debug, Clone)]
pub struct ValueTrace {
    message: Option<Trace>,
    observation: Trace,
    head: Trace,
}

impl ValueTrace {
    pub fn value(&self) -> f64 {
        self.head.output()[0]
    }
}

impl ValueNet {
    pub fn new(shape: ValueNetShape) -> Self {
        let w = shape.encoder_width;
        Self {
            shape,
            message_encoder: Mlp::new(shape.message_dim, &[(w, Activation::Tanh)]),
            observation_encoder: Mlp::new(shape.observation_dim, &[(w, Activation::Tanh)]),
            head: Mlp::new(
                2 * w,
                &[
                    (shape.head_width, Activation::Tanh),
                    (1, Activation::Identity),
                ],
            ),
        }
    }

    pub fn shape(&self) -> ValueNetShape {
        self.shape
    }

    pub fn num_params(&self) -> usize {
        self.message_encoder.num_params()
            + self.observation_encoder.num_params()
            + self.head.num_params()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ValueNetParams {
        ValueNetParams {
            message_encoder_weights: self.message_encoder.init(rng, 1.0),
            observation_encoder_weights: self.observation_encoder.init(rng, 1.0),
            fusion_and_head_weights: self.head.init(rng, HEAD_INIT_SCALE),
        }
    }

    pub fn zeros(&self) -> ValueNetParams {
        ValueNetParams {
            message_encoder_weights: vec![0.0; self.message_encoder.num_params()],
            observation_encoder_weights: vec![0.0; self.observation_encoder.num_params()],
            fusion_and_head_weights: vec![0.0; self.head.num_params()],
        }
    }

    pub fn check_params(&self, params: &ValueNetParams) -> Result<(), ValuationError> {
        let blocks = [
            (
                "message_encoder_weights",
                &params.message_encoder_weights,
                &self.message_encoder,
            ),
            (
                "observation_encoder_weights",
                &params.observation_encoder_weights,
                &self.observation_encoder,
            ),
            (
                "fusion_and_head_weights",
                &params.fusion_and_head_weights,
                &self.head,
            ),
        ];
        for (name, block, mlp) in blocks {
            if block.len() != mlp.num_params() || !block.iter().all(|p| p.is_finite()) {
                return Err(ValuationError::BadParams(name));
            }
        }
        Ok(())
    }

    fn check_dims(
        &self,
        message: Option<&[f64]>,
        observation: &[f64],
    ) -> Result<(), ValuationError> {
        if let Some(m) = message {
            if m.len() != self.shape.message_dim {
                return Err(ValuationError::Dimension {
                    what: "message features",
                    got: m.len(),
                    expected: self.shape.message_dim,
                });
            }
        }
        if observation.len() != self.shape.observation_dim {
            return Err(ValuationError::Dimension {
                what: "observation features",
                got: observation.len(),
                expected: self.shape.observation_dim,
            });
        }
        Ok(())
    }

    /// Predicted value of broadcasting `message` given `observation`.
    pub fn predict_value(
        &self,
        params: &ValueNetParams,
        message: &[f64],
        observation: &[f64],
    ) -> Result<f64, ValuationError> {
        self.check_dims(Some(message), observation)?;
        Ok(self.forward(params, Some(message), observation).value())
    }

    /// State value: the network evaluated with a zero message embedding.
    pub fn predict_state_value(
        &self,
        params: &ValueNetParams,
        observation: &[f64],
    ) -> Result<f64, ValuationError> {
        self.check_dims(None, observation)?;
        Ok(self.forward(params, None, observation).value())
    }

    /// Forward pass; `None` replaces the message embedding with zeros.
    pub fn forward(
        &self,
        params: &ValueNetParams,
        message: Option<&[f64]>,
        observation: &[f64],
    ) -> ValueTrace {
        let obs_trace = self
            .observation_encoder
            .forward(&params.observation_encoder_weights, observation);
        self.forward_with_observation(params, message, obs_trace)
    }

    /// Forward pass reusing an already-encoded observation.
    pub fn forward_with_observation(
        &self,
        params: &ValueNetParams,
        message: Option<&[f64]>,
        observation: Trace,
    ) -> ValueTrace {
        let msg_trace = message.map(|m| {
            self.message_encoder
                .forward(&params.message_encoder_weights, m)
        });
        let mut fused = match &msg_trace {
            Some(t) => t.output().to_vec(),
            None => vec![0.0; self.shape.encoder_width],
        };
        fused.extend_from_slice(observation.output());
        let head = self.head.forward(&params.fusion_and_head_weights, &fused);
        ValueTrace {
            message: msg_trace,
            observation,
            head,
        }
    }

    pub fn encode_observation(&self, params: &ValueNetParams, observation: &[f64]) -> Trace {
        self.observation_encoder
            .forward(&params.observation_encoder_weights, observation)
    }

    /// Accumulates `grad_value * d v / d params` into `grads`.
    pub fn backward(
        &self,
        params: &ValueNetParams,
        trace: &ValueTrace,
        grad_value: f64,
        grads: &mut ValueNetParams,
    ) {
        let w = self.shape.encoder_width;
        let grad_fused = self.head.backward(
            &params.fusion_and_head_weights,
            &trace.head,
            &[grad_value],
            &mut grads.fusion_and_head_weights,
        );
        if let Some(msg) = &trace.message {
            self.message_encoder.backward(
                &params.message_encoder_weights,
                msg,
                &grad_fused[..w],
                &mut grads.message_encoder_weights,
            );
        }
        self.observation_encoder.backward(
            &params.observation_encoder_weights,
            &trace.observation,
            &grad_fused[w..],
            &mut grads.observation_encoder_weights,
        );
    }
}

/// What to do when a round has a single candidate, where the z-score is
/// identically zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleCandidateMode {
    /// Keep the literal normalisation (density 0).
    Literal,
    /// Use `raw_value / (|raw_value_scale| * length)`.
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    pub epsilon: f64,
    pub single_candidate: SingleCandidateMode,
    pub raw_value_scale: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            single_candidate: SingleCandidateMode::Fallback,
            raw_value_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub raw_value: f64,
    pub z_score: f64,
    pub density: f64,
    pub round_mean: f64,
    pub round_std: f64,
    pub length: u64,
    /// The single-candidate fallback produced this density.
    pub fallback: bool,
}

/// Mean and population standard deviation.
pub fn round_statistics(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Round-normalised value per token of candidate `index`.
pub fn value_density(
    values: &[f64],
    index: usize,
    length: u64,
    config: &DensityConfig,
) -> Result<DensityReport, ValuationError> {
    if index >= values.len() {
        return Err(ValuationError::IndexOutOfRange {
            index,
            len: values.len(),
        });
    }
    let (mean, std) = round_statistics(values);
    Ok(density_from_stats(
        values[index],
        mean,
        std,
        values.len(),
        length,
        config,
    )?)
}

/// [`value_density`] with precomputed round statistics.
pub fn density_from_stats(
    raw_value: f64,
    round_mean: f64,
    round_std: f64,
    round_size: usize,
    length: u64,
    config: &DensityConfig,
) -> Result<DensityReport, ValuationError> {
    if length == 0 {
        return Err(ValuationError::ZeroLength);
    }
    let lone = round_size == 1 && config.single_candidate == SingleCandidateMode::Fallback;
    let z_score = if lone {
        raw_value / config.raw_value_scale.abs()
    } else {
        (raw_value - round_mean) / (round_std + config.epsilon)
    };
    Ok(DensityReport {
        raw_value,
        z_score,
        density: z_score / length as f64,
        round_mean,
        round_std,
        length,
        fallback: lone,
    })
}

/// Bid for a message: only positive densities enter the auction.
pub fn compute_bid(density: f64) -> f64 {
    density.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    Silence,
    Keywords,
    Summary,
    Full,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Full, Tier::Summary, Tier::Keywords, Tier::Silence];

    /// Next cheaper tier; `Silence` stays put.
    pub fn downgrade(self) -> Tier {
        match self {
            Tier::Full => Tier::Summary,
            Tier::Summary => Tier::Keywords,
            Tier::Keywords | Tier::Silence => Tier::Silence,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Full => "Full",
            Tier::Summary => "Summary",
            Tier::Keywords => "Keywords",
            Tier::Silence => "Silence",
        }
    }
}

/// Tokens per shard at each tier. Silence is always 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierLengths {
    pub full: u64,
    pub summary: u64,
    pub keywords: u64,
}

impl Default for TierLengths {
    fn default() -> Self {
        Self {
            full: 8,
            summary: 4,
            keywords: 2,
        }
    }
}

impl TierLengths {
    pub fn per_shard(&self, tier: Tier) -> u64 {
        match tier {
            Tier::Full => self.full,
            Tier::Summary => self.summary,
            Tier::Keywords => self.keywords,
            Tier::Silence => 0,
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.full > self.summary && self.summary > self.keywords && self.keywords > 0
    }
}

/// Fixed density thresholds used when a round has too few positive
/// densities for tertiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierThresholds {
    pub full: f64,
    pub summary: f64,
    pub keywords: f64,
}

impl Default for TierThresholds {
    fn default() -> Self {
        Self {
            full: 0.6,
            summary: 0.3,
            keywords: 0.0,
        }
    }
}

impl TierThresholds {
    pub fn is_ordered(&self) -> bool {
        self.full > self.summary && self.summary > self.keywords && self.keywords >= 0.0
    }
}

/// Verbosity tier for a message of the given density.
///
/// Non-positive densities are silent. Otherwise the density is ranked
/// against the round's positive densities: top third Full, middle third
/// Summary, bottom third Keywords. Rounds with fewer than three positive
/// densities use `fallback` instead.
pub fn assign_tier(
    density: f64,
    round_positive_densities: &[f64],
    fallback: &TierThresholds,
) -> Tier {
    if density.is_nan() || density <= 0.0 {
        return Tier::Silence;
    }
    let positives: Vec<f64> = round_positive_densities
        .iter()
        .copied()
        .filter(|d| *d > 0.0)
        .collect();
    if positives.len() < 3 {
        return if density >= fallback.full {
            Tier::Full
        } else if density >= fallback.summary {
            Tier::Summary
        } else if density >= fallback.keywords {
            Tier::Keywords
        } else {
            Tier::Silence
        };
    }
    let n = positives.len();
    let below = positives.iter().filter(|d| **d < density).count();
    if 3 * below >= 2 * n {
        Tier::Full
    } else if 3 * below >= n {
        Tier::Summary
    } else {
        Tier::Keywords
    }
}

/// Compresses a message one tier at a time until it fits `b_max`.
pub fn downgrade_to_fit(
    message: &CandidateMessage,
    b_max: u64,
    lengths: &TierLengths,
) -> CandidateMessage {
    let mut out = message.clone();
    while out.token_len > b_max {
        out = out.with_tier(out.tier.downgrade(), lengths);
    }
    out
}

/// Squared error of a value prediction.
pub fn value_loss(predicted: f64, realized_return: f64) -> f64 {
    (predicted - realized_return).powi(2)
}

/// `d value_loss / d predicted`.
pub fn value_loss_grad(predicted: f64, realized_return: f64) -> f64 {
    2.0 * (predicted - realized_return)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_params_predict_zero() {
        let net = ValueNet::new(ValueNetShape::new(3, 5));
        let v = net
            .predict_value(&net.zeros(), &[1.0, 2.0, 3.0], &[0.5; 5])
            .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = ValueNet::new(ValueNetShape::new(3, 5));
        let p = net.zeros();
        assert!(matches!(
            net.predict_value(&p, &[1.0], &[0.0; 5]),
            Err(ValuationError::Dimension {
                what: "message features",
                ..
            })
        ));
        assert!(matches!(
            net.predict_value(&p, &[1.0; 3], &[0.0; 4]),
            Err(ValuationError::Dimension {
                what: "observation features",
                ..
            })
        ));
    }

    #[test]
    fn prediction_is_deterministic() {
        let net = ValueNet::new(ValueNetShape::new(3, 4));
        let p = net.init(&mut seed::rng(42, &[]));
        let a = net
            .predict_value(&p, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0])
            .unwrap();
        let b = net
            .predict_value(&p, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn density_of_top_candidate() {
        let r = value_density(&[2.0, 4.0, 6.0], 2, 4, &DensityConfig::default()).unwrap();
        let std = (8.0f64 / 3.0).sqrt();
        assert!(close(r.round_mean, 4.0, 1e-15));
        assert!(close(r.round_std, std, 1e-15));
        assert!(close(r.z_score, 2.0 / (std + 1e-8), 1e-15));
        assert!(close(r.z_score, 1.224744871, 1e-8));
        assert!(close(r.density, 0.306186218, 1e-8));
        assert!(!r.fallback);
    }

    #[test]
    fn density_at_mean_is_zero() {
        let r = value_density(&[1.0, 3.0, 2.0], 2, 7, &DensityConfig::default()).unwrap();
        assert_eq!(r.z_score, 0.0);
        assert_eq!(r.density, 0.0);
    }

    #[test]
    fn lone_candidate_literal_and_fallback() {
        let literal = DensityConfig {
            single_candidate: SingleCandidateMode::Literal,
            ..DensityConfig::default()
        };
        let r = value_density(&[0.8], 0, 4, &literal).unwrap();
        assert_eq!(r.density, 0.0);
        assert_eq!(r.round_std, 0.0);
        assert!(!r.fallback);

        let fb = DensityConfig {
            raw_value_scale: -2.0,
            ..DensityConfig::default()
        };
        let r = value_density(&[0.8], 0, 4, &fb).unwrap();
        assert!(r.fallback);
        assert!(close(r.density, 0.8 / (2.0 * 4.0), 1e-15));
    }

    #[test]
    fn density_errors() {
        let cfg = DensityConfig::default();
        assert_eq!(
            value_density(&[1.0], 1, 3, &cfg),
            Err(ValuationError::IndexOutOfRange { index: 1, len: 1 })
        );
        assert_eq!(
            value_density(&[1.0, 2.0], 0, 0, &cfg),
            Err(ValuationError::ZeroLength)
        );
    }

    #[test]
    fn bids_clamp_at_zero() {
        assert_eq!(compute_bid(0.3062), 0.3062);
        assert_eq!(compute_bid(-0.5), 0.0);
        assert_eq!(compute_bid(0.0), 0.0);
    }

    #[test]
    fn tiers_from_tertiles_and_fallback() {
        let t = TierThresholds::default();
        let round = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(assign_tier(0.0, &round, &t), Tier::Silence);
        assert_eq!(assign_tier(-0.2, &round, &t), Tier::Silence);
        assert_eq!(assign_tier(0.6, &round, &t), Tier::Full);
        assert_eq!(assign_tier(0.5, &round, &t), Tier::Full);
        assert_eq!(assign_tier(0.4, &round, &t), Tier::Summary);
        assert_eq!(assign_tier(0.3, &round, &t), Tier::Summary);
        assert_eq!(assign_tier(0.2, &round, &t), Tier::Keywords);
        assert_eq!(assign_tier(0.1, &round, &t), Tier::Keywords);

        assert_eq!(assign_tier(0.5, &[0.5], &t), Tier::Summary);
        assert_eq!(assign_tier(0.6, &[0.5, 0.6], &t), Tier::Full);
        assert_eq!(assign_tier(0.05, &[], &t), Tier::Keywords);
    }

    fn message(shards: usize, tier: Tier) -> CandidateMessage {
        CandidateMessage::new((0..shards as u32).collect(), tier, &TierLengths::default())
    }

    #[test]
    fn downgrade_walks_tiers() {
        let lengths = TierLengths {
            full: 40,
            summary: 8,
            keywords: 2,
        };
        let full = CandidateMessage::new(vec![3], Tier::Full, &lengths);
        let out = downgrade_to_fit(&full, 10, &lengths);
        assert_eq!(out.tier, Tier::Summary);
        assert_eq!(out.token_len, 8);

        let out = downgrade_to_fit(&message(2, Tier::Full), 0, &TierLengths::default());
        assert_eq!(out.tier, Tier::Silence);
        assert_eq!(out.token_len, 0);

        let m = message(1, Tier::Full);
        assert_eq!(downgrade_to_fit(&m, 8, &TierLengths::default()), m);
    }

    #[test]
    fn squared_value_loss() {
        assert_eq!(value_loss(3.0, 3.0), 0.0);
        assert_eq!(value_loss(2.0, 5.0), 9.0);
        assert_eq!(value_loss_grad(2.0, 5.0), -6.0);
    }

    #[test]
    fn longer_message_has_lower_density() {
        let values = [0.1, 0.9, 0.4];
        let cfg = DensityConfig::default();
        let short = value_density(&values, 1, 4, &cfg).unwrap();
        let long = value_density(&values, 1, 8, &cfg).unwrap();
        assert!(long.density < short.density);
    }
}
