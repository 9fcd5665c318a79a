//! Categorical policy over candidate-message actions with action masking.

use rand::{Rng, RngExt};

use crate::nn::{Activation, Mlp, Trace};

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    mlp: Mlp,
}

/// Action distribution for one observation.
#[derive(Debug, Clone)]
pub struct ActionDist {
    pub trace: Trace,
    /// Zero on masked actions.
    pub probs: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ActionDist {
    pub fn log_prob(&self, action: usize) -> f64 {
        self.probs[action].ln()
    }

    /// Shannon entropy in nats over the valid actions.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (a, p) in self.probs.iter().enumerate() {
            if *p > 0.0 {
                acc += p;
                last = a;
                if u < acc {
                    return a;
                }
            }
        }
        last
    }

    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for (a, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = a;
            }
        }
        best
    }

    /// `d log pi(action) / d logits`.
    pub fn log_prob_grad(&self, action: usize) -> Vec<f64> {
        self.probs
            .iter()
            .enumerate()
            .map(|(k, p)| {
                if !self.mask[k] {
                    0.0
                } else if k == action {
                    1.0 - p
                } else {
                    -p
                }
            })
            .collect()
    }

    /// `d entropy / d logits`.
    pub fn entropy_grad(&self) -> Vec<f64> {
        let h = self.entropy();
        self.probs
            .iter()
            .map(|p| if *p > 0.0 { -p * (p.ln() + h) } else { 0.0 })
            .collect()
    }
}

impl PolicyNet {
    pub fn new(observation_dim: usize, hidden: usize, num_actions: usize) -> Self {
        Self {
            mlp: Mlp::new(
                observation_dim,
                &[
                    (hidden, Activation::Tanh),
                    (num_actions, Activation::Identity),
                ],
            ),
        }
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    pub fn num_actions(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Near-uniform initial policy: the logit layer starts small.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mlp.init(rng, 0.01)
    }

    pub fn distribution(&self, params: &[f64], observation: &[f64], mask: &[bool]) -> ActionDist {
        let trace = self.mlp.forward(params, observation);
        let probs = masked_softmax(trace.output(), mask);
        ActionDist {
            trace,
            probs,
            mask: mask.to_vec(),
        }
    }

    /// Accumulates `d objective / d params` given `d objective / d logits`.
    pub fn backward(
        &self,
        params: &[f64],
        dist: &ActionDist,
        grad_logits: &[f64],
        grad_params: &mut [f64],
    ) {
        self.mlp
            .backward(params, &dist.trace, grad_logits, grad_params);
    }
}

pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, m)| if *m { (l - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
