//! Generalized advantage estimation over one agent's trajectory.

use serde::{Deserialize, Serialize};

use super::{MarlError, Transition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advantages {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// GAE(gamma, lambda) with returns `R_t = A_t + V(o_t)`.
///
/// Advantages are returned raw; the trainer normalises them over the whole
/// batch with [`normalize`] before the policy loss.
pub fn compute_advantages(
    trajectory: &[Transition],
    gamma: f64,
    lambda: f64,
) -> Result<Advantages, MarlError> {
    if trajectory.is_empty() {
        return Err(MarlError::EmptyTrajectory);
    }
    let rewards: Vec<f64> = trajectory.iter().map(|t| t.reward).collect();
    let values: Vec<f64> = trajectory.iter().map(|t| t.value_estimate).collect();
    let dones: Vec<bool> = trajectory.iter().map(|t| t.done).collect();
    Ok(gae(&rewards, &values, &dones, gamma, lambda))
}

/// GAE on raw sequences. A step marked done does not bootstrap from the
/// next value; the final step bootstraps from 0.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Advantages {
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value * not_done - values[t];
        running = delta + gamma * lambda * not_done * running;
        advantages[t] = running;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Advantages {
        advantages,
        returns,
    }
}

/// Shifts and scales to mean 0, std 1 (population). Constant input maps
/// to zeros.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in xs.iter_mut() {
        *x = if std > 1e-12 { (*x - mean) / std } else { 0.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Straight-line recursion written from the definition, independent of
    // the backward accumulator above.
    fn reference(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = rewards.len();
        let deltas: Vec<f64> = (0..n)
            .map(|t| {
                let next = if t + 1 < n { values[t + 1] } else { 0.0 };
                rewards[t] + gamma * next - values[t]
            })
            .collect();
        (0..n)
            .map(|t| {
                (t..n)
                    .map(|k| (gamma * lambda).powi((k - t) as i32) * deltas[k])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn single_terminal_step() {
        let a = gae(&[1.5], &[0.4], &[true], 0.99, 0.95);
        assert!((a.advantages[0] - 1.1).abs() < 1e-15);
        assert!((a.returns[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn zero_gamma_is_td_residual() {
        let r = [1.0, -0.5, 2.0];
        let v = [0.3, 0.2, -0.1];
        let a = gae(&r, &v, &[false, false, true], 0.0, 0.95);
        for t in 0..3 {
            assert_eq!(a.advantages[t], r[t] - v[t]);
        }
    }

    #[test]
    fn three_step_matches_reference() {
        let r = [0.25, 0.0, 0.75];
        let v = [0.6, 0.45, 0.8];
        let a = gae(&r, &v, &[false, false, true], 0.99, 0.95);
        let expected = reference(&r, &v, 0.99, 0.95);
        for t in 0..3 {
            assert!((a.advantages[t] - expected[t]).abs() < 1e-12);
            assert!((a.returns[t] - (expected[t] + v[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_trajectory_is_an_error() {
        assert_eq!(
            compute_advantages(&[], 0.99, 0.95),
            Err(MarlError::EmptyTrajectory)
        );
    }

    #[test]
    fn normalization() {
        let mut xs = vec![1.0, 2.0, 3.0, 4.0];
        normalize(&mut xs);
        let mean: f64 = xs.iter().sum::<f64>() / 4.0;
        let var: f64 = xs.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        let mut flat = vec![2.0, 2.0];
        normalize(&mut flat);
        assert_eq!(flat, vec![0.0, 0.0]);
    }
}
