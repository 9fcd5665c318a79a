//! Reward and MAPPO objective terms, with their derivatives.

/// Largest exponent allowed in [`policy_ratio`].
pub const RATIO_EXP_CLAMP: f64 = 20.0;

/// Per-agent reward: team progress minus the agent's own VCG payment when
/// it won. Losers are never charged, whatever payment is recorded.
pub fn reward(task_delta: f64, payment: f64, is_winner: bool, alpha: f64, beta: f64) -> f64 {
    let penalty = if is_winner { beta * payment } else { 0.0 };
    alpha * task_delta - penalty
}

/// `pi_new(a|o) / pi_old(a|o)` from log-probabilities, exponent clamped to
/// `+-RATIO_EXP_CLAMP`.
pub fn policy_ratio(log_prob_new: f64, log_prob_old: f64) -> f64 {
    (log_prob_new - log_prob_old)
        .clamp(-RATIO_EXP_CLAMP, RATIO_EXP_CLAMP)
        .exp()
}

/// `d ratio / d log_prob_new`; zero where the clamp is active.
pub fn policy_ratio_grad(log_prob_new: f64, log_prob_old: f64) -> f64 {
    let d = log_prob_new - log_prob_old;
    if d.abs() > RATIO_EXP_CLAMP {
        0.0
    } else {
        d.exp()
    }
}

/// Clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)` (maximised).
pub fn clipped_policy_loss(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// `d clipped_policy_loss / d ratio`.
pub fn clipped_policy_loss_grad(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    if ratio * advantage <= clipped * advantage {
        advantage
    } else {
        0.0
    }
}

/// Clipped value loss `max((v - R)^2, (clip(v, v_old +- eps_vf) - R)^2)`.
pub fn value_fn_loss(v_new: f64, v_old: f64, return_target: f64, epsilon_vf: f64) -> f64 {
    let clipped = v_new.clamp(v_old - epsilon_vf, v_old + epsilon_vf);
    (v_new - return_target)
        .powi(2)
        .max((clipped - return_target).powi(2))
}

/// `d value_fn_loss / d v_new`.
pub fn value_fn_loss_grad(v_new: f64, v_old: f64, return_target: f64, epsilon_vf: f64) -> f64 {
    let clipped = v_new.clamp(v_old - epsilon_vf, v_old + epsilon_vf);
    let plain = (v_new - return_target).powi(2);
    let clip = (clipped - return_target).powi(2);
    if plain >= clip {
        2.0 * (v_new - return_target)
    } else if clipped == v_new {
        2.0 * (clipped - return_target)
    } else {
        0.0
    }
}

/// Combined objective `L_clip - c1 L_vf + c2 S` (maximised).
pub fn mappo_objective(policy_loss: f64, value_loss: f64, entropy: f64, c1: f64, c2: f64) -> f64 {
    policy_loss - c1 * value_loss + c2 * entropy
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_cases() {
        assert!((reward(0.5, 1.0, true, 1.0, 0.1) - 0.4).abs() < 1e-15);
        assert_eq!(reward(0.5, 3.0, false, 1.0, 0.1), 0.5);
        assert_eq!(reward(0.0, 0.0, false, 1.0, 0.1), 0.0);
    }

    #[test]
    fn ratio_cases() {
        assert_eq!(policy_ratio(-1.2, -1.2), 1.0);
        let old = (0.2f64).ln();
        assert!((policy_ratio(old + 1.5f64.ln(), old) - 1.5).abs() < 1e-12);
        assert_eq!(policy_ratio(25.0, 0.0), 20.0f64.exp());
        assert_eq!(policy_ratio(-25.0, 0.0), (-20.0f64).exp());
        assert_eq!(policy_ratio_grad(25.0, 0.0), 0.0);
    }

    #[test]
    fn clipped_loss_cases() {
        assert_eq!(clipped_policy_loss(1.0, 2.0, 0.2), 2.0);
        assert!((clipped_policy_loss(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_policy_loss(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert_eq!(clipped_policy_loss_grad(1.5, 1.0, 0.2), 0.0);
        assert_eq!(clipped_policy_loss_grad(0.5, -1.0, 0.2), 0.0);
        // pessimistic branch keeps the gradient
        assert_eq!(clipped_policy_loss_grad(0.5, 1.0, 0.2), 1.0);
    }

    #[test]
    fn clipping_inactive_inside_band() {
        for &r in &[0.8, 0.9, 1.0, 1.13, 1.2] {
            for &a in &[-2.0, 0.5, 3.0] {
                assert_eq!(clipped_policy_loss(r, a, 0.2), r * a);
            }
        }
    }

    #[test]
    fn value_loss_cases() {
        assert_eq!(value_fn_loss(1.0, 1.0, 1.0, 0.2), 0.0);
        assert!((value_fn_loss(1.5, 1.0, 1.0, 0.2) - 0.25).abs() < 1e-15);
        assert!((value_fn_loss(1.1, 1.0, 2.0, 0.2) - 0.81).abs() < 1e-12);
    }

    #[test]
    fn objective_cases() {
        assert!((mappo_objective(2.0, 0.25, 0.5, 0.5, 0.01) - 1.88).abs() < 1e-12);
        assert!((mappo_objective(2.0, 0.25, 0.5, 0.5, 0.0) - 1.875).abs() < 1e-12);
        assert_eq!(mappo_objective(0.0, 0.0, 0.0, 0.5, 0.01), 0.0);
    }
}
