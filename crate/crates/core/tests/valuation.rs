use dala_core::env::CandidateMessage;
use dala_core::seed;
use dala_core::valuation::{
    assign_tier, compute_bid, downgrade_to_fit, round_statistics, value_density, value_loss,
    value_loss_grad, DensityConfig, SingleCandidateMode, Tier, TierLengths, TierThresholds,
    ValueNet, ValueNetParams, ValueNetShape,
};
use proptest::prelude::*;

fn literal() -> DensityConfig {
    DensityConfig {
        single_candidate: SingleCandidateMode::Literal,
        ..DensityConfig::default()
    }
}

#[test]
fn density_hand_example() {
    let report = value_density(&[2.0, 4.0, 6.0], 2, 4, &DensityConfig::default()).unwrap();
    let std = (8.0f64 / 3.0).sqrt();
    assert!((report.round_std - std).abs() < 1e-12);
    assert!((report.z_score - 2.0 / (std + 1e-8)).abs() < 1e-12);
    assert!((report.z_score - 1.2247).abs() < 1e-4);
    assert!((report.density - 0.3062).abs() < 1e-4);
    assert_eq!(report.length, 4);
}

#[test]
fn density_at_mean_is_zero() {
    let report = value_density(&[1.0, 2.0, 3.0], 1, 5, &DensityConfig::default()).unwrap();
    assert_eq!(report.z_score, 0.0);
    assert_eq!(report.density, 0.0);
}

#[test]
fn lone_candidate_modes() {
    let lit = value_density(&[0.7], 0, 2, &literal()).unwrap();
    assert_eq!(lit.density, 0.0);
    assert!(!lit.fallback);
    let fb = value_density(&[0.7], 0, 2, &DensityConfig::default()).unwrap();
    assert!(fb.fallback);
    assert!((fb.density - 0.35).abs() < 1e-12);
}

#[test]
fn bid_clamps_at_zero() {
    assert_eq!(compute_bid(0.3062), 0.3062);
    assert_eq!(compute_bid(-0.5), 0.0);
    assert_eq!(compute_bid(0.0), 0.0);
}

#[test]
fn tier_examples() {
    let fallback = TierThresholds::default();
    assert_eq!(assign_tier(0.0, &[0.1, 0.2, 0.3], &fallback), Tier::Silence);
    let round = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
    assert_eq!(assign_tier(0.6, &round, &fallback), Tier::Full);
    assert_eq!(assign_tier(0.5, &round, &fallback), Tier::Full);
    assert_eq!(assign_tier(0.4, &round, &fallback), Tier::Summary);
    assert_eq!(assign_tier(0.1, &round, &fallback), Tier::Keywords);
    assert_eq!(assign_tier(0.5, &[0.5], &fallback), Tier::Summary);
    assert_eq!(assign_tier(0.7, &[0.7], &fallback), Tier::Full);
    assert_eq!(assign_tier(0.1, &[0.1, 0.9], &fallback), Tier::Keywords);
}

/// Tertile by sorted rank: the first third of the sorted positives is
/// Keywords, the middle third Summary, the rest Full.
fn rank_oracle(density: f64, positives: &[f64]) -> Tier {
    let mut sorted = positives.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = sorted
        .iter()
        .position(|d| *d >= density)
        .unwrap_or(sorted.len());
    let n = sorted.len();
    if rank * 3 >= 2 * n {
        Tier::Full
    } else if rank * 3 >= n {
        Tier::Summary
    } else {
        Tier::Keywords
    }
}

#[test]
fn downgrade_examples() {
    let lengths = TierLengths {
        full: 40,
        summary: 8,
        keywords: 2,
    };
    let full = CandidateMessage::new(vec![0], Tier::Full, &lengths);
    assert_eq!(full.token_len, 40);
    let out = downgrade_to_fit(&full, 10, &lengths);
    assert_eq!((out.tier, out.token_len), (Tier::Summary, 8));
    let out = downgrade_to_fit(&full, 0, &lengths);
    assert_eq!((out.tier, out.token_len), (Tier::Silence, 0));
    assert_eq!(downgrade_to_fit(&full, 40, &lengths), full);
}

#[test]
fn value_loss_examples() {
    assert_eq!(value_loss(3.0, 3.0), 0.0);
    assert_eq!(value_loss(2.0, 5.0), 9.0);
    assert_eq!(value_loss_grad(2.0, 5.0), -6.0);
    let h = 1e-5;
    let fd = (value_loss(2.0 + h, 5.0) - value_loss(2.0 - h, 5.0)) / (2.0 * h);
    assert!((fd + 6.0).abs() < 1e-6);
}

fn reference_layer(
    weights: &[f64],
    input: &[f64],
    outputs: usize,
    tanh: bool,
) -> (Vec<f64>, usize) {
    let inputs = input.len();
    let mut out = Vec::new();
    for o in 0..outputs {
        let mut z = weights[outputs * inputs + o];
        for i in 0..inputs {
            z += weights[o * inputs + i] * input[i];
        }
        out.push(if tanh { z.tanh() } else { z });
    }
    (out, outputs * inputs + outputs)
}

fn reference_value(
    params: &ValueNetParams,
    shape: ValueNetShape,
    message: &[f64],
    observation: &[f64],
) -> f64 {
    let (m, _) = reference_layer(
        &params.message_encoder_weights,
        message,
        shape.encoder_width,
        true,
    );
    let (o, _) = reference_layer(
        &params.observation_encoder_weights,
        observation,
        shape.encoder_width,
        true,
    );
    let fused: Vec<f64> = m.into_iter().chain(o).collect();
    let (h, used) = reference_layer(
        &params.fusion_and_head_weights,
        &fused,
        shape.head_width,
        true,
    );
    let (v, _) = reference_layer(&params.fusion_and_head_weights[used..], &h, 1, false);
    v[0]
}

fn unit(dim: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[k] = 1.0;
    v
}

#[test]
fn forward_pass_matches_reference() {
    let shape = ValueNetShape::new(6, 9);
    let net = ValueNet::new(shape);
    let params = net.init(&mut seed::rng(42, &[]));
    for k in 0..6 {
        let msg = unit(6, k);
        let obs = unit(9, (k * 2) % 9);
        let v = net.predict_value(&params, &msg, &obs).unwrap();
        assert!((v - reference_value(&params, shape, &msg, &obs)).abs() < 1e-12);
        assert_eq!(v, net.predict_value(&params, &msg, &obs).unwrap());
    }
    let zeros = vec![0.0; shape.encoder_width];
    let obs = unit(9, 3);
    let (o, _) = reference_layer(
        &params.observation_encoder_weights,
        &obs,
        shape.encoder_width,
        true,
    );
    let fused: Vec<f64> = zeros.into_iter().chain(o).collect();
    let (h, used) = reference_layer(
        &params.fusion_and_head_weights,
        &fused,
        shape.head_width,
        true,
    );
    let (v, _) = reference_layer(&params.fusion_and_head_weights[used..], &h, 1, false);
    assert!((net.predict_state_value(&params, &obs).unwrap() - v[0]).abs() < 1e-12);
}

#[test]
fn zero_params_predict_zero() {
    let net = ValueNet::new(ValueNetShape::new(3, 4));
    let v = net
        .predict_value(&net.zeros(), &[1.0, -2.0, 0.5], &[3.0, 0.0, 1.0, 1.0])
        .unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn dimension_mismatch_is_rejected() {
    let net = ValueNet::new(ValueNetShape::new(3, 4));
    let params = net.zeros();
    assert!(net.predict_value(&params, &[1.0, 2.0], &[0.0; 4]).is_err());
    assert!(net.predict_value(&params, &[0.0; 3], &[0.0; 5]).is_err());
}

fn round_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 2..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn z_scores_are_standardised(values in round_values()) {
        let (_, std) = round_statistics(&values);
        prop_assume!(std > 1e-6);
        let cfg = DensityConfig::default();
        let z: Vec<f64> = (0..values.len())
            .map(|i| value_density(&values, i, 1, &cfg).unwrap().z_score)
            .collect();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let zstd = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((zstd - 1.0).abs() < 1e-8 / std + 1e-9);
    }

    #[test]
    fn density_is_z_over_length(values in round_values(), index in 0usize..12, length in 1u64..50) {
        let index = index % values.len();
        let r = value_density(&values, index, length, &DensityConfig::default()).unwrap();
        prop_assert!(r.round_std >= 0.0);
        prop_assert_eq!(r.density, r.z_score / length as f64);
        prop_assert!(compute_bid(r.density) >= 0.0);
    }

    #[test]
    fn longer_messages_have_smaller_density(values in round_values(), short in 1u64..20, extra in 1u64..20) {
        let (mean, _) = round_statistics(&values);
        let cfg = DensityConfig::default();
        let index = (0..values.len()).find(|&i| values[i] != mean);
        prop_assume!(index.is_some());
        let index = index.unwrap();
        let a = value_density(&values, index, short, &cfg).unwrap().density;
        let b = value_density(&values, index, short + extra, &cfg).unwrap().density;
        prop_assert!(a.abs() > b.abs());
        prop_assert_eq!(a.signum(), b.signum());
    }

    #[test]
    fn affine_rescaling_preserves_density(
        values in round_values(),
        scale in 0.01f64..100.0,
        shift in -100.0f64..100.0,
        length in 1u64..20,
    ) {
        let (_, std) = round_statistics(&values);
        prop_assume!(std > 1e-3);
        let cfg = DensityConfig { epsilon: 0.0, ..literal() };
        let moved: Vec<f64> = values.iter().map(|v| scale * v + shift).collect();
        let positives = |vals: &[f64]| -> Vec<f64> {
            (0..vals.len())
                .map(|i| value_density(vals, i, length, &cfg).unwrap().density)
                .filter(|d| *d > 0.0)
                .collect()
        };
        let (pa, pb) = (positives(&values), positives(&moved));
        for i in 0..values.len() {
            let a = value_density(&values, i, length, &cfg).unwrap().density;
            let b = value_density(&moved, i, length, &cfg).unwrap().density;
            prop_assert!((a - b).abs() < 1e-9);
            let t = TierThresholds::default();
            if (a - b).abs() < 1e-12 {
                prop_assert_eq!(assign_tier(a, &pa, &t), assign_tier(b, &pb, &t));
            }
        }
    }

    #[test]
    fn tiers_are_monotone(
        positives in prop::collection::vec(0.001f64..2.0, 0..10),
        a in -1.0f64..2.5,
        b in -1.0f64..2.5,
    ) {
        let t = TierThresholds::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(assign_tier(lo, &positives, &t) <= assign_tier(hi, &positives, &t));
    }

    #[test]
    fn tertiles_match_rank_oracle(positives in prop::collection::vec(0.001f64..2.0, 3..15), pick in 0usize..15) {
        let d = positives[pick % positives.len()];
        prop_assert_eq!(assign_tier(d, &positives, &TierThresholds::default()), rank_oracle(d, &positives));
    }

    #[test]
    fn downgrade_always_fits(shards in 1usize..4, b_max in 0u64..40, start in 0usize..4) {
        let lengths = TierLengths::default();
        let tier = Tier::ALL[start];
        let msg = CandidateMessage::new((0..shards as u32).collect(), tier, &lengths);
        let out = downgrade_to_fit(&msg, b_max, &lengths);
        prop_assert!(out.token_len <= b_max);
        prop_assert!(out.tier <= tier);
        let mut steps = 0;
        let mut t = tier;
        while t != out.tier {
            t = t.downgrade();
            steps += 1;
        }
        prop_assert!(steps <= 3);
        if msg.token_len <= b_max {
            prop_assert_eq!(out, msg);
        }
    }
}
