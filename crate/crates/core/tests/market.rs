use dala_core::market::{
    brute_force_wdp, run_auction, set_value, solve_wdp, vcg_payment, AgentId, AuctionInstance, Bid,
};
use proptest::prelude::*;

fn bids_strategy(max_agents: usize) -> impl Strategy<Value = Vec<Bid>> {
    prop::collection::vec((0.0f64..10.0, 1u64..=30), 0..=max_agents).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (v, l))| Bid::new(i as AgentId, v, l).unwrap())
            .collect()
    })
}

/// Coarse values make exact ties common, exercising the tie-break.
fn tied_bids_strategy(max_agents: usize) -> impl Strategy<Value = Vec<Bid>> {
    prop::collection::vec((0u32..4, 1u64..=6), 0..=max_agents).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (v, l))| Bid::new(i as AgentId, v as f64 * 0.5, l).unwrap())
            .collect()
    })
}

fn length(bids: &[Bid], set: &[AgentId]) -> u64 {
    bids.iter()
        .filter(|b| set.contains(&b.agent_id))
        .map(|b| b.message_len)
        .sum()
}

#[test]
fn three_bid_example() {
    let bids = vec![
        Bid::new(0, 3.0, 4).unwrap(),
        Bid::new(1, 2.0, 3).unwrap(),
        Bid::new(2, 2.0, 3).unwrap(),
    ];
    let out = run_auction(&bids, 6).unwrap();
    assert_eq!(out.winners, vec![1, 2]);
    assert_eq!(out.payment(1), 1.0);
    assert_eq!(out.payment(2), 1.0);
    assert_eq!(out.payment(0), 0.0);
    assert_eq!(out.total_cost, 6);
    assert_eq!(out.total_value, 4.0);
}

#[test]
fn instance_json_round_trip() {
    let text = r#"{"bids":[{"agent_id":0,"bid_value":3.0,"message_len":4},
                          {"agent_id":1,"bid_value":2.0,"message_len":3},
                          {"agent_id":2,"bid_value":2.0,"message_len":3}],
                  "b_max":6}"#;
    let inst: AuctionInstance = serde_json::from_str(text).unwrap();
    let out = inst.solve().unwrap();
    let back: dala_core::AuctionOutcome =
        serde_json::from_str(&serde_json::to_string(&out).unwrap()).unwrap();
    assert_eq!(back, out);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn wdp_matches_oracle(bids in bids_strategy(12), b_max in 0u64..=60) {
        let dp = solve_wdp(&bids, b_max);
        let oracle = brute_force_wdp(&bids, b_max).unwrap();
        prop_assert_eq!(set_value(&bids, &dp), set_value(&bids, &oracle));
        prop_assert_eq!(&dp, &oracle);
        prop_assert!(length(&bids, &dp) <= b_max);
    }

    #[test]
    fn wdp_tie_break_matches_oracle(bids in tied_bids_strategy(10), b_max in 0u64..=20) {
        prop_assert_eq!(solve_wdp(&bids, b_max), brute_force_wdp(&bids, b_max).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn payments_are_bounded(bids in bids_strategy(10), b_max in 0u64..=60) {
        let out = run_auction(&bids, b_max).unwrap();
        prop_assert!(out.total_cost <= b_max);
        for b in &bids {
            let p = out.payment(b.agent_id);
            if out.is_winner(b.agent_id) {
                prop_assert!(p >= -1e-9 && p <= b.bid_value + 1e-9);
            } else {
                prop_assert_eq!(p, 0.0);
            }
        }
    }

    #[test]
    fn payment_matches_definition(bids in bids_strategy(8), b_max in 1u64..=40) {
        let out = run_auction(&bids, b_max).unwrap();
        for &w in &out.winners {
            let others: Vec<Bid> = bids.iter().filter(|b| b.agent_id != w).cloned().collect();
            let without = brute_force_wdp(&others, b_max).unwrap();
            let own = bids.iter().find(|b| b.agent_id == w).unwrap().bid_value;
            let expected = (set_value(&others, &without) - (out.total_value - own)).clamp(0.0, own);
            prop_assert!((out.payment(w) - expected).abs() < 1e-9);
            prop_assert_eq!(vcg_payment(&bids, &out.winners, w, b_max).unwrap(), out.payment(w));
        }
    }

    #[test]
    fn truthful_bidding_is_dominant(
        bids in bids_strategy(8),
        b_max in 1u64..=40,
        liar in 0usize..8,
        fake in 0.0f64..12.0,
    ) {
        prop_assume!(!bids.is_empty());
        let liar = liar % bids.len();
        let true_value = bids[liar].bid_value;
        let id = bids[liar].agent_id;
        let utility = |bids: &[Bid]| {
            let out = run_auction(bids, b_max).unwrap();
            if out.is_winner(id) { true_value - out.payment(id) } else { 0.0 }
        };
        let honest = utility(&bids);
        let mut lying = bids.clone();
        lying[liar].bid_value = fake;
        prop_assert!(honest >= utility(&lying) - 1e-9);
    }

    #[test]
    fn auction_is_deterministic(bids in bids_strategy(10), b_max in 0u64..=60) {
        let mut reversed = bids.clone();
        reversed.reverse();
        prop_assert_eq!(run_auction(&bids, b_max).unwrap(), run_auction(&reversed, b_max).unwrap());
    }
}
