use latchlab::bandit::{BanditHistory, Feedback};
use latchlab::cmdp::HashedRandomPolicy;
use latchlab::momentgame::{payoff, solve_game, GameConfig, GameVariant, ScaledMoment};
use latchlab::theory::{
    cliff_gap_decomposition, cliff_gap_formula, corollary_moment, empirical_best_arm, hoeffding_delta,
    observable_lift, theorem1_check, MomentFunction,
};
use latchlab::{ExpertPolicy, RandomStream, TabularCmdp};
use num::{BigRational, One, Zero};
use proptest::prelude::*;

fn instance(seed: u64, ns: usize, na: usize, nc: usize, t: usize) -> (TabularCmdp, ExpertPolicy) {
    let mut s = RandomStream::new(seed, &[]);
    let m = TabularCmdp::random(ns, na, nc, t, &mut s);
    let e = ExpertPolicy::random(&m, &mut s);
    (m, e)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn value_bounds_hold(seed in any::<u64>(), ns in 1usize..=3, na in 1usize..=2, nc in 1usize..=2, t in 1usize..=3) {
        let (m, e) = instance(seed, ns, na, nc, t);
        let pi = HashedRandomPolicy { seed: seed ^ 0x5eed, num_actions: na };
        let report = theorem1_check(&m, &e, &pi, t).unwrap();
        prop_assert!(report.min_slack() >= -1e-9, "{:?}", report.slacks());
    }

    #[test]
    fn payoff_is_odd_in_the_moment(seed in any::<u64>(), on_q in any::<bool>()) {
        let (m, e) = instance(seed, 2, 2, 2, 2);
        let pi = HashedRandomPolicy { seed, num_actions: 2 };
        let variant = if on_q { GameVariant::OnQ } else { GameVariant::Reward };
        let r = MomentFunction::reward(&m);
        let neg = ScaledMoment { inner: Box::new(r.clone()), factor: -1.0 };
        let u = payoff(&pi, &e, &observable_lift(&r, &m, &e), variant, &m, 2).unwrap();
        let v = payoff(&pi, &e, &observable_lift(&neg, &m, &e), variant, &m, 2).unwrap();
        prop_assert!((u + v).abs() < 1e-12);
    }

    #[test]
    fn hoeffding_is_monotone(n in 0usize..200, dn in 1usize..50, gap in 0.0f64..1.0, dg in 0.001f64..0.5) {
        prop_assert!(hoeffding_delta(n + dn, gap) <= hoeffding_delta(n, gap));
        prop_assert!(hoeffding_delta(n, gap + dg) <= hoeffding_delta(n, gap));
        prop_assert!(hoeffding_delta(n, -gap) == hoeffding_delta(n, gap));
        prop_assert!((0.0..=1.0).contains(&hoeffding_delta(n, gap)));
    }

    #[test]
    fn corollary_moment_ignores_order(
        pulls in prop::collection::vec((0usize..4, any::<bool>()), 0..30),
        key in any::<u64>(),
    ) {
        let fb = |p: bool| if p { Feedback::Plus } else { Feedback::Minus };
        let h = BanditHistory::from_pairs(pulls.iter().map(|&(a, p)| (a, fb(p))));
        let mut shuffled = pulls.clone();
        let mut s = RandomStream::new(key, &[]);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, s.below(i + 1));
        }
        let g = BanditHistory::from_pairs(shuffled.iter().map(|&(a, p)| (a, fb(p))));
        for a in 0..4 {
            prop_assert_eq!(corollary_moment(&h, a, 4), corollary_moment(&g, a, 4));
        }
        prop_assert_eq!((0..4).map(|a| corollary_moment(&h, a, 4) as usize).sum::<usize>(), 1);
    }

    #[test]
    fn solved_policy_rows_are_distributions(seed in any::<u64>()) {
        let (m, e) = instance(seed, 2, 2, 2, 2);
        let config = GameConfig { iterations: 50, horizon: 2, ..GameConfig::default() };
        let cert = solve_game(&m, &e, &config).unwrap();
        for (_, row) in cert.average_policy.rows() {
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(cert.duality_gap >= -1e-12);
        prop_assert!(cert.best_response_payoffs.0 >= cert.best_response_payoffs.1 - 1e-12);
    }
}

#[test]
fn empirical_best_arm_examples() {
    let h = BanditHistory::from_pairs([
        (0, Feedback::Plus),
        (0, Feedback::Plus),
        (1, Feedback::Minus),
        (0, Feedback::Plus),
        (1, Feedback::Minus),
    ]);
    assert_eq!((corollary_moment(&h, 0, 2), corollary_moment(&h, 1, 2)), (1, 0));
    let tie = BanditHistory::from_pairs([(1, Feedback::Plus), (0, Feedback::Plus)]);
    assert_eq!(empirical_best_arm(&tie, 2), 0);
    assert_eq!(empirical_best_arm(&BanditHistory::new(), 3), 0);
}

#[test]
fn cliff_formula_identity_and_growth() {
    let mut prev = BigRational::zero();
    for t in 1..=40usize {
        let f = cliff_gap_formula(t);
        assert!(f >= BigRational::zero());
        assert_eq!(f, cliff_gap_decomposition(t));
        if t >= 2 {
            assert!(f > prev, "T={t}");
        }
        prev = f;
    }
    // (1/T) Σ (T - t)/(t + 1) written out for T = 3.
    let third = BigRational::new(1.into(), 3.into());
    let want = third.clone() * (BigRational::new(2.into(), 2.into()) + BigRational::new(1.into(), 3.into()));
    assert_eq!(cliff_gap_formula(3), want);
    assert_eq!(cliff_gap_formula(2), BigRational::new(1.into(), 4.into()));
    assert!(cliff_gap_formula(1).is_zero());
    assert!(cliff_gap_formula(3) < BigRational::one());
}
