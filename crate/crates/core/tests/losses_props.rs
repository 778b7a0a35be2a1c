mod common;

use common::oracles;
use proptest::prelude::*;
use set_encoder::losses::value::{da_info_nce, info_nce, na_rank_net, rank_net};

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>)> {
    (1usize..=10).prop_flat_map(|k| {
        (
            prop::collection::vec(-8.0f64..8.0, k),
            prop::collection::vec(0u8..4, k).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(0usize..4, k),
        )
    })
}

proptest! {
    #[test]
    fn rank_net_matches_double_loop((s, l, _) in instance()) {
        prop_assert_eq!(rank_net(&s, &l).unwrap(), oracles::rank_net(&s, &l));
    }

    #[test]
    fn na_rank_net_matches_double_loop((s, l, c) in instance()) {
        prop_assert_eq!(na_rank_net(&s, &l, &c).unwrap(), oracles::na_rank_net(&s, &l, &c));
    }

    #[test]
    fn na_rank_net_is_nonnegative((s, l, c) in instance()) {
        let na = na_rank_net(&s, &l, &c).unwrap();
        prop_assert!(na >= 0.0);
    }

    #[test]
    fn info_nce_matches_softmax((s, _, _) in instance(), pick in 0usize..10) {
        let p = pick % s.len();
        let a = info_nce(&s, p).unwrap();
        prop_assert!((a - oracles::info_nce(&s, p)).abs() <= 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn info_nce_shift_invariant((s, _, _) in instance(), c in -5.0f64..5.0) {
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        prop_assert!((info_nce(&s, 0).unwrap() - info_nce(&shifted, 0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rank_net_zero_for_uniform_labels(s in prop::collection::vec(-5.0f64..5.0, 1..10)) {
        let l = vec![1.0; s.len()];
        prop_assert_eq!(rank_net(&s, &l).unwrap(), 0.0);
    }

    #[test]
    fn da_terms_add_up(
        s in prop::collection::vec(-4.0f64..4.0, 3..9),
        p in prop::collection::vec(0.01f64..0.99, 9),
        dup in 0usize..8,
    ) {
        let n = s.len();
        let dup = dup % (n - 1);
        let probs = &p[..n];
        let (total, nce, bce) = da_info_nce(&s, probs, 0, dup, false).unwrap();
        prop_assert!((total - nce - bce).abs() < 1e-12);
        prop_assert!((nce - oracles::info_nce(&s[..n - 1], 0)).abs() < 1e-12);
        let expect: f64 = (0..n - 1)
            .map(|i| if i == dup { -probs[i].ln() } else { -(1.0 - probs[i]).ln() })
            .sum();
        prop_assert!((bce - expect).abs() < 1e-12);
    }
}
