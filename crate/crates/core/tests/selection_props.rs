use ndarray::Array2;
use proptest::prelude::*;

use tgdial::bridging::{max_pool, select_hard, select_soft, KeywordDistribution, Pick};
use tgdial::metrics::{bleu, distinct, word_f1};

fn distribution() -> impl Strategy<Value = KeywordDistribution> {
    (
        prop::collection::vec(0.0..=1.0f64, 1..30),
        prop::collection::vec(0.0..=1.0f64, 1..30),
    )
        .prop_map(|(type_probs, topic_probs)| KeywordDistribution {
            type_probs,
            topic_probs,
        })
}

fn kth_largest(v: &[f64], k: usize) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s[k - 1]
}

fn tokens() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::sample::select(vec!["a", "b", "c", "d", "."]).prop_map(str::to_string),
        0..12,
    )
}

proptest! {
    #[test]
    fn hard_picks_survive_a_low_enough_threshold(dist in distribution(), m_seed in 0usize..100, frac in 0.0..=1.0f64) {
        let m = 1 + m_seed % dist.type_probs.len().min(dist.topic_probs.len());
        let bound = kth_largest(&dist.type_probs, m).min(kth_largest(&dist.topic_probs, m));
        let hard = select_hard(&dist, m).unwrap();
        let soft = select_soft(&dist, bound * frac).unwrap();
        prop_assert!(hard.type_ids().iter().all(|id| soft.type_ids().contains(id)));
        prop_assert!(hard.topic_ids().iter().all(|id| soft.topic_ids().contains(id)));
        prop_assert_eq!(hard.type_picks.len(), m);
    }

    #[test]
    fn zero_threshold_keeps_everything(dist in distribution()) {
        let soft = select_soft(&dist, 0.0).unwrap();
        prop_assert_eq!(soft.type_picks.len(), dist.type_probs.len());
        prop_assert_eq!(soft.topic_picks.len(), dist.topic_probs.len());
        prop_assert_eq!(soft.fallback, [false, false]);
    }

    #[test]
    fn max_pool_ignores_order(
        values in prop::collection::vec(-3.0..3.0f64, 24),
        picks in prop::collection::vec((0usize..6, 0.0..=1.0f64), 1..8),
        rotate in 0usize..8,
    ) {
        let emb = Array2::from_shape_vec((6, 4), values).unwrap();
        let mut picks: Vec<Pick> = picks.into_iter().map(|(id, weight)| Pick { id, weight }).collect();
        let a = max_pool(&picks, &emb).unwrap();
        let k = rotate % picks.len();
        picks.rotate_left(k);
        picks.reverse();
        prop_assert_eq!(a, max_pool(&picks, &emb).unwrap());
    }

    #[test]
    fn overlap_metrics_are_bounded(a in tokens(), b in tokens()) {
        let f = word_f1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f - word_f1(&b, &a)).abs() < 1e-12);
        for n in [1, 2] {
            prop_assert!((0.0..=1.0).contains(&bleu(&a, &b, n)));
        }
        let d = distinct(&[a.clone(), b.clone()], 1);
        prop_assert!((0.0..=1.0).contains(&d));
    }
}
