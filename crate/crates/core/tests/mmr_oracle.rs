mod common;

use common::{oracle_alpha, oracle_mmr, seq};
use dat_core::mmr::{first_pick_is_max_relevance, mmr_select};
use dat_core::FilterConfig;
use proptest::prelude::*;

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 1..=8)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn instance() -> impl Strategy<Value = (Vec<String>, Vec<Vec<String>>, usize, f64)> {
    (
        sentence(),
        prop::collection::vec(sentence(), 1..=8),
        1usize..=4,
        prop::sample::select(vec![0.0, 0.5, 1.0]),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn greedy_selection_matches_oracle((q, cands, k, lambda) in instance()) {
        let config = FilterConfig::new(k.max(cands.len()), k, lambda).unwrap();
        let seqs: Vec<_> = cands.iter().map(|c| seq(c)).collect();
        let trace = mmr_select(&seq(&q), &seqs, &config).unwrap();
        prop_assert_eq!(&trace.selected, &oracle_mmr(&q, &cands, k, lambda));
        prop_assert_eq!(trace.shortfall, cands.len() < k);
        prop_assert_eq!(trace.steps.len(), trace.selected.len());
        for step in &trace.steps {
            prop_assert_eq!(step.relevance, oracle_alpha(&q, &cands[step.index]));
        }
    }

    #[test]
    fn first_pick_ignores_lambda((q, cands, k, lambda) in instance()) {
        let seqs: Vec<_> = cands.iter().map(|c| seq(c)).collect();
        let config = FilterConfig::new(k.max(cands.len()), k, lambda).unwrap();
        let trace = mmr_select(&seq(&q), &seqs, &config).unwrap();
        prop_assert_eq!(trace.selected[0], first_pick_is_max_relevance(&seq(&q), &seqs).unwrap());
        prop_assert_eq!(trace.steps[0].diversity, 0.0);
    }

    #[test]
    fn zero_lambda_is_top_k_by_relevance((q, cands, k, _l) in instance()) {
        let seqs: Vec<_> = cands.iter().map(|c| seq(c)).collect();
        let config = FilterConfig::new(k.max(cands.len()), k, 0.0).unwrap();
        let trace = mmr_select(&seq(&q), &seqs, &config).unwrap();
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| oracle_alpha(&q, &cands[b]).partial_cmp(&oracle_alpha(&q, &cands[a])).unwrap());
        order.truncate(k);
        prop_assert_eq!(trace.selected, order);
    }

    #[test]
    fn selection_is_distinct_and_sized((q, cands, k, lambda) in instance()) {
        let seqs: Vec<_> = cands.iter().map(|c| seq(c)).collect();
        let config = FilterConfig::new(k.max(cands.len()), k, lambda).unwrap();
        let trace = mmr_select(&seq(&q), &seqs, &config).unwrap();
        let mut sorted = trace.selected.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k.min(cands.len()));
    }
}

#[test]
fn empty_candidate_list_is_an_error() {
    let config = FilterConfig::default();
    assert!(mmr_select(&dat_core::tokenize("a b"), &[], &config).is_err());
}
