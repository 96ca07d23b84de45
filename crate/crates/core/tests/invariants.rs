use proptest::prelude::*;

use kvcomp_core::numerics::{seeded_random_matrix, softmax_rows};
use kvcomp_core::policies::{compresskv_policy, snapkv_policy, streaming_policy};
use kvcomp_core::{EvictionDecision, GQAModel, HeadScoreTable, ModelConfig, PolicyParams};

fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..=3, prop_oneof![Just(1usize), Just(2), Just(4)], 1usize..=2, prop_oneof![Just(4usize), Just(8)], any::<u64>())
        .prop_map(|(layers, kv, g, d, seed)| (layers, kv * g, kv, d, seed))
}

fn model(g: (usize, usize, usize, usize, u64)) -> GQAModel {
    GQAModel::seeded(ModelConfig::new(g.0, g.1, g.2, g.3, g.4).unwrap()).unwrap()
}

fn keep_subset(n: usize, bits: &[bool]) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..n).filter(|&i| bits[i % bits.len()]).collect();
    if keep.is_empty() {
        keep.push(n - 1);
    }
    keep
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_stochastic_and_causal(n in 1usize..40, seed in any::<u64>(), scale in 0.1f64..200.0) {
        let p = softmax_rows(&seeded_random_matrix(n, n, seed, scale).unwrap(), Some(0)).unwrap();
        for (i, row) in p.row_iter().enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn prefill_trace_is_valid(g in geometry(), n in 1usize..48) {
        let m = model(g);
        let prompt = seeded_random_matrix(n, m.config().hidden_dim, g.4 ^ 1, 1.0).unwrap();
        let pre = m.prefill(&prompt).unwrap();
        pre.trace.validate(1e-9).unwrap();
        prop_assert_eq!(pre.trace.prompt_len, n);
    }

    #[test]
    fn eviction_tracks_original_positions(g in geometry(), n in 2usize..40, a in proptest::collection::vec(any::<bool>(), 1..9), b in proptest::collection::vec(any::<bool>(), 1..9)) {
        let m = model(g);
        let hd = m.config().hidden_dim;
        let mut pre = m.prefill(&seeded_random_matrix(n, hd, 5, 1.0).unwrap()).unwrap();
        let first = keep_subset(n, &a);
        let second: Vec<usize> = keep_subset(first.len(), &b).into_iter().map(|i| first[i]).collect();
        for l in 0..g.0 {
            pre.cache.apply_eviction(&EvictionDecision::new(l, first.clone()).unwrap()).unwrap();
            pre.cache.apply_eviction(&EvictionDecision::new(l, second.clone()).unwrap()).unwrap();
        }
        let x = seeded_random_matrix(1, hd, 6, 1.0).unwrap();
        let step = m.decode_step(&mut pre.cache, x.row(0)).unwrap();
        let mut expect = second.clone();
        expect.push(n);
        for l in 0..g.0 {
            prop_assert_eq!(pre.cache.layer(l).positions(), &expect[..]);
            prop_assert_eq!(step.attention[l][0].len(), expect.len());
        }
    }

    #[test]
    fn policy_keep_sets_are_well_formed(g in geometry(), n in 12usize..64, budget in 12usize..80, seed in any::<u64>()) {
        let m = model(g);
        let trace = m.prefill(&seeded_random_matrix(n, m.config().hidden_dim, seed, 1.0).unwrap()).unwrap().trace;
        let params = PolicyParams { top_k_heads: 2, ..Default::default() };
        let table = HeadScoreTable::uniform(g.0, g.1);
        let expect_len = budget.min(n);
        for l in 0..g.0 {
            let decisions = [
                streaming_policy(l, n, budget, &params).unwrap(),
                snapkv_policy(&trace, l, budget, &params).unwrap(),
                compresskv_policy(&trace, l, budget, &params, &table).unwrap(),
            ];
            for (i, d) in decisions.iter().enumerate() {
                prop_assert_eq!(d.len(), expect_len);
                prop_assert!(d.keep_indices.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(*d.keep_indices.last().unwrap() < n);
                let tail = if i == 0 { expect_len - params.sink.min(expect_len) } else { params.window };
                prop_assert!((n.saturating_sub(tail)..n).all(|p| d.contains(p)));
                if i == 0 {
                    prop_assert!((0..params.sink.min(expect_len)).all(|p| d.contains(p)));
                }
            }
        }
    }

    #[test]
    fn compresskv_ignores_table_scale(g in geometry(), n in 16usize..64, budget in 9usize..16, c in 0.01f64..100.0, seed in any::<u64>()) {
        let m = model(g);
        let trace = m.prefill(&seeded_random_matrix(n, m.config().hidden_dim, seed, 1.0).unwrap()).unwrap().trace;
        let scores = seeded_random_matrix(g.0, g.1, seed ^ 7, 1.0).unwrap();
        let s: Vec<Vec<f64>> = scores.row_iter().map(|r| r.iter().map(|v| v.abs()).collect()).collect();
        let scaled: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let zeros = vec![vec![0.0; g.1]; g.0];
        let a = HeadScoreTable::from_scores(s, zeros.clone()).unwrap();
        let b = HeadScoreTable::from_scores(scaled, zeros).unwrap();
        let params = PolicyParams { top_k_heads: 2, ..Default::default() };
        for l in 0..g.0 {
            prop_assert_eq!(
                compresskv_policy(&trace, l, budget, &params, &a).unwrap(),
                compresskv_policy(&trace, l, budget, &params, &b).unwrap()
            );
        }
    }
}
