use ctrec::ctdg::{
    build_graph, chronological_split, neighbors_before, sort_chronologically, truncate_latest, GraphDims, Interaction,
    SamplingStrategy, TemporalGraph,
};
use ctrec::eval::{candidate_set, ndcg_at_k, recall_at_k, NegativeSamples};
use ctrec::model::{bpr_loss, sample_negative, score, train, ModelParams};
use ctrec::params::Tensor;
use ctrec::pipeline::replay;
use ctrec::rng::stream;
use ctrec::TrainConfig;
use proptest::prelude::*;

const USERS: usize = 4;
const ITEMS: usize = 7;

fn dims() -> GraphDims {
    GraphDims {
        n_users: USERS,
        n_items: ITEMS,
        d_e: 0,
    }
}

/// Random log with integer timestamps, so ties are common.
fn arb_log() -> impl Strategy<Value = Vec<Interaction>> {
    prop::collection::vec((0..USERS, 0..ITEMS, 0u32..15), 1..40).prop_map(|rows| {
        let mut events: Vec<Interaction> = rows
            .into_iter()
            .enumerate()
            .map(|(k, (u, i, t))| Interaction::new(u, i, t as f64, k))
            .collect();
        sort_chronologically(&mut events);
        events
    })
}

fn graph(events: &[Interaction]) -> TemporalGraph {
    build_graph(events, dims()).unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        d: 4,
        d_t: 4,
        epsilon: 3,
        heads: 1,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn seen_before(events: &[Interaction], user: usize, item: usize, t: f64) -> bool {
    events.iter().any(|e| e.user_id == user && e.item_id == item && e.timestamp < t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neighbors_precede_the_query(events in arb_log(), t in 0.0f64..16.0, node in 0..USERS + ITEMS, eps in 1usize..6, seed in any::<u64>()) {
        let g = graph(&events);
        for strategy in [SamplingStrategy::MostRecent, SamplingStrategy::Uniform] {
            let set = neighbors_before(&g, node, t, eps, strategy, &mut stream(seed, "neighbors", &[]));
            prop_assert!(set.entries.len() <= eps);
            prop_assert!(set.entries.iter().all(|n| n.timestamp < t));
            let again = neighbors_before(&g, node, t, eps, strategy, &mut stream(seed, "neighbors", &[]));
            prop_assert_eq!(set.entries, again.entries);
        }
    }

    #[test]
    fn split_partitions_the_log(n in 3usize..200, a in 1u32..8, b in 1u32..8, c in 1u32..8) {
        let events: Vec<Interaction> = (0..n).map(|k| Interaction::new(k % USERS, k % ITEMS, (k / 3) as f64, k)).collect();
        let total = (a + b + c) as f64;
        if let Ok(split) = chronological_split(&events, (a as f64 / total, b as f64 / total, c as f64 / total)) {
            let joined: Vec<Interaction> = [split.train.clone(), split.val, split.test].concat();
            prop_assert_eq!(&joined, &events);
            prop_assert_eq!(truncate_latest(&split.train, 1.0).unwrap(), split.train);
        }
    }

    #[test]
    fn negatives_avoid_the_strict_past(events in arb_log(), pick in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let g = graph(&events);
        let e = pick.get(&events);
        let mut rng = stream(seed, "negatives", &[]);
        match sample_negative(&g, e.user_id, e.timestamp, e.item_id, &mut rng) {
            Ok(neg) => {
                prop_assert_ne!(neg, e.item_id);
                prop_assert!(!seen_before(&events, e.user_id, neg, e.timestamp));
            }
            Err(_) => prop_assert!((0..ITEMS)
                .all(|i| i == e.item_id || seen_before(&events, e.user_id, i, e.timestamp))),
        }
    }

    #[test]
    fn candidates_avoid_the_strict_past(events in arb_log(), pick in any::<prop::sample::Index>(), n in 1usize..10, seed in any::<u64>()) {
        let g = graph(&events);
        let e = pick.get(&events);
        let mut rng = stream(seed, "eval-candidates", &[]);
        let cands = candidate_set(&g, e.user_id, e.timestamp, e.item_id, NegativeSamples::Count(n), &mut rng).unwrap();
        prop_assert_eq!(cands[0], e.item_id);
        prop_assert!(cands.len() <= n + 1);
        let mut rest = cands[1..].to_vec();
        rest.dedup();
        prop_assert_eq!(rest.len(), cands.len() - 1);
        prop_assert!(rest.iter().all(|&i| i != e.item_id && !seen_before(&events, e.user_id, i, e.timestamp)));
    }

    #[test]
    fn metrics_are_ordered(rank in 1usize..100, k in 1usize..50) {
        let (r, n) = (recall_at_k(rank, k), ndcg_at_k(rank, k));
        prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&n));
        prop_assert!(recall_at_k(rank, k + 1) >= r);
        prop_assert!(n <= r);
    }

    #[test]
    fn bpr_loss_is_positive(scores in prop::collection::vec((-30.0f64..30.0, -30.0f64..30.0), 1..20), lambda in 0.0f64..1.0) {
        let (pos, neg): (Vec<f64>, Vec<f64>) = scores.into_iter().unzip();
        let table = Tensor::from_vec(2, 2, vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        prop_assert!(bpr_loss(&pos, &neg, &table, lambda).unwrap() > 0.0);
    }

    #[test]
    fn equal_scores_give_n_ln2(s in -5.0f64..5.0, n in 1usize..30, lambda in 0.0f64..1.0) {
        let table = Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let got = bpr_loss(&vec![s; n], &vec![s; n], &table, lambda).unwrap();
        let want = n as f64 * std::f64::consts::LN_2 + lambda * 5.25;
        prop_assert!((got - want).abs() <= 1e-12 * want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn replayed_memory_stays_bounded(events in arb_log(), seed in 0u64..1000) {
        let params = ModelParams::<f64>::init(dims(), &tiny_config(seed)).unwrap();
        let mut memory = params.new_memory();
        replay(&params, &mut memory, &events).unwrap();
        prop_assert!(memory.states().iter().all(|s| s.abs() < 1.0));
    }
}

#[test]
fn fresh_user_negatives_are_uniform() {
    let events = vec![Interaction::new(1, 0, 0.0, 0)];
    let g = build_graph(&events, GraphDims { n_users: 2, n_items: 10, d_e: 0 }).unwrap();
    let mut rng = stream(11, "negatives", &[]);
    let mut counts = [0usize; 10];
    let draws = 10_000;
    for _ in 0..draws {
        counts[sample_negative(&g, 0, 1.0, 3, &mut rng).unwrap()] += 1;
    }
    assert_eq!(counts[3], 0);
    let expected = draws as f64 / 9.0;
    let chi2: f64 = counts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != 3)
        .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 8 degrees of freedom, p = 0.001
    assert!(chi2 < 26.12, "chi-square {chi2}");
}

#[test]
fn twin_items_score_equally() {
    let d = GraphDims { n_users: 2, n_items: 4, d_e: 0 };
    let events = vec![
        Interaction::new(0, 0, 1.0, 0),
        Interaction::new(1, 1, 2.0, 1),
        Interaction::new(0, 1, 3.0, 2),
    ];
    let g = build_graph(&events, d).unwrap();
    let mut params = ModelParams::<f64>::init(d, &tiny_config(5)).unwrap();
    let table = params.store.get_mut(params.long_table);
    let twin = table.row(d.item_node(2)).to_vec();
    table.row_mut(d.item_node(3)).copy_from_slice(&twin);
    let mut memory = params.new_memory();
    replay(&params, &mut memory, &events).unwrap();
    let a = score(&params, &g, &memory, 0, 2, 4.0).unwrap();
    let b = score(&params, &g, &memory, 0, 3, 4.0).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    let c = score(&params, &g, &memory, 0, 1, 4.0).unwrap();
    assert_ne!(a, c);
}

#[test]
fn training_lowers_the_loss_on_a_separable_toy() {
    let d = GraphDims { n_users: 2, n_items: 2, d_e: 0 };
    let events: Vec<Interaction> = (0..20).map(|k| Interaction::new(k % 2, k % 2, k as f64, k)).collect();
    let g = build_graph(&events, d).unwrap();
    let config = TrainConfig {
        epochs: 50,
        lr: 1e-3,
        ..tiny_config(2)
    };
    let mut params = ModelParams::<f64>::init(d, &config).unwrap();
    let report = train(&mut params, &g, &events, &config).unwrap();
    let (first, last) = (report.epochs[0].loss, report.epochs[49].loss);
    assert!(last < first, "first {first}, last {last}");
}
