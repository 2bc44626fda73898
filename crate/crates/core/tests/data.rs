use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use selfgnn::data::{
    build_instance_sequences, core_filter, load_interactions, partition_intervals, sample_ssl_edge_pairs,
    split_leave_two, Interaction, InteractionLog, IntervalGraph, SslSamplingScope, UserItemIndex,
};
use selfgnn::numerics::SparseMatrix;

fn csv_file(content: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(content.as_bytes()).unwrap();
    f
}

fn log_from(triples: &[(usize, usize, i64)], users: usize, items: usize) -> InteractionLog {
    let records = triples
        .iter()
        .map(|&(user, item, timestamp)| Interaction { user, item, timestamp })
        .collect();
    InteractionLog::from_records(records, users, items).unwrap()
}

fn labelled(log: &InteractionLog) -> BTreeSet<(String, String, i64)> {
    log.records()
        .iter()
        .map(|r| (log.user_labels()[r.user].clone(), log.item_labels()[r.item].clone(), r.timestamp))
        .collect()
}

prop_compose! {
    fn arb_log(max_users: usize, max_items: usize, max_len: usize)
        (users in 1..=max_users, items in 1..=max_items)
        (triples in prop::collection::vec((0..users, 0..items, 0i64..1000), 1..=max_len), users in Just(users), items in Just(items))
        -> InteractionLog {
        log_from(&triples, users, items)
    }
}

#[test]
fn duplicate_rows_collapse() {
    let rows = [
        "a,x,1", "a,x,1", "a,y,2", "b,x,3", "b,x,3", "b,x,3", "a,y,2", "c,z,5", "c,x,6", "a,x,1",
    ];
    let f = csv_file(&format!("user,item,timestamp\n{}\n", rows.join("\n")));
    let log = load_interactions(f.path()).unwrap();
    let distinct: HashSet<&str> = rows.iter().copied().collect();
    assert_eq!(log.len(), distinct.len());
    let got: HashSet<String> = labelled(&log).into_iter().map(|(u, i, t)| format!("{u},{i},{t}")).collect();
    assert_eq!(got, distinct.iter().map(|s| s.to_string()).collect());
}

/// Removes one under-degree node at a time until none is left.
fn reference_core(records: &[(String, String, i64)], k: usize) -> BTreeSet<(String, String, i64)> {
    let mut alive: Vec<(String, String, i64)> = records.to_vec();
    loop {
        let mut ud: HashMap<&str, usize> = HashMap::new();
        let mut id: HashMap<&str, usize> = HashMap::new();
        for (u, i, _) in &alive {
            *ud.entry(u).or_default() += 1;
            *id.entry(i).or_default() += 1;
        }
        let weak_user = ud.iter().filter(|(_, &d)| d < k).map(|(u, _)| u.to_string()).min();
        let weak_item = id.iter().filter(|(_, &d)| d < k).map(|(i, _)| i.to_string()).min();
        match (weak_user, weak_item) {
            (Some(u), _) => alive.retain(|r| r.0 != u),
            (None, Some(i)) => alive.retain(|r| r.1 != i),
            (None, None) => return alive.into_iter().collect(),
        }
    }
}

#[test]
fn core_filter_matches_reference() {
    let mut rows = Vec::new();
    // a dense 4x4 block, plus stragglers that unravel in cascade
    for u in 0..4 {
        for i in 0..4 {
            rows.push((format!("u{u}"), format!("i{i}"), (u * 4 + i) as i64));
        }
    }
    rows.push(("u9".into(), "i0".into(), 40));
    rows.push(("u9".into(), "i7".into(), 41));
    rows.push(("u8".into(), "i7".into(), 42));
    rows.push(("u0".into(), "i8".into(), 43));
    assert_eq!(rows.len(), 20);
    let text: String = std::iter::once("user,item,timestamp".to_string())
        .chain(rows.iter().map(|(u, i, t)| format!("{u},{i},{t}")))
        .collect::<Vec<_>>()
        .join("\n");
    let f = csv_file(&text);
    let log = load_interactions(f.path()).unwrap();
    for k in 1..=4 {
        let out = core_filter(&log, k).unwrap();
        assert_eq!(labelled(&out), reference_core(&rows, k), "k = {k}");
    }
    assert!(core_filter(&log, 5).is_err());
}

#[test]
fn split_is_deterministic_and_negatives_disjoint() {
    let mut triples = Vec::new();
    for u in 0..40 {
        for k in 0..(3 + u % 5) {
            triples.push((u, (u * 7 + k * 13) % 1200, (k * 10 + u) as i64));
        }
    }
    let log = log_from(&triples, 40, 1200);
    let a = split_leave_two(&log, 25, 9).unwrap();
    let b = split_leave_two(&log, 25, 9).unwrap();
    assert_eq!(a.test_users, b.test_users);
    assert_eq!(a.negatives, b.negatives);
    assert_eq!(a.train, b.train);
    assert_eq!(a.test_users.len(), 25);
    for (k, &u) in a.test_users.iter().enumerate() {
        let own: HashSet<usize> = a.full_items[u].iter().copied().collect();
        assert_eq!(a.negatives[k].len(), 999);
        assert!(a.negatives[k].iter().all(|n| !own.contains(n)), "user {u}");
        let distinct: HashSet<_> = a.negatives[k].iter().collect();
        assert_eq!(distinct.len(), 999);
    }
    let c = split_leave_two(&log, 25, 10).unwrap();
    assert_ne!(a.negatives, c.negatives);
}

#[test]
fn negatives_avoid_user_items_and_are_uniform() {
    let item_count = 30;
    let own: Vec<usize> = (0..20).collect();
    let index = UserItemIndex::from_sets(vec![own.clone()], item_count);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let n = index.sample_negatives(0, 3, &mut rng).unwrap();
        assert!(n.iter().all(|i| !own.contains(i)));
    }
    let draws = 100_000;
    let mut counts = vec![0usize; item_count];
    for _ in 0..draws {
        counts[index.sample_negatives(0, 1, &mut rng).unwrap()[0]] += 1;
    }
    let p = 1.0 / 10.0;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (item, &c) in counts.iter().enumerate().skip(20).take(10) {
        assert!((c as f64 - mean).abs() < 3.0 * sd, "item {item}: {c}");
    }
}

fn graph(users: usize, items: usize, edges: Vec<(usize, usize)>) -> IntervalGraph {
    IntervalGraph::new(0, SparseMatrix::binary(users, items, edges).unwrap(), 0.0, 1.0)
}

#[test]
fn ssl_first_slot_is_uniform_over_batch_edges() {
    let g = graph(2, 3, vec![(0, 0), (0, 1), (1, 2)]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws = 10_000;
    let pairs = sample_ssl_edge_pairs(std::slice::from_ref(&g), &[0, 1], draws, SslSamplingScope::Batch, &mut rng);
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for p in &pairs[0] {
        *counts.entry(p.first).or_default() += 1;
        assert!(g.has_edge(p.first.0, p.first.1) && g.has_edge(p.second.0, p.second.1));
    }
    let mean = draws as f64 / 3.0;
    let sd = (draws as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    assert_eq!(counts.len(), 3);
    for (edge, c) in counts {
        assert!((c as f64 - mean).abs() < 3.0 * sd, "{edge:?}: {c}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn core_filter_is_idempotent(log in arb_log(12, 12, 120), k in 1usize..4) {
        if let Ok(once) = core_filter(&log, k) {
            let twice = core_filter(&once, k).unwrap();
            prop_assert_eq!(labelled(&once), labelled(&twice));
            prop_assert_eq!(once.user_count(), twice.user_count());
        }
    }

    #[test]
    fn intervals_partition_the_training_log(log in arb_log(10, 10, 200), periods in 1usize..6) {
        let (t_b, t_e) = log.time_range().unwrap();
        if t_b == t_e && periods > 1 {
            prop_assert!(partition_intervals(&log, periods).is_err());
            return Ok(());
        }
        let (partition, graphs) = partition_intervals(&log, periods).unwrap();
        prop_assert_eq!(graphs.len(), periods);
        let bounds = partition.boundaries();
        let mut union = BTreeSet::new();
        for r in log.records() {
            let t = partition.period_of(r.timestamp);
            let (lo, hi) = (bounds[t], bounds[t + 1]);
            let ts = r.timestamp as f64;
            prop_assert!(lo <= ts && (ts < hi || (t == periods - 1 && ts <= hi)));
            prop_assert!(graphs[t].has_edge(r.user, r.item));
            union.insert((r.user, r.item));
        }
        let mut from_graphs = BTreeSet::new();
        for (t, g) in graphs.iter().enumerate() {
            for &(u, i) in g.edges() {
                prop_assert!(log.records().iter().any(|r| r.user == u && r.item == i && partition.period_of(r.timestamp) == t));
                from_graphs.insert((u, i));
            }
            prop_assert!(g.adjacency.iter().all(|(_, _, v)| v == 1.0));
        }
        prop_assert_eq!(union, from_graphs);
    }

    #[test]
    fn sequences_match_a_sort_oracle(
        triples in prop::collection::vec((0usize..5, 0usize..20, 0i64..50), 1..80),
        max_len in 1usize..8,
        seed in any::<u64>(),
    ) {
        let mut shuffled = triples.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let log = log_from(&shuffled, 5, 20);
        let seqs = build_instance_sequences(&log, max_len).unwrap();
        for (u, seq) in seqs.iter().enumerate() {
            let mut mine: Vec<(i64, usize)> = triples.iter().filter(|t| t.0 == u).map(|t| (t.2, t.1)).collect();
            mine.sort_unstable();
            mine.dedup();
            let expect: Vec<usize> = mine[mine.len().saturating_sub(max_len)..].iter().map(|p| p.1).collect();
            prop_assert_eq!(&seq.items, &expect);
            prop_assert!(seq.valid_length() <= max_len);
        }
    }

    #[test]
    fn split_holds_out_the_last_two(log in arb_log(8, 30, 120), seed in any::<u64>()) {
        let split = split_leave_two(&log, 10_000, seed).unwrap();
        let train: HashSet<Interaction> = split.train.records().iter().copied().collect();
        for (u, recs) in log.per_user().into_iter().enumerate() {
            if recs.len() >= 3 {
                let test = split.test[u].unwrap();
                let val = split.validation[u].unwrap();
                prop_assert_eq!((test.item, test.timestamp), (recs[recs.len() - 1].item, recs[recs.len() - 1].timestamp));
                prop_assert_eq!((val.item, val.timestamp), (recs[recs.len() - 2].item, recs[recs.len() - 2].timestamp));
                let held_test = Interaction { user: u, item: test.item, timestamp: test.timestamp };
                let held_val = Interaction { user: u, item: val.item, timestamp: val.timestamp };
                prop_assert!(!train.contains(&held_test));
                prop_assert!(!train.contains(&held_val));
            } else {
                prop_assert!(split.test[u].is_none());
            }
        }
        prop_assert_eq!(split.train.len() + 2 * split.test.iter().flatten().count(), log.len());
    }

    #[test]
    fn ssl_pairs_are_observed_edges(
        edges in prop::collection::btree_set((0usize..6, 0usize..6), 1..20),
        batch in prop::collection::vec(0usize..6, 1..6),
        seed in any::<u64>(),
    ) {
        let g = graph(6, 6, edges.iter().copied().collect());
        for scope in [SslSamplingScope::Batch, SslSamplingScope::PerUser] {
            let a = sample_ssl_edge_pairs(std::slice::from_ref(&g), &batch, 7, scope, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = sample_ssl_edge_pairs(std::slice::from_ref(&g), &batch, 7, scope, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(&a, &b);
            for p in &a[0] {
                prop_assert!(edges.contains(&p.first) && edges.contains(&p.second));
                prop_assert!(batch.contains(&p.first.0));
            }
        }
    }

    #[test]
    fn canonical_reexport_reloads_identically(
        rows in prop::collection::vec(("[a-e]{1,2}", "[p-t]{1,2}", 0i64..100), 1..40),
    ) {
        let text: String = std::iter::once("user,item,timestamp".to_string())
            .chain(rows.iter().map(|(u, i, t)| format!("{u},{i},{t}")))
            .collect::<Vec<_>>()
            .join("\n");
        let f = csv_file(&text);
        let first = load_interactions(f.path()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        first.write_csv(out.path()).unwrap();
        let second = load_interactions(out.path()).unwrap();
        prop_assert_eq!(first.records(), second.records());
        prop_assert_eq!(first.user_labels(), second.user_labels());
        prop_assert_eq!(first.item_labels(), second.item_labels());
    }
}
