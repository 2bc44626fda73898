use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfgnn::data::split::split_leave_two;
use selfgnn::data::synthetic::{generate, SyntheticConfig};
use selfgnn::data::{Interaction, InteractionLog};
use selfgnn::eval::{
    hr_at_n, inject_noise, mean_peer_similarity, metrics_from_ranks, ndcg_at_n, rank_of, rank_users, sparsity_cohorts, Target,
};
use selfgnn::numerics::Tensor;
use selfgnn::Embeddings;

/// Sorts by descending score then ascending id and reads off the position.
fn sorted_rank(positive: usize, candidates: &[(usize, f64)]) -> usize {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.iter().position(|c| c.0 == positive).unwrap() + 1
}

fn candidate_list() -> impl Strategy<Value = (usize, Vec<(usize, f64)>)> {
    // few distinct score levels so ties are common
    prop::collection::vec(0u8..6, 1..60).prop_flat_map(|levels| {
        let n = levels.len();
        let ids: Vec<usize> = (0..n).map(|k| k * 3 + 1).collect();
        let list: Vec<(usize, f64)> = ids.iter().zip(&levels).map(|(&i, &l)| (i, f64::from(l) * 0.5)).collect();
        (0..n).prop_map(move |k| (list[k].0, list.clone()))
    })
}

fn log_with_counts(counts: &[usize], items: usize) -> InteractionLog {
    let mut records = Vec::new();
    for (user, &n) in counts.iter().enumerate() {
        for k in 0..n {
            records.push(Interaction {
                user,
                item: k % items,
                timestamp: k as i64,
            });
        }
    }
    InteractionLog::from_records(records, counts.len(), items).unwrap()
}

proptest! {
    #[test]
    fn ndcg_never_exceeds_hr(rank in 1usize..2000, n in 1usize..100) {
        let hr = hr_at_n(rank, n).unwrap();
        let ndcg = ndcg_at_n(rank, n).unwrap();
        prop_assert!(ndcg <= hr);
        prop_assert_eq!(ndcg == hr, rank == 1 || rank > n);
    }

    #[test]
    fn rank_matches_a_sorting_oracle((positive, list) in candidate_list(), seed in any::<u64>()) {
        let want = sorted_rank(positive, &list);
        prop_assert_eq!(rank_of(positive, &list).unwrap(), want);
        let mut shuffled = list.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(rank_of(positive, &shuffled).unwrap(), want);
    }

    #[test]
    fn noise_keeps_sizes_and_replaces_items(seed in 0u64..1000, ratio in 0.0f64..0.9) {
        let log = generate(&SyntheticConfig { seed, ..SyntheticConfig::default() }).unwrap();
        let noisy = inject_noise(&log, ratio, seed).unwrap();
        let count = (ratio * log.len() as f64).floor() as usize;
        prop_assert_eq!(noisy.planted.len(), count);
        prop_assert_eq!(noisy.log.len(), log.len());
        let per_user = |l: &InteractionLog| l.per_user().iter().map(|r| r.len()).collect::<Vec<_>>();
        prop_assert_eq!(per_user(&noisy.log), per_user(&log));
        let mut changed = 0;
        for (old, new) in log.records().iter().zip(noisy.log.records()) {
            prop_assert_eq!((old.user, old.timestamp), (new.user, new.timestamp));
            if old.item != new.item {
                changed += 1;
            }
        }
        prop_assert_eq!(changed, count);
        if count == 0 {
            prop_assert_eq!(noisy.log.records(), log.records());
        }
    }
}

#[test]
fn rank_examples() {
    let list = [(4, 0.9), (2, 0.5), (7, 0.5), (1, 0.1)];
    assert_eq!(rank_of(4, &list).unwrap(), 1);
    assert_eq!(rank_of(2, &list).unwrap(), 2);
    assert_eq!(rank_of(7, &list).unwrap(), 3);
    assert_eq!(rank_of(1, &list).unwrap(), 4);
    assert!(rank_of(9, &list).is_err());
    assert!(hr_at_n(0, 10).is_err());
    assert!(ndcg_at_n(3, 0).is_err());
    assert!((ndcg_at_n(3, 10).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn metrics_average_over_users() {
    let m = metrics_from_ranks(&[1, 3, 50], &[10, 20]).unwrap();
    assert!((m["hr10"] - 2.0 / 3.0).abs() < 1e-15);
    assert!((m["ndcg10"] - 1.5 / 3.0).abs() < 1e-15);
    assert_eq!(m["hr20"], m["hr10"]);
}

#[test]
fn random_scores_hit_at_the_expected_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 10_000;
    let ranks: Vec<usize> = (0..trials)
        .map(|_| {
            let list: Vec<(usize, f64)> = (0..1000).map(|i| (i, rng.random::<f64>())).collect();
            rank_of(0, &list).unwrap()
        })
        .collect();
    let hr = metrics_from_ranks(&ranks, &[10]).unwrap()["hr10"];
    let p = 0.01;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    assert!((hr - p).abs() <= 3.0 * sigma, "hr10 {hr}");
}

#[test]
fn noise_replacements_differ_from_originals() {
    let log = generate(&SyntheticConfig::default()).unwrap();
    let noisy = inject_noise(&log, 0.3, 5).unwrap();
    let changed: Vec<Interaction> = log
        .records()
        .iter()
        .zip(noisy.log.records())
        .filter(|(old, new)| old.item != new.item)
        .map(|(_, new)| *new)
        .collect();
    assert_eq!(changed, noisy.planted);
    assert!(inject_noise(&log, 1.0, 5).is_err());
    assert!(inject_noise(&log, -0.1, 5).is_err());
}

#[test]
fn cohorts_use_half_open_buckets() {
    // training counts are the raw counts minus the two held-out interactions
    let split = split_leave_two(&log_with_counts(&[12, 17, 30, 60, 5], 80), 100, 0).unwrap();
    let cohorts = sparsity_cohorts(&split, &[15, 25]).unwrap();
    let labels: Vec<&str> = cohorts.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels, ["0-15", "15-25", "25+"]);
    assert_eq!(cohorts[0].users, [0, 4]);
    assert_eq!(cohorts[1].users, [1]);
    assert_eq!(cohorts[2].users, [2, 3]);
    let total: usize = cohorts.iter().map(|c| c.users.len()).sum();
    assert_eq!(total, split.test_users.len());
    assert!(sparsity_cohorts(&split, &[25, 15]).is_err());
    assert!(sparsity_cohorts(&split, &[0, 15]).is_err());
}

#[test]
fn peer_similarity_examples() {
    let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![0.5, 1.0]]).unwrap();
    let sets = vec![vec![0, 1, 2]];
    assert!((mean_peer_similarity(&same, &sets, &[(0, 0)]).unwrap() - 1.0).abs() < 1e-12);
    let orth = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 3.0]]).unwrap();
    assert_eq!(mean_peer_similarity(&orth, &sets, &[(0, 0)]).unwrap(), 0.0);
    assert!(mean_peer_similarity(&orth, &[vec![0]], &[(0, 0)]).is_err());
}

fn one_hot_embeddings(users: usize, items: usize, pick: impl Fn(usize) -> Option<usize>) -> Embeddings {
    let mut user_final = Tensor::zeros(&[users, items]);
    for u in 0..users {
        if let Some(i) = pick(u) {
            user_final.row_mut(u)[i] = 1.0;
        }
    }
    let mut item_long = Tensor::zeros(&[items, items]);
    for i in 0..items {
        item_long.row_mut(i)[i] = 1.0;
    }
    Embeddings {
        short: Vec::new(),
        user_long: Tensor::zeros(&[users, items]),
        item_long,
        user_final,
    }
}

#[test]
fn perfect_scores_give_perfect_metrics() {
    let split = split_leave_two(&generate(&SyntheticConfig::default()).unwrap(), 100, 3).unwrap();
    let emb = one_hot_embeddings(split.user_count(), split.item_count(), |u| split.test[u].map(|h| h.item));
    let lists = rank_users(&emb, &split, Target::Test).unwrap();
    assert!(!lists.is_empty());
    let ranks: Vec<usize> = lists.iter().map(|l| l.rank).collect();
    let m = metrics_from_ranks(&ranks, &[1, 10]).unwrap();
    assert_eq!((m["hr1"], m["ndcg1"], m["hr10"], m["ndcg10"]), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn negative_order_does_not_change_ranks() {
    let mut split = split_leave_two(&generate(&SyntheticConfig::default()).unwrap(), 100, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let users = split.user_count();
    let items = split.item_count();
    let user_final = Tensor::matrix(users, 4, (0..users * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    // coarse item scores so the id tie-break is exercised
    let item_long = Tensor::matrix(items, 4, (0..items * 4).map(|_| f64::from(rng.random_range(-2i8..=2))).collect()).unwrap();
    let emb = Embeddings {
        short: Vec::new(),
        user_long: user_final.clone(),
        item_long,
        user_final,
    };
    let before: Vec<usize> = rank_users(&emb, &split, Target::Validation).unwrap().iter().map(|l| l.rank).collect();
    for negs in &mut split.negatives {
        negs.shuffle(&mut rng);
    }
    let after: Vec<usize> = rank_users(&emb, &split, Target::Validation).unwrap().iter().map(|l| l.rank).collect();
    assert_eq!(before, after);
}
