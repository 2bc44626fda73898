//! Ranking metrics, the sampled-negative protocol, noise injection, sparsity
//! cohorts, ablations and SAL case-study statistics.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HyperParams, Variant};
use crate::data::rng::{stream, Purpose};
use crate::data::{Interaction, InteractionLog, Partition, SplitDataset};
use crate::error::{Error, Result};
use crate::losses::likelihood;
use crate::model::{Embeddings, SelfGnn};
use crate::pipeline::{build_views, DataConfig, Views};
use crate::training::{train, TrainOutcome};

pub fn hr_at_n(rank: usize, n: usize) -> Result<f64> {
    check_rank(rank, n)?;
    Ok(if rank <= n { 1.0 } else { 0.0 })
}

pub fn ndcg_at_n(rank: usize, n: usize) -> Result<f64> {
    check_rank(rank, n)?;
    Ok(if rank <= n { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 })
}

fn check_rank(rank: usize, n: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::config("cutoff n must be at least 1"));
    }
    if rank < 1 {
        return Err(Error::config("ranks are 1-based"));
    }
    Ok(())
}

/// One user's scored candidate list.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub user: usize,
    pub positive: usize,
    /// Positive first, then negatives.
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    /// 1-based rank of the positive.
    pub rank: usize,
}

/// 1-based rank of `positive` among `(item, score)` candidates by descending
/// score, ties broken by ascending item id.
pub fn rank_of(positive: usize, candidates: &[(usize, f64)]) -> Result<usize> {
    let pos_score = candidates
        .iter()
        .find(|c| c.0 == positive)
        .map(|c| c.1)
        .ok_or_else(|| Error::config("positive missing from candidates"))?;
    let ahead = candidates
        .iter()
        .filter(|&&(item, s)| item != positive && (s > pos_score || (s == pos_score && item < positive)))
        .count();
    Ok(ahead + 1)
}

/// Which held-out interaction is ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Validation,
    Test,
}

/// Scores and ranks the held-out item of every evaluated user.
pub fn rank_users(emb: &Embeddings, split: &SplitDataset, target: Target) -> Result<Vec<RankedList>> {
    let mut out = Vec::with_capacity(split.test_users.len());
    for (k, &user) in split.test_users.iter().enumerate() {
        let held = match target {
            Target::Validation => split.validation[user],
            Target::Test => split.test[user],
        };
        let Some(held) = held else { continue };
        let candidates: Vec<usize> = std::iter::once(held.item).chain(split.negatives[k].iter().copied()).collect();
        let scores: Vec<f64> = candidates.iter().map(|&i| emb.score(user, i)).collect();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("candidate scores"));
        }
        let pairs: Vec<(usize, f64)> = candidates.iter().copied().zip(scores.iter().copied()).collect();
        let rank = rank_of(held.item, &pairs)?;
        out.push(RankedList {
            user,
            positive: held.item,
            candidates,
            scores,
            rank,
        });
    }
    Ok(out)
}

/// Mean HR@n and NDCG@n over `ranks`, keyed `hr{n}` / `ndcg{n}`.
pub fn metrics_from_ranks(ranks: &[usize], n_list: &[usize]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for &n in n_list {
        let (mut hr, mut ndcg) = (0.0, 0.0);
        for &r in ranks {
            hr += hr_at_n(r, n)?;
            ndcg += ndcg_at_n(r, n)?;
        }
        let count = ranks.len().max(1) as f64;
        out.insert(format!("hr{n}"), hr / count);
        out.insert(format!("ndcg{n}"), ndcg / count);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub label: String,
    pub users: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub noise_ratio: f64,
    pub metrics: BTreeMap<String, f64>,
    pub cohorts: Vec<CohortReport>,
}

/// Test-set report of `model` over the split's evaluation users.
pub fn evaluate_protocol(
    model: &SelfGnn,
    views: &Views,
    split: &SplitDataset,
    n_list: &[usize],
    noise_ratio: f64,
) -> Result<(EvalReport, Vec<RankedList>)> {
    let emb = model.embed(&views.graphs, &views.sequences)?;
    let lists = rank_users(&emb, split, Target::Test)?;
    let ranks: Vec<usize> = lists.iter().map(|l| l.rank).collect();
    let report = EvalReport {
        variant: model.hp.variant.label().to_string(),
        noise_ratio,
        metrics: metrics_from_ranks(&ranks, n_list)?,
        cohorts: Vec::new(),
    };
    Ok((report, lists))
}

/// Users grouped by training-interaction count.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub label: String,
    pub low: usize,
    /// Exclusive upper bound; `None` for the last bucket.
    pub high: Option<usize>,
    pub users: Vec<usize>,
}

/// Assigns every evaluation user to the half-open bucket `[b_k, b_{k+1})`
/// holding their training-interaction count.
pub fn sparsity_cohorts(split: &SplitDataset, boundaries: &[usize]) -> Result<Vec<Cohort>> {
    if boundaries.windows(2).any(|w| w[0] >= w[1]) || boundaries.first() == Some(&0) {
        return Err(Error::config("cohort boundaries must be positive and strictly increasing"));
    }
    let mut edges = vec![0];
    edges.extend_from_slice(boundaries);
    let mut cohorts: Vec<Cohort> = edges
        .iter()
        .enumerate()
        .map(|(k, &low)| {
            let high = edges.get(k + 1).copied();
            Cohort {
                label: match high {
                    Some(h) => format!("{low}-{h}"),
                    None => format!("{low}+"),
                },
                low,
                high,
                users: Vec::new(),
            }
        })
        .collect();
    let per_user = split.train.per_user();
    for &u in &split.test_users {
        let count = per_user.get(u).map_or(0, |r| r.len());
        let k = edges.partition_point(|&b| b <= count) - 1;
        cohorts[k].users.push(u);
    }
    Ok(cohorts)
}

/// Per-cohort metrics from already ranked lists.
pub fn cohort_reports(cohorts: &[Cohort], lists: &[RankedList], n_list: &[usize]) -> Result<Vec<CohortReport>> {
    cohorts
        .iter()
        .map(|c| {
            let members: HashSet<usize> = c.users.iter().copied().collect();
            let ranks: Vec<usize> = lists.iter().filter(|l| members.contains(&l.user)).map(|l| l.rank).collect();
            Ok(CohortReport {
                label: c.label.clone(),
                users: ranks.len(),
                metrics: metrics_from_ranks(&ranks, n_list)?,
            })
        })
        .collect()
}

/// A training log with some items replaced.
#[derive(Clone, Debug)]
pub struct NoisyLog {
    pub log: InteractionLog,
    /// The replacement records, one per corrupted interaction.
    pub planted: Vec<Interaction>,
}

/// Replaces `⌊ratio·|train|⌋` uniformly chosen interactions' items with
/// uniform random different items, keeping user and timestamp.
pub fn inject_noise(train: &InteractionLog, ratio: f64, seed: u64) -> Result<NoisyLog> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config("noise ratio must lie in [0, 1)"));
    }
    let count = (ratio * train.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(NoisyLog {
            log: train.clone(),
            planted: Vec::new(),
        });
    }
    if train.item_count() < 2 {
        return Err(Error::Sampling("noise needs at least two items".into()));
    }
    let mut rng = stream(seed, Purpose::Noise, 0, 0);
    let mut records = train.records().to_vec();
    let mut present: HashSet<Interaction> = records.iter().copied().collect();
    let mut chosen = sample(&mut rng, records.len(), count).into_vec();
    chosen.sort_unstable();
    let mut planted = Vec::with_capacity(count);
    for idx in chosen {
        let old = records[idx];
        let mut fresh = old;
        for attempt in 0.. {
            if attempt > 64 * train.item_count() {
                return Err(Error::Sampling(format!("no replacement item for user {}", old.user)));
            }
            fresh.item = rng.random_range(0..train.item_count());
            if fresh.item != old.item && !present.contains(&fresh) {
                break;
            }
        }
        present.remove(&old);
        present.insert(fresh);
        records[idx] = fresh;
        planted.push(fresh);
    }
    Ok(NoisyLog {
        log: train.with_records(records)?,
        planted,
    })
}

/// Trains `variant` on the split and reports test metrics of the best
/// validation checkpoint.
pub fn run_ablation(
    variant: Variant,
    split: &SplitDataset,
    data: Option<&DataConfig>,
    hp: &HyperParams,
    n_list: &[usize],
) -> Result<(EvalReport, TrainOutcome)> {
    let hp = variant.apply(hp);
    let views = build_views(&split.train, &hp)?;
    let outcome = train(split, &views, &hp, data.cloned())?;
    let noise = data.map_or(0.0, |d| d.noise_ratio);
    let (report, _) = evaluate_protocol(&outcome.best.model, &views, split, n_list, noise)?;
    Ok((report, outcome))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean over flagged `(user, item)` edges of the average cosine similarity
/// between the item's embedding and the user's other items.
pub fn mean_peer_similarity(
    item_emb: &crate::numerics::Tensor,
    user_items: &[Vec<usize>],
    flagged: &[(usize, usize)],
) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for &(user, item) in flagged {
        let peers: Vec<usize> = user_items
            .get(user)
            .map(|v| v.iter().copied().filter(|&p| p != item).collect())
            .unwrap_or_default();
        if peers.is_empty() {
            continue;
        }
        let sum: f64 = peers.iter().map(|&p| cosine(item_emb.row(item), item_emb.row(p))).sum();
        total += sum / peers.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Empty("no flagged items with sequence peers".into()));
    }
    Ok(total / counted as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseStatistics {
    pub flagged: usize,
    pub with_sal: f64,
    pub without_sal: f64,
}

/// Peer similarity of flagged items' long-term embeddings for models
/// trained with and without SAL.
pub fn sal_case_statistics(
    with_sal: &Embeddings,
    without_sal: &Embeddings,
    train: &InteractionLog,
    flagged: &[Interaction],
) -> Result<CaseStatistics> {
    if flagged.is_empty() {
        return Err(Error::Empty("no flagged items".into()));
    }
    let sets = train.user_item_sets();
    let edges: Vec<(usize, usize)> = flagged.iter().map(|r| (r.user, r.item)).collect();
    Ok(CaseStatistics {
        flagged: edges.len(),
        with_sal: mean_peer_similarity(&with_sal.item_long, &sets, &edges)?,
        without_sal: mean_peer_similarity(&without_sal.item_long, &sets, &edges)?,
    })
}

/// Mean short-term likelihood of `edges` in the period each falls into.
pub fn mean_short_likelihood(emb: &Embeddings, partition: &Partition, edges: &[Interaction], slope: f64) -> Result<f64> {
    if edges.is_empty() {
        return Err(Error::Empty("no edges to score".into()));
    }
    let mut total = 0.0;
    for r in edges {
        let t = partition.period_of(r.timestamp);
        let (u, v) = emb
            .short
            .get(t)
            .ok_or_else(|| Error::config(format!("period {t} outside embeddings")))?;
        total += likelihood(u.row(r.user), v.row(r.item), slope)?;
    }
    Ok(total / edges.len() as f64)
}
