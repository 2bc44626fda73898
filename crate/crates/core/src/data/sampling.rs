use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::intervals::IntervalGraph;
use super::log::InteractionLog;
use super::split::nth_missing;
use crate::error::{Error, Result};

/// Sorted item sets per user, used to draw items a user has not touched.
#[derive(Clone, Debug)]
pub struct UserItemIndex {
    items: Vec<Vec<usize>>,
    item_count: usize,
}

impl UserItemIndex {
    pub fn new(log: &InteractionLog) -> Self {
        Self {
            items: log.user_item_sets(),
            item_count: log.item_count(),
        }
    }

    pub fn from_sets(items: Vec<Vec<usize>>, item_count: usize) -> Self {
        Self { items, item_count }
    }

    pub fn items(&self, user: usize) -> &[usize] {
        &self.items[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.items[user].binary_search(&item).is_ok()
    }

    /// `n` items uniformly from those `user` never interacted with; distinct
    /// within a call when `n` does not exceed the available count.
    pub fn sample_negatives<R: Rng + ?Sized>(&self, user: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        let own = self
            .items
            .get(user)
            .ok_or_else(|| Error::Sampling(format!("unknown user {user}")))?;
        let available = self.item_count - own.len();
        if available == 0 {
            return Err(Error::Sampling(format!(
                "user {user} has interacted with every item"
            )));
        }
        if n <= available {
            if available * 2 >= self.item_count && n * 4 <= available {
                // sparse user: rejection sampling is cheap
                let mut chosen = Vec::with_capacity(n);
                let mut seen = HashSet::with_capacity(n);
                while chosen.len() < n {
                    let cand = rng.random_range(0..self.item_count);
                    if own.binary_search(&cand).is_err() && seen.insert(cand) {
                        chosen.push(cand);
                    }
                }
                return Ok(chosen);
            }
            return Ok(sample(rng, available, n)
                .into_iter()
                .map(|k| nth_missing(own, k))
                .collect());
        }
        Ok((0..n)
            .map(|_| nth_missing(own, rng.random_range(0..available)))
            .collect())
    }
}

/// How the first edge of each SAL pair is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslSamplingScope {
    /// `n_sal` pairs per period, first edge incident to any batch user.
    #[default]
    Batch,
    /// `n_sal` pairs per period for every batch user with edges in it.
    PerUser,
}

/// Two observed edges of the same period.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgePair {
    pub first: (usize, usize),
    pub second: (usize, usize),
}

/// Samples SAL edge pairs for every period. The second edge is uniform over
/// all edges of the period.
pub fn sample_ssl_edge_pairs<R: Rng + ?Sized>(
    graphs: &[IntervalGraph],
    batch_users: &[usize],
    n_sal: usize,
    scope: SslSamplingScope,
    rng: &mut R,
) -> Vec<Vec<EdgePair>> {
    let mut users: Vec<usize> = batch_users.to_vec();
    users.sort_unstable();
    users.dedup();
    graphs
        .iter()
        .map(|g| {
            let all = g.edges();
            if all.is_empty() {
                return Vec::new();
            }
            let incident = |u: usize| g.adjacency.row_cols(u).iter().map(move |&v| (u, v));
            let mut draw_from = |pool: &[(usize, usize)], count: usize, out: &mut Vec<EdgePair>| {
                for _ in 0..count {
                    let first = pool[rng.random_range(0..pool.len())];
                    let second = all[rng.random_range(0..all.len())];
                    out.push(EdgePair { first, second });
                }
            };
            let mut pairs = Vec::new();
            match scope {
                SslSamplingScope::Batch => {
                    let pool: Vec<(usize, usize)> = users
                        .iter()
                        .filter(|&&u| u < g.users())
                        .flat_map(|&u| incident(u))
                        .collect();
                    if !pool.is_empty() {
                        draw_from(&pool, n_sal, &mut pairs);
                    }
                }
                SslSamplingScope::PerUser => {
                    for &u in users.iter().filter(|&&u| u < g.users()) {
                        let pool: Vec<(usize, usize)> = incident(u).collect();
                        if !pool.is_empty() {
                            draw_from(&pool, n_sal, &mut pairs);
                        }
                    }
                }
            }
            pairs
        })
        .collect()
}
