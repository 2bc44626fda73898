//! Clustered synthetic interaction logs for desk-scale experiments.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::log::{Interaction, InteractionLog};
use super::rng::{stream, Purpose};
use crate::error::{Error, Result};

/// Users and items are split round-robin into `clusters` interest groups.
/// Every user interacts with `per_user` distinct items of its own group at
/// evenly spread timestamps over `[0, span]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub per_user: usize,
    pub span: i64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 20,
            items: 30,
            clusters: 2,
            per_user: 12,
            span: 10_000,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn cluster_of_user(&self, user: usize) -> usize {
        user % self.clusters
    }

    pub fn cluster_of_item(&self, item: usize) -> usize {
        item % self.clusters
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<InteractionLog> {
    if cfg.clusters == 0 || cfg.users < cfg.clusters || cfg.items < cfg.clusters {
        return Err(Error::config("synthetic data needs at least one user and item per cluster"));
    }
    let mut rng = stream(cfg.seed, Purpose::Synthetic, 0, 0);
    let mut records = Vec::with_capacity(cfg.users * cfg.per_user);
    for user in 0..cfg.users {
        let c = cfg.cluster_of_user(user);
        let mut pool: Vec<usize> = (0..cfg.items).filter(|&i| cfg.cluster_of_item(i) == c).collect();
        if pool.len() < cfg.per_user {
            return Err(Error::config(format!(
                "cluster {c} has {} items, fewer than per_user = {}",
                pool.len(),
                cfg.per_user
            )));
        }
        pool.shuffle(&mut rng);
        let step = cfg.span / cfg.per_user as i64;
        for (k, &item) in pool[..cfg.per_user].iter().enumerate() {
            let jitter = if step > 1 { rng.random_range(0..step / 2) } else { 0 };
            let timestamp = (k as i64 * step + jitter).min(cfg.span);
            records.push(Interaction { user, item, timestamp });
        }
    }
    InteractionLog::from_records(records, cfg.users, cfg.items)
}
