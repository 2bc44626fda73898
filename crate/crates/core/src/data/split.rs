use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::log::{Interaction, InteractionLog};
use super::rng::{stream, Purpose};
use crate::error::Result;

/// Number of sampled negatives per evaluated user.
pub const EVAL_NEGATIVES: usize = 999;

/// A held-out interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOut {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

impl From<Interaction> for HeldOut {
    fn from(r: Interaction) -> Self {
        Self {
            user: r.user,
            item: r.item,
            timestamp: r.timestamp,
        }
    }
}

/// Leave-two-out split with fixed evaluation negatives.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: InteractionLog,
    /// Penultimate interaction per eligible user, indexed by user id.
    pub validation: Vec<Option<HeldOut>>,
    /// Last interaction per eligible user, indexed by user id.
    pub test: Vec<Option<HeldOut>>,
    /// Sampled evaluation users, ascending.
    pub test_users: Vec<usize>,
    /// Negative items per entry of `test_users`.
    pub negatives: Vec<Vec<usize>>,
    /// `(user, missing)` for users with fewer than 999 candidate negatives.
    pub shortfall: Vec<(usize, usize)>,
    /// All items each user interacted with, including held-out ones.
    pub full_items: Vec<Vec<usize>>,
    pub seed: u64,
}

impl SplitDataset {
    pub fn user_count(&self) -> usize {
        self.train.user_count()
    }

    pub fn item_count(&self) -> usize {
        self.train.item_count()
    }

    /// Same split with a different training log (e.g. after noise
    /// injection); held-out items and negatives are unchanged.
    pub fn with_train(&self, train: InteractionLog) -> Self {
        Self {
            train,
            ..self.clone()
        }
    }
}

/// Holds out each user's last interaction as test and penultimate as
/// validation. Users with fewer than three interactions stay entirely in
/// training and are never evaluated.
pub fn split_leave_two(log: &InteractionLog, test_user_cap: usize, seed: u64) -> Result<SplitDataset> {
    let mut train = Vec::with_capacity(log.len());
    let mut validation = vec![None; log.user_count()];
    let mut test = vec![None; log.user_count()];
    let mut eligible = Vec::new();
    for (user, recs) in log.per_user().into_iter().enumerate() {
        if recs.len() >= 3 {
            let n = recs.len();
            train.extend_from_slice(&recs[..n - 2]);
            validation[user] = Some(recs[n - 2].into());
            test[user] = Some(recs[n - 1].into());
            eligible.push(user);
        } else {
            train.extend_from_slice(recs);
        }
    }
    let full_items = log.user_item_sets();

    let mut rng = stream(seed, Purpose::Split, 0, 0);
    let mut test_users: Vec<usize> = if eligible.len() <= test_user_cap {
        eligible
    } else {
        sample(&mut rng, eligible.len(), test_user_cap)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    };
    test_users.sort_unstable();

    let item_count = log.item_count();
    let mut negatives = Vec::with_capacity(test_users.len());
    let mut shortfall = Vec::new();
    for &u in &test_users {
        let own = &full_items[u];
        let available = item_count - own.len();
        let want = EVAL_NEGATIVES.min(available);
        if want < EVAL_NEGATIVES {
            shortfall.push((u, EVAL_NEGATIVES - want));
        }
        let mut chosen: Vec<usize> = sample(&mut rng, available, want)
            .into_iter()
            .map(|k| nth_missing(own, k))
            .collect();
        chosen.sort_unstable();
        negatives.push(chosen);
    }

    Ok(SplitDataset {
        train: log.with_records(train)?,
        validation,
        test,
        test_users,
        negatives,
        shortfall,
        full_items,
        seed,
    })
}

/// The `k`-th (0-based) item id not present in the sorted set `own`.
pub(crate) fn nth_missing(own: &[usize], k: usize) -> usize {
    // Find the smallest id x with x - |{o in own : o <= x}| == k and x not in own.
    let (mut lo, mut hi) = (k, k + own.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        let below = own.partition_point(|&o| o <= mid);
        if mid + 1 - below > k {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}
