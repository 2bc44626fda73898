use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::log::InteractionLog;
use crate::error::{Error, Result};
use crate::numerics::SparseMatrix;

/// Equal-width partition of `[t_begin, t_end]` into `periods` intervals.
/// Intervals are half-open except the last, which is closed on the right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub t_begin: i64,
    pub t_end: i64,
    pub periods: usize,
}

impl Partition {
    pub fn new(t_begin: i64, t_end: i64, periods: usize) -> Result<Self> {
        if periods == 0 {
            return Err(Error::config("need at least one period"));
        }
        if t_end < t_begin {
            return Err(Error::config("t_end before t_begin"));
        }
        if t_begin == t_end && periods > 1 {
            return Err(Error::config(format!(
                "all interactions share timestamp {t_begin}; cannot split into {periods} periods"
            )));
        }
        Ok(Self {
            t_begin,
            t_end,
            periods,
        })
    }

    /// `t_begin + k · (t_end - t_begin) / periods` for `k = 0..=periods`.
    pub fn boundaries(&self) -> Vec<f64> {
        let span = (self.t_end - self.t_begin) as f64;
        (0..=self.periods)
            .map(|k| self.t_begin as f64 + k as f64 * span / self.periods as f64)
            .collect()
    }

    /// Period containing `timestamp`; out-of-range timestamps clamp to the
    /// first or last period.
    pub fn period_of(&self, timestamp: i64) -> usize {
        if self.periods == 1 || timestamp <= self.t_begin {
            return 0;
        }
        let span = i128::from(self.t_end - self.t_begin);
        let offset = i128::from(timestamp - self.t_begin);
        let k = offset * self.periods as i128 / span;
        (k as usize).min(self.periods - 1)
    }
}

/// Binary user-item adjacency of one period.
#[derive(Clone, Debug)]
pub struct IntervalGraph {
    pub period: usize,
    pub adjacency: Arc<SparseMatrix>,
    pub t_start: f64,
    pub t_end: f64,
    edges: Vec<(usize, usize)>,
}

impl IntervalGraph {
    pub fn new(period: usize, adjacency: SparseMatrix, t_start: f64, t_end: f64) -> Self {
        let edges = adjacency.iter().map(|(r, c, _)| (r, c)).collect();
        Self {
            period,
            adjacency: Arc::new(adjacency),
            t_start,
            t_end,
            edges,
        }
    }

    pub fn users(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn items(&self) -> usize {
        self.adjacency.cols()
    }

    /// Edges in row-major order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn user_degree(&self, user: usize) -> usize {
        self.adjacency.row_degree(user)
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        self.adjacency.col_degrees()
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        self.adjacency.contains(user, item)
    }
}

/// Splits the training log into `periods` equal-width interval graphs.
pub fn partition_intervals(train: &InteractionLog, periods: usize) -> Result<(Partition, Vec<IntervalGraph>)> {
    let (t_b, t_e) = train
        .time_range()
        .ok_or_else(|| Error::Empty("cannot partition an empty training log".into()))?;
    let partition = Partition::new(t_b, t_e, periods)?;
    let mut pairs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); periods];
    for r in train.records() {
        pairs[partition.period_of(r.timestamp)].push((r.user, r.item));
    }
    let bounds = partition.boundaries();
    let graphs = pairs
        .into_iter()
        .enumerate()
        .map(|(t, p)| {
            let adj = SparseMatrix::binary(train.user_count(), train.item_count(), p)?;
            Ok(IntervalGraph::new(t, adj, bounds[t], bounds[t + 1]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((partition, graphs))
}
