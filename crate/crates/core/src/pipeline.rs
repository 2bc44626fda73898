//! Dataset preparation shared by training, evaluation and the CLI.

use serde::{Deserialize, Serialize};

use crate::config::HyperParams;
use crate::data::{
    build_instance_sequences, core_filter, partition_intervals, split_leave_two, InstanceSequence, Interaction,
    InteractionLog, IntervalGraph, Partition, SplitDataset,
};
use crate::error::Result;
use crate::eval::inject_noise;

/// Settings that turn a raw log into a split dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// k of the k-core filter; 0 or 1 keeps everything.
    pub core_k: usize,
    pub test_user_cap: usize,
    pub split_seed: u64,
    /// Fraction of training interactions replaced by random items.
    pub noise_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            core_k: 5,
            test_user_cap: 10_000,
            split_seed: 0,
            noise_ratio: 0.0,
        }
    }
}

/// A split dataset plus the noise planted into its training part.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: SplitDataset,
    /// Training records whose items were replaced.
    pub planted: Vec<Interaction>,
}

pub fn prepare(raw: &InteractionLog, cfg: &DataConfig) -> Result<Prepared> {
    let filtered = if cfg.core_k > 1 {
        core_filter(raw, cfg.core_k)?
    } else {
        raw.clone()
    };
    let clean = split_leave_two(&filtered, cfg.test_user_cap, cfg.split_seed)?;
    if cfg.noise_ratio == 0.0 {
        return Ok(Prepared {
            split: clean,
            planted: Vec::new(),
        });
    }
    let noisy = inject_noise(&clean.train, cfg.noise_ratio, cfg.split_seed)?;
    Ok(Prepared {
        split: clean.with_train(noisy.log),
        planted: noisy.planted,
    })
}

/// Interval graphs and instance sequences derived from a training log.
#[derive(Clone, Debug)]
pub struct Views {
    pub partition: Partition,
    pub graphs: Vec<IntervalGraph>,
    pub sequences: Vec<InstanceSequence>,
}

pub fn build_views(train: &InteractionLog, hp: &HyperParams) -> Result<Views> {
    let (partition, graphs) = partition_intervals(train, hp.periods)?;
    let sequences = build_instance_sequences(train, hp.max_seq)?;
    Ok(Views {
        partition,
        graphs,
        sequences,
    })
}
