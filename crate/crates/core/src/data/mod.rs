//! Interaction logs, filtering, splitting, interval graphs, sequences and
//! all stochastic sampling.

pub mod intervals;
pub mod log;
pub mod rng;
pub mod sampling;
pub mod sequences;
pub mod split;
pub mod synthetic;

pub use intervals::{partition_intervals, IntervalGraph, Partition};
pub use log::{core_filter, load_interactions, Interaction, InteractionLog};
pub use sampling::{sample_ssl_edge_pairs, EdgePair, SslSamplingScope, UserItemIndex};
pub use sequences::{build_instance_sequences, InstanceSequence};
pub use split::{split_leave_two, HeldOut, SplitDataset, EVAL_NEGATIVES};
