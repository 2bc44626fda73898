use super::log::InteractionLog;
use crate::error::{Error, Result};

/// A user's most recent training items, oldest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceSequence {
    pub user: usize,
    pub items: Vec<usize>,
}

impl InstanceSequence {
    pub fn valid_length(&self) -> usize {
        self.items.len()
    }
}

/// One sequence per user id, truncated to the last `max_len` items.
pub fn build_instance_sequences(train: &InteractionLog, max_len: usize) -> Result<Vec<InstanceSequence>> {
    if max_len == 0 {
        return Err(Error::config("maximum sequence length must be >= 1"));
    }
    Ok(train
        .per_user()
        .into_iter()
        .enumerate()
        .map(|(user, recs)| {
            let start = recs.len().saturating_sub(max_len);
            InstanceSequence {
                user,
                items: recs[start..].iter().map(|r| r.item).collect(),
            }
        })
        .collect())
}
