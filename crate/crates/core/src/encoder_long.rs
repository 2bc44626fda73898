//! Interval-level (GRU + attention over periods) and instance-level
//! (residual self-attention over item sequences) long-term encoders.

use std::sync::Arc;

use crate::data::InstanceSequence;
use crate::error::{Error, Result};
use crate::numerics::{AttentionVars, GruVars, Tape, Tensor, Var};

/// Long-term embeddings of one entity type from its `T` short-term
/// embedding tables (each `N × d`).
///
/// A GRU with zero initial state runs over the periods, unmasked multi-head
/// self-attention mixes the `T` hidden states of each entity, and the
/// attention outputs are summed over periods.
pub fn interval_sequence_encode(
    tape: &mut Tape,
    short: &[Var],
    gru: &GruVars,
    att: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let first = *short.first().ok_or_else(|| Error::config("need at least one period"))?;
    let shape = tape.shape(first).to_vec();
    let mut h = tape.constant(Tensor::zeros(&shape));
    let mut hidden = Vec::with_capacity(short.len());
    for &e in short {
        h = gru.step(tape, e, h)?;
        hidden.push(h);
    }
    let periods = short.len();
    let stacked = tape.interleave(&hidden)?;
    let mixed = att.forward(tape, stacked, periods, heads, None)?;
    tape.segment_sum(mixed, periods, None)
}

/// Plain sum of the short-term embeddings over periods.
pub fn sum_over_periods(tape: &mut Tape, short: &[Var]) -> Result<Var> {
    let mut acc = *short.first().ok_or_else(|| Error::config("need at least one period"))?;
    for &e in &short[1..] {
        acc = tape.add(acc, e)?;
    }
    Ok(acc)
}

/// Left-padded slot layout of a batch of sequences: item index per slot
/// (`None` for padding) and the matching validity mask.
pub fn padded_layout(sequences: &[&InstanceSequence], max_len: usize) -> (Vec<Option<usize>>, Vec<Option<usize>>, Vec<bool>) {
    let mut items = Vec::with_capacity(sequences.len() * max_len);
    let mut positions = Vec::with_capacity(sequences.len() * max_len);
    let mut mask = Vec::with_capacity(sequences.len() * max_len);
    for seq in sequences {
        let tail = &seq.items[seq.items.len().saturating_sub(max_len)..];
        let pad = max_len - tail.len();
        for slot in 0..max_len {
            if slot < pad {
                items.push(None);
                positions.push(None);
                mask.push(false);
            } else {
                items.push(Some(tail[slot - pad]));
                positions.push(Some(slot));
                mask.push(true);
            }
        }
    }
    (items, positions, mask)
}

/// Instance-level user embeddings for `sequences`, one row per sequence.
///
/// `S⁰ = [ē_v(item_m) + p_m]`, then `L_a` rounds of
/// `Sˡ = LeakyReLU(SelfAtt(Sˡ⁻¹)) + Sˡ⁻¹` with padding masked out, and the
/// valid rows of the last round are summed.
#[allow(clippy::too_many_arguments)]
pub fn instance_sequence_encode(
    tape: &mut Tape,
    sequences: &[&InstanceSequence],
    item_long: Var,
    positional: Var,
    layers: &[AttentionVars],
    heads: usize,
    slope: f64,
) -> Result<Var> {
    let max_len = tape.shape(positional)[0];
    if sequences.is_empty() {
        return Err(Error::config("no sequences to encode"));
    }
    let (items, positions, mask) = padded_layout(sequences, max_len);
    let mask = Arc::new(mask);
    let item_rows = tape.gather_rows(item_long, items)?;
    let pos_rows = tape.gather_rows(positional, positions)?;
    let mut s = tape.add(item_rows, pos_rows)?;
    for layer in layers {
        let att = layer.forward(tape, s, max_len, heads, Some(Arc::clone(&mask)))?;
        let act = tape.leaky_relu(att, slope)?;
        s = tape.add(act, s)?;
    }
    tape.segment_sum(s, max_len, Some(mask.to_vec()))
}

/// `ê = ē + ẽ`.
pub fn aggregate_views(tape: &mut Tape, interval_user: Var, instance_user: Var) -> Result<Var> {
    tape.add(interval_user, instance_user)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn left_padding_layout() {
        let a = InstanceSequence { user: 0, items: vec![5, 6] };
        let b = InstanceSequence { user: 1, items: vec![1, 2, 3, 4] };
        let (items, pos, mask) = padded_layout(&[&a, &b], 3);
        assert_eq!(items, vec![None, Some(5), Some(6), Some(2), Some(3), Some(4)]);
        assert_eq!(pos, vec![None, Some(1), Some(2), Some(0), Some(1), Some(2)]);
        assert_eq!(mask, vec![false, true, true, true, true, true]);
    }

    #[test]
    fn aggregate_is_exact_sum() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![0.1, -0.2]));
        let b = tape.leaf(Tensor::vector(vec![-0.1, 0.2]));
        let s = aggregate_views(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 0.0]);
        let c = tape.leaf(Tensor::zeros(&[3]));
        assert!(aggregate_views(&mut tape, a, c).is_err());
    }
}
