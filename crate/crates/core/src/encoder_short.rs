//! Per-period collaborative encoding by simplified graph convolution.

use rand::Rng;

use crate::config::LayerCombine;
use crate::data::IntervalGraph;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Edge dropout active.
    Train,
    /// Full adjacency, no dropout.
    Inference,
}

#[derive(Clone, Copy, Debug)]
pub struct ShortTermConfig {
    pub layers: usize,
    pub edge_dropout: f64,
    pub slope: f64,
    pub combine: LayerCombine,
}

/// One propagation step: `z_u = LeakyReLU(Ã · item_emb)`,
/// `z_v = LeakyReLU(Ãᵀ · user_emb)`.
#[allow(clippy::too_many_arguments)]
pub fn propagate_layer<R: Rng + ?Sized>(
    tape: &mut Tape,
    graph: &IntervalGraph,
    user_emb: Var,
    item_emb: Var,
    edge_dropout: f64,
    slope: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<(Var, Var)> {
    if tape.shape(user_emb).first() != Some(&graph.users()) || tape.shape(item_emb).first() != Some(&graph.items()) {
        return Err(Error::shape(format!(
            "graph {}x{} with user table {:?} and item table {:?}",
            graph.users(),
            graph.items(),
            tape.shape(user_emb),
            tape.shape(item_emb)
        )));
    }
    let adj = match mode {
        Mode::Train if edge_dropout > 0.0 => std::sync::Arc::new(graph.adjacency.dropout(edge_dropout, rng)),
        _ => std::sync::Arc::clone(&graph.adjacency),
    };
    let agg_u = tape.spmm(&adj, item_emb, false)?;
    let agg_v = tape.spmm(&adj, user_emb, true)?;
    Ok((tape.leaky_relu(agg_u, slope)?, tape.leaky_relu(agg_v, slope)?))
}

/// Encodes one period: `e_l = z_l + e_{l-1}` from the period's tables
/// `e_0`, then combines `e_1..e_L`.
#[allow(clippy::too_many_arguments)]
pub fn encode_period<R: Rng + ?Sized>(
    tape: &mut Tape,
    graph: &IntervalGraph,
    user_table: Var,
    item_table: Var,
    cfg: &ShortTermConfig,
    combine_proj: Option<Var>,
    rng: &mut R,
    mode: Mode,
) -> Result<(Var, Var)> {
    if cfg.layers == 0 {
        return Err(Error::config("short-term encoder needs at least one layer"));
    }
    let (mut eu, mut ev) = (user_table, item_table);
    let mut outs_u = Vec::with_capacity(cfg.layers);
    let mut outs_v = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let (zu, zv) = propagate_layer(tape, graph, eu, ev, cfg.edge_dropout, cfg.slope, rng, mode)?;
        eu = tape.add(zu, eu)?;
        ev = tape.add(zv, ev)?;
        outs_u.push(eu);
        outs_v.push(ev);
    }
    match cfg.combine {
        LayerCombine::Mean => Ok((mean(tape, &outs_u)?, mean(tape, &outs_v)?)),
        LayerCombine::ConcatProject => {
            let proj = combine_proj.ok_or_else(|| Error::config("concat_project needs a projection"))?;
            let cu = tape.concat_cols(&outs_u)?;
            let cv = tape.concat_cols(&outs_v)?;
            Ok((tape.matmul(cu, proj)?, tape.matmul(cv, proj)?))
        }
    }
}

fn mean(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    tape.scale(acc, 1.0 / parts.len() as f64)
}
