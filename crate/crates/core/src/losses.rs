//! Recommendation, self-augmented and regularization losses.

use serde::{Deserialize, Serialize};

use crate::data::EdgePair;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Preference score `ê_u · ē_v`.
pub fn predict_score(user: &[f64], item: &[f64]) -> Result<f64> {
    if user.len() != item.len() {
        return Err(Error::shape(format!("score of {} vs {} dims", user.len(), item.len())));
    }
    Ok(user.iter().zip(item).map(|(a, b)| a * b).sum())
}

/// `Σ max(0, 1 - pos + neg)` on plain values.
pub fn hinge_rec_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.len() != neg.len() {
        return Err(Error::shape("positive and negative score counts differ"));
    }
    Ok(pos.iter().zip(neg).map(|(p, n)| (1.0 - p + n).max(0.0)).sum())
}

/// Pairwise hinge recommendation loss over aligned score vectors.
pub fn rec_loss(tape: &mut Tape, pos: Var, neg: Var) -> Result<Var> {
    let diff = tape.sub(neg, pos)?;
    let margin = tape.add_scalar(diff, 1.0)?;
    let hinge = tape.relu(margin)?;
    tape.sum(hinge)
}

/// `Σ_k LeakyReLU(u_k · v_k)` on plain values.
pub fn likelihood(user: &[f64], item: &[f64], slope: f64) -> Result<f64> {
    if user.len() != item.len() {
        return Err(Error::shape("likelihood operands differ in size"));
    }
    Ok(user
        .iter()
        .zip(item)
        .map(|(a, b)| {
            let x = a * b;
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        })
        .sum())
}

/// Row-wise likelihood scores of aligned user and item rows.
pub fn likelihood_scores(tape: &mut Tape, user_rows: Var, item_rows: Var, slope: f64) -> Result<Var> {
    let prod = tape.mul(user_rows, item_rows)?;
    let act = tape.leaky_relu(prod, slope)?;
    tape.row_sum(act)
}

/// Parameters of the personalized-weight network.
#[derive(Clone, Copy, Debug)]
pub struct WeightVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `w = σ(LeakyReLU((ē + e_t + ē ⊙ e_t) W1 + b1) W2 + b2)` for aligned rows,
/// returned as a vector.
pub fn personalized_weight(
    tape: &mut Tape,
    long_rows: Var,
    short_rows: Var,
    net: &WeightVars,
    slope: f64,
) -> Result<Var> {
    let sum = tape.add(long_rows, short_rows)?;
    let prod = tape.mul(long_rows, short_rows)?;
    let feat = tape.add(sum, prod)?;
    let hidden = tape.matmul(feat, net.w1)?;
    let hidden = tape.add_bias(hidden, net.b1)?;
    let hidden = tape.leaky_relu(hidden, slope)?;
    let out = tape.matmul(hidden, net.w2)?;
    let out = tape.add_bias(out, net.b2)?;
    let out = tape.sigmoid(out)?;
    let n = tape.shape(out)[0];
    tape.reshape(out, vec![n])
}

/// `Σ max(0, 1 - (w₁ s̄₁ - w₂ s̄₂)(s₁ - s₂))` over aligned vectors.
pub fn sal_hinge(
    tape: &mut Tape,
    w_first: Var,
    w_second: Var,
    long_first: Var,
    long_second: Var,
    short_first: Var,
    short_second: Var,
) -> Result<Var> {
    let a = tape.mul(w_first, long_first)?;
    let b = tape.mul(w_second, long_second)?;
    let d_long = tape.sub(a, b)?;
    let d_short = tape.sub(short_first, short_second)?;
    let prod = tape.mul(d_long, d_short)?;
    let neg = tape.scale(prod, -1.0)?;
    let margin = tape.add_scalar(neg, 1.0)?;
    let hinge = tape.relu(margin)?;
    tape.sum(hinge)
}

/// Embeddings consumed by the self-augmented loss.
pub struct SalInputs<'a> {
    /// Per-period `(user, item)` short-term tables.
    pub short: &'a [(Var, Var)],
    /// Long-term user table fed to the weight network.
    pub long_user_weight: Var,
    /// Long-term user table fed to the long-term scores.
    pub long_user_score: Var,
    pub long_item: Var,
    /// `None` fixes every weight to 1.
    pub weights: Option<WeightVars>,
    pub slope: f64,
    /// Cut gradients through the long-term scores.
    pub stop_gradient: bool,
}

/// Self-augmented loss summed over periods; `None` when no pairs exist.
pub fn sal_loss(tape: &mut Tape, pairs: &[Vec<EdgePair>], inputs: &SalInputs<'_>) -> Result<Option<Var>> {
    if pairs.len() > inputs.short.len() {
        return Err(Error::shape("more pair lists than periods"));
    }
    let mut total: Option<Var> = None;
    for (t, period_pairs) in pairs.iter().enumerate() {
        if period_pairs.is_empty() {
            continue;
        }
        let (eu, ev) = inputs.short[t];
        let idx = |f: fn(&EdgePair) -> usize| period_pairs.iter().map(|p| Some(f(p))).collect::<Vec<_>>();
        let (u1, v1) = (idx(|p| p.first.0), idx(|p| p.first.1));
        let (u2, v2) = (idx(|p| p.second.0), idx(|p| p.second.1));

        let short_score = |tape: &mut Tape, u: Vec<Option<usize>>, v: Vec<Option<usize>>| -> Result<Var> {
            let ur = tape.gather_rows(eu, u)?;
            let vr = tape.gather_rows(ev, v)?;
            likelihood_scores(tape, ur, vr, inputs.slope)
        };
        let s1 = short_score(tape, u1.clone(), v1.clone())?;
        let s2 = short_score(tape, u2.clone(), v2.clone())?;

        let long_score = |tape: &mut Tape, u: Vec<Option<usize>>, v: Vec<Option<usize>>| -> Result<Var> {
            let ur = tape.gather_rows(inputs.long_user_score, u)?;
            let vr = tape.gather_rows(inputs.long_item, v)?;
            let s = likelihood_scores(tape, ur, vr, inputs.slope)?;
            if inputs.stop_gradient {
                tape.stop_gradient(s)
            } else {
                Ok(s)
            }
        };
        let sb1 = long_score(tape, u1.clone(), v1)?;
        let sb2 = long_score(tape, u2.clone(), v2)?;

        let (w1, w2) = match &inputs.weights {
            Some(net) => {
                let weight = |tape: &mut Tape, u: Vec<Option<usize>>| -> Result<Var> {
                    let lr = tape.gather_rows(inputs.long_user_weight, u.clone())?;
                    let sr = tape.gather_rows(eu, u)?;
                    personalized_weight(tape, lr, sr, net, inputs.slope)
                };
                (weight(tape, u1)?, weight(tape, u2)?)
            }
            None => {
                let ones = tape.constant(Tensor::ones(&[period_pairs.len()]));
                (ones, ones)
            }
        };
        let term = sal_hinge(tape, w1, w2, sb1, sb2, s1, s2)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Tape handles of the loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rec: Var,
    pub sal: Option<Var>,
    pub reg: Var,
    pub total: Var,
}

/// Loss values of one batch or summed over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_sal: f64,
    pub l_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_tape(tape: &Tape, vars: &LossVars) -> Self {
        Self {
            l_rec: tape.value(vars.rec).item(),
            l_sal: vars.sal.map_or(0.0, |s| tape.value(s).item()),
            l_reg: tape.value(vars.reg).item(),
            total: tape.value(vars.total).item(),
        }
    }

    pub fn accumulate(&mut self, other: &Self) {
        self.l_rec += other.l_rec;
        self.l_sal += other.l_sal;
        self.l_reg += other.l_reg;
        self.total += other.total;
    }
}

/// `Σ ‖θ‖²_F` over `params`.
pub fn regularization(tape: &mut Tape, params: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &p in params {
        let sq = tape.sum_squares(p)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// `l_rec + λ1·l_sal + λ2·l_reg`. A zero `λ1` leaves the SAL term off the
/// tape entirely.
pub fn total_loss(tape: &mut Tape, rec: Var, sal: Option<Var>, reg: Var, lambda1: f64, lambda2: f64) -> Result<LossVars> {
    let mut total = rec;
    let sal = if lambda1 > 0.0 { sal } else { None };
    if let Some(s) = sal {
        let ws = tape.scale(s, lambda1)?;
        total = tape.add(total, ws)?;
    }
    if lambda2 > 0.0 {
        let wr = tape.scale(reg, lambda2)?;
        total = tape.add(total, wr)?;
    }
    Ok(LossVars { rec, sal, reg, total })
}
