//! Recurrent and attention layers built from tape operations.

use std::sync::Arc;

use rand::Rng;

use super::init::xavier_uniform;
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Parameter names of a GRU cell, in storage order.
pub const GRU_PARAMS: [&str; 9] = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"];

/// Parameter names of an attention block, in storage order.
pub const ATTENTION_PARAMS: [&str; 8] = ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"];

/// GRU weights: `w_*` map the input (`in × hidden`), `u_*` the previous
/// hidden state (`hidden × hidden`), `b_*` are biases.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(&[input, hidden]);
        let u = || Tensor::zeros(&[hidden, hidden]);
        let b = || Tensor::zeros(&[hidden]);
        Self {
            w_z: w(),
            u_z: u(),
            b_z: b(),
            w_r: w(),
            u_r: u(),
            b_r: b(),
            w_h: w(),
            u_h: u(),
            b_h: b(),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        for name in GRU_PARAMS.iter().filter(|n| !n.starts_with('b')) {
            let t = if name.starts_with('w') {
                xavier_uniform(input, hidden, rng)
            } else {
                xavier_uniform(hidden, hidden, rng)
            };
            *p.get_mut(name).expect("known name") = t;
        }
        p
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        Some(match name {
            "w_z" => &mut self.w_z,
            "u_z" => &mut self.u_z,
            "b_z" => &mut self.b_z,
            "w_r" => &mut self.w_r,
            "u_r" => &mut self.u_r,
            "b_r" => &mut self.b_r,
            "w_h" => &mut self.w_h,
            "u_h" => &mut self.u_h,
            "b_h" => &mut self.b_h,
            _ => return None,
        })
    }

    pub fn into_named(self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("w_z", self.w_z),
            ("u_z", self.u_z),
            ("b_z", self.b_z),
            ("w_r", self.w_r),
            ("u_r", self.u_r),
            ("b_r", self.b_r),
            ("w_h", self.w_h),
            ("u_h", self.u_h),
            ("b_h", self.b_h),
        ]
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> GruVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone());
        GruVars {
            w_z: leaf(&self.w_z),
            u_z: leaf(&self.u_z),
            b_z: leaf(&self.b_z),
            w_r: leaf(&self.w_r),
            u_r: leaf(&self.u_r),
            b_r: leaf(&self.b_r),
            w_h: leaf(&self.w_h),
            u_h: leaf(&self.u_h),
            b_h: leaf(&self.b_h),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruVars {
    /// Looks up the nine GRU tensors by name through `get`.
    pub fn lookup(mut get: impl FnMut(&str) -> Result<Var>) -> Result<Self> {
        Ok(Self {
            w_z: get("w_z")?,
            u_z: get("u_z")?,
            b_z: get("b_z")?,
            w_r: get("w_r")?,
            u_r: get("u_r")?,
            b_r: get("b_r")?,
            w_h: get("w_h")?,
            u_h: get("u_h")?,
            b_h: get("b_h")?,
        })
    }

    fn gate(&self, tape: &mut Tape, x: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(xw, hu)?;
        tape.add_bias(s, b)
    }

    /// One GRU step over a batch of rows: `x` is `N × in`, `h` is
    /// `N × hidden`.
    ///
    /// `h' = (1 - z) ⊙ h + z ⊙ tanh(x W_h + (r ⊙ h) U_h + b_h)`, evaluated as
    /// `h + z ⊙ (h̃ - h)`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let z_pre = self.gate(tape, x, h, self.w_z, self.u_z, self.b_z)?;
        let z = tape.sigmoid(z_pre)?;
        let r_pre = self.gate(tape, x, h, self.w_r, self.u_r, self.b_r)?;
        let r = tape.sigmoid(r_pre)?;
        let rh = tape.mul(r, h)?;
        let cand_pre = self.gate(tape, x, rh, self.w_h, self.u_h, self.b_h)?;
        let cand = tape.tanh(cand_pre)?;
        let diff = tape.sub(cand, h)?;
        let upd = tape.mul(z, diff)?;
        tape.add(h, upd)
    }
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    match t.shape().len() {
        1 => t.reshape(vec![1, t.numel()]),
        2 => Ok(t.clone()),
        _ => Err(Error::shape(format!("expected vector or matrix, got {:?}", t.shape()))),
    }
}

/// Evaluates a single GRU step outside any training graph. `x` and `h_prev`
/// may be vectors or row batches.
pub fn gru_cell(x: &Tensor, h_prev: &Tensor, params: &GruParams) -> Result<Tensor> {
    let xb = as_batch(x)?;
    let hb = as_batch(h_prev)?;
    let (input, hidden) = (params.w_z.rows(), params.w_z.cols());
    if xb.cols() != input || hb.cols() != hidden || xb.rows() != hb.rows() {
        return Err(Error::shape(format!(
            "gru_cell x {:?}, h {:?} for input {input}, hidden {hidden}",
            x.shape(),
            h_prev.shape()
        )));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let xv = tape.constant(xb);
    let hv = tape.constant(hb);
    let out = vars.step(&mut tape, xv, hv)?;
    tape.value(out).reshape(h_prev.shape().to_vec())
}

/// Projections of a multi-head attention block: `w_*` are `d × d`, `b_*`
/// length `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl AttentionParams {
    pub fn xavier<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            w_q: xavier_uniform(d, d, rng),
            b_q: Tensor::zeros(&[d]),
            w_k: xavier_uniform(d, d, rng),
            b_k: Tensor::zeros(&[d]),
            w_v: xavier_uniform(d, d, rng),
            b_v: Tensor::zeros(&[d]),
            w_o: xavier_uniform(d, d, rng),
            b_o: Tensor::zeros(&[d]),
        }
    }

    pub fn into_named(self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("w_q", self.w_q),
            ("b_q", self.b_q),
            ("w_k", self.w_k),
            ("b_k", self.b_k),
            ("w_v", self.w_v),
            ("b_v", self.b_v),
            ("w_o", self.w_o),
            ("b_o", self.b_o),
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone());
        AttentionVars {
            w_q: leaf(&self.w_q),
            b_q: leaf(&self.b_q),
            w_k: leaf(&self.w_k),
            b_k: leaf(&self.b_k),
            w_v: leaf(&self.w_v),
            b_v: leaf(&self.b_v),
            w_o: leaf(&self.w_o),
            b_o: leaf(&self.b_o),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl AttentionVars {
    pub fn lookup(mut get: impl FnMut(&str) -> Result<Var>) -> Result<Self> {
        Ok(Self {
            w_q: get("w_q")?,
            b_q: get("b_q")?,
            w_k: get("w_k")?,
            b_k: get("b_k")?,
            w_v: get("w_v")?,
            b_v: get("b_v")?,
            w_o: get("w_o")?,
            b_o: get("b_o")?,
        })
    }

    fn project(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }

    /// Self-attention over consecutive groups of `group` rows of `x`.
    /// Rows whose mask entry is false neither attend nor are attended to,
    /// and come out as zero rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        group: usize,
        heads: usize,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let q = Self::project(tape, x, self.w_q, self.b_q)?;
        let k = Self::project(tape, x, self.w_k, self.b_k)?;
        let v = Self::project(tape, x, self.w_v, self.b_v)?;
        let att = tape.attention(q, k, v, group, heads, mask.clone())?;
        let out = Self::project(tape, att, self.w_o, self.b_o)?;
        match mask {
            Some(m) => tape.mask_rows(out, m),
            None => Ok(out),
        }
    }
}

/// Evaluates multi-head self-attention over one `len × d` sequence.
pub fn multi_head_attention(
    seq: &Tensor,
    params: &AttentionParams,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    if !seq.is_matrix() {
        return Err(Error::shape("attention input must be len x d"));
    }
    if heads == 0 || !seq.cols().is_multiple_of(heads) {
        return Err(Error::config(format!(
            "embedding size {} not divisible by {heads} heads",
            seq.cols()
        )));
    }
    if mask.is_some_and(|m| m.len() != seq.rows()) {
        return Err(Error::shape("mask length differs from sequence length"));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.constant(seq.clone());
    let out = vars.forward(&mut tape, x, seq.rows(), heads, mask.map(|m| Arc::new(m.to_vec())))?;
    Ok(tape.value(out).clone())
}
