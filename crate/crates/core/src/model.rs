//! Parameter layout and forward passes of the full model and its variants.

use rand::Rng;

use crate::config::{HyperParams, LayerCombine};
use crate::data::rng::{stream, Purpose};
use crate::data::{EdgePair, InstanceSequence, IntervalGraph};
use crate::encoder_long::{aggregate_views, instance_sequence_encode, interval_sequence_encode, sum_over_periods};
use crate::encoder_short::{encode_period, Mode, ShortTermConfig};
use crate::error::{Error, Result};
use crate::losses::{rec_loss, regularization, sal_loss, total_loss, LossVars, SalInputs, WeightVars};
use crate::numerics::init::xavier_uniform;
use crate::numerics::nn::{ATTENTION_PARAMS, GRU_PARAMS};
use crate::numerics::{AttentionParams, AttentionVars, GruParams, GruVars, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

/// Users encoded per tape during inference.
const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct SelfGnn {
    pub hp: HyperParams,
    pub users: usize,
    pub items: usize,
    pub params: ParamStore,
}

/// Tape handles produced by the graph and interval encoders.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Per-period `(user, item)` short-term embeddings.
    pub short: Vec<(Var, Var)>,
    pub user_long: Var,
    pub item_long: Var,
}

/// One training batch worth of samples.
#[derive(Clone, Debug, Default)]
pub struct BatchSamples {
    pub users: Vec<usize>,
    /// `(position in users, positive item, negative item)`.
    pub rec: Vec<(usize, usize, usize)>,
    /// SAL edge pairs per period.
    pub ssl: Vec<Vec<EdgePair>>,
}

/// Inference-mode embeddings of every user and item.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub short: Vec<(Tensor, Tensor)>,
    pub user_long: Tensor,
    pub item_long: Tensor,
    /// Final user embeddings `ê`.
    pub user_final: Tensor,
}

impl Embeddings {
    pub fn score(&self, user: usize, item: usize) -> f64 {
        self.user_final
            .row(user)
            .iter()
            .zip(self.item_long.row(item))
            .map(|(a, b)| a * b)
            .sum()
    }
}

fn short_name(t: usize, side: &str) -> String {
    format!("short.{t}.{side}")
}

fn named_lookup<'a>(bound: &'a Bound<'_>, prefix: String) -> impl FnMut(&str) -> Result<Var> + 'a {
    move |n| bound.get(&format!("{prefix}.{n}"))
}

impl SelfGnn {
    pub fn new(hp: &HyperParams, users: usize, items: usize) -> Result<Self> {
        hp.validate()?;
        if users == 0 || items == 0 {
            return Err(Error::Empty("model needs at least one user and one item".into()));
        }
        let mut rng = stream(hp.seed, Purpose::Init, 0, 0);
        let d = hp.dim;
        let mut params = ParamStore::new();
        for t in 0..hp.periods {
            params.insert(short_name(t, "user"), xavier_uniform(users, d, &mut rng))?;
            params.insert(short_name(t, "item"), xavier_uniform(items, d, &mut rng))?;
        }
        if hp.layer_combine == LayerCombine::ConcatProject {
            params.insert("short.combine", xavier_uniform(hp.layers * d, d, &mut rng))?;
        }
        if hp.variant.interval_attention() {
            for side in ["user", "item"] {
                for (n, t) in GruParams::xavier(d, d, &mut rng).into_named() {
                    params.insert(format!("interval.{side}.gru.{n}"), t)?;
                }
                for (n, t) in AttentionParams::xavier(d, &mut rng).into_named() {
                    params.insert(format!("interval.{side}.att.{n}"), t)?;
                }
            }
        }
        if hp.variant.instance_attention() {
            params.insert("instance.pos", xavier_uniform(hp.max_seq, d, &mut rng))?;
            for l in 0..hp.att_layers {
                for (n, t) in AttentionParams::xavier(d, &mut rng).into_named() {
                    params.insert(format!("instance.att.{l}.{n}"), t)?;
                }
            }
        }
        if hp.variant.user_weights() {
            params.insert("sal.w1", xavier_uniform(d, hp.d_sal, &mut rng))?;
            params.insert("sal.b1", Tensor::zeros(&[hp.d_sal]))?;
            params.insert("sal.w2", xavier_uniform(hp.d_sal, 1, &mut rng))?;
            params.insert("sal.b2", Tensor::zeros(&[1]))?;
        }
        Ok(Self {
            hp: hp.clone(),
            users,
            items,
            params,
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(hp: &HyperParams, users: usize, items: usize, stored: ParamStore) -> Result<Self> {
        let mut model = Self::new(hp, users, items)?;
        if stored.names() != model.params.names() {
            return Err(Error::Format("parameter names do not match the configuration".into()));
        }
        for (a, b) in stored.tensors().iter().zip(model.params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Format(format!("parameter shape {:?} expected {:?}", a.shape(), b.shape())));
            }
        }
        model.params = stored;
        Ok(model)
    }

    pub fn short_config(&self) -> ShortTermConfig {
        ShortTermConfig {
            layers: self.hp.layers,
            edge_dropout: self.hp.dropout,
            slope: self.hp.leaky_slope,
            combine: self.hp.layer_combine,
        }
    }

    fn check_inputs(&self, graphs: &[IntervalGraph]) -> Result<()> {
        if graphs.len() != self.hp.periods {
            return Err(Error::config(format!(
                "{} interval graphs for {} periods",
                graphs.len(),
                self.hp.periods
            )));
        }
        if graphs.iter().any(|g| g.users() != self.users || g.items() != self.items) {
            return Err(Error::shape("interval graph size differs from the model"));
        }
        Ok(())
    }

    /// Short-term and interval-level long-term embeddings of all users and
    /// items.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound<'_>,
        graphs: &[IntervalGraph],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Encoded> {
        self.check_inputs(graphs)?;
        let cfg = self.short_config();
        let proj = if bound.has("short.combine") {
            Some(bound.get("short.combine")?)
        } else {
            None
        };
        let mut short = Vec::with_capacity(graphs.len());
        for (t, g) in graphs.iter().enumerate() {
            let ut = bound.get(&short_name(t, "user"))?;
            let it = bound.get(&short_name(t, "item"))?;
            if self.hp.variant.propagates() {
                short.push(encode_period(tape, g, ut, it, &cfg, proj, rng, mode)?);
            } else {
                short.push((ut, it));
            }
        }
        let (su, si): (Vec<Var>, Vec<Var>) = short.iter().copied().unzip();
        let (user_long, item_long) = if self.hp.variant.interval_attention() {
            let side = |tape: &mut Tape, name: &str, seq: &[Var]| -> Result<Var> {
                let gru = GruVars::lookup(named_lookup(bound, format!("interval.{name}.gru")))?;
                let att = AttentionVars::lookup(named_lookup(bound, format!("interval.{name}.att")))?;
                interval_sequence_encode(tape, seq, &gru, &att, self.hp.heads)
            };
            (side(tape, "user", &su)?, side(tape, "item", &si)?)
        } else {
            (sum_over_periods(tape, &su)?, sum_over_periods(tape, &si)?)
        };
        Ok(Encoded {
            short,
            user_long,
            item_long,
        })
    }

    fn instance_layers(&self, bound: &Bound<'_>) -> Result<Vec<AttentionVars>> {
        (0..self.hp.att_layers)
            .map(|l| AttentionVars::lookup(named_lookup(bound, format!("instance.att.{l}"))))
            .collect()
    }

    /// Final user embeddings `ê` for the users owning `sequences`, one row
    /// per sequence.
    pub fn final_users(
        &self,
        tape: &mut Tape,
        bound: &Bound<'_>,
        encoded: &Encoded,
        sequences: &[&InstanceSequence],
    ) -> Result<Var> {
        let index = sequences.iter().map(|s| Some(s.user)).collect();
        let long = tape.gather_rows(encoded.user_long, index)?;
        if !self.hp.variant.instance_attention() {
            return Ok(long);
        }
        let layers = self.instance_layers(bound)?;
        let pos = bound.get("instance.pos")?;
        let inst = instance_sequence_encode(
            tape,
            sequences,
            encoded.item_long,
            pos,
            &layers,
            self.hp.heads,
            self.hp.leaky_slope,
        )?;
        aggregate_views(tape, long, inst)
    }

    fn weight_vars(&self, bound: &Bound<'_>) -> Result<Option<WeightVars>> {
        if !self.hp.variant.user_weights() {
            return Ok(None);
        }
        Ok(Some(WeightVars {
            w1: bound.get("sal.w1")?,
            b1: bound.get("sal.b1")?,
            w2: bound.get("sal.w2")?,
            b2: bound.get("sal.b2")?,
        }))
    }

    /// Training loss of one batch; `bound` must hold trainable leaves.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound<'_>,
        graphs: &[IntervalGraph],
        sequences: &[InstanceSequence],
        batch: &BatchSamples,
        mode: Mode,
        rng: &mut R,
    ) -> Result<LossVars> {
        let encoded = self.encode(tape, bound, graphs, mode, rng)?;
        let seqs = batch
            .users
            .iter()
            .map(|&u| sequences.get(u).ok_or_else(|| Error::config(format!("no sequence for user {u}"))))
            .collect::<Result<Vec<_>>>()?;
        let rec = if batch.rec.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let users = self.final_users(tape, bound, &encoded, &seqs)?;
            let urows = tape.gather_rows(users, batch.rec.iter().map(|r| Some(r.0)).collect())?;
            let pos = tape.gather_rows(encoded.item_long, batch.rec.iter().map(|r| Some(r.1)).collect())?;
            let neg = tape.gather_rows(encoded.item_long, batch.rec.iter().map(|r| Some(r.2)).collect())?;
            let ps = tape.row_dot(urows, pos)?;
            let ns = tape.row_dot(urows, neg)?;
            rec_loss(tape, ps, ns)?
        };
        let sal = if self.hp.lambda1 > 0.0 {
            let inputs = SalInputs {
                short: &encoded.short,
                long_user_weight: encoded.user_long,
                long_user_score: encoded.user_long,
                long_item: encoded.item_long,
                weights: self.weight_vars(bound)?,
                slope: self.hp.leaky_slope,
                stop_gradient: self.hp.stop_long_scores,
            };
            sal_loss(tape, &batch.ssl, &inputs)?
        } else {
            None
        };
        let reg = regularization(tape, bound.vars())?;
        total_loss(tape, rec, sal, reg, self.hp.lambda1, self.hp.lambda2)
    }

    /// Inference-mode embeddings of all users and items.
    pub fn embed(&self, graphs: &[IntervalGraph], sequences: &[InstanceSequence]) -> Result<Embeddings> {
        if sequences.len() != self.users {
            return Err(Error::shape(format!(
                "{} sequences for {} users",
                sequences.len(),
                self.users
            )));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut rng = stream(self.hp.seed, Purpose::Dropout, u64::MAX, 0);
        let encoded = self.encode(&mut tape, &bound, graphs, Mode::Inference, &mut rng)?;
        let short: Vec<(Tensor, Tensor)> = encoded
            .short
            .iter()
            .map(|&(u, i)| (tape.value(u).clone(), tape.value(i).clone()))
            .collect();
        let user_long = tape.value(encoded.user_long).clone();
        let item_long = tape.value(encoded.item_long).clone();
        drop(tape);

        let mut data = Vec::with_capacity(self.users * self.hp.dim);
        for chunk in sequences.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let enc = Encoded {
                short: Vec::new(),
                user_long: tape.constant(user_long.clone()),
                item_long: tape.constant(item_long.clone()),
            };
            let refs: Vec<&InstanceSequence> = chunk.iter().collect();
            let rows = self.final_users(&mut tape, &bound, &enc, &refs)?;
            data.extend_from_slice(tape.value(rows).data());
        }
        let user_final = Tensor::matrix(self.users, self.hp.dim, data)?;
        Ok(Embeddings {
            short,
            user_long,
            item_long,
            user_final,
        })
    }

    /// Names of the GRU and attention sub-blocks, for diagnostics.
    pub fn block_names() -> (&'static [&'static str], &'static [&'static str]) {
        (&GRU_PARAMS, &ATTENTION_PARAMS)
    }
}
