//! Central finite-difference verification of the analytic loss gradients.

use rand::seq::index::sample;
use serde::Serialize;

use crate::data::rng::{stream, Purpose};
use crate::data::{InstanceSequence, IntervalGraph};
use crate::encoder_short::Mode;
use crate::error::Result;
use crate::model::{BatchSamples, SelfGnn};
use crate::numerics::{Tape, Tensor};

/// Per-tensor comparison of analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over checked
    /// coordinates; 0 when both vanish.
    pub rel_error: f64,
    /// Both gradients and their difference lie below the finite-difference
    /// round-off floor, i.e. the gradient is zero to measurable precision.
    pub within_roundoff: bool,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    pub step: f64,
    pub tolerance: f64,
    /// Minimum distance of every hinge input from its kink.
    pub kink_margin: f64,
    /// Checks at most this many coordinates per tensor, chosen by a seeded
    /// stream; `None` checks all.
    pub max_coords: Option<usize>,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-3,
            kink_margin: 1e-6,
            max_coords: None,
        }
    }
}

struct Eval {
    loss: f64,
    kinks: u64,
    margin: f64,
    grads: Option<Vec<Tensor>>,
    stopped: Vec<Tensor>,
}

fn evaluate(
    model: &SelfGnn,
    graphs: &[IntervalGraph],
    sequences: &[InstanceSequence],
    batch: &BatchSamples,
    frozen: Option<&[Tensor]>,
) -> Result<Eval> {
    let with_grads = frozen.is_none();
    let mut tape = match frozen {
        Some(values) => Tape::with_frozen(values.to_vec()),
        None => Tape::new(),
    };
    let bound = model.params.bind(&mut tape, true);
    let mut rng = stream(model.hp.seed, Purpose::Dropout, 0, 0);
    let vars = model.batch_loss(&mut tape, &bound, graphs, sequences, batch, Mode::Train, &mut rng)?;
    let grads = if with_grads {
        let g = tape.backward(vars.total)?;
        Some(bound.vars().iter().map(|&v| g.wrt(v)).collect())
    } else {
        None
    };
    Ok(Eval {
        loss: tape.value(vars.total).item(),
        kinks: tape.kink_signature(),
        margin: tape.hinge_margin(),
        grads,
        stopped: if with_grads { tape.stopped_values() } else { Vec::new() },
    })
}

/// Checks every trainable tensor of `model` on one fixed batch. Edge
/// dropout is replayed from the same stream for every evaluation, and
/// stop-gradient outputs are held at their unperturbed values so the
/// differences measure the same objective the tape differentiates.
pub fn gradient_check(
    model: &SelfGnn,
    graphs: &[IntervalGraph],
    sequences: &[InstanceSequence],
    batch: &BatchSamples,
    settings: CheckSettings,
) -> Result<Vec<TensorCheck>> {
    let base = evaluate(model, graphs, sequences, batch, None)?;
    let analytic = base.grads.clone().expect("requested");
    let frozen = Some(base.stopped.as_slice());
    let roundoff = 64.0 * f64::EPSILON * base.loss.abs().max(1.0) / settings.step;
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for (k, name) in model.params.names().iter().enumerate() {
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let (mut checked, mut skipped) = (0, 0);
        let numel = analytic[k].numel();
        let coords: Vec<usize> = match settings.max_coords {
            Some(m) if m < numel => {
                let mut rng = stream(model.hp.seed, Purpose::Eval, k as u64, 1);
                let mut picked = sample(&mut rng, numel, m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..numel).collect(),
        };
        for i in coords {
            let orig = model.params.tensors()[k].data()[i];
            probe.params.tensors_mut()[k].data_mut()[i] = orig + settings.step;
            let plus = evaluate(&probe, graphs, sequences, batch, frozen)?;
            probe.params.tensors_mut()[k].data_mut()[i] = orig - settings.step;
            let minus = evaluate(&probe, graphs, sequences, batch, frozen)?;
            probe.params.tensors_mut()[k].data_mut()[i] = orig;
            let near_kink = plus.kinks != base.kinks
                || minus.kinks != base.kinks
                || base.margin < settings.kink_margin
                || plus.margin < settings.kink_margin
                || minus.margin < settings.kink_margin;
            if near_kink {
                skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * settings.step);
            let a = analytic[k].data()[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            checked += 1;
        }
        let floor = roundoff * (checked as f64).sqrt();
        let scale = a2.sqrt().max(n2.sqrt());
        let rel_error = if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale };
        let within_roundoff = scale <= floor && diff2.sqrt() <= floor;
        out.push(TensorCheck {
            name: name.clone(),
            checked,
            skipped,
            analytic_norm: a2.sqrt(),
            numeric_norm: n2.sqrt(),
            rel_error,
            within_roundoff,
            passed: within_roundoff || (rel_error < settings.tolerance && rel_error.is_finite()),
        });
    }
    Ok(out)
}

/// Loss of `model` on `batch`, with the same dropout replay as
/// [`gradient_check`].
pub fn batch_objective(
    model: &SelfGnn,
    graphs: &[IntervalGraph],
    sequences: &[InstanceSequence],
    batch: &BatchSamples,
) -> Result<f64> {
    Ok(evaluate(model, graphs, sequences, batch, None)?.loss)
}
