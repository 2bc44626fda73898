//! The epoch loop: batching, sampling, forward/backward, Adam updates,
//! learning-rate decay and early stopping.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::HyperParams;
use crate::data::rng::{stream, Purpose};
use crate::data::{sample_ssl_edge_pairs, IntervalGraph, SplitDataset, UserItemIndex};
use crate::encoder_short::Mode;
use crate::error::{Error, Result};
use crate::eval::{metrics_from_ranks, rank_users, Target};
use crate::losses::LossBreakdown;
use crate::model::{BatchSamples, SelfGnn};
use crate::numerics::{AdamState, Tape, Tensor};
use crate::pipeline::{DataConfig, Views};

/// Position of the deterministic random streams.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Next epoch to draw streams for.
    pub epoch: u64,
}

/// Training progress persisted with every checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs_done: usize,
    pub rng: RngState,
    pub best_epoch: Option<usize>,
    pub best_hr10: Option<f64>,
    pub stale_epochs: usize,
    pub stopped: bool,
}

/// Everything needed to evaluate a model or resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SelfGnn,
    pub adam: AdamState,
    pub progress: Progress,
    pub data: Option<DataConfig>,
}

impl Checkpoint {
    pub fn hp(&self) -> &HyperParams {
        &self.model.hp
    }
}

/// Loss sums and validation metrics of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_sal: f64,
    pub l_reg: f64,
    pub total: f64,
    pub lr: f64,
    pub val_hr10: f64,
    pub val_ndcg10: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Snapshot at the best validation HR@10.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer<'a> {
    split: &'a SplitDataset,
    views: &'a Views,
    state: Checkpoint,
    best: Option<Checkpoint>,
    index: UserItemIndex,
    users: Vec<usize>,
    history: Vec<EpochRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(split: &'a SplitDataset, views: &'a Views, hp: &HyperParams, data: Option<DataConfig>) -> Result<Self> {
        let model = SelfGnn::new(hp, split.user_count(), split.item_count())?;
        let adam = AdamState::new(model.params.tensors().iter().map(Tensor::shape));
        let progress = Progress {
            rng: RngState { seed: hp.seed, epoch: 0 },
            ..Progress::default()
        };
        Self::resume(
            split,
            views,
            Checkpoint {
                model,
                adam,
                progress,
                data,
            },
            None,
        )
    }

    /// Continues from `last`; `best` restores the best snapshot seen so far.
    pub fn resume(split: &'a SplitDataset, views: &'a Views, last: Checkpoint, best: Option<Checkpoint>) -> Result<Self> {
        let model = &last.model;
        if model.users != split.user_count() || model.items != split.item_count() {
            return Err(Error::config("checkpoint does not match the dataset size"));
        }
        if views.graphs.len() != model.hp.periods || views.sequences.len() != model.users {
            return Err(Error::config("graphs or sequences built with different settings"));
        }
        let index = UserItemIndex::new(&split.train);
        let users = (0..split.user_count())
            .filter(|&u| {
                let n = index.items(u).len();
                n > 0 && n < split.item_count()
            })
            .collect();
        Ok(Self {
            split,
            views,
            state: last,
            best,
            index,
            users,
            history: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn finished(&self) -> bool {
        self.state.progress.stopped || self.state.progress.epochs_done >= self.state.model.hp.epochs
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let hp = self.state.model.hp.clone();
        let epoch = self.state.progress.epochs_done;
        let e = epoch as u64;
        let lr = hp.lr_at(epoch);
        let mut order = self.users.clone();
        order.shuffle(&mut stream(hp.seed, Purpose::Shuffle, e, 0));
        let mut sums = LossBreakdown::default();
        for (b, chunk) in order.chunks(hp.batch).enumerate() {
            let bi = b as u64;
            let batch = draw_batch(&self.index, &self.views.graphs, chunk, &hp, e, bi)?;
            let grads = {
                let model = &self.state.model;
                let mut tape = Tape::new();
                let bound = model.params.bind(&mut tape, true);
                let vars = model.batch_loss(
                    &mut tape,
                    &bound,
                    &self.views.graphs,
                    &self.views.sequences,
                    &batch,
                    Mode::Train,
                    &mut stream(hp.seed, Purpose::Dropout, e, bi),
                )?;
                let losses = LossBreakdown::from_tape(&tape, &vars);
                if !losses.total.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b,
                        loss: losses.total,
                    });
                }
                sums.accumulate(&losses);
                let g = tape.backward(vars.total)?;
                let grads: Vec<Tensor> = bound.vars().iter().map(|&v| g.wrt(v)).collect();
                if grads.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    });
                }
                grads
            };
            self.state.adam.step(self.state.model.params.tensors_mut(), &grads, lr)?;
        }

        let emb = self.state.model.embed(&self.views.graphs, &self.views.sequences)?;
        let ranks: Vec<usize> = rank_users(&emb, self.split, Target::Validation)?
            .iter()
            .map(|l| l.rank)
            .collect();
        let metrics = metrics_from_ranks(&ranks, &[10])?;
        let record = EpochRecord {
            epoch,
            l_rec: sums.l_rec,
            l_sal: sums.l_sal,
            l_reg: sums.l_reg,
            total: sums.total,
            lr,
            val_hr10: metrics["hr10"],
            val_ndcg10: metrics["ndcg10"],
        };

        let progress = &mut self.state.progress;
        progress.epochs_done = epoch + 1;
        progress.rng.epoch = e + 1;
        let improved = progress.best_hr10.is_none_or(|best| record.val_hr10 > best);
        if improved {
            progress.best_hr10 = Some(record.val_hr10);
            progress.best_epoch = Some(epoch);
            progress.stale_epochs = 0;
        } else {
            progress.stale_epochs += 1;
            if hp.patience > 0 && progress.stale_epochs >= hp.patience {
                progress.stopped = true;
            }
        }
        if improved {
            self.best = Some(self.state.clone());
        }
        self.history.push(record);
        Ok(record)
    }

    /// Runs epochs until the epoch budget or early stopping ends training.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while !self.finished() {
            let record = self.run_epoch()?;
            on_epoch(&record);
        }
        Ok(())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        let best = self.best.unwrap_or_else(|| self.state.clone());
        TrainOutcome {
            last: self.state,
            best,
            history: self.history,
        }
    }
}

/// Samples the recommendation pairs and SAL edge pairs of batch `batch` in
/// epoch `epoch`, each from its own stream.
pub fn draw_batch(
    index: &UserItemIndex,
    graphs: &[IntervalGraph],
    users: &[usize],
    hp: &HyperParams,
    epoch: u64,
    batch: u64,
) -> Result<BatchSamples> {
    let mut rng = stream(hp.seed, Purpose::RecSamples, epoch, batch);
    let mut rec = Vec::with_capacity(users.len() * hp.n_pr);
    for (k, &u) in users.iter().enumerate() {
        let own = index.items(u);
        if own.is_empty() {
            return Err(Error::Sampling(format!("user {u} has no training items")));
        }
        for _ in 0..hp.n_pr {
            let pos = own[rng.random_range(0..own.len())];
            let neg = index.sample_negatives(u, 1, &mut rng)?[0];
            rec.push((k, pos, neg));
        }
    }
    let ssl = if hp.lambda1 > 0.0 {
        let mut rng = stream(hp.seed, Purpose::SslSamples, epoch, batch);
        sample_ssl_edge_pairs(graphs, users, hp.n_sal, hp.ssl_scope, &mut rng)
    } else {
        Vec::new()
    };
    Ok(BatchSamples {
        users: users.to_vec(),
        rec,
        ssl,
    })
}

/// Trains from a fresh initialization.
pub fn train(split: &SplitDataset, views: &Views, hp: &HyperParams, data: Option<DataConfig>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(split, views, hp, data)?;
    trainer.run(|_| {})?;
    Ok(trainer.into_outcome())
}
