use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SslSamplingScope;
use crate::error::{Error, Result};

/// How the per-layer outputs of the short-term encoder are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerCombine {
    /// Mean of the `L` layer outputs (dimension `d`).
    #[default]
    Mean,
    /// Concatenation (dimension `L·d`) followed by a shared `L·d × d`
    /// projection.
    ConcatProject,
}

/// Model variants for the module ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Variant {
    #[default]
    Full,
    /// No self-augmented learning term (`λ1 = 0`).
    NoSal,
    /// Personalized weights fixed to 1.
    NoUserWeight,
    /// One global graph instead of several short-term graphs.
    NoShortTermGraphs,
    /// No instance-level attention encoder; `ê = ē`.
    NoInstanceAttention,
    /// Interval-level GRU + attention replaced by a plain sum over periods.
    NoIntervalAttention,
    /// No graph propagation; short-term embeddings are the raw tables.
    NoCollaborativeFiltering,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoSal,
        Variant::NoUserWeight,
        Variant::NoShortTermGraphs,
        Variant::NoInstanceAttention,
        Variant::NoIntervalAttention,
        Variant::NoCollaborativeFiltering,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSal => "-SAL",
            Variant::NoUserWeight => "-UW",
            Variant::NoShortTermGraphs => "-STG",
            Variant::NoInstanceAttention => "-ATL",
            Variant::NoIntervalAttention => "-GAT",
            Variant::NoCollaborativeFiltering => "-CF",
        }
    }

    /// Hyperparameters with this variant's overrides applied.
    pub fn apply(self, hp: &HyperParams) -> HyperParams {
        let mut out = hp.clone();
        out.variant = self;
        match self {
            Variant::NoSal => out.lambda1 = 0.0,
            Variant::NoShortTermGraphs => out.periods = 1,
            _ => {}
        }
        out
    }

    pub fn propagates(self) -> bool {
        self != Variant::NoCollaborativeFiltering
    }

    pub fn interval_attention(self) -> bool {
        self != Variant::NoIntervalAttention
    }

    pub fn instance_attention(self) -> bool {
        self != Variant::NoInstanceAttention
    }

    pub fn user_weights(self) -> bool {
        self != Variant::NoUserWeight
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().trim_start_matches('-').to_ascii_lowercase();
        let key = key.strip_prefix("no-").unwrap_or(&key);
        Ok(match key {
            "full" | "selfgnn" => Variant::Full,
            "sal" => Variant::NoSal,
            "uw" => Variant::NoUserWeight,
            "stg" => Variant::NoShortTermGraphs,
            "atl" => Variant::NoInstanceAttention,
            "gat" => Variant::NoIntervalAttention,
            "cf" => Variant::NoCollaborativeFiltering,
            _ => return Err(Error::UnknownVariant(s.to_string())),
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Model and optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Embedding size `d`.
    pub dim: usize,
    /// Graph propagation layers `L`.
    pub layers: usize,
    /// Instance-level attention layers `L_a`.
    pub att_layers: usize,
    /// Number of short-term periods `T`.
    pub periods: usize,
    pub d_sal: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    /// Edge dropout probability of the short-term graphs.
    pub dropout: f64,
    pub batch: usize,
    /// Maximum instance sequence length `M`.
    pub max_seq: usize,
    /// Positive/negative pairs per user per batch.
    pub n_pr: usize,
    /// SAL edge pairs per period per batch.
    pub n_sal: usize,
    pub epochs: usize,
    pub seed: u64,
    pub heads: usize,
    pub leaky_slope: f64,
    pub layer_combine: LayerCombine,
    pub ssl_scope: SslSamplingScope,
    /// Early-stopping patience in epochs on validation HR@10; 0 disables.
    pub patience: usize,
    pub variant: Variant,
    /// Cut gradients through the long-term SAL scores.
    pub stop_long_scores: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            att_layers: 2,
            periods: 8,
            d_sal: 32,
            lambda1: 1e-5,
            lambda2: 1e-2,
            lr: 1e-3,
            lr_decay: 0.96,
            dropout: 0.5,
            batch: 512,
            max_seq: 50,
            n_pr: 1,
            n_sal: 64,
            epochs: 100,
            seed: 0,
            heads: 4,
            leaky_slope: 0.1,
            layer_combine: LayerCombine::Mean,
            ssl_scope: SslSamplingScope::Batch,
            patience: 10,
            variant: Variant::Full,
            stop_long_scores: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("layers", self.layers),
            ("att_layers", self.att_layers),
            ("periods", self.periods),
            ("d_sal", self.d_sal),
            ("batch", self.batch),
            ("max_seq", self.max_seq),
            ("n_pr", self.n_pr),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope must lie in (0, 1)"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr must be positive and lr_decay in (0, 1]"));
        }
        if self.variant == Variant::NoShortTermGraphs && self.periods != 1 {
            return Err(Error::config("-STG variant requires periods = 1"));
        }
        Ok(())
    }

    /// Learning rate used during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}
