//! Dense and sparse tensor arithmetic, reverse-mode differentiation,
//! recurrent/attention layers, initialization and the Adam optimizer.

pub mod adam;
pub mod init;
pub mod nn;
pub mod ops;
pub mod sparse;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use nn::{gru_cell, multi_head_attention, AttentionParams, AttentionVars, GruParams, GruVars};
pub use ops::{leaky_relu, logistic, sigmoid};
pub use sparse::{spmm, SparseMatrix};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
