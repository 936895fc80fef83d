//! DSPSD: smart Ponzi scheme detection over temporal transaction graphs.
//!
//! The pipeline ingests transaction logs and contract opcode sequences,
//! learns per-node embeddings that combine graph structure with opcode
//! semantics under edge supervision, aggregates each account's interaction
//! history with an LSTM, and classifies contract accounts as Ponzi or normal
//! with an MLP. A seeded synthetic generator and an evaluation harness
//! (k-fold cross-validation, TF-IDF opcode ranking, PCA projection) round
//! out the toolkit.

pub mod classifier;
pub mod dataio;
pub mod evalviz;
pub mod numerics;
pub mod opcode_embed;
pub mod pipeline;
pub mod structure_embed;
pub mod temporal;
pub mod txgraph;

pub use numerics::{Rng, Tensor2};
pub use txgraph::{Account, AccountId, Label, TemporalGraph, TransactionEvent};
