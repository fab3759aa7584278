//! Form document understanding: layout graphs, rich attention, and a
//! local-global transformer with BIOES decoding.

pub mod autodiff;
pub mod decoder_metrics;
pub mod derivation_oracles;
pub mod doc_model;
pub mod error;
pub mod etc_backbone;
pub mod graph_builder;
pub mod harness;
pub mod rich_attention;
pub mod supertoken_gcn;
pub mod synth_corpus;

pub use error::{Error, Result};
