//! Causer: sequential next-item recommendation with a jointly learned,
//! cluster-level causal graph.
//!
//! Items are embedded by an encoder/decoder pair and softly assigned to K
//! latent clusters. A continuous K x K matrix over those clusters is trained
//! under a smooth acyclicity penalty (augmented Lagrangian schedule) jointly
//! with a recurrent next-item predictor that filters causally irrelevant
//! history and weights the remaining steps by causal effect and attention.
//!
//! The crate is organized as:
//! - [`diffnum`]: dense matrices, matrix exponential, reverse-mode tape
//! - [`item_space`]: raw features, autoencoder, soft clustering
//! - [`causal_graph`]: cluster graph, item-level projection, acyclicity
//! - [`seq_model`]: recurrent cells, history filtering, attention, scoring
//! - [`trainer`]: joint loss and the constrained training loop
//! - [`data_io`]: ingestion, splitting, synthetic benchmark generation
//! - [`eval`]: ranking metrics, Markov-equivalence comparison, explanations
//! - [`model`]: the assembled model stack and its checkpoint format

pub mod causal_graph;
pub mod data_io;
pub mod diffnum;
pub mod error;
pub mod eval;
pub mod item_space;
pub mod model;
pub mod seq_model;
pub mod trainer;

pub use error::{Error, Result};
