//! Structure-conditioned protein sequence design.
//!
//! The crate implements a two-stage design pipeline: an equivariant graph
//! encoder turns backbone coordinates into invariant per-residue features,
//! and a contextual encoder-decoder generates amino-acid sequences from
//! them. Stage one pretrains the contextual module as a sequence
//! autoencoder; stage two transfers both modules into the full model and
//! trains with an exponential cross-entropy objective plus a cross-modal
//! alignment constraint.

pub mod alphabet;
pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gvp;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod transformer;

pub use alphabet::ResidueAlphabet;
pub use data::{BackboneRecord, Batch, Corpus, DatasetSplit};
pub use error::Error;
pub use geometry::{LocalFrame, ProteinGraph, RigidTransform};
pub use pipeline::TrainConfig;
