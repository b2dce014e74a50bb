//! Retrieval-augmented precursor prediction for inorganic synthesis.
//!
//! Two retrievers pick reference materials from the training recipes: a
//! masked-precursor-completion model ([`mpc`]) ranks by cosine similarity of
//! learned composition embeddings, and a formation-energy model ([`nre`])
//! ranks by the most negative predicted reaction enthalpy. The [`fusion`]
//! model encodes target and references with the composition graph
//! [`encoder`], mixes the references through parameter-free attention and
//! classifies precursors. [`evalkit`] decodes precursor sets and scores them.

pub mod chemio;
pub mod elements;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod fusion;
pub mod nn;
pub mod nre;
pub mod pipeline;
pub mod mpc;
pub mod retrieval;
pub mod synthgen;
pub mod artifact;
pub mod tape;

pub use error::{Error, Result};
