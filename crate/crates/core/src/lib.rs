//! Weakly supervised relation detection between two marked entities.
//!
//! Unsupervised detectors over dependency parses ([`depgraph`]) and encoder
//! attention ([`attnmap`]), pairwise-comparison data generation
//! ([`pairgen`]), risk-minimization training of a linear head ([`riskmin`])
//! and evaluation ([`eval`]).

pub mod attnmap;
pub mod cli;
pub mod corpus;
pub mod depgraph;
pub mod error;
pub mod eval;
pub mod pairgen;
pub mod riskmin;

pub use corpus::{Corpus, Label, SentenceRecord, Span};
pub use error::{Error, Result};
