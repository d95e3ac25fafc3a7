//! Two-stage semantic feature learning for universal unsupervised
//! cross-domain retrieval over vector-feature domains.
//!
//! Stage 1 trains a feature encoder on two unlabeled domains with
//! instance discrimination, prototypical contrastive learning over a
//! cross-domain unified prototype structure, and a semantic-enhanced
//! loss. Stage 2 aligns the domains adversarially while regulating
//! pairwise feature structure against a frozen snapshot, and matches
//! cross-domain neighbors with a reliability-switched
//! nearest-neighbor loss. Retrieval serves ranked answers or null for
//! open-set (private-class) queries.

pub mod checkpoint;
pub mod clustering;
pub mod datagen;
pub mod diffkit;
pub mod encoder;
pub mod error;
pub mod membank;
pub mod pipeline;
pub mod protostruct;
pub mod retrieval;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod trainer;

pub use error::{Error, Result};
