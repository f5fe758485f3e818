//! Self-teaching graph transformer for multimodal cold-start node
//! classification.
//!
//! The pipeline runs in two phases. An offline pass normalizes the graph and
//! propagates each modality's features over `K` hops ([`graphprep`]). Training
//! then gathers per-node token sequences ([`seqbuild`]), projects them with a
//! routed mixture of experts ([`moeproj`]), encodes them under a cold-start
//! attention mask ([`encoder`]), and fits student and teacher heads
//! ([`heads`]). Because the student's tokens never see neighbor tokens, the
//! trained student classifies isolated nodes from their own features.

pub mod clidata;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod graphprep;
pub mod heads;
pub mod model;
pub mod moeproj;
pub mod numkit;
pub mod seqbuild;
pub mod trainer;

pub use error::{Error, Result};
