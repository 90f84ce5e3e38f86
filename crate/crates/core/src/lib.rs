//! Language-guided concept activation vectors.
//!
//! Concept vectors (CAVs) for a target classifier's feature space, trained
//! with supervision transferred from a vision-language model's image-text
//! similarities, plus the metrics and the sample-reweighted head fine-tuning
//! that use them.

pub mod cavtrain;
pub mod concepts;
pub mod correction;
pub mod embedstore;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod synthbench;

pub use cavtrain::{Cav, CavMode, GuidanceOptions, LgTrainPlan};
pub use concepts::ProbeSet;
pub use embedstore::{
    ConceptClassPair, ConceptSpec, DatasetManifest, EmbeddingMatrix, LinearHead, PairSet,
    PairSource, Split,
};
pub use error::{Error, ErrorClass, Result};
pub use numerics::{BatchMode, GaussianParams, SgdConfig};
