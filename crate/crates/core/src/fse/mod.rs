//! Feature selection and extraction: boundary/integrity separation of the
//! previous prediction and cross-modal attention fusion.

pub mod boundary;
pub mod coa;
pub mod fusion;

pub use boundary::{
    boundary_map, integrity_map, patch_boundary_scores, pool_prediction, BoundaryArtifacts, DEFAULT_TAU,
};
pub use coa::{CoABlock, CoaConfig};
pub use fusion::{fse_forward, gate_patch_tokens, FseBlock, FusedStageFeatures};
