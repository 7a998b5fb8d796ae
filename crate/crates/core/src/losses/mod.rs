//! Training objectives. Every loss is built from differentiable tensor ops and
//! works in whatever float dtype its inputs use.

pub mod depth;
pub mod gradcheck;
pub mod mask;
pub mod prior;
pub mod total;

pub use depth::{silog_loss, SILOG_LAMBDA};
pub use gradcheck::{check_gradient, check_gradient_batched, GradCheck, FD_STEP};
pub use mask::{bce_with_logits, pixel_weights, ssim_loss, weighted_bce, weighted_iou};
pub use prior::{
    depth_continuity_loss, depth_prior_terms, depth_stability_loss, integrity_prior_loss, mask_mean_depth, sobel,
    DepthPriorTerms,
};
pub use total::{
    stage_loss, stage_terms, total_loss, total_loss_from_logits, total_terms, LossConfig, LossReport, StageTerms,
    TotalTerms,
};
