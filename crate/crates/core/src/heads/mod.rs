//! Dense anchor-free heads, target assignment, detection losses, and
//! uncertainty-weighted auxiliary losses.

mod head;
mod loss;
mod targets;
mod uncertainty;

pub use head::{Head, HeadConfig, HeadOutput, PRIOR_PROBABILITY};
pub use loss::{detection_loss, focal_loss, iou_loss, FocalParams, LevelLoss};
pub use targets::{assign_targets, LevelRanges, LevelTargets, TargetAssignment};
pub use uncertainty::{
    descend_alpha, optimal_alpha, total_loss, uncertainty_alpha, uncertainty_wrap, wrapped_value,
    AuxLossValues, AuxTerms, LevelLossValues, LossBreakdown, LossConfig, LossMode, UncertaintyHead,
};
