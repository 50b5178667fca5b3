//! Two-branch large/small kernel blocks and their single-kernel equivalents.
//!
//! A block computes `α_L·(x ∗ W_L) + α_S·(x ∗ W_S)`. Because convolution is
//! bilinear, the two branches collapse into one kernel `W′`, and branch-wise
//! SGD on `(W_L, W_S)` is the same as SGD on `W′` with a per-offset step
//! field that is larger on the small kernel's support.

mod adam;
mod csla;

pub use adam::{
    adam_scale_invariance_check, adamw_step, central_peripheral_step_ratio, normal_gradient_stream, run_csla_adamw,
    AdamConfig, AdamState, CslaAdamRun, ScaleInvarianceReport, StepRatio, DEFAULT_LR,
};
pub use csla::{
    assembled_update, branch_adamw_step, branch_sgd_step, branch_step, composed_update_oracle, csla_branch_grads,
    csla_forward, effective_lr_field, merge_so, random_instance, so_grad, so_grad_reparam_step, trajectory_comparison,
    CslaConfig, CslaState, FieldConvention, LrField, OptimizerKind, OutputLoss, RegressionLoss, TrajectoryReport,
    DEFAULT_LAMBDA_L, DEFAULT_LAMBDA_S,
};
