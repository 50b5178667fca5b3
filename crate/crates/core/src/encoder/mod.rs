//! Toy volumetric encoder and the synthetic segmentation task used to compare
//! plain, fixed-prior and learned-prior large kernels.

mod block;
mod checkpoint;
mod model;
mod task;
mod train;

pub use block::{block_kernel, rep3d_block_forward, rep3d_block_graph, Arm, BlockConfig, BlockParams, BlockVars};
pub use checkpoint::{load_checkpoint, save_checkpoint, BUNDLE_FORMAT, BUNDLE_VERSION, MANIFEST};
pub use model::{expected_param_count, EncoderConfig, StageConfig, StageProbe, ToyEncoder};
pub use task::{graph_dice_loss, soft_dice, synth_task_generate, synth_task_set, ToyTask, DICE_SMOOTH};
pub use train::{
    compare_arms, evaluate, train_toy, ArmComparison, CurveRecord, SeedResult, TrainConfig, TrainCurve, TrainOutcome,
    DEFAULT_CHECKPOINTS, DEFAULT_TOY_LR, DEFAULT_TOY_STEPS, DEFAULT_TRAIN_SAMPLES,
};

/// Builds a freshly initialized encoder; see [`ToyEncoder::init`].
pub fn build_toy_encoder(config: &EncoderConfig, seed: u64) -> crate::Result<ToyEncoder> {
    ToyEncoder::init(config, seed)
}
