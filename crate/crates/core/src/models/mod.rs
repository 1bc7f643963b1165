//! Small differentiable encoders with hand-written backward passes, their
//! trainers and checkpoint I/O.

mod checkpoint;
mod encoders;
mod mlp;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, Checkpoint, CheckpointMeta, ModelBundle};
pub use encoders::{
    forward_fused, forward_image, forward_text, fused_logits, vjp_fused_image, vjp_image, ConditionedFusion,
    FusionHead, FusionSpec, ImageEncoder, ImageEncoderSpec, ImageModel, TextEncoder, TextEncoderSpec,
};
pub use mlp::{normalize, normalize_backward, Dense, Mlp, MlpTrace};
pub use train::{
    alignment_gap, fusion_accuracy, info_nce, matching_pairs, train_fusion, train_itc, PairTask, TrainLog,
    TrainSpec,
};
