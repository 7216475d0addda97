//! Stage 2: identity and region-aware makeup injection. Learnable region
//! queries pull per-region makeup embeddings out of the frozen style
//! encoder; a decoupled image-prompt cross-attention stream (LoRA-adapted)
//! injects them into the frozen denoiser; a focal+dice attention loss pins
//! each token to its facial region; a zero-initialized conv branch injects
//! source identity.

mod attn_loss;
mod identity;
mod lora;
mod projector;
mod train;
mod transfer;

pub use attn_loss::{
    average_maps, loss_attention, masks_at_resolution, AttentionLossOutput, AttnLossConfig,
    DiceReduction,
};
pub use identity::IdentityBranch;
pub use lora::{LoraLayer, LoraStack};
pub use projector::{
    extract_region_embeddings, region_embeddings_var, Projector, ProjectorConfig,
    RegionEmbeddingSet, RegionQueryBank,
};
pub use train::{train_transfer, PairSample, Stage2Config, Stage2Modules, Stage2StepLog};
pub use transfer::{transfer, transfer_with_embeddings, AttentionRecord, LayerRecord};
