//! Stage 1: makeup style encoder fine-tuning. Content augmentations alter
//! face structure while preserving makeup appearance; paired-view and
//! image-text contrastive objectives pull same-style embeddings together;
//! leave-one-out KNN measures how well styles separate.

mod augment;
mod encoder;
mod knn;
mod losses;
mod text;
mod tps;
mod train;

pub use augment::{augment, two_views, AppliedAugment, AugmentationPolicy};
pub use encoder::{multi_head_attention, EncoderConfig, StyleEncoder};
pub use knn::knn_accuracy;
pub use losses::{loss_ssl, loss_text};
pub use text::{style_prompt, tokenize, TextEmbedder, STYLE_PROMPT_TEMPLATE};
pub use tps::{tps_warp, TpsMap};
pub use train::{embed_all, train_style_encoder, Stage1Config, Stage1StepLog, StyleSample};
