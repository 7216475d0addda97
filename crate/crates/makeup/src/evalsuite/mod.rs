//! Metrics and the ablation/report harness.

mod ablation;
mod metrics;
mod report;

pub use ablation::{
    ablate_clip_objectives, run_ablation, run_stage2_variant, AblationGrids, AblationReport,
    ClipAblationRow, InjectAblationRow,
};
pub use metrics::{
    attention_region_iou, l2_nonface, region_style_error, ssim, ssim_gray, structure_ssim,
};
pub use report::{render_report, stack_rows_img, tile_row};
