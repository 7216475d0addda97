//! Ablation harness: reproduces the three study grids at desk scale —
//! encoder objectives vs KNN style accuracy, injection modules
//! (LoRA / pixel / structure), and the attention loss on/off.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::denoiser::{DenoisingUNet, NoiseSchedule};
use crate::error::{Error, Result};
use crate::inject::{train_transfer, PairSample, Stage2Modules};
use crate::pipeline::{denoiser_text_tokens, text_embedder};
use crate::styleenc::{
    embed_all, knn_accuracy, train_style_encoder, StyleEncoder, StyleSample,
};
use crate::synthface::NUM_REGIONS;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationGrids {
    pub clip_objectives: bool,
    pub injection_modules: bool,
    pub attention_loss: bool,
}

impl Default for AblationGrids {
    fn default() -> Self {
        Self {
            clip_objectives: true,
            injection_modules: true,
            attention_loss: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClipAblationRow {
    pub ssl: bool,
    pub text: bool,
    pub accuracy: f32,
}

/// Encoder-objective grid: untrained, SSL-only, Text-only, SSL+Text, each
/// scored by leave-one-out KNN on clean images.
pub fn ablate_clip_objectives(
    samples: &[StyleSample],
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<ClipAblationRow>> {
    let embedder = text_embedder(cfg.embed_dim);
    let images: Vec<&gradtape::Tensor> = samples.iter().map(|s| &s.image).collect();
    let labels: Vec<u32> = samples.iter().map(|s| s.style_id).collect();

    let mut rows = Vec::new();
    for (ssl, text) in [(false, false), (true, false), (false, true), (true, true)] {
        let acc = if !ssl && !text {
            // untrained: fresh encoder, no optimization
            let enc = StyleEncoder::new(cfg.encoder_config(), seed);
            knn_accuracy(&embed_all(&enc, &images)?, &labels, cfg.knn_k)?
        } else {
            let mut s1 = cfg.stage1_config(seed);
            s1.ssl_on = ssl;
            s1.text_on = text;
            let (enc, _) = train_style_encoder(samples, &embedder, &s1)?;
            knn_accuracy(&embed_all(&enc, &images)?, &labels, cfg.knn_k)?
        };
        rows.push(ClipAblationRow {
            ssl,
            text,
            accuracy: acc,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct InjectAblationRow {
    pub label: String,
    pub lora: bool,
    pub pixel: bool,
    pub structure: bool,
    pub attn_on: bool,
    pub mean_style_err: f32,
    pub mean_attn_iou: f32,
    pub id_proxy: f32,
    pub ssim: f32,
}

/// Train one stage-2 variant and evaluate it on the training pairs
/// themselves (desk-scale: what matters is the relative ordering).
#[allow(clippy::too_many_arguments)]
pub fn run_stage2_variant(
    label: &str,
    pairs: &[PairSample],
    encoder: &StyleEncoder,
    base: &DenoisingUNet,
    schedule: &NoiseSchedule,
    cfg: &RunConfig,
    seed: u64,
    lora: bool,
    pixel: bool,
    structure: bool,
    attn_on: bool,
) -> Result<(Stage2Modules, InjectAblationRow)> {
    let embedder = text_embedder(cfg.embed_dim);
    let text = denoiser_text_tokens(&embedder);
    let mut s2 = cfg.stage2_config(seed);
    s2.lora_on = lora;
    s2.use_pixels = pixel;
    s2.use_structure = structure;
    s2.attn_on = attn_on;
    let (modules, _) = train_transfer(pairs, encoder, base, schedule, &text, &s2)?;

    // evaluate on up to eval_limit training pairs
    let mut style_err_sum = 0.0f64;
    let mut iou_sum = 0.0f64;
    let mut id_sum = 0.0f64;
    let mut ssim_sum = 0.0f64;
    let mut count = 0usize;
    for (i, p) in pairs.iter().take(cfg.eval_limit.max(1)).enumerate() {
        let (out, record) = crate::inject::transfer(
            &p.source,
            &p.structure,
            &p.masks,
            &p.reference,
            encoder,
            &modules,
            base,
            schedule,
            &text,
            &cfg.ddim(seed ^ i as u64),
        )?;
        // style error against the reference's own appearance: compare mean
        // region colors of output vs reference (the aligned oracle image)
        let mut per_pair = 0.0f32;
        for r in crate::synthface::Region::all() {
            let got = crate::imageio::mean_color(&out, p.masks.mask(r))?;
            let want = crate::imageio::mean_color(&p.reference, p.masks.mask(r))?;
            let e = (0..3)
                .map(|c| (got[c] - want[c]).abs())
                .fold(0.0f32, f32::max);
            per_pair += e / NUM_REGIONS as f32;
        }
        style_err_sum += per_pair as f64;
        let ious = crate::evalsuite::attention_region_iou(&record.averaged, &p.masks)?;
        iou_sum += ious.iter().map(|&v| v as f64).sum::<f64>() / NUM_REGIONS as f64;
        id_sum += crate::evalsuite::structure_ssim(&out, &p.source)? as f64;
        ssim_sum += crate::evalsuite::ssim(&out, &p.source)? as f64;
        count += 1;
    }
    let row = InjectAblationRow {
        label: label.to_string(),
        lora,
        pixel,
        structure,
        attn_on,
        mean_style_err: (style_err_sum / count as f64) as f32,
        mean_attn_iou: (iou_sum / count as f64) as f32,
        id_proxy: (id_sum / count as f64) as f32,
        ssim: (ssim_sum / count as f64) as f32,
    };
    Ok((modules, row))
}

pub struct AblationReport {
    pub clip: Vec<ClipAblationRow>,
    pub inject: Vec<InjectAblationRow>,
    pub attn: Vec<InjectAblationRow>,
}

/// Run the configured grids and write one CSV per table under `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    grids: &AblationGrids,
    style_samples: &[StyleSample],
    pairs: &[PairSample],
    encoder: &StyleEncoder,
    base: &DenoisingUNet,
    schedule: &NoiseSchedule,
    cfg: &RunConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<AblationReport> {
    if !grids.clip_objectives && !grids.injection_modules && !grids.attention_loss {
        return Err(Error::InvalidInput(
            "ablation grid config selects no tables".into(),
        ));
    }
    fs::create_dir_all(out_dir)?;
    let mut report = AblationReport {
        clip: Vec::new(),
        inject: Vec::new(),
        attn: Vec::new(),
    };

    if grids.clip_objectives {
        report.clip = ablate_clip_objectives(style_samples, cfg, seed)?;
        let mut csv = String::from("ssl,text,knn_accuracy\n");
        for r in &report.clip {
            csv.push_str(&format!("{},{},{:.6}\n", r.ssl, r.text, r.accuracy));
        }
        fs::write(out_dir.join("ablation_clip.csv"), csv)?;
    }

    if grids.injection_modules {
        for (label, lora, pixel, structure) in [
            ("full", true, true, true),
            ("no_lora", false, true, true),
            ("no_pixel", true, false, true),
            ("no_structure", true, true, false),
        ] {
            let (_m, row) = run_stage2_variant(
                label, pairs, encoder, base, schedule, cfg, seed, lora, pixel, structure, true,
            )?;
            report.inject.push(row);
        }
        let mut csv = String::from("label,lora,pixel,structure,mean_style_err,mean_attn_iou,id_proxy,ssim\n");
        for r in &report.inject {
            csv.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.label, r.lora, r.pixel, r.structure, r.mean_style_err, r.mean_attn_iou, r.id_proxy, r.ssim
            ));
        }
        fs::write(out_dir.join("ablation_inject.csv"), csv)?;
    }

    if grids.attention_loss {
        for (label, attn_on) in [("attn_on", true), ("attn_off", false)] {
            let (_m, row) = run_stage2_variant(
                label, pairs, encoder, base, schedule, cfg, seed, true, true, true, attn_on,
            )?;
            report.attn.push(row);
        }
        let mut csv = String::from("label,attn_loss,mean_style_err,mean_attn_iou,id_proxy,ssim\n");
        for r in &report.attn {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.label, r.attn_on, r.mean_style_err, r.mean_attn_iou, r.id_proxy, r.ssim
            ));
        }
        fs::write(out_dir.join("ablation_attn.csv"), csv)?;
    }

    Ok(report)
}
