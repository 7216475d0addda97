//! End-to-end orchestration shared by the CLI, the ablation harness and the
//! acceptance suite: dataset loading, per-stage checkpoint wrappers, and the
//! evaluation loop.

use std::fs;
use std::path::Path;

use gradtape::Tensor;
use serde_json::json;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::denoiser::{DenoisingUNet, NoiseSchedule, UnetConfig, DENOISER_PROMPT};
use crate::error::{Error, Result};
use crate::evalsuite::{attention_region_iou, l2_nonface, region_style_error, ssim, structure_ssim};
use crate::imageio::{load_rgb, save_gray, save_rgb, upscale_nearest};
use crate::inject::{transfer, Stage2Config, Stage2Modules, PairSample};
use crate::pairs::PairsManifest;
use crate::styleenc::{EncoderConfig, StyleEncoder, StyleSample, TextEmbedder};
use crate::synthface::{
    load_face_assets, load_styles, DatasetManifest, FaceAssets, MakeupStyle, NUM_REGIONS,
};

/// The frozen text embedder is derived from the run seed=0 stream so every
/// stage sees identical text anchors.
pub fn text_embedder(embed_dim: usize) -> TextEmbedder {
    TextEmbedder::new(0x7e87, embed_dim)
}

/// Token sequence for the denoiser prompt.
pub fn denoiser_text_tokens(embedder: &TextEmbedder) -> Tensor {
    embedder.token_embeddings(DENOISER_PROMPT)
}

/// Load every (after-image, style) record as a stage-1 training sample.
pub fn load_style_samples(root: &Path, manifest: &DatasetManifest) -> Result<Vec<StyleSample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            Ok(StyleSample {
                image: load_rgb(&root.join(&r.after))?,
                style_id: r.style_id,
                description: r.description.clone(),
            })
        })
        .collect()
}

/// Load the accepted pairs with their face assets.
pub fn load_pair_samples(
    dataset_root: &Path,
    dataset: &DatasetManifest,
    pairs_dir: &Path,
    pairs: &PairsManifest,
) -> Result<Vec<PairSample>> {
    pairs
        .accepted()
        .map(|p| {
            let entry = dataset
                .faces
                .iter()
                .find(|f| f.face_id == p.face_id)
                .ok_or_else(|| Error::MissingData(format!("face {}", p.face_id)))?;
            let assets = load_face_assets(dataset_root, entry)?;
            Ok(PairSample {
                source: assets.before,
                reference: load_rgb(&pairs_dir.join(&p.reference))?,
                masks: assets.masks,
                structure: assets.structure,
                style_id: p.style_id,
            })
        })
        .collect()
}

// -- checkpoint wrappers --------------------------------------------------------

pub fn save_encoder(enc: &StyleEncoder, path: &Path) -> Result<()> {
    checkpoint::save(
        &enc.store,
        "style-encoder",
        serde_json::to_value(&enc.cfg)?,
        serde_json::Value::Null,
        path,
    )
}

pub fn load_encoder(path: &Path) -> Result<StyleEncoder> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.header.kind != "style-encoder" {
        return Err(Error::Checkpoint(format!(
            "expected a style-encoder checkpoint, found {}",
            ckpt.header.kind
        )));
    }
    let cfg: EncoderConfig = serde_json::from_value(ckpt.header.config.clone())?;
    let enc = StyleEncoder::new(cfg, 0);
    enc.store
        .load_state_dict(&ckpt.tensors)
        .map_err(Error::Checkpoint)?;
    Ok(enc)
}

pub fn save_base(
    unet: &DenoisingUNet,
    timesteps: usize,
    beta_start: f32,
    beta_end: f32,
    path: &Path,
) -> Result<()> {
    checkpoint::save(
        &unet.store,
        "denoiser-base",
        json!({
            "unet": serde_json::to_value(&unet.cfg)?,
            "timesteps": timesteps,
            "beta_start": beta_start,
            "beta_end": beta_end,
        }),
        serde_json::Value::Null,
        path,
    )
}

pub fn load_base(path: &Path) -> Result<(DenoisingUNet, NoiseSchedule)> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.header.kind != "denoiser-base" {
        return Err(Error::Checkpoint(format!(
            "expected a denoiser-base checkpoint, found {}",
            ckpt.header.kind
        )));
    }
    let unet_cfg: UnetConfig = serde_json::from_value(ckpt.header.config["unet"].clone())?;
    let timesteps = ckpt.header.config["timesteps"]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("missing timesteps".into()))? as usize;
    let beta_start = ckpt.header.config["beta_start"].as_f64().unwrap_or(1e-4) as f32;
    let beta_end = ckpt.header.config["beta_end"].as_f64().unwrap_or(0.02) as f32;
    let unet = DenoisingUNet::new(unet_cfg, 0);
    unet.store
        .load_state_dict(&ckpt.tensors)
        .map_err(Error::Checkpoint)?;
    let schedule = NoiseSchedule::linear(timesteps, beta_start, beta_end)?;
    Ok((unet, schedule))
}

/// Stage-2 checkpoints record the hashes of the frozen base and encoder;
/// loading against different ones is refused.
pub fn save_stage2(
    modules: &Stage2Modules,
    unet_cfg: &UnetConfig,
    base_hash: u64,
    encoder_hash: u64,
    path: &Path,
) -> Result<()> {
    checkpoint::save(
        &modules.store,
        "stage2",
        json!({
            "stage2": serde_json::to_value(&modules.cfg)?,
            "unet": serde_json::to_value(unet_cfg)?,
        }),
        json!({
            "base_hash": format!("{base_hash:016x}"),
            "encoder_hash": format!("{encoder_hash:016x}"),
        }),
        path,
    )
}

pub fn load_stage2(
    path: &Path,
    base: &DenoisingUNet,
    encoder: &StyleEncoder,
) -> Result<Stage2Modules> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.header.kind != "stage2" {
        return Err(Error::Checkpoint(format!(
            "expected a stage2 checkpoint, found {}",
            ckpt.header.kind
        )));
    }
    for (field, hash) in [
        ("base_hash", base.store.content_hash()),
        ("encoder_hash", encoder.store.content_hash()),
    ] {
        let want = ckpt.header.extra[field]
            .as_str()
            .ok_or_else(|| Error::Checkpoint(format!("missing {field}")))?;
        let got = format!("{hash:016x}");
        if want != got {
            return Err(Error::Checkpoint(format!(
                "{field} mismatch: checkpoint {want} vs loaded {got}; \
                 refusing to pair stage-2 weights with a different frozen model"
            )));
        }
    }
    let cfg: Stage2Config = serde_json::from_value(ckpt.header.config["stage2"].clone())?;
    let unet_cfg: UnetConfig = serde_json::from_value(ckpt.header.config["unet"].clone())?;
    if unet_cfg != base.cfg {
        return Err(Error::Checkpoint("unet config mismatch".into()));
    }
    let modules = Stage2Modules::new(cfg, &unet_cfg, 0);
    modules
        .store
        .load_state_dict(&ckpt.tensors)
        .map_err(Error::Checkpoint)?;
    Ok(modules)
}

// -- evaluation -----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub pair_id: u32,
    pub face_id: u32,
    pub style_id: u32,
    pub ssim: f32,
    pub id_proxy: f32,
    pub l2m_pre: f64,
    pub l2m_png: f64,
    pub attn_iou: [f32; NUM_REGIONS],
    pub style_err: [f32; NUM_REGIONS],
}

pub fn eval_csv_header() -> String {
    let mut s = String::from("pair_id,face_id,style_id,ssim,id_proxy,l2m_pre,l2m_png");
    for r in crate::synthface::REGION_NAMES {
        s.push_str(&format!(",attn_iou_{r}"));
    }
    for r in crate::synthface::REGION_NAMES {
        s.push_str(&format!(",style_err_{r}"));
    }
    s
}

pub fn eval_csv_row(r: &EvalRecord) -> String {
    let mut s = format!(
        "{},{},{},{:.6},{:.6},{:.8e},{:.8e}",
        r.pair_id, r.face_id, r.style_id, r.ssim, r.id_proxy, r.l2m_pre, r.l2m_png
    );
    for v in r.attn_iou {
        s.push_str(&format!(",{v:.6}"));
    }
    for v in r.style_err {
        s.push_str(&format!(",{v:.6}"));
    }
    s
}

/// Evaluate transfers for accepted pairs (up to `cfg.eval_limit`), writing
/// outputs and attention maps under `out_dir` plus `eval.csv`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    dataset_root: &Path,
    dataset: &DatasetManifest,
    pairs_dir: &Path,
    pairs: &PairsManifest,
    encoder: &StyleEncoder,
    base: &DenoisingUNet,
    schedule: &NoiseSchedule,
    modules: &Stage2Modules,
    cfg: &RunConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<EvalRecord>> {
    let styles = load_styles(dataset_root)?;
    let embedder = text_embedder(cfg.embed_dim);
    let text = denoiser_text_tokens(&embedder);
    fs::create_dir_all(out_dir)?;

    let mut records = Vec::new();
    for p in pairs.accepted().take(cfg.eval_limit) {
        let entry = dataset
            .faces
            .iter()
            .find(|f| f.face_id == p.face_id)
            .ok_or_else(|| Error::MissingData(format!("face {}", p.face_id)))?;
        let assets: FaceAssets = load_face_assets(dataset_root, entry)?;
        let reference = load_rgb(&pairs_dir.join(&p.reference))?;
        let style: &MakeupStyle = styles
            .iter()
            .find(|s| s.style_id == p.style_id)
            .ok_or_else(|| Error::MissingData(format!("style {}", p.style_id)))?;

        let (output, record) = transfer(
            &assets.before,
            &assets.structure,
            &assets.masks,
            &reference,
            encoder,
            modules,
            base,
            schedule,
            &text,
            &cfg.ddim(seed ^ p.pair_id as u64),
        )?;

        // pre-quantization metrics
        let l2m_pre = l2_nonface(&output, &assets.before, &assets.masks.non_face_mask)?;
        let ssim_v = ssim(&output, &assets.before)?;
        let id_proxy = structure_ssim(&output, &assets.before)?;
        let attn_iou_v = attention_region_iou(&record.averaged, &assets.masks)?;
        let err = region_style_error(&output, &assets.masks, style, &assets.before)?;
        let style_err: Vec<f32> = err
            .iter()
            .map(|e| e.iter().cloned().fold(0.0f32, f32::max))
            .collect();

        // post-PNG-roundtrip non-face MSE
        let out_path = out_dir.join(format!("pair_{:04}_output.png", p.pair_id));
        save_rgb(&output, &out_path)?;
        let reloaded = load_rgb(&out_path)?;
        let l2m_png = l2_nonface(&reloaded, &assets.before, &assets.masks.non_face_mask)?;

        save_rgb(&assets.before, &out_dir.join(format!("pair_{:04}_source.png", p.pair_id)))?;
        save_rgb(&reference, &out_dir.join(format!("pair_{:04}_reference.png", p.pair_id)))?;
        let (uh, _uw) = record.res;
        let factor = (cfg.image_size / uh).max(1);
        for (ri, name) in crate::synthface::REGION_NAMES.iter().enumerate() {
            let pix = record.res.0 * record.res.1;
            let map = Tensor::from_vec(
                &[record.res.0, record.res.1],
                record.averaged.data()[ri * pix..(ri + 1) * pix].to_vec(),
            );
            save_gray(
                &upscale_nearest(&map, factor),
                &out_dir.join(format!("pair_{:04}_attn_{name}.png", p.pair_id)),
            )?;
        }

        records.push(EvalRecord {
            pair_id: p.pair_id,
            face_id: p.face_id,
            style_id: p.style_id,
            ssim: ssim_v,
            id_proxy,
            l2m_pre,
            l2m_png,
            attn_iou: [attn_iou_v[0], attn_iou_v[1], attn_iou_v[2], attn_iou_v[3]],
            style_err: [style_err[0], style_err[1], style_err[2], style_err[3]],
        });
    }

    let mut csv = eval_csv_header();
    csv.push('\n');
    for r in &records {
        csv.push_str(&eval_csv_row(r));
        csv.push('\n');
    }
    fs::write(out_dir.join("eval.csv"), csv)?;
    Ok(records)
}
