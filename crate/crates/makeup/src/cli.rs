//! Command-line surface wiring every stage: data synthesis, pair building,
//! the three training stages, global/regional inference, evaluation,
//! ablations and report rendering.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, CONFIG_SCHEMA_VERSION};
use crate::denoiser::train_base_denoiser;
use crate::evalsuite::{render_report, run_ablation, AblationGrids};
use crate::imageio::{load_rgb, save_rgb};
use crate::inject::train_transfer;
use crate::pairs::{build_pairs, PairsManifest};
use crate::pipeline::{
    denoiser_text_tokens, evaluate, load_base, load_encoder, load_pair_samples, load_stage2,
    load_style_samples, save_base, save_encoder, save_stage2, text_embedder,
};
use crate::regional::{regional_transfer, RegionAssignment};
use crate::styleenc::{train_style_encoder, StyleEncoder};
use crate::synthface::{
    load_face_assets, make_style_catalog, synthesize_dataset, DatasetManifest, FaceEntry,
    MakeupStyle,
};

/// Environment variable naming the root every relative `--out` resolves
/// under.
pub const OUT_ROOT_ENV: &str = "MAKEUP_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "makeup",
    about = "Desk-scale facial makeup transfer pipeline on synthetic faces",
    version = concat!(env!("CARGO_PKG_VERSION"), " (config schema 1)")
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Command,
    /// Run seed; combined with the config it fully determines outputs.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Optional key = value config file overriding the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize styles or the face dataset.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Build aligned training pairs.
    #[command(subcommand)]
    Pairs(PairsCmd),
    /// Train one of the three stages.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Run makeup transfer.
    #[command(subcommand)]
    Infer(InferCmd),
    /// Evaluate a trained pipeline on accepted pairs.
    Eval(EvalArgs),
    /// Run the ablation grids.
    Ablate(AblateArgs),
    /// Render the report grid and summary from an eval directory.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Generate the makeup style catalog.
    Styles(SynthStylesArgs),
    /// Render faces and style after-images to a dataset directory.
    Faces(SynthFacesArgs),
}

#[derive(Args)]
struct SynthStylesArgs {
    #[arg(long)]
    count: Option<usize>,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthFacesArgs {
    /// Style catalog JSON (generated when omitted).
    #[arg(long)]
    styles: Option<PathBuf>,
    #[arg(long)]
    num_faces: Option<usize>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum PairsCmd {
    Build(PairsBuildArgs),
}

#[derive(Args)]
struct PairsBuildArgs {
    /// Dataset manifest path (manifest.json).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    iou_threshold: Option<f32>,
    #[arg(long)]
    misalign_rate: Option<f32>,
    /// Disable landmark re-alignment (naive blend pipeline).
    #[arg(long)]
    no_align: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Stage 1: contrastive fine-tuning of the makeup style encoder.
    StyleEncoder(TrainStyleEncoderArgs),
    /// Stage 0: pretrain the text-conditioned denoiser backbone.
    Denoiser(TrainDenoiserArgs),
    /// Stage 2: identity and region-aware makeup injection.
    Transfer(TrainTransferArgs),
}

#[derive(Args)]
struct TrainStyleEncoderArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    tau: Option<f32>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainDenoiserArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainTransferArgs {
    /// Pairs directory (holds pairs_manifest.json).
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    style_encoder: PathBuf,
    /// Base denoiser checkpoint (kept frozen).
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum InferCmd {
    /// Global transfer from one reference image.
    Transfer(InferTransferArgs),
    /// Region-specific transfer mixing several references.
    Regional(InferRegionalArgs),
}

#[derive(Args)]
struct InferTransferArgs {
    /// Source face directory (before.png, masks, structure.png).
    #[arg(long)]
    source_face: PathBuf,
    /// Reference image path.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    style_encoder: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    stage2: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferRegionalArgs {
    /// JSON file mapping regions to reference image paths.
    #[arg(long)]
    assignment: PathBuf,
    #[arg(long)]
    source_face: PathBuf,
    #[arg(long)]
    style_encoder: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    stage2: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    style_encoder: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    stage2: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    /// Comma-separated grid list: clip,inject,attn.
    #[arg(long, default_value = "clip,inject,attn")]
    grids: String,
    /// Needed for the inject/attn grids.
    #[arg(long)]
    style_encoder: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Eval output directory.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn resolve_out(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
            return PathBuf::from(root).join(path);
        }
    }
    path.to_path_buf()
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::from_kv_file(p)
            .with_context(|| format!("loading config {}", p.display()))?),
        None => Ok(RunConfig::default()),
    }
}

fn load_styles_file(path: &Path) -> anyhow::Result<Vec<MakeupStyle>> {
    let raw = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&raw)?)
}

fn find_face_dir(dataset_or_dir: &Path) -> anyhow::Result<(PathBuf, FaceEntry)> {
    // Accept either a face directory inside a dataset or any directory with
    // the face asset layout.
    let dir = dataset_or_dir;
    if !dir.join("before.png").exists() {
        bail!(
            "{} does not look like a face directory (missing before.png)",
            dir.display()
        );
    }
    let root = dir.parent().and_then(|p| p.parent()).unwrap_or(dir);
    let rel = dir
        .strip_prefix(root)
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|_| ".".into());
    Ok((
        root.to_path_buf(),
        FaceEntry {
            face_id: 0,
            face_seed: 0,
            dir: rel,
        },
    ))
}

pub fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.config)?;
    let seed = cli.seed;
    let _ = CONFIG_SCHEMA_VERSION;

    match cli.cmd {
        Command::Synth(SynthCmd::Styles(a)) => {
            let out = resolve_out(&a.out);
            let styles = make_style_catalog(
                a.count.unwrap_or(cfg.style_count),
                seed,
                cfg.style_margin,
            )?;
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            std::fs::write(&out, serde_json::to_string_pretty(&styles)?)?;
            println!("wrote {} styles to {}", styles.len(), out.display());
        }
        Command::Synth(SynthCmd::Faces(a)) => {
            let out = resolve_out(&a.out);
            let styles = match &a.styles {
                Some(p) => load_styles_file(p)?,
                None => make_style_catalog(cfg.style_count, seed, cfg.style_margin)?,
            };
            let manifest = synthesize_dataset(
                a.num_faces.unwrap_or(cfg.num_faces),
                &styles,
                seed,
                cfg.image_size,
                cfg.styles_per_face,
                &out,
            )?;
            println!(
                "wrote {} faces / {} records to {}",
                manifest.faces.len(),
                manifest.records.len(),
                out.display()
            );
        }
        Command::Pairs(PairsCmd::Build(a)) => {
            let out = resolve_out(&a.out);
            let dataset_root = a
                .manifest
                .parent()
                .ok_or_else(|| anyhow!("manifest path has no parent directory"))?;
            let manifest = DatasetManifest::load(dataset_root)?;
            let mut opts = cfg.pair_options(seed);
            if let Some(t) = a.iou_threshold {
                opts.iou_threshold = t;
            }
            if let Some(r) = a.misalign_rate {
                opts.misalignment_rate = r;
            }
            opts.align = !a.no_align;
            let pm = build_pairs(&manifest, dataset_root, &opts, &out)?;
            let accepted = pm.accepted().count();
            println!(
                "built {} pairs ({} accepted) in {}",
                pm.pairs.len(),
                accepted,
                out.display()
            );
        }
        Command::Train(TrainCmd::StyleEncoder(a)) => {
            let out = resolve_out(&a.out);
            let manifest = DatasetManifest::load(&a.data)?;
            let samples = load_style_samples(&a.data, &manifest)?;
            let mut s1 = cfg.stage1_config(seed);
            if let Some(s) = a.steps {
                s1.steps = s;
            }
            if let Some(t) = a.tau {
                s1.tau = t;
            }
            let embedder = text_embedder(cfg.embed_dim);
            let (enc, logs) = train_style_encoder(&samples, &embedder, &s1)?;
            save_encoder(&enc, &out)?;
            let last = logs.last().map(|l| l.total).unwrap_or(f32::NAN);
            println!(
                "trained style encoder for {} steps (final loss {:.4}) -> {}",
                logs.len(),
                last,
                out.display()
            );
        }
        Command::Train(TrainCmd::Denoiser(a)) => {
            let out = resolve_out(&a.out);
            let manifest = DatasetManifest::load(&a.data)?;
            let samples = load_style_samples(&a.data, &manifest)?;
            let images: Vec<_> = samples.into_iter().map(|s| s.image).collect();
            let mut bc = cfg.base_config(seed);
            if let Some(s) = a.steps {
                bc.steps = s;
            }
            let embedder = text_embedder(cfg.embed_dim);
            let text = denoiser_text_tokens(&embedder);
            let (unet, _schedule, losses) = train_base_denoiser(&images, &text, &bc)?;
            save_base(&unet, bc.timesteps, bc.beta_start, bc.beta_end, &out)?;
            println!(
                "pretrained denoiser for {} steps (final loss {:.4}) -> {}",
                losses.len(),
                losses.last().copied().unwrap_or(f32::NAN),
                out.display()
            );
        }
        Command::Train(TrainCmd::Transfer(a)) => {
            let out = resolve_out(&a.out);
            let pairs_manifest = PairsManifest::load(&a.pairs)?;
            let dataset_root = PathBuf::from(&pairs_manifest.dataset_root);
            let dataset = DatasetManifest::load(&dataset_root)?;
            let samples = load_pair_samples(&dataset_root, &dataset, &a.pairs, &pairs_manifest)?;
            let encoder = load_encoder(&a.style_encoder)?;
            let (base, schedule) = load_base(&a.base)?;
            let mut s2 = cfg.stage2_config(seed);
            if let Some(s) = a.steps {
                s2.steps = s;
            }
            let embedder = text_embedder(cfg.embed_dim);
            let text = denoiser_text_tokens(&embedder);
            let (modules, logs) = train_transfer(&samples, &encoder, &base, &schedule, &text, &s2)?;
            save_stage2(
                &modules,
                &base.cfg,
                base.store.content_hash(),
                encoder.store.content_hash(),
                &out,
            )?;
            println!(
                "trained stage-2 modules on {} pairs for {} steps (final loss {:.4}) -> {}",
                samples.len(),
                logs.len(),
                logs.last().map(|l| l.total).unwrap_or(f32::NAN),
                out.display()
            );
        }
        Command::Infer(InferCmd::Transfer(a)) => {
            let out = resolve_out(&a.out);
            std::fs::create_dir_all(&out)?;
            let (root, entry) = find_face_dir(&a.source_face)?;
            let assets = load_face_assets(&root, &entry)?;
            let reference = load_rgb(&a.reference)?;
            let encoder = load_encoder(&a.style_encoder)?;
            let (base, schedule) = load_base(&a.base)?;
            let modules = load_stage2(&a.stage2, &base, &encoder)?;
            let embedder = text_embedder(cfg.embed_dim);
            let text = denoiser_text_tokens(&embedder);
            let (output, _) = crate::inject::transfer(
                &assets.before,
                &assets.structure,
                &assets.masks,
                &reference,
                &encoder,
                &modules,
                &base,
                &schedule,
                &text,
                &cfg.ddim(seed),
            )?;
            let path = out.join("transfer.png");
            save_rgb(&output, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Infer(InferCmd::Regional(a)) => {
            let out = resolve_out(&a.out);
            std::fs::create_dir_all(&out)?;
            let assignment = RegionAssignment::load(&a.assignment)?;
            let (root, entry) = find_face_dir(&a.source_face)?;
            let assets = load_face_assets(&root, &entry)?;
            let mut references = BTreeMap::new();
            for id in assignment.references() {
                references.insert(id.to_string(), load_rgb(Path::new(id))?);
            }
            let encoder = load_encoder(&a.style_encoder)?;
            let (base, schedule) = load_base(&a.base)?;
            let modules = load_stage2(&a.stage2, &base, &encoder)?;
            let embedder = text_embedder(cfg.embed_dim);
            let text = denoiser_text_tokens(&embedder);
            let (output, _) = regional_transfer(
                &assets.before,
                &assets.structure,
                &assets.masks,
                &assignment,
                &references,
                &encoder,
                &modules,
                &base,
                &schedule,
                &text,
                &cfg.ddim(seed),
            )?;
            let path = out.join("regional.png");
            save_rgb(&output, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Eval(a) => {
            let out = resolve_out(&a.out);
            let dataset = DatasetManifest::load(&a.data)?;
            let pairs = PairsManifest::load(&a.pairs)?;
            let encoder = load_encoder(&a.style_encoder)?;
            let (base, schedule) = load_base(&a.base)?;
            let modules = load_stage2(&a.stage2, &base, &encoder)?;
            let records = evaluate(
                &a.data, &dataset, &a.pairs, &pairs, &encoder, &base, &schedule, &modules, &cfg,
                seed, &out,
            )?;
            println!("evaluated {} pairs -> {}", records.len(), out.display());
        }
        Command::Ablate(a) => {
            let out = resolve_out(&a.out);
            let grids = AblationGrids {
                clip_objectives: a.grids.split(',').any(|g| g.trim() == "clip"),
                injection_modules: a.grids.split(',').any(|g| g.trim() == "inject"),
                attention_loss: a.grids.split(',').any(|g| g.trim() == "attn"),
            };
            let dataset = DatasetManifest::load(&a.data)?;
            let style_samples = load_style_samples(&a.data, &dataset)?;
            let pairs_manifest = PairsManifest::load(&a.pairs)?;
            let pair_samples =
                load_pair_samples(&a.data, &dataset, &a.pairs, &pairs_manifest)?;
            let needs_models = grids.injection_modules || grids.attention_loss;
            let (encoder, base_sched) = if needs_models {
                let enc = load_encoder(
                    a.style_encoder
                        .as_ref()
                        .ok_or_else(|| anyhow!("--style-encoder required for inject/attn grids"))?,
                )?;
                let bs = load_base(
                    a.base
                        .as_ref()
                        .ok_or_else(|| anyhow!("--base required for inject/attn grids"))?,
                )?;
                (enc, bs)
            } else {
                (
                    StyleEncoder::new(cfg.encoder_config(), seed),
                    (
                        crate::denoiser::DenoisingUNet::new(cfg.unet_config(), seed),
                        crate::denoiser::NoiseSchedule::linear(
                            cfg.timesteps,
                            cfg.beta_start,
                            cfg.beta_end,
                        )?,
                    ),
                )
            };
            let (base, schedule) = base_sched;
            let report = run_ablation(
                &grids,
                &style_samples,
                &pair_samples,
                &encoder,
                &base,
                &schedule,
                &cfg,
                seed,
                &out,
            )?;
            println!(
                "ablations done: {} clip rows, {} inject rows, {} attn rows -> {}",
                report.clip.len(),
                report.inject.len(),
                report.attn.len(),
                out.display()
            );
        }
        Command::Report(a) => {
            let out = resolve_out(&a.out);
            let rows = render_report(&a.eval, &out)?;
            println!("rendered report with {rows} rows -> {}", out.display());
        }
    }
    Ok(())
}
