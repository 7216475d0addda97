// scratch experiment (deleted before ship)
use std::time::Instant;

use makeup::denoiser::*;
use makeup::imageio::psnr;
use makeup::inject::*;
use makeup::styleenc::*;
use makeup::synthface::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let base_steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(800);
    let s2_steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1500);

    // 8 pairs = 2 faces x 4 styles, no drift (reference == oracle after)
    let styles = make_style_catalog(4, 0, 0.04).unwrap();
    let mut pairs = Vec::new();
    let mut all_images = Vec::new();
    for f in 0..2u64 {
        let r = render_face(&FaceSpec::sample(500 + f, 64), 64).unwrap();
        all_images.push(r.image.clone());
        for s in &styles {
            let after = apply_makeup(&r.image, &r.masks, s).unwrap();
            all_images.push(after.clone());
            pairs.push(PairSample {
                source: r.image.clone(),
                reference: after,
                masks: r.masks.clone(),
                structure: r.structure.clone(),
                style_id: s.style_id,
            });
        }
    }

    // stage-1: quick encoder fine-tune so f carries style info
    let samples: Vec<StyleSample> = pairs
        .iter()
        .map(|p| StyleSample {
            image: p.reference.clone(),
            style_id: p.style_id,
            description: styles[p.style_id as usize].description.clone(),
        })
        .collect();
    let embedder = TextEmbedder::new(0x7e87, 64);
    let t0 = Instant::now();
    let (enc, _) = train_style_encoder(
        &samples,
        &embedder,
        &Stage1Config {
            steps: 200,
            batch_pairs: 8,
            ..Default::default()
        },
    )
    .unwrap();
    println!("stage1 {:.1?}", t0.elapsed());

    let text = embedder.token_embeddings(DENOISER_PROMPT);
    let t0 = Instant::now();
    let (base, schedule, losses) = train_base_denoiser(
        &all_images,
        &text,
        &BaseTrainConfig {
            steps: base_steps,
            batch: 2,
            lr: 1e-3,
            ..Default::default()
        },
    )
    .unwrap();
    println!(
        "base {:.1?} (loss {:.4} -> {:.4})",
        t0.elapsed(),
        losses[..20.min(losses.len())].iter().sum::<f32>() / 20f32.min(losses.len() as f32),
        losses[losses.len().saturating_sub(20)..].iter().sum::<f32>() / 20.0
    );

    let t0 = Instant::now();
    let (modules, logs) = train_transfer(
        &pairs,
        &enc,
        &base,
        &schedule,
        &text,
        &Stage2Config {
            steps: s2_steps,
            batch: 1,
            lr: 1e-3,
            ..Default::default()
        },
    )
    .unwrap();
    let tail: f32 = logs[logs.len().saturating_sub(50)..]
        .iter()
        .map(|l| l.diff)
        .sum::<f32>()
        / 50.0;
    let tail_attn: f32 = logs[logs.len().saturating_sub(50)..]
        .iter()
        .map(|l| l.attn)
        .sum::<f32>()
        / 50.0;
    println!(
        "stage2 {:.1?} (diff tail {:.4}, attn tail {:.4})",
        t0.elapsed(),
        tail,
        tail_attn
    );

    // reconstruct a training pair
    for (i, p) in pairs.iter().enumerate().take(3) {
        let t0 = Instant::now();
        let (out, record) = transfer(
            &p.source,
            &p.structure,
            &p.masks,
            &p.reference,
            &enc,
            &modules,
            &base,
            &schedule,
            &text,
            &DdimConfig {
                steps: 50,
                eta: 0.0,
                seed: 7 + i as u64,
            },
        )
        .unwrap();
        let db = psnr(&out, &p.reference);
        let ious = makeup::evalsuite::attention_region_iou(&record.averaged, &p.masks).unwrap();
        let mean_iou: f32 = ious.iter().sum::<f32>() / 4.0;
        let err = makeup::evalsuite::region_style_error(
            &out,
            &p.masks,
            &styles[p.style_id as usize],
            &p.source,
        )
        .unwrap();
        let max_err = err
            .iter()
            .flat_map(|e| e.iter())
            .cloned()
            .fold(0.0f32, f32::max);
        println!(
            "pair {i}: psnr {db:.1} dB, mean attn iou {mean_iou:.3}, max region err {max_err:.3} ({:.1?})",
            t0.elapsed()
        );
    }
}
