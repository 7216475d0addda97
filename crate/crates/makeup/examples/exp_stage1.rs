// scratch experiment (deleted before ship)
use std::time::Instant;
use makeup::styleenc::*;
use makeup::synthface::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(900);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);
    let sps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
    let lr: f32 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);

    let styles = make_style_catalog(10, 0, 0.04).unwrap();
    let mut samples = Vec::new();
    for f in 0..40u64 {
        let r = render_face(&FaceSpec::sample(1000 + f, 64), 64).unwrap();
        for s in &styles {
            samples.push(StyleSample {
                image: apply_makeup(&r.image, &r.masks, s).unwrap(),
                style_id: s.style_id,
                description: s.description.clone(),
            });
        }
    }
    let labels: Vec<u32> = samples.iter().map(|s| s.style_id).collect();
    let embedder = TextEmbedder::new(0x7e87, 64);
    println!("steps={steps} batch={batch} sps={sps} lr={lr}");

    let eval = |enc: &StyleEncoder, tag: &str| {
        let z: Vec<Vec<f32>> = samples.iter().map(|s| enc.embed_vec(&s.image).unwrap()).collect();
        let h: Vec<Vec<f32>> = samples.iter().map(|s| enc.features_vec(&s.image).unwrap()).collect();
        let az = knn_accuracy(&z, &labels, 5).unwrap();
        let ah = knn_accuracy(&h, &labels, 5).unwrap();
        println!("{tag}: acc(head)={az:.3} acc(features)={ah:.3}");
    };

    for (ssl, text, tag) in [(false, true, "text"), (true, true, "ssl+text"), (true, false, "ssl")] {
        let cfg = Stage1Config {
            steps,
            batch_pairs: batch,
            samples_per_style: sps,
            ssl_on: ssl,
            text_on: text,
            lr,
            ..Default::default()
        };
        let t0 = Instant::now();
        let (enc, logs) = train_style_encoder(&samples, &embedder, &cfg).unwrap();
        let tail: f32 = logs[logs.len() - 50..].iter().map(|l| l.total).sum::<f32>() / 50.0;
        print!("[{:.0?} tail={tail:.3}] ", t0.elapsed());
        eval(&enc, tag);
    }
}
