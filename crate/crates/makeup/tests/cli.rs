//! End-to-end smoke of the command surface on a tiny profile: synth ->
//! pairs -> three training stages -> infer (global + regional) -> eval ->
//! report, plus exit-code and error-line behavior.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_makeup"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn makeup");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg_path = root.join("tiny.cfg");
    std::fs::write(
        &cfg_path,
        "image_size = 32\nstyle_count = 3\nnum_faces = 2\ns1_steps = 8\ns1_batch = 3\n\
         base_channels = 8\nbase_steps = 20\ntimesteps = 100\nddim_steps = 4\n\
         s2_steps = 10\neval_limit = 2\n",
    )
    .unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();

    run_ok(&["synth", "styles", "--count", "3", "--seed", "0", "--config", cfg, "--out", &p("styles.json")]);
    run_ok(&["synth", "faces", "--styles", &p("styles.json"), "--seed", "0", "--config", cfg, "--out", &p("data")]);
    run_ok(&[
        "pairs", "build", "--manifest", &p("data/manifest.json"), "--iou-threshold", "0.6",
        "--misalign-rate", "0.3", "--seed", "0", "--config", cfg, "--out", &p("pairs"),
    ]);
    run_ok(&[
        "train", "style-encoder", "--data", &p("data"), "--steps", "8", "--tau", "0.1",
        "--seed", "0", "--config", cfg, "--out", &p("enc.ckpt"),
    ]);
    run_ok(&["train", "denoiser", "--data", &p("data"), "--steps", "20", "--seed", "0", "--config", cfg, "--out", &p("base.ckpt")]);
    run_ok(&[
        "train", "transfer", "--pairs", &p("pairs"), "--style-encoder", &p("enc.ckpt"),
        "--base", &p("base.ckpt"), "--steps", "10", "--seed", "0", "--config", cfg,
        "--out", &p("stage2.ckpt"),
    ]);

    run_ok(&[
        "infer", "transfer", "--source-face", &p("data/faces/0001"), "--reference",
        &p("data/faces/0000/after_1.png"), "--style-encoder", &p("enc.ckpt"), "--base",
        &p("base.ckpt"), "--stage2", &p("stage2.ckpt"), "--seed", "5", "--config", cfg,
        "--out", &p("out_global"),
    ]);
    assert!(root.join("out_global/transfer.png").exists());

    // uniform regional assignment must reproduce the global transfer bitwise
    let reference = p("data/faces/0000/after_1.png");
    std::fs::write(
        root.join("assign.json"),
        format!(
            "{{\"skin\": \"{r}\", \"eyes\": \"{r}\", \"nose\": \"{r}\", \"mouth\": \"{r}\"}}",
            r = reference
        ),
    )
    .unwrap();
    run_ok(&[
        "infer", "regional", "--assignment", &p("assign.json"), "--source-face",
        &p("data/faces/0001"), "--style-encoder", &p("enc.ckpt"), "--base", &p("base.ckpt"),
        "--stage2", &p("stage2.ckpt"), "--seed", "5", "--config", cfg, "--out", &p("out_regional"),
    ]);
    let a = std::fs::read(root.join("out_global/transfer.png")).unwrap();
    let b = std::fs::read(root.join("out_regional/regional.png")).unwrap();
    assert_eq!(a, b, "uniform regional assignment differs from global transfer");

    let eval_out = run_ok(&[
        "eval", "--data", &p("data"), "--pairs", &p("pairs"), "--style-encoder", &p("enc.ckpt"),
        "--base", &p("base.ckpt"), "--stage2", &p("stage2.ckpt"), "--seed", "0", "--config", cfg,
        "--out", &p("eval"),
    ]);
    assert!(eval_out.contains("evaluated"));
    let csv = std::fs::read_to_string(root.join("eval/eval.csv")).unwrap();
    let eval_rows = csv.lines().count() - 1;
    assert_eq!(eval_rows, 2);

    let report_out = run_ok(&["report", "--eval", &p("eval"), "--seed", "0", "--config", cfg, "--out", &p("report")]);
    assert!(report_out.contains(&format!("rendered report with {eval_rows} rows")));
    assert!(root.join("report/grid.png").exists());
    assert!(root.join("report/summary.csv").exists());
}

#[test]
fn errors_are_single_line_and_nonzero_exit() {
    let out = bin()
        .args(["report", "--eval", "/nonexistent/dir", "--out", "/tmp/x_report"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.trim().lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got: {stderr}");
    assert!(lines[0].starts_with("error: "), "got: {stderr}");
}

#[test]
fn stage2_refuses_mismatched_frozen_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg_path = root.join("tiny.cfg");
    std::fs::write(
        &cfg_path,
        "image_size = 32\nstyle_count = 2\nnum_faces = 1\nbase_channels = 8\n\
         base_steps = 4\ntimesteps = 50\nddim_steps = 2\ns2_steps = 2\ns1_steps = 2\ns1_batch = 2\n",
    )
    .unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();

    run_ok(&["synth", "faces", "--seed", "0", "--config", cfg, "--out", &p("data")]);
    run_ok(&["pairs", "build", "--manifest", &p("data/manifest.json"), "--seed", "0", "--config", cfg, "--out", &p("pairs")]);
    run_ok(&["train", "style-encoder", "--data", &p("data"), "--seed", "0", "--config", cfg, "--out", &p("enc.ckpt")]);
    run_ok(&["train", "denoiser", "--data", &p("data"), "--seed", "0", "--config", cfg, "--out", &p("base_a.ckpt")]);
    run_ok(&["train", "denoiser", "--data", &p("data"), "--seed", "1", "--config", cfg, "--out", &p("base_b.ckpt")]);
    run_ok(&[
        "train", "transfer", "--pairs", &p("pairs"), "--style-encoder", &p("enc.ckpt"),
        "--base", &p("base_a.ckpt"), "--seed", "0", "--config", cfg, "--out", &p("s2.ckpt"),
    ]);

    // pairing the stage-2 weights with a different frozen base must fail
    let out = bin()
        .args([
            "infer", "transfer", "--source-face", &p("data/faces/0000"), "--reference",
            &p("data/faces/0000/after_0.png"), "--style-encoder", &p("enc.ckpt"), "--base",
            &p("base_b.ckpt"), "--stage2", &p("s2.ckpt"), "--seed", "0", "--config", cfg,
            "--out", &p("out"),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("base_hash mismatch"), "got: {stderr}");
}
