use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# tiny architecture for fast end-to-end runs
model.image_size = 16
model.audio_dim = 6
model.face_dim = 5
model.enc_base_channels = 2
model.enc_max_channels = 4
model.gen_base_channels = 2
model.gen_max_channels = 4
model.disc_base_channels = 2
model.disc_max_channels = 4
model.audio_base_channels = 2
model.sync_dim = 6
sync.steps = 3
sync.batch_size = 2
train.steps = 3
train.r1_interval = 2
personalize.epochs = 1
";

fn lipsync(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipsync"))
        .args(args)
        .env("LIPSYNC_HOME", home)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(home: &Path, args: &[&str]) {
    let o = lipsync(home, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Exit status and the single stderr line of a failing command.
fn fails(home: &Path, args: &[&str]) -> String {
    let o = lipsync(home, args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&o.stderr).trim().to_string();
    assert_eq!(err.lines().count(), 1, "multi-line error: {err}");
    err
}

fn read(p: PathBuf) -> Vec<u8> {
    fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path();
    fs::write(h.join("tiny.cfg"), TINY).unwrap();
    ok(h, &["synth-data", "--out", "general", "--clips-per-speaker", "2", "--duration", "0.6", "--size", "16"]);
    ok(h, &["synth-data", "--out", "person", "--clips-per-speaker", "3", "--duration", "2", "--size", "16", "--speaker", "1", "--seed", "4"]);
    dir
}

#[test]
fn pipeline_runs_and_repeats_bit_exactly() {
    let dir = setup();
    let h = dir.path();
    let cfg = ["--config", "tiny.cfg", "--seed", "3"];
    let with = |extra: &[&str]| -> Vec<String> { extra.iter().chain(&cfg).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let a = with(extra);
        ok(h, &a.iter().map(String::as_str).collect::<Vec<_>>());
    };

    run(&["train-syncnet", "--data", "general", "--out", "sync.ckpt"]);
    for out in ["a", "b"] {
        run(&["train", "--data", "general", "--syncnet", "sync.ckpt", "--out", &format!("{out}/model.ckpt"), "--loss-log", &format!("{out}/loss.jsonl")]);
        run(&["personalize", "--base", &format!("{out}/model.ckpt"), "--person-dir", "person", "--general-dir", "general", "--syncnet", "sync.ckpt", "--out", &format!("{out}/adapter.ckpt")]);
        run(&["infer", "--ckpt", &format!("{out}/model.ckpt"), "--adapter", &format!("{out}/adapter.ckpt"), "--template", "general/clip_00000", "--audio", "general/clip_00001", "--out", &format!("{out}/infer")]);
    }
    for f in ["model.ckpt", "loss.jsonl", "adapter.ckpt", "infer/frames/000000.png", "infer/frames/000014.png"] {
        assert_eq!(read(h.join("a").join(f)), read(h.join("b").join(f)), "{f} differs between runs");
    }

    // manifests differ only in the run directory
    let ma = fs::read_to_string(h.join("a/infer/manifest.txt")).unwrap();
    let mb = fs::read_to_string(h.join("b/infer/manifest.txt")).unwrap();
    assert_eq!(ma.replace("/a/", "/b/"), mb);

    let losses = fs::read_to_string(h.join("a/loss.jsonl")).unwrap();
    assert_eq!(losses.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(losses.lines().next().unwrap()).unwrap();
    assert!(first["l_rec"].as_f64().unwrap() > 0.0);

    // the resolved configuration travels inside the checkpoint
    let bytes = read(h.join("a/model.ckpt"));
    let text = String::from_utf8_lossy(&bytes);
    assert!(text.contains("\"train.steps\": \"3\""));
    assert!(text.contains("\"train.seed\": \"3\""));

    let manifest = fs::read_to_string(h.join("a/infer/manifest.txt")).unwrap();
    assert!(manifest.contains("frames=15"), "{manifest}");

    run(&["evaluate", "--ckpt", "a/model.ckpt", "--data", "general", "--out", "eval.jsonl"]);
    let report = fs::read_to_string(h.join("eval.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 5);
    assert!(report.lines().last().unwrap().contains("\"aggregate\""));

    ok(h, &["plot-metrics", "--log", "a/loss.jsonl", "--out", "loss.svg", "--columns", "l_rec,total_g"]);
    assert!(fs::read_to_string(h.join("loss.svg")).unwrap().contains("<svg"));

    // a different seed moves the weights
    ok(h, &["train", "--data", "general", "--syncnet", "sync.ckpt", "--out", "c.ckpt", "--config", "tiny.cfg", "--seed", "4"]);
    assert_ne!(read(h.join("a/model.ckpt")), read(h.join("c.ckpt")));
}

#[test]
fn wav_audio_and_loop_policy() {
    let dir = setup();
    let h = dir.path();
    ok(h, &["train", "--data", "general", "--lambda-sync", "0", "--out", "m.ckpt", "--config", "tiny.cfg"]);
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(h.join("speech.wav"), spec).unwrap();
    for i in 0..16_000 {
        let s = (i as f32 * 0.09).sin() * 8000.0;
        w.write_sample(s as i16).unwrap();
    }
    w.finalize().unwrap();
    ok(h, &["infer", "--ckpt", "m.ckpt", "--template", "general/clip_00000", "--audio", "speech.wav", "--out", "trim", "--ref-index", "2"]);
    ok(h, &["infer", "--ckpt", "m.ckpt", "--template", "general/clip_00000", "--audio", "speech.wav", "--out", "loop", "--loop-template"]);
    let count = |d: &str| fs::read_dir(h.join(d).join("frames")).unwrap().count();
    assert_eq!(count("trim"), 15);
    assert_eq!(count("loop"), 25);
    let m = fs::read_to_string(h.join("loop/manifest.txt")).unwrap();
    assert!(m.contains("template_index=0,1,2,3,4,5,6,7,8,9,10,11,12,13,14,13,12"), "{m}");
}

#[test]
fn errors_are_single_classified_lines() {
    let dir = setup();
    let h = dir.path();
    let e = fails(h, &["train", "--data", "general", "--out", "m.ckpt", "--set", "train.nope=1"]);
    assert!(e.starts_with("error[config]:"), "{e}");
    let e = fails(h, &["train", "--data", "general", "--out", "m.ckpt", "--config", "tiny.cfg"]);
    assert!(e.starts_with("error[config]:") && e.contains("--syncnet"), "{e}");
    let e = fails(h, &["infer", "--ckpt", "absent.ckpt", "--template", "general/clip_00000", "--audio", "general/clip_00001", "--out", "x"]);
    assert!(e.starts_with("error[io]:") || e.starts_with("error[checkpoint]:"), "{e}");
    // default-size model against 16 px data
    let e = fails(h, &["train", "--data", "general", "--out", "m.ckpt", "--lambda-sync", "0", "--set", "train.steps=1"]);
    assert!(e.starts_with("error[shape]:"), "{e}");

    // adapter from one architecture on a base of another
    ok(h, &["train", "--data", "general", "--lambda-sync", "0", "--out", "m.ckpt", "--config", "tiny.cfg"]);
    ok(h, &["train", "--data", "general", "--lambda-sync", "0", "--out", "wide.ckpt", "--config", "tiny.cfg", "--set", "model.face_dim=7"]);
    ok(h, &["personalize", "--base", "wide.ckpt", "--person-dir", "person", "--general-dir", "general", "--out", "wide_adapter.ckpt", "--config", "tiny.cfg", "--set", "train.lambda_sync=0"]);
    let e = fails(h, &["infer", "--ckpt", "m.ckpt", "--adapter", "wide_adapter.ckpt", "--template", "general/clip_00000", "--audio", "general/clip_00001", "--out", "x"]);
    assert!(e.starts_with("error[checkpoint]:") && e.contains("fingerprint"), "{e}");

    // too little personal footage
    let e = fails(h, &["personalize", "--base", "m.ckpt", "--person-dir", "general", "--general-dir", "general", "--out", "a.ckpt", "--config", "tiny.cfg", "--set", "train.lambda_sync=0"]);
    assert!(e.starts_with("error[invalid-argument]:"), "{e}");
    let e = fails(h, &["infer", "--ckpt", "m.ckpt", "--template", "general/clip_00000", "--audio", "general/clip_00001", "--out", "x", "--ref-index", "99"]);
    assert!(e.starts_with("error[out-of-range]:"), "{e}");
}
