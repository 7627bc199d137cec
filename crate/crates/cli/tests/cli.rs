use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn sbse() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sbse"))
}

fn run(args: &[&str]) -> Output {
    sbse().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let o = run(&[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_fails() {
    let o = run(&["info", "--bogus"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn info_reports_default_parameter_count() {
    let o = run(&["info"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("parameters: 1295874"), "{}", stdout(&o));
    assert!(stdout(&o).contains("latency: 1024 samples (64.0 ms)"));
}

#[test]
fn gradcheck_passes() {
    let o = run(&["gradcheck", "--seeds", "2"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn selfcheck_passes() {
    let o = run(&["selfcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn enhance_requires_a_model() {
    let o = run(&["enhance", "a.wav", "b.wav"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--model"));
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?}\nstdout: {}\nstderr: {}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn stream(model: &Path, input: &[u8]) -> Vec<u8> {
    let mut child = sbse()
        .args(["stream", "--model", s(model), "--threads", "1"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .expect("spawn");
    let mut stdin = child.stdin.take().expect("stdin");
    let data = input.to_vec();
    let writer = std::thread::spawn(move || stdin.write_all(&data));
    let out = child.wait_with_output().expect("wait");
    writer.join().expect("writer thread").expect("write stdin");
    assert!(out.status.success());
    out.stdout
}

#[test]
fn corpus_train_enhance_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&["mix", "synth", "--out", s(root), "--speech-clips", "3", "--noise-clips", "2", "--seconds", "1.5"]);
    let manifest = root.join("m.tsv");
    ok(&[
        "mix", "plan", "--speech", s(&root.join("speech")), "--noise", s(&root.join("noise")),
        "--hours", "0.001", "--reverb-fraction", "0.5", "--out", s(&manifest), "--seed", "3",
    ]);
    ok(&["mix", "render", "--manifest", s(&manifest), "--out", s(root)]);
    let model = root.join("model.bin");
    ok(&[
        "train", "--manifest", s(&manifest), "--model", s(&model), "--neighbors", "2", "--hidden1", "6",
        "--hidden2", "5", "--seq-len", "24", "--norm-frames", "16", "--steps", "3", "--batch", "64", "--tau", "1",
    ]);
    let info = ok(&["info", "--model", s(&model)]);
    assert!(info.contains("delay: 1 frames"), "{info}");
    let enhanced = root.join("enhanced");
    ok(&["enhance", s(&root.join("noisy")), s(&enhanced), "--model", s(&model)]);
    let csv = root.join("scores.csv");
    let summary = ok(&["eval", "--manifest", s(&manifest), "--enhanced", s(&enhanced), "--csv", s(&csv)]);
    assert!(summary.contains("si_sdr"), "{summary}");
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("clip_id,si_sdr,snr,seg_snr\nclip00000,"), "{table}");

    let again = root.join("again");
    ok(&["enhance", s(&root.join("noisy")), s(&again), "--model", s(&model)]);
    let a = std::fs::read(enhanced.join("clip00000.wav")).unwrap();
    let b = std::fs::read(again.join("clip00000.wav")).unwrap();
    assert_eq!(a, b);

    let pcm: Vec<u8> = (0..1000i16).flat_map(|i| ((i % 50) * 300).to_le_bytes()).collect();
    let out = stream(&model, &pcm);
    assert_eq!(out.len(), 2 * (1000usize.div_ceil(256) * 256 + 2 * 256));
    assert!(stream(&model, &[]).is_empty());
}
