use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[corpus]
n = 24
resolution = 32
test_fraction = 0.25

[denoiser]
resolution = 32
widths = [4, 8, 8]
time_dim = 8
emb_dim = 16

[schedule]
steps = 10
beta_start = 1e-3
beta_end = 0.2

[base_train]
epochs = 1

[control_train]
epochs = 1

[segmenter]
widths = [4, 8, 8]

[seg_train]
epochs = 1

[features]
widths = [4, 8, 8, 8]

[feature_train]
epochs = 1
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_streetscape"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn corpus_hash_line(o: &Output) -> String {
    stdout(o).lines().find(|l| l.starts_with("corpus hash")).expect("hash printed").to_string()
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    for sub in ["synth", "explode", "train-base", "train-control", "train-seg", "generate", "evaluate", "experiment", "serve"] {
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{sub} --help");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["synth", "--n", "many"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().output().unwrap().status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train-base"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus"));
    std::fs::write(dir.path().join("bad.toml"), "[base_train]\nepoch = 1\n").unwrap();
    let out = run(dir.path(), &["--config", "bad.toml", "synth", "--n", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_is_deterministic_and_prints_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(dir.path(), &["synth", "--seed", "5", "--n", "6", "--resolution", "32", "--out", "a"]);
    let b = run(dir.path(), &["synth", "--seed", "5", "--n", "6", "--resolution", "32", "--out", "b"]);
    let c = run(dir.path(), &["synth", "--seed", "6", "--n", "6", "--resolution", "32", "--out", "c"]);
    assert!(a.status.success() && b.status.success() && c.status.success());
    assert_eq!(corpus_hash_line(&a), corpus_hash_line(&b));
    assert_ne!(corpus_hash_line(&a), corpus_hash_line(&c));
    let text = stdout(&a);
    assert!(text.contains("resolved config"));
    assert!(text.contains("n = 6"));
    let ma = std::fs::read(dir.path().join("a/manifest.jsonl")).unwrap();
    let mb = std::fs::read(dir.path().join("b/manifest.jsonl")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "seed = 3\n[corpus]\nn = 40\nresolution = 32\n").unwrap();
    let out = run(dir.path(), &["--config", "c.toml", "synth", "--n", "12"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("n = 12"), "{text}");
    assert!(text.contains("seed = 3"));
    let lines = std::fs::read_to_string(dir.path().join("corpus/manifest.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 12);
}

#[test]
fn explode_writes_eight_crops() {
    let dir = tempfile::tempdir().unwrap();
    let pano = image::RgbImage::from_fn(256, 128, |x, y| image::Rgb([x as u8, (y * 2) as u8, 60]));
    pano.save(dir.path().join("p1.png")).unwrap();
    let out = run(dir.path(), &["explode", "p1.png", "--size", "32"]);
    assert!(out.status.success());
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("crops"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 8);
    assert!(names.contains(&"p1_0_left.png".to_string()));
    assert!(names.contains(&"p1_270_right.png".to_string()));
    let img = image::open(dir.path().join("crops/p1_90_left.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
}

#[test]
fn tiny_end_to_end_through_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let cfg = ["--config", "tiny.toml", "--seed", "9"];
    let step = |extra: &[&str]| {
        let args: Vec<&str> = cfg.iter().chain(extra).copied().collect();
        let out = run(d, &args);
        assert!(out.status.success(), "{extra:?}");
        out
    };
    step(&["synth"]);
    step(&["train-base"]);
    let out = step(&["train-control"]);
    assert!(stdout(&out).contains("unchanged"));
    step(&["train-seg"]);
    for f in ["base.ckpt", "control.ckpt", "segmenter.ckpt", "features.ckpt"] {
        assert!(d.join("ckpt").join(f).exists(), "{f}");
    }

    let prompt = "The image is captured from Chicago. The scene contains 25.00% road, 8.00% sidewalk, \
                  30.00% building, 15.00% sky, 10.00% tree, and 1.00% person. The image includes 2 cars, \
                  1 persons, 0 bicycles, and 0 buses.";
    step(&["generate", "--prompt", prompt, "--n", "2"]);
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("generated/generated.json")).unwrap()).unwrap();
    assert_eq!(meta["images"].as_array().unwrap().len(), 2);
    assert!(d.join("generated/gen_001.png").exists());

    std::fs::write(
        d.join("conflict.toml"),
        "name = \"conflict\"\nbatch = 8\n[experiment]\nkind = \"conflict\"\nroad_targets = [5.71, 15.71, 25.71, 35.71]\nn_per_target = 8\n",
    )
    .unwrap();
    step(&["experiment", "conflict.toml"]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("runs/conflict/report.json")).unwrap()).unwrap();
    assert!(report.is_object());
    assert!(d.join("runs/conflict/report.csv").exists());

    let out = run(d, &["generate", "--prompt", "not a prompt"]);
    assert_eq!(out.status.code(), Some(2));
}
