use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn patchwise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchwise"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn manifest(&self) -> PathBuf {
        self.root.join("corpus/manifest.tsv")
    }

    fn ckpt(&self) -> PathBuf {
        self.root.join("run/best.safetensors")
    }
}

/// A two-class synthetic corpus and an i-det model trained for one epoch.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus");
        let out = patchwise(&["synth", "--out", s(&corpus), "--classes", "2", "--per-class", "5", "--seed", "3"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let run = root.join("run");
        let out = patchwise(&[
            "train",
            "--setting",
            "i-det",
            "--strategy",
            "ip",
            "--backbone",
            "tiny",
            "--epochs",
            "1",
            "--batch",
            "4",
            "--no-augment",
            "--manifest",
            s(&corpus.join("manifest.tsv")),
            "--out",
            s(&run),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Fixture { _dir: dir, root }
    })
}

#[test]
fn train_smoke_writes_run_directory() {
    let f = fixture();
    for file in ["config.json", "schedule.json", "metrics.tsv", "validation.tsv", "last.safetensors", "best.safetensors", "report.json"] {
        assert!(f.root.join("run").join(file).is_file(), "missing {file}");
    }
}

#[test]
fn alpha_out_of_range_is_a_usage_error() {
    let f = fixture();
    let m = f.manifest();
    let base = ["train", "--setting", "i-det", "--backbone", "tiny", "--manifest", s(&m), "--out", "/nonexistent"];
    let out = patchwise(&[&base[..], &["--strategy", "ss", "--alpha", "1.5"]].concat());
    assert_eq!(code(&out), 2);
    let out = patchwise(&[&base[..], &["--strategy", "sw", "--alpha", "0.5"]].concat());
    assert_eq!(code(&out), 2);
}

#[test]
fn ii_rec_i_with_normal_entries_is_a_config_error() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = patchwise(&[
        "train",
        "--setting",
        "ii-rec-i",
        "--backbone",
        "tiny",
        "--epochs",
        "1",
        "--manifest",
        s(&f.manifest()),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

fn manifest_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(str::to_string)
        .collect()
}

#[test]
fn filter_extreme_thresholds() {
    let f = fixture();
    let total = manifest_rows(&f.manifest()).len();
    let dir = tempfile::tempdir().unwrap();
    let all = dir.path().join("all");
    let out = patchwise(&["filter", "--ckpt", s(&f.ckpt()), "--manifest", s(&f.manifest()), "--threshold", "0", "--out", s(&all)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(manifest_rows(&all.join("kept.tsv")).len(), total);
    assert!(manifest_rows(&all.join("dropped.tsv")).is_empty());

    let none = dir.path().join("none");
    let out = patchwise(&[
        "filter",
        "--ckpt",
        s(&f.ckpt()),
        "--manifest",
        s(&f.manifest()),
        "--threshold",
        "1.000001",
        "--out",
        s(&none),
    ]);
    assert_eq!(code(&out), 0);
    assert!(manifest_rows(&none.join("kept.tsv")).is_empty());
    assert_eq!(manifest_rows(&none.join("dropped.tsv")).len(), total);
}

#[test]
fn filter_is_idempotent() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = patchwise(&[
            "filter",
            "--ckpt",
            s(&f.ckpt()),
            "--manifest",
            s(&f.manifest()),
            "--threshold",
            "0.5",
            "--out",
            s(&out_dir),
        ]);
        assert_eq!(code(&out), 0);
        ["kept.tsv", "dropped.tsv", "scores.tsv"].map(|n| std::fs::read_to_string(out_dir.join(n)).unwrap())
    };
    assert_eq!(run("a"), run("a"));
}

#[test]
fn missing_checkpoint_is_a_checkpoint_error() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = patchwise(&[
        "filter",
        "--ckpt",
        s(&dir.path().join("absent.safetensors")),
        "--manifest",
        s(&f.manifest()),
        "--threshold",
        "0.5",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn ii_rec_n_needs_a_detector() {
    let f = fixture();
    let out = patchwise(&["evaluate", "--ckpt", s(&f.ckpt()), "--manifest", s(&f.manifest()), "--setting", "ii-rec-n"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn evaluate_writes_report() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = patchwise(&["evaluate", "--ckpt", s(&f.ckpt()), "--manifest", s(&f.manifest()), "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["setting"], "i-det");
    assert!(dir.path().join("roc.tsv").is_file());
}

#[test]
fn visualize_sidecar_lists_the_layout() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let image = f.root.join("corpus/normal/normal_0000.png");
    let out = patchwise(&["visualize", "--ckpt", s(&f.ckpt()), "--image", s(&image), "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sidecar = std::fs::read_to_string(dir.path().join("overlay.tsv")).unwrap();
    let lines: Vec<&str> = sidecar.lines().collect();
    assert_eq!(lines.len(), 1 + 17);
    assert!(lines[0].ends_with("\tnormal\tdistressed"));
    let geometry: Vec<String> = lines[1..].iter().map(|l| l.split('\t').take(11).collect::<Vec<_>>().join("\t")).collect();
    let expected = [
        "0\t0\t0\t0\t0\t300\t300\t0\t0\t300\t300",
        "1\t1\t0\t300\t0\t300\t300\t600\t0\t600\t450",
        "2\t0\t0\t0\t0\t300\t300\t0\t0\t1200\t900",
    ];
    assert_eq!(geometry[0], expected[0]);
    assert_eq!(geometry[13], expected[1]);
    assert_eq!(geometry[16], expected[2]);
    let png = image::open(dir.path().join("overlay.png")).unwrap();
    assert_eq!((png.width(), png.height()), (1200, 900));

    let out = patchwise(&["visualize", "--ckpt", s(&f.ckpt()), "--image", s(&image), "--strategy", "sw", "--out", s(dir.path())]);
    assert_eq!(code(&out), 3);
}

#[test]
fn synth_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("c");
    let run = || {
        let out = patchwise(&["synth", "--out", s(&out_dir), "--classes", "3", "--per-class", "2", "--width", "240", "--height", "180"]);
        assert_eq!(code(&out), 0);
        std::fs::read(out_dir.join("manifest.tsv")).unwrap()
    };
    assert_eq!(run(), run());
}
