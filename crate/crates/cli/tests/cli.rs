use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use c2f_core::eval::{ground_truth_as_predictions, Protocol};
use c2f_core::synthdata::Manifest;

const SMALL: &str = r#"
[corpus]
num_videos = 20
frames = 120
feature_dim = 8
num_classes = 2
presence_rates = [0.03, 0.02]
mean_durations = [10.0, 8.0]
background_scenes = 4
seed = 5

[model]
feature_dim = 8
num_classes = 2
max_frames = 120
conv_channels = 8
hidden = [16]

[train]
epochs = 2
batch_size = 4
"#;

fn c2f(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c2f"))
        .args(args)
        .env("C2F_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = c2f(args);
    assert!(
        out.status.success(),
        "c2f {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("small.toml");
        std::fs::write(&config, SMALL).unwrap();
        Self { _dir: dir, root, config }
    }

    fn gen(&self, name: &str) -> PathBuf {
        let out = self.root.join(name);
        ok(&["gen-data", "--config", s(&self.config), "--out", s(&out)]);
        out
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn help_lists_config_keys_on_every_subcommand() {
    for sub in ["gen-data", "train", "infer", "eval", "ablate", "stats"] {
        let text = ok(&[sub, "--help"]);
        for key in ["[corpus]", "presence_rates", "[train]", "learning_rate", "video_threshold", "protocol"] {
            assert!(text.contains(key), "{sub} --help lacks {key}");
        }
    }
}

#[test]
fn exit_codes_distinguish_config_and_io_errors() {
    let f = Fixture::new();
    let bad = f.root.join("bad.toml");
    std::fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    let out = c2f(&["gen-data", "--config", s(&bad), "--out", s(&f.root.join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let invalid = f.root.join("invalid.toml");
    std::fs::write(&invalid, "[inference]\nframe_threshold = 1.5\n").unwrap();
    let out = c2f(&["gen-data", "--config", s(&invalid), "--out", s(&f.root.join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = c2f(&["stats", "--manifest", s(&f.root.join("missing.json"))]);
    assert_eq!(out.status.code(), Some(3));

    let out = c2f(&["gen-data", "--config", s(&f.root.join("missing.toml")), "--out", s(&f.root.join("x"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_data_is_reproducible_for_a_seed() {
    let f = Fixture::new();
    let a = f.gen("a");
    let b = f.gen("b");
    assert_eq!(tree(&a), tree(&b));
    assert!(a.join("resolved_config.toml").exists());
    assert!(a.join("stats.json").exists());

    let c = f.root.join("c");
    ok(&["gen-data", "--config", s(&f.config), "--out", s(&c), "--seed", "6"]);
    assert_ne!(
        std::fs::read(a.join("test/manifest.json")).unwrap(),
        std::fs::read(c.join("test/manifest.json")).unwrap()
    );
}

#[test]
fn ground_truth_predictions_score_100() {
    let f = Fixture::new();
    let data = f.gen("data");
    let test = data.join("test/manifest.json");
    let manifest = Manifest::read(&test).unwrap();
    for protocol in [Protocol::FirstOccurrence, Protocol::AllOccurrence] {
        let preds = ground_truth_as_predictions(&manifest, protocol).unwrap();
        let p = f.root.join(format!("gt_{}.json", protocol.name()));
        preds.write(&p).unwrap();
        let out = f.root.join(format!("eval_{}", protocol.name()));
        ok(&[
            "eval",
            "--manifest",
            s(&test),
            "--predictions",
            s(&p),
            "--protocol",
            protocol.name(),
            "--out",
            s(&out),
        ]);
        let stem = format!("report_{}.json", protocol.name().replace('-', "_"));
        let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join(stem)).unwrap()).unwrap();
        for v in report["map"].as_array().unwrap() {
            assert_eq!(v.as_f64(), Some(100.0));
        }
        assert_eq!(report["average_map"].as_f64(), Some(100.0));
    }
}

#[test]
fn train_infer_eval_round_trip() {
    let f = Fixture::new();
    let data = f.gen("data");
    let run = f.root.join("run");
    ok(&[
        "train",
        "--config",
        s(&f.config),
        "--manifest",
        s(&data.join("train/manifest.json")),
        "--out",
        s(&run),
    ]);
    let ckpt = run.join("checkpoint.c2f");
    assert!(ckpt.exists());
    assert!(run.join("train_log.jsonl").exists());

    let test = data.join("test/manifest.json");
    let infer = |name: &str| {
        let out = f.root.join(name);
        ok(&["infer", "--config", s(&f.config), "--checkpoint", s(&ckpt), "--manifest", s(&test), "--out", s(&out)]);
        std::fs::read(out.join("predictions.json")).unwrap()
    };
    assert_eq!(infer("i1"), infer("i2"));

    let ev = f.root.join("ev");
    let table = ok(&[
        "eval",
        "--config",
        s(&f.config),
        "--manifest",
        s(&test),
        "--checkpoint",
        s(&ckpt),
        "--curves",
        "--out",
        s(&ev),
    ]);
    assert!(table.contains("mAP"));
    assert!(ev.join("report_first_occurrence.json").exists());
    let video = &Manifest::read(&test).unwrap().videos[0].id;
    let csv = std::fs::read_to_string(ev.join("curves").join(format!("{video}.csv"))).unwrap();
    assert!(csv.starts_with("frame,foreground,conditional_0,conditional_1,action_0,action_1\n"));
    assert_eq!(csv.lines().count(), 121);
}

#[test]
fn mismatched_checkpoint_is_a_config_error() {
    let f = Fixture::new();
    let data = f.gen("data");
    let run = f.root.join("run");
    let cfg = f.root.join("one_epoch.toml");
    std::fs::write(&cfg, SMALL.replace("epochs = 2", "epochs = 0")).unwrap();
    ok(&["train", "--config", s(&cfg), "--manifest", s(&data.join("train/manifest.json")), "--out", s(&run)]);

    let other = f.root.join("other.toml");
    std::fs::write(&other, SMALL.replace("feature_dim = 8", "feature_dim = 6")).unwrap();
    let data6 = f.root.join("data6");
    ok(&["gen-data", "--config", s(&other), "--out", s(&data6)]);
    let out = c2f(&[
        "infer",
        "--checkpoint",
        s(&run.join("checkpoint.c2f")),
        "--manifest",
        s(&data6.join("test/manifest.json")),
        "--out",
        s(&f.root.join("i")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("feature_dim"));
}
