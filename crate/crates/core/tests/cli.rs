//! The `seqmask` binary end to end on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MICRO: &str = r#"
n_masks = 2
epochs = 2
warmup_epochs = 1
batch_size = 8
seed = 5
[dataset]
count = 16
test_count = 8
classes = 2
[encoder]
width = 2
projection_dim = 8
input_size = 32
[masker]
base_channels = 2
depth = 2
[probe]
epochs = 2
[finetune]
epochs = 1
"#;

fn seqmask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqmask"))
        .args(args)
        .env_remove("SEQMASK_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("micro.toml");
    fs::write(&p, MICRO).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrain(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = write_config(dir);
    let out = dir.join(name);
    let mut args = vec!["pretrain", "--config", s(&cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = seqmask(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

fn telemetry(out: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(out.join("telemetry.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(seqmask(&[]).status.code(), Some(2));
    assert_eq!(seqmask(&["bogus"]).status.code(), Some(2));
    assert_eq!(seqmask(&["pretrain", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(seqmask(&["pretrain", "--masking", "sideways"]).status.code(), Some(2));
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(seqmask(&["--help"]).status.code(), Some(0));
    let v = seqmask(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(stdout(&v).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.safetensors");
    for verb in ["probe", "finetune", "metrics"] {
        let o = seqmask(&[verb, "--checkpoint", s(&missing)]);
        assert_eq!(o.status.code(), Some(1), "{verb}");
        assert!(stderr(&o).contains(s(&missing)), "{verb}: {}", stderr(&o));
    }
    let o = seqmask(&["probe"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--checkpoint"));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = seqmask(&["pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--out"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "epochs = 0\n").unwrap();
    let o = seqmask(&["pretrain", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epochs"), "{}", stderr(&o));

    let typo = dir.path().join("typo.toml");
    fs::write(&typo, "n_mask = 3\n").unwrap();
    let o = seqmask(&["pretrain", "--config", s(&typo), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_mask"), "{}", stderr(&o));
}

#[test]
fn pretrain_writes_run_record_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = pretrain(dir.path(), "a", &[]);
    let b = pretrain(dir.path(), "b", &[]);
    assert_eq!(
        fs::read_to_string(a.join("telemetry.jsonl")).unwrap(),
        fs::read_to_string(b.join("telemetry.jsonl")).unwrap()
    );
    // 16 images in batches of 8 for 2 epochs
    assert_eq!(telemetry(&a).len(), 4);
    assert!(a.join("checkpoint.safetensors").is_file());

    let cfg = seqmask::training::TrainConfig::from_toml_str(&fs::read_to_string(a.join("config.toml")).unwrap()).unwrap();
    assert_eq!(cfg, seqmask::training::TrainConfig::from_toml_str(MICRO).unwrap());
    let build = fs::read_to_string(a.join("build.txt")).unwrap();
    assert!(build.starts_with("seqmask "));
    assert!(build.contains(&cfg.hash()));

    let c = pretrain(dir.path(), "c", &["--seed", "6"]);
    assert_ne!(
        fs::read_to_string(a.join("telemetry.jsonl")).unwrap(),
        fs::read_to_string(c.join("telemetry.jsonl")).unwrap()
    );
}

#[test]
fn masking_none_zeroes_penalty_fields() {
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(dir.path(), "none", &["--masking", "none"]);
    for rec in telemetry(&out) {
        for key in ["budget", "overlap", "consistency", "mask_mean", "mask_pairwise_overlap"] {
            assert_eq!(rec[key].as_f64(), Some(0.0), "{key}");
        }
        assert_eq!(rec["contrastive"], rec["encoder_objective"]);
    }
}

#[test]
fn evaluation_verbs_on_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = pretrain(dir.path(), "run", &[]);
    let ck = run.join("checkpoint.safetensors");
    let eval = dir.path().join("eval");

    let o = seqmask(&["probe", "--checkpoint", s(&ck), "--out", s(&eval)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = seqmask(&["finetune", "--checkpoint", s(&ck), "--out", s(&eval)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = seqmask(&["metrics", "--checkpoint", s(&ck), "--out", s(&eval)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let records: Vec<serde_json::Value> = fs::read_to_string(eval.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let value = |name: &str| {
        records
            .iter()
            .find(|r| r["metric"] == name)
            .unwrap_or_else(|| panic!("{name} missing"))["value"]
            .as_f64()
            .unwrap()
    };
    for name in ["linear_probe_accuracy", "finetune_accuracy"] {
        assert!((0.0..=1.0).contains(&value(name)), "{name}");
    }
    assert!(value("empty_slots") >= 0.0);
    assert!(value("random_baseline_iou") > 0.0);
    for r in &records {
        assert_eq!(r["checkpoint"], s(&ck));
        assert_eq!(r["seed"], 5);
    }
    assert!(eval.join("mask_report.json").is_file());
    assert!(eval.join("config.toml").is_file() && eval.join("build.txt").is_file());

    let grid = dir.path().join("grids").join("masks.png");
    let o = seqmask(&["masks", "--checkpoint", s(&ck), "--out", s(&grid)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let img = image::open(&grid).unwrap();
    // 8 held-out images, original plus 2 masks per row
    assert_eq!((img.width(), img.height()), (3 * 32, 8 * 32));
    assert!(grid.with_file_name("build.txt").is_file());

    // a different config cannot be paired with this checkpoint
    let other = dir.path().join("other.toml");
    fs::write(&other, MICRO.replace("seed = 5", "seed = 9")).unwrap();
    let o = seqmask(&["probe", "--checkpoint", s(&ck), "--config", s(&other)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exported_dataset_trains_through_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("export");
    let o = seqmask(&["export-data", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let images = out.join("images");
    assert_eq!(fs::read_to_string(images.join("manifest.tsv")).unwrap().lines().count(), 16);

    let run = dir.path().join("from_manifest");
    let o = Command::new(env!("CARGO_BIN_EXE_seqmask"))
        .args(["pretrain", "--config", s(&cfg), "--dataset", "manifest.tsv", "--out", s(&run)])
        .env("SEQMASK_DATA_DIR", &images)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(telemetry(&run).len(), 4);

    let o = seqmask(&["pretrain", "--config", s(&cfg), "--dataset", "absent.tsv", "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.tsv"));
}
