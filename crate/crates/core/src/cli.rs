//! `seqmask` command line: pretraining, evaluation, mask export.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::export_dataset;
use crate::error::{Error, Result};
use crate::eval::{fine_tune, linear_probe, mask_metrics, random_baseline_iou, visualize_masks, MetricRecord};
use crate::training::{
    load_checkpoint, save_checkpoint, telemetry_line, Checkpoint, DatasetKind, MaskingMode, TrainConfig, Trainer,
};

/// Build identifier recorded next to every run's outputs.
pub const BUILD_ID: &str = concat!("seqmask ", env!("CARGO_PKG_VERSION"), " (", env!("SEQMASK_GIT_REV"), ")");

#[derive(Debug, Parser)]
#[command(name = "seqmask", version, about = "Sequential adversarial masking for contrastive pretraining")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Train encoder and masker; writes telemetry and a checkpoint into --out.
    Pretrain(Common),
    /// Linear probe on frozen encoder features.
    Probe(Common),
    /// Fine-tune the encoder with a classifier head.
    Finetune(Common),
    /// Write a mask grid image (original left, one panel per mask).
    Masks(Common),
    /// Mask quality against ground-truth objects.
    Metrics(Common),
    /// Write the configured dataset as PNG files plus a manifest.
    ExportData(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint file written by `pretrain`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (for `masks`: the image file).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    masking: Option<MaskingMode>,
    /// Manifest of a labeled image dataset, or `synthetic`.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

/// Parse `argv` (program name first) and execute; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.verb) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(verb: Verb) -> Result<()> {
    match verb {
        Verb::Pretrain(c) => pretrain(c),
        Verb::Probe(c) => probe(c, false),
        Verb::Finetune(c) => probe(c, true),
        Verb::Masks(c) => masks(c),
        Verb::Metrics(c) => metrics(c),
        Verb::ExportData(c) => export(c),
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required for this command")))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ))
    }
}

fn apply_overrides(cfg: &mut TrainConfig, c: &Common) -> Result<()> {
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(m) = c.masking {
        cfg.masking = m;
    }
    if let Some(d) = &c.dataset {
        if d.as_os_str() == "synthetic" {
            cfg.dataset.kind = DatasetKind::Synthetic;
        } else {
            cfg.dataset.kind = DatasetKind::Manifest;
            cfg.dataset.manifest = Some(d.clone());
        }
    }
    cfg.validate()
}

/// Config from `--config` (or defaults) with flag overrides applied.
fn config_from_flags(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            require_file(p)?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, c)?;
    Ok(cfg)
}

/// Checkpoint plus the config to evaluate with: the stored one, which an
/// explicit `--config` must match exactly.
fn checkpoint_and_config(c: &Common) -> Result<(Checkpoint, TrainConfig)> {
    let path = require(&c.checkpoint, "checkpoint")?;
    require_file(path)?;
    if let Some(p) = &c.config {
        require_file(p)?;
    }
    let ck = load_checkpoint(path)?;
    if let Some(p) = &c.config {
        ck.ensure_config(&TrainConfig::load(p)?)?;
    }
    let mut cfg = ck.config.clone();
    // The stored masking mode describes how the checkpoint was trained; it
    // does not affect evaluation.
    let masking = cfg.masking;
    apply_overrides(
        &mut cfg,
        &Common {
            masking: None,
            config: None,
            checkpoint: None,
            out: None,
            seed: c.seed,
            dataset: c.dataset.clone(),
        },
    )?;
    cfg.masking = masking;
    Ok((ck, cfg))
}

/// Create `dir` and record the effective config and build id in it.
fn prepare_out_dir(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let build_path = dir.join("build.txt");
    let build = format!("{BUILD_ID}\nconfig_hash {}\n", cfg.hash());
    fs::write(&build_path, build).map_err(|e| Error::io(&build_path, e))?;
    Ok(())
}

fn print_config(cfg: &TrainConfig) {
    println!("# effective config ({})\n{}", cfg.hash(), cfg.to_toml());
}

fn pretrain(c: Common) -> Result<()> {
    let out = require(&c.out, "out")?.clone();
    let cfg = config_from_flags(&c)?;
    prepare_out_dir(&out, &cfg)?;
    print_config(&cfg);
    let ds = cfg.dataset.load_train(cfg.encoder.input_size)?;
    let tel_path = out.join("telemetry.jsonl");
    let mut tel = BufWriter::new(File::create(&tel_path).map_err(|e| Error::io(&tel_path, e))?);
    let mut trainer = Trainer::new(cfg.clone(), ds.len())?;
    let mut io_err = None;
    let result = trainer.run(&ds, |r| {
        if io_err.is_none() {
            if let Err(e) = writeln!(tel, "{}", telemetry_line(r)) {
                io_err = Some(e);
            }
        }
    });
    if let Err(Error::NonFiniteLoss { record }) = &result {
        let _ = writeln!(tel, "{}", telemetry_line(record));
    }
    tel.flush().map_err(|e| Error::io(&tel_path, e))?;
    if let Some(e) = io_err {
        return Err(Error::io(&tel_path, e));
    }
    let records = result?;
    let step = trainer.step();
    let (enc, masker) = trainer.into_states();
    let ck = out.join("checkpoint.safetensors");
    save_checkpoint(&ck, &cfg, &enc, &masker, step)?;
    if let Some(last) = records.last() {
        println!("trained {} steps; final {}", records.len(), telemetry_line(last));
    }
    println!("checkpoint: {}", ck.display());
    Ok(())
}

fn write_metrics(out: Option<&Path>, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        println!("{}", serde_json::to_string(r).expect("metric records serialize"));
    }
    if let Some(dir) = out {
        let path = dir.join("metrics.jsonl");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        for r in records {
            writeln!(f, "{}", serde_json::to_string(r).expect("metric records serialize"))
                .map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn dataset_id(cfg: &TrainConfig) -> String {
    match (&cfg.dataset.kind, &cfg.dataset.manifest) {
        (DatasetKind::Manifest, Some(m)) => m.display().to_string(),
        _ => format!("synthetic:{}:{}", cfg.dataset.seed, cfg.dataset.classes),
    }
}

fn probe(c: Common, finetune: bool) -> Result<()> {
    let (ck, cfg) = checkpoint_and_config(&c)?;
    if let Some(out) = &c.out {
        prepare_out_dir(out, &cfg)?;
    }
    print_config(&cfg);
    let size = cfg.encoder.input_size;
    let train = cfg.dataset.load_train(size)?;
    let Some(test) = cfg.dataset.load_test(size)? else {
        return Err(Error::Config(
            "evaluation needs a held-out split (dataset.test_count or dataset.test_manifest)".into(),
        ));
    };
    let (metric, acc) = if finetune {
        ("finetune_accuracy", fine_tune(&ck.encoder, &train, &test, &cfg.finetune)?)
    } else {
        ("linear_probe_accuracy", linear_probe(&ck.encoder, &train, &test, &cfg.probe)?)
    };
    let record = MetricRecord {
        checkpoint: c.checkpoint.as_ref().expect("checked").display().to_string(),
        dataset: dataset_id(&cfg),
        metric: metric.into(),
        value: acc,
        seed: cfg.seed,
    };
    write_metrics(c.out.as_deref(), &[record])
}

const GRID_IMAGES: usize = 8;

fn masks(c: Common) -> Result<()> {
    let out = require(&c.out, "out")?.clone();
    let (ck, cfg) = checkpoint_and_config(&c)?;
    let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    prepare_out_dir(dir, &cfg)?;
    print_config(&cfg);
    let size = cfg.encoder.input_size;
    let ds = match cfg.dataset.load_test(size)? {
        Some(test) => test,
        None => cfg.dataset.load_train(size)?,
    };
    let n = ds.len().min(GRID_IMAGES);
    let idx: Vec<usize> = (0..n).collect();
    visualize_masks(&ck.masker, &ds.images(&idx), &out)?;
    println!(
        "wrote {} ({} rows x {} panels)",
        out.display(),
        n,
        cfg.n_masks + 1
    );
    Ok(())
}

fn metrics(c: Common) -> Result<()> {
    let (ck, cfg) = checkpoint_and_config(&c)?;
    if let Some(out) = &c.out {
        prepare_out_dir(out, &cfg)?;
    }
    print_config(&cfg);
    let size = cfg.encoder.input_size;
    let ds = match cfg.dataset.load_test(size)? {
        Some(test) => test,
        None => cfg.dataset.load_train(size)?,
    };
    let report = mask_metrics(&ck.masker, &ds, cfg.budget_b)?;
    let baseline = random_baseline_iou(&ds, cfg.n_masks, cfg.budget_b, cfg.seed)?;
    let checkpoint = c.checkpoint.as_ref().expect("checked").display().to_string();
    let dataset = dataset_id(&cfg);
    let rec = |metric: String, value: f64| MetricRecord {
        checkpoint: checkpoint.clone(),
        dataset: dataset.clone(),
        metric,
        value,
        seed: cfg.seed,
    };
    let mut records = Vec::new();
    for (k, (&mean, &iou)) in report.slot_means.iter().zip(&report.slot_iou).enumerate() {
        records.push(rec(format!("slot{k}_mean"), mean));
        records.push(rec(format!("slot{k}_budget_error"), report.mean_budget_error[k]));
        records.push(rec(format!("slot{k}_iou"), iou));
        records.push(rec(format!("slot{k}_soft_iou"), report.slot_soft_iou[k]));
    }
    records.push(rec("mean_pairwise_overlap".into(), report.mean_pairwise_overlap()));
    records.push(rec("mean_best_match_iou".into(), report.mean_best_match_iou()));
    records.push(rec("empty_slots".into(), report.empty_slots as f64));
    records.push(rec("random_baseline_iou".into(), baseline));
    write_metrics(c.out.as_deref(), &records)?;
    if let Some(out) = &c.out {
        let path = out.join("mask_report.json");
        let json = serde_json::to_string_pretty(&report).expect("reports serialize");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn export(c: Common) -> Result<()> {
    let out = require(&c.out, "out")?.clone();
    let cfg = config_from_flags(&c)?;
    prepare_out_dir(&out, &cfg)?;
    print_config(&cfg);
    let ds = cfg.dataset.load_train(cfg.encoder.input_size)?;
    let manifest = export_dataset(&ds, &out.join("images"))?;
    println!("exported {} images; manifest {}", ds.len(), manifest.display());
    Ok(())
}
