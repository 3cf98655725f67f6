use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;
use sha2::{Digest, Sha256};

use tunet_core::bench::bench_forward;
use tunet_core::config::RunConfig;
use tunet_core::data::{generate_phantoms, load_dataset, load_volume, zscore};
use tunet_core::model::{
    build_model, export_attention_maps, load_checkpoint, save_checkpoint, ModelConfig, Variant,
};
use tunet_core::train::{evaluate, run_fold, MetricsRecord};
use tunet_core::{Error, Result, Scalar};

use crate::{Cli, Command};

fn load_run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)?;
        cfg.apply(&text)?;
    }
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        cfg.phantom.seed = seed;
    }
    Ok(cfg)
}

fn write_json(cli: &Cli, value: &serde_json::Value) -> Result<()> {
    if let Some(path) = &cli.json {
        fs::write(path, serde_json::to_string_pretty(value).expect("serializable"))?;
    }
    Ok(())
}

pub fn run<T: Scalar>(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { out, subjects, size } => cmd_generate(cli, out, *subjects, *size),
        Command::Train { data, variant, fold, out } => {
            cmd_train::<T>(cli, data, variant, Some(*fold), out)
        }
        Command::Cv { data, variant, out } => cmd_train::<T>(cli, data, variant, None, out),
        Command::Eval { ckpt, data, window } => cmd_eval::<T>(cli, ckpt, data, *window),
        Command::Bench { variant, sizes, repeat } => cmd_bench::<T>(cli, variant, sizes, *repeat),
        Command::Params { variant, scale } => cmd_params::<T>(cli, variant.as_deref(), scale),
        Command::AttnExport { ckpt, subject, out } => cmd_attn_export::<T>(cli, ckpt, subject, out),
    }
}

fn cmd_generate(cli: &Cli, out: &Path, subjects: Option<usize>, size: Option<usize>) -> Result<()> {
    let mut cfg = load_run_config(cli)?;
    if let Some(n) = subjects {
        cfg.phantom.subjects = n;
    }
    if let Some(s) = size {
        cfg.phantom.size = s;
    }
    cfg.phantom.validate()?;
    let files = generate_phantoms(&cfg.phantom, out)?;
    let mut hasher = Sha256::new();
    let mut bytes = 0u64;
    for f in &files {
        let content = fs::read(f)?;
        bytes += content.len() as u64;
        hasher.update(&content);
    }
    let digest = format!("{:x}", hasher.finalize());
    println!("generated {} subjects under {}", cfg.phantom.subjects, out.display());
    println!("files: {}   bytes: {bytes}   sha256: {digest}", files.len());
    write_json(
        cli,
        &json!({
            "subjects": cfg.phantom.subjects,
            "size": cfg.phantom.size,
            "files": files.len(),
            "bytes": bytes,
            "sha256": digest,
        }),
    )
}

fn cmd_train<T: Scalar>(
    cli: &Cli,
    data: &Path,
    variant: &str,
    fold: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_run_config(cli)?;
    cfg.model.variant = Variant::parse(variant)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let samples = load_dataset::<T>(data)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("no subjects found under {}", data.display())));
    }
    fs::create_dir_all(out)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path)?;
    let mut records: Vec<MetricsRecord> = Vec::new();
    let folds: Vec<usize> = match fold {
        Some(f) => vec![f],
        None => (0..cfg.train.folds).collect(),
    };
    let mut fold_summaries = Vec::new();
    for f in folds {
        let mut sink = |r: &MetricsRecord| {
            let line = serde_json::to_string(r).expect("serializable");
            writeln!(metrics, "{line}").expect("metrics log writable");
            records.push(r.clone());
        };
        let outcome =
            run_fold::<T>(&cfg.model, &cfg.train, &samples, f, !cli.stable_time, &mut sink)?;
        let ckpt = out.join(format!("fold{f}.tunc"));
        save_checkpoint(&outcome.model, &ckpt)?;
        println!(
            "fold {f}: held-out dice wt {:.4} tc {:.4} at {:.4} mean {:.4} -> {}",
            outcome.eval.mean[0],
            outcome.eval.mean[1],
            outcome.eval.mean[2],
            outcome.eval.grand_mean,
            ckpt.display()
        );
        fold_summaries.push(json!({
            "fold": f,
            "dice_wt": outcome.eval.mean[0],
            "dice_tc": outcome.eval.mean[1],
            "dice_at": outcome.eval.mean[2],
            "dice_mean": outcome.eval.grand_mean,
            "checkpoint": ckpt.display().to_string(),
        }));
    }
    let mut medians: Vec<f64> =
        fold_summaries.iter().map(|s| s["dice_mean"].as_f64().unwrap()).collect();
    medians.sort_by(f64::total_cmp);
    let median = if medians.is_empty() {
        0.0
    } else if medians.len() % 2 == 1 {
        medians[medians.len() / 2]
    } else {
        0.5 * (medians[medians.len() / 2 - 1] + medians[medians.len() / 2])
    };
    println!("median held-out dice: {median:.4}");
    println!("metrics: {}", metrics_path.display());
    write_json(
        cli,
        &json!({
            "variant": cfg.model.variant.to_string(),
            "folds": fold_summaries,
            "median_dice": median,
            "metrics": metrics_path.display().to_string(),
        }),
    )
}

fn cmd_eval<T: Scalar>(cli: &Cli, ckpt: &Path, data: &Path, window: Option<usize>) -> Result<()> {
    let cfg = load_run_config(cli)?;
    let model = load_checkpoint::<T>(ckpt)?;
    let samples = load_dataset::<T>(data)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("no subjects found under {}", data.display())));
    }
    let window = window.unwrap_or(cfg.train.patch_size);
    let eval = evaluate(&model, &samples, window, cfg.train.overlap)?;
    println!("{:<10} {:>8} {:>8} {:>8}", "subject", "wt", "tc", "at");
    for (sid, d) in &eval.per_subject {
        println!("{sid:<10} {:>8.4} {:>8.4} {:>8.4}", d[0], d[1], d[2]);
    }
    println!(
        "{:<10} {:>8.4} {:>8.4} {:>8.4}   mean {:.4}",
        "mean", eval.mean[0], eval.mean[1], eval.mean[2], eval.grand_mean
    );
    write_json(
        cli,
        &json!({
            "window": window,
            "per_subject": eval
                .per_subject
                .iter()
                .map(|(sid, d)| json!({"subject": sid, "dice_wt": d[0], "dice_tc": d[1], "dice_at": d[2]}))
                .collect::<Vec<_>>(),
            "dice_wt": eval.mean[0],
            "dice_tc": eval.mean[1],
            "dice_at": eval.mean[2],
            "dice_mean": eval.grand_mean,
        }),
    )
}

fn cmd_bench<T: Scalar>(cli: &Cli, variant: &str, sizes: &[usize], repeat: usize) -> Result<()> {
    let mut cfg = load_run_config(cli)?;
    cfg.model.variant = Variant::parse(variant)?;
    cfg.model.validate()?;
    let model = build_model::<T>(&cfg.model)?;
    let mut reports = Vec::new();
    println!(
        "{:<6} {:>10} {:>10} {:>12} {:>14} {:>14} {:>12} {:>14}",
        "size", "median_ms", "min_ms", "peak_MB", "encoder", "bottleneck", "tl+tf", "total_flops"
    );
    for &size in sizes {
        let r = bench_forward(&model, size, repeat)?;
        println!(
            "{:<6} {:>10.2} {:>10.2} {:>12.1} {:>14} {:>14} {:>12} {:>14}",
            r.size,
            r.median_ms,
            r.min_ms,
            r.peak_bytes as f64 / (1 << 20) as f64,
            r.flops.encoder,
            r.flops.bottleneck,
            r.flops.token_learner + r.flops.token_fuser,
            r.flops.total
        );
        reports.push(r);
    }
    write_json(cli, &serde_json::to_value(&reports).expect("serializable"))
}

fn cmd_params<T: Scalar>(cli: &Cli, variant: Option<&str>, scale: &str) -> Result<()> {
    let base = |v| match scale {
        "paper" => Ok(ModelConfig::paper(v)),
        "desk" => Ok(ModelConfig::desk(v)),
        other => Err(Error::InvalidArgument(format!("scale must be paper or desk, got {other}"))),
    };
    let variants: Vec<Variant> = match variant {
        Some(v) => vec![Variant::parse(v)?],
        None => Variant::all().to_vec(),
    };
    let mut rows = Vec::new();
    for v in variants {
        let cfg = base(v)?;
        let model = build_model::<T>(&cfg)?;
        let counts = model.count_parameters();
        let comps: Vec<String> =
            counts.components.iter().map(|(n, c)| format!("{n}={c}")).collect();
        println!(
            "{:<24} total {:>12}   ({})",
            v.to_string(),
            counts.total,
            comps.join(", ")
        );
        rows.push(json!({
            "variant": v.to_string(),
            "scale": scale,
            "total": counts.total,
            "components": counts
                .components
                .iter()
                .map(|(n, c)| json!({"name": n, "count": c}))
                .collect::<Vec<_>>(),
        }));
    }
    write_json(cli, &serde_json::Value::Array(rows))
}

fn cmd_attn_export<T: Scalar>(cli: &Cli, ckpt: &Path, subject: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint::<T>(ckpt)?;
    let image_path: PathBuf = if subject.is_dir() { subject.join("image.tvol") } else { subject.into() };
    let image = zscore(&load_volume::<T>(&image_path)?);
    let files = export_attention_maps(&model, &image, out)?;
    println!("wrote {} files under {}", files.len(), out.display());
    write_json(
        cli,
        &json!({
            "files": files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>(),
        }),
    )
}
