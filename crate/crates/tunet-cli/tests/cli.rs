//! Command-line contract tests: exit codes, manifest determinism, metrics
//! schema, and JSON outputs.

use std::path::Path;
use std::process::{Command, Output};

fn tunet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tunet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn generate_writes_counted_files_and_stable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = tunet(
        &["generate", "--out", "a", "--subjects", "4", "--size", "16", "--seed", "3"],
        dir.path(),
    );
    assert!(out1.status.success());
    let subjects = std::fs::read_dir(dir.path().join("a")).unwrap().count();
    assert_eq!(subjects, 4);
    let tvols = walk_count(&dir.path().join("a"), "tvol");
    assert_eq!(tvols, 8, "image + label per subject");

    let out2 = tunet(
        &["generate", "--out", "b", "--subjects", "4", "--size", "16", "--seed", "3"],
        dir.path(),
    );
    let hash = |s: &str| {
        s.lines().find(|l| l.contains("sha256")).map(|l| l.to_string())
    };
    assert_eq!(hash(&stdout(&out1)), hash(&stdout(&out2)), "same flags, same manifest hash");
}

fn walk_count(root: &Path, ext: &str) -> usize {
    let mut n = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            n += walk_count(&p, ext);
        } else if p.extension().is_some_and(|e| e == ext) {
            n += 1;
        }
    }
    n
}

#[test]
fn invalid_size_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = tunet(&["generate", "--out", "x", "--subjects", "1", "--size", "30"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_variant_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = tunet(&["params", "--variant", "bogus_net"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = tunet(&["bench", "--variant", "nope", "--sizes", "16"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_on_missing_or_empty_data_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    // a checkpoint is needed first; train the smallest possible setup
    let cfg = "model.stage_widths = 4,8\ntrain.folds = 2\ntrain.epochs = 1\ntrain.patch_size = 8\nphantom.size = 8\n";
    std::fs::write(dir.path().join("run.cfg"), cfg).unwrap();
    let out = tunet(
        &["generate", "--config", "run.cfg", "--out", "data", "--subjects", "2", "--size", "8"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = tunet(
        &[
            "train", "--config", "run.cfg", "--data", "data", "--variant", "unet_star",
            "--fold", "0", "--out", "run",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = tunet(
        &["eval", "--config", "run.cfg", "--ckpt", "run/fold0.tunc", "--data", "empty"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    // bad window: not divisible by the model stride
    let out = tunet(
        &["eval", "--config", "run.cfg", "--ckpt", "run/fold0.tunc", "--data", "data", "--window", "9"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn metrics_lines_match_declared_schema_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "model.stage_widths = 4,8\ntrain.folds = 2\ntrain.epochs = 2\ntrain.patch_size = 8\nphantom.size = 8\n";
    std::fs::write(dir.path().join("run.cfg"), cfg).unwrap();
    assert!(tunet(
        &["generate", "--config", "run.cfg", "--out", "data", "--subjects", "3", "--size", "8"],
        dir.path()
    )
    .status
    .success());
    let out = tunet(
        &[
            "train", "--config", "run.cfg", "--data", "data", "--variant", "token_unet_plain",
            "--fold", "1", "--out", "run", "--json", "train.json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut expected = vec![
        "fold", "epoch", "step", "loss", "dice_wt", "dice_tc", "dice_at", "dice_mean", "lr",
        "time_s", "peak_bytes",
    ];
    expected.sort_unstable();
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let mut lines = 0;
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("valid JSON");
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, expected, "key set must match the declared schema");
        assert!(line.starts_with("{\"fold\":"), "declared key order: {line}");
        lines += 1;
    }
    assert_eq!(lines, 3, "2 train epochs + 1 eval record");
    // the train summary is valid JSON as well
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("train.json")).unwrap())
            .unwrap();
    assert!(summary["median_dice"].is_number());
}

#[test]
fn bench_json_reports_flop_split_that_sums() {
    let dir = tempfile::tempdir().unwrap();
    let out = tunet(
        &[
            "bench", "--variant", "token_unet_plain", "--sizes", "16", "--repeat", "3", "--json",
            "bench.json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap())
            .unwrap();
    let f = &v[0]["flops"];
    let parts = ["encoder", "token_learner", "bottleneck", "token_fuser", "decoder", "other"];
    let sum: u64 = parts.iter().map(|k| f[*k].as_u64().unwrap()).sum();
    assert_eq!(sum, f["total"].as_u64().unwrap());
}

#[test]
fn params_prints_all_variants_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = tunet(&["params", "--scale", "desk", "--json", "params.json"], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    for v in ["unet_baseline", "unet_star", "token_unet_plain", "token_unet_transformer"] {
        assert!(text.contains(v), "missing {v} in:\n{text}");
    }
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("params.json")).unwrap())
            .unwrap();
    assert_eq!(v.as_array().unwrap().len(), 4);
}

#[test]
fn attn_export_respects_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "model.stage_widths = 4,8\ntrain.folds = 2\ntrain.epochs = 1\ntrain.patch_size = 8\nphantom.size = 8\n";
    std::fs::write(dir.path().join("run.cfg"), cfg).unwrap();
    assert!(tunet(
        &["generate", "--config", "run.cfg", "--out", "data", "--subjects", "2", "--size", "8"],
        dir.path()
    )
    .status
    .success());
    for (variant, want_code) in [("token_unet_plain", 0), ("unet_star", 2)] {
        let run = format!("run_{variant}");
        assert!(tunet(
            &[
                "train", "--config", "run.cfg", "--data", "data", "--variant", variant, "--fold",
                "0", "--out", &run,
            ],
            dir.path()
        )
        .status
        .success());
        let out = tunet(
            &[
                "attn-export", "--ckpt", &format!("{run}/fold0.tunc"), "--subject", "data/s0000",
                "--out", &format!("maps_{variant}"),
            ],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(want_code), "{variant}");
        if want_code == 0 {
            let pgms = walk_count(&dir.path().join(format!("maps_{variant}")), "pgm");
            assert_eq!(pgms, 24);
        }
    }
}
