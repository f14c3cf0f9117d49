use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ralab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ralab")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let cfg = r#"{
        "dataset": {"kind": "blobs", "classes": 3, "per_class": 40, "test_per_class": 20, "dim": 6, "spread": 0.6, "seed": 1},
        "model": {"kind": "mlp", "hidden": [8], "dropout": 0.1},
        "acquisition": "random",
        "mode": "standard",
        "budget": 40,
        "initial": 10,
        "per_stage": 10,
        "training": {"epochs": 2, "batch_size": 8},
        "train_attack": {"family": "pgd", "epsilon": 0.1, "alpha": 0.02, "iters": 3, "norm": "linf"},
        "eval_attacks": [{"family": "pgd", "epsilon": 0.1, "alpha": 0.02, "iters": 3, "norm": "linf"}],
        "seed": 5
    }"#;
    fs::write(&path, cfg).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn al_writes_stages_and_manifest_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = ralab(&["al", "--config", s(&cfg), "--acquisition", "dre", "--mode", "robust", "--seed", "42", "--repeats", "2", "--dump-scores", "--quiet", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(a.join("stages.csv")).unwrap();
    assert!(text.starts_with("stage,labeled,accuracy,rob_pgd,rob_square,seconds,acquisition,seed\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 4);
    assert!(text.lines().last().unwrap().ends_with(",dre,43"));
    assert_eq!(text, fs::read_to_string(b.join("stages.csv")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([42, 43]));
    let files = manifest["outputs"].as_array().unwrap();
    assert!(files.iter().any(|f| f["path"] == "stages.csv"));
    assert!(files.iter().any(|f| f["path"] == "dumps/seed43/stage003.csv"));
    let digest = ralab_cli::manifest::sha256_file(&a.join("stages.csv")).unwrap();
    assert!(files.iter().any(|f| f["sha256"] == digest.as_str()));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("o");
    let o = ralab(&["al", "--config", s(&cfg), "--acquisition", "nope", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for name in ["entropy", "gini", "bald", "dropout-entropy", "lc", "margin", "mcp", "dfal", "egl", "coreset", "random", "dre"] {
        assert!(err.contains(name), "{err}");
    }
    let no_seed = dir.path().join("noseed.json");
    fs::write(&no_seed, r#"{"preset": "mnist"}"#).unwrap();
    let o = ralab(&["al", "--config", s(&no_seed), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
    assert_eq!(ralab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ralab(&["al", "--config", "/nonexistent.json", "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("idx.json");
    fs::write(&cfg, r#"{"preset": "mnist-desk", "seed": 1}"#).unwrap();
    let o = ralab(&["al", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stats_bias_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut runs = Vec::new();
    for acq in ["random", "entropy", "margin"] {
        let out = dir.path().join(acq);
        let o = ralab(&["al", "--config", s(&cfg), "--acquisition", acq, "--repeats", "2", "--dump-scores", "--quiet", "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(out);
    }
    let stats_dir = dir.path().join("stats");
    let (a, b) = (runs[0].join("stages.csv"), runs[1].join("stages.csv"));
    for _ in 0..2 {
        let o = ralab(&["stats", "--a", s(&a), "--b", s(&b), "--column", "accuracy", "--out", s(&stats_dir)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let line = String::from_utf8_lossy(&o.stdout).to_string();
        assert!(line.starts_with("W=") && line.contains(" p=") && line.contains(" n="), "{line}");
    }
    let stats = fs::read_to_string(stats_dir.join("stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 3);
    assert!(stats.starts_with("a,b,column,pairs,statistic,w_plus,p_value,n,exact\n"));

    let bias = dir.path().join("bias");
    let mut args = vec!["bias", "--out", s(&bias), "--runs"];
    args.extend(runs.iter().map(|r| s(r)));
    let o = ralab(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(bias.join("bias.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 * 3 * 5);
    let corr = fs::read_to_string(bias.join("correlation.csv")).unwrap();
    assert_eq!(corr.lines().count(), 1 + 3 * 5);

    let report = dir.path().join("report");
    let mut args = vec!["report", "--out", s(&report), "--inputs"];
    args.extend(runs.iter().map(|r| s(r)));
    args.push(s(&bias));
    let o = ralab(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curves = fs::read_to_string(report.join("curves.csv")).unwrap();
    assert!(curves.starts_with("source,acquisition,stage,seeds,labeled,accuracy,rob_pgd,rob_square\n"));
    assert_eq!(curves.lines().count(), 1 + 3 * 4);
    assert!(fs::read_to_string(report.join("heatmap.csv")).unwrap().starts_with("stage,entropy,gini,lc,margin,true_label\n"));
    let first = fs::read(report.join("final.csv")).unwrap();
    let o = ralab(&args);
    assert!(o.status.success());
    assert_eq!(first, fs::read(report.join("final.csv")).unwrap());
}

#[test]
fn retrain_and_attack_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let rcfg = dir.path().join("retrain.json");
    fs::write(
        &rcfg,
        r#"{
        "dataset": {"kind": "blobs", "classes": 3, "per_class": 40, "test_per_class": 40, "dim": 6, "spread": 0.6, "seed": 1},
        "model": {"kind": "mlp", "hidden": [8], "dropout": 0.0},
        "training": {"epochs": 1, "batch_size": 16},
        "pretrain_epochs": 3, "retrain_epochs": 1,
        "fractions": [0.0, 0.05], "acquisitions": ["dre", "random"],
        "train_attack": {"family": "pgd", "epsilon": 0.1, "alpha": 0.02, "iters": 3, "norm": "linf"},
        "eval_attacks": [{"family": "pgd", "epsilon": 0.1, "alpha": 0.02, "iters": 3, "norm": "linf"}],
        "seed": 8
    }"#,
    )
    .unwrap();
    let (a, b) = (dir.path().join("ra"), dir.path().join("rb"));
    for out in [&a, &b] {
        let o = ralab(&["retrain", "--config", s(&rcfg), "--quiet", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(a.join("retrain.csv")).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert_eq!(text, fs::read_to_string(b.join("retrain.csv")).unwrap());
    let too_big = dir.path().join("big.json");
    fs::write(&too_big, fs::read_to_string(&rcfg).unwrap().replace("[0.0, 0.05]", "[0.2]")).unwrap();
    assert_eq!(ralab(&["retrain", "--config", s(&too_big), "--out", s(&a)]).status.code(), Some(2));

    let run = dir.path().join("run");
    let o = ralab(&["al", "--config", s(&cfg), "--checkpoints", "--quiet", "--out", s(&run)]);
    assert!(o.status.success());
    let ck = run.join("checkpoints/seed5/stage003.json");
    let ev = dir.path().join("ev");
    let o = ralab(&["attack-eval", "--checkpoint", s(&ck), "--config", s(&cfg), "--out", s(&ev)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(ev.join("attack_eval.csv")).unwrap();
    assert!(rows.starts_with("family,norm,epsilon,alpha,iters,accuracy,robustness,n\npgd,linf,0.1,"));
    // The stored stage record and a fresh evaluation agree on clean accuracy.
    let stages = fs::read_to_string(run.join("stages.csv")).unwrap();
    let last_acc = stages.lines().last().unwrap().split(',').nth(2).unwrap().to_string();
    assert_eq!(rows.lines().nth(1).unwrap().split(',').nth(5).unwrap(), last_acc);
}

#[test]
fn synth_writes_loadable_idx() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mnist");
    let o = ralab(&["synth", "--train", "30", "--test", "10", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d: ralab_core::data::Dataset = ralab_core::data::load_idx(&out.join("train-images-idx3-ubyte"), &out.join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!((d.len(), d.image_shape()), (30, [1, 28, 28]));
}
