use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use abstention::data_io::{generate, read_report, Report, SyntheticRecipe};
use serde_json::Value;

fn abstain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abstain"))
        .args(args)
        .arg("--workers")
        .arg("1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Separable 3-class data written as CSV with label column `y`.
fn dataset(dir: &Path, name: &str, m: usize, draw: u64) -> PathBuf {
    let recipe = SyntheticRecipe::separable(3, 2, 0.2, 0.3, 40, 3);
    let (_, sampler) = generate(&recipe).unwrap();
    let path = dir.join(name);
    sampler.sample(m, draw).unwrap().write_csv(&path, "y").unwrap();
    path
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn help_lists_defaults_for_every_flag() {
    for sub in ["train", "eval", "verify", "gaps", "realizable", "finite-sample"] {
        let out = abstain(&[sub, "--help"]);
        assert_eq!(code(&out), 0);
        let text = String::from_utf8(out.stdout).unwrap();
        let mut sections: Vec<String> = Vec::new();
        for line in text.lines() {
            if line.trim_start().starts_with("--") || line.trim_start().starts_with("-h") {
                sections.push(String::new());
            }
            if let Some(s) = sections.last_mut() {
                s.push_str(line);
                s.push('\n');
            }
        }
        for sec in sections {
            let flag = sec.split_whitespace().next().unwrap().to_string();
            if flag == "-h," || flag == "-V," {
                continue;
            }
            assert!(sec.contains("default"), "{sub} {flag} lacks a default:\n{sec}");
        }
    }
}

#[test]
fn train_single_and_two_stage() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dataset(dir.path(), "train.csv", 200, 0);
    let run1 = dir.path().join("run1");
    let out = abstain(&[
        "train", "--csv", s(&csv), "--label", "y", "--loss", "ce", "--mu", "1.0", "--cost", "0.05",
        "--out", s(&run1),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run1.join("model.model").exists());
    assert!(matches!(read_report(&run1.join("metrics.json")).unwrap(), Report::Metrics(_)));
    assert!(run1.join("metrics.csv").exists());
    let m = manifest(&run1);
    assert_eq!(m["config"]["cost"], 0.05);
    assert!(m["artifacts"]["model.model"].as_str().unwrap().len() == 64);

    let run2 = dir.path().join("run2");
    let out = abstain(&[
        "train", "--csv", s(&csv), "--two-stage", "--phi", "exp", "--cost", "0.15", "--out",
        s(&run2),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run2.join("predictor.model").exists());
    assert!(run2.join("rejector.model").exists());

    let out = abstain(&["train", "--csv", s(&csv), "--mu", "1.0", "--two-stage"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_config_precedence_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dataset(dir.path(), "train.csv", 100, 1);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 7, "cost": 0.3, "seed": 4}"#).unwrap();
    let run = dir.path().join("run");
    let out = abstain(&[
        "train", "--csv", s(&csv), "--config", s(&cfg), "--seed", "9", "--out", s(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&run);
    assert_eq!(m["config"]["epochs"], 7);
    assert_eq!(m["config"]["cost"], 0.3);
    assert_eq!(m["config"]["seed"], 9);

    // the manifest itself is a valid config; replaying gives identical artifacts
    let replay = dir.path().join("replay");
    let out = abstain(&[
        "train", "--config", s(&run.join("manifest.json")), "--out", s(&replay),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        manifest(&run)["artifacts"]["model.model"],
        manifest(&replay)["artifacts"]["model.model"]
    );

    fs::write(&cfg, r#"{"no_such_flag": 1}"#).unwrap();
    let out = abstain(&["train", "--csv", s(&csv), "--config", s(&cfg)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_mean_std_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let train = dataset(dir.path(), "train.csv", 150, 0);
    let test = dataset(dir.path(), "test.csv", 100, 1);
    let mut models = Vec::new();
    for seed in ["1", "2", "3"] {
        let run = dir.path().join(format!("seed{seed}"));
        let out = abstain(&[
            "train", "--csv", s(&train), "--model", "mlp", "--width", "8", "--epochs", "20",
            "--seed", seed, "--out", s(&run),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        models.push(run.join("model.model"));
    }
    let ev = dir.path().join("ev");
    let mut args = vec!["eval", "--csv", s(&test), "--out", s(&ev), "--model"];
    args.extend(models.iter().map(|p| s(p)));
    assert_eq!(code(&abstain(&args)), 0);
    let Report::Metrics(r) = read_report(&ev.join("metrics.json")).unwrap() else {
        panic!("metrics report expected")
    };
    assert_eq!(r.models.len(), 3);
    assert!(r.std_abstention_loss.is_some());

    let ev1 = dir.path().join("ev1");
    let out = abstain(&["eval", "--csv", s(&test), "--model", s(&models[0]), "--out", s(&ev1)]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(ev1.join("metrics.json")).unwrap();
    assert!(!text.contains("std_abstention_loss"));

    let wide = dir.path().join("wide.csv");
    fs::write(&wide, "a,b,c,y\n1,2,3,1\n0,1,0,2\n").unwrap();
    let out = abstain(&["eval", "--csv", s(&wide), "--model", s(&models[0]), "--out", s(&ev1)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn verify_passes_and_mutation_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dir.path().join("ok");
    let base = ["verify", "--mu", "0.5,1", "--cost", "0.25", "--n", "2", "--trials", "500"];
    let mut args = base.to_vec();
    args.extend(["--out", s(&ok)]);
    assert_eq!(code(&abstain(&args)), 0);
    assert!(ok.join("mu=0.5_c=0.25_n=2/report.json").exists());
    let bad = dir.path().join("bad");
    let mut args = base.to_vec();
    args.extend(["--mutate", "--out", s(&bad)]);
    assert_eq!(code(&abstain(&args)), 5);
    assert_eq!(manifest(&bad)["exit_code"], 5);

    let two = dir.path().join("two");
    let out = abstain(&[
        "verify", "--check", "two-stage", "--phi", "exp", "--trials", "1000", "--n", "3",
        "--cost", "0.1,0.5", "--out", s(&two),
    ]);
    assert_eq!(code(&out), 0);
}

#[test]
fn gaps_sweep_and_demo() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    assert_eq!(code(&abstain(&["gaps", "--mu-grid", "0:4:0.1", "--cost", "0.5", "--out", s(&g)])), 0);
    let Report::GapSweep(sweep) = read_report(&g.join("c=0.5/gaps.json")).unwrap() else {
        panic!("sweep expected")
    };
    assert_eq!(sweep.rows.len(), 41);
    assert!(sweep.monotone_decreasing);

    let d = dir.path().join("d");
    let out = abstain(&[
        "gaps", "--demo", "bounded-margin", "--lambda", "2", "--eta", "1", "--out", s(&d),
    ]);
    assert_eq!(code(&out), 0);
    let Report::ApproxGap(rec) = read_report(&d.join("demo.json")).unwrap() else {
        panic!("demo expected")
    };
    assert!((rec.difference - (-2f64).exp()).abs() < 1e-12);

    assert_eq!(code(&abstain(&["gaps", "--mu-grid=-0.5:1:0.5", "--out", s(&g)])), 2);
}

#[test]
fn realizable_runs() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("r");
    assert_eq!(code(&abstain(&["realizable", "--out", s(&r)])), 0);
    let Report::Realizable(rec) = read_report(&r.join("realizable.json")).unwrap() else {
        panic!("realizable record expected")
    };
    assert!(rec.certified_margin >= 0.5);
    assert!(rec.runs[0].two_stage_loss <= 0.01);
    let r9 = dir.path().join("r9");
    assert_eq!(code(&abstain(&["realizable", "--cost", "0.9", "--out", s(&r9)])), 0);
    assert_eq!(code(&abstain(&["realizable", "--margin", "0", "--out", s(&r9)])), 2);
}

#[test]
fn finite_sample_contract() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f");
    let quick = [
        "finite-sample", "--recipe", "label_noise", "--rho", "0.1", "--m", "200", "--trials", "20",
        "--clamp", "2", "--sigma-draws", "2", "--steps", "100", "--reference-runs", "3",
        "--reference-epochs", "100",
    ];
    let mut args = quick.to_vec();
    args.extend(["--out", s(&f)]);
    assert_eq!(code(&abstain(&args)), 0);
    assert!(matches!(read_report(&f.join("coverage.json")).unwrap(), Report::Coverage(_)));
    let mut args = quick.to_vec();
    args.extend(["--delta", "0.5", "--out", s(&f)]);
    assert_eq!(code(&abstain(&args)), 0);

    let out = abstain(&["finite-sample", "--trials", "5", "--clamp", "2", "--out", s(&f)]);
    assert_eq!(code(&out), 2);
    let out = abstain(&["finite-sample", "--out", s(&f)]);
    assert_eq!(code(&out), 2);
}
