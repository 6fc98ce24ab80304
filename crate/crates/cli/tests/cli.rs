use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: [&str; 6] = [
    "--set",
    "meta.episodes_per_phase=[6,6,6]",
    "--set",
    "meta.hidden=[16]",
    "--set",
    "select.k=40",
];

fn logmeta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logmeta"))
        .args(args)
        .env_remove("LOGMETA_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = logmeta(args);
    assert!(
        out.status.success(),
        "logmeta {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn corpus(dir: &Path) -> PathBuf {
    let out = dir.join("corpus");
    ok(&[
        "synth-corpus",
        "--out",
        out.to_str().unwrap(),
        "--sources",
        "3",
        "--per-source",
        "240",
        "--imbalance",
        "10",
    ]);
    out.join("manifest.toml")
}

fn with_small<'a>(args: &[&'a str], manifest: &'a str) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(["--manifest", manifest]);
    v.extend(SMALL);
    v
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(logmeta(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(logmeta(&["loso", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(logmeta(&["parse"]).status.code(), Some(2));
    let help = logmeta(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("synth-corpus"));
}

#[test]
fn missing_inputs_exit_1_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let m = manifest.to_str().unwrap();
    let missing = dir.path().join("nowhere/pools.csv");
    let out = logmeta(&with_small(&["train", "--pools", missing.to_str().unwrap(), "--out", "x"], m));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere/pools.csv") && err.contains("balance"), "{err}");

    let out = logmeta(&["parse", "--out", "x", "--manifest", "/definitely/not/here.toml"]);
    assert_eq!(out.status.code(), Some(1));

    let out = logmeta(&with_small(&["loso", "--out", "x", "--set", "meta.inner_lr=-1"], m));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = corpus(&dir.path().join("a"));
    let b = corpus(&dir.path().join("b"));
    for name in ["manifest.toml", "src01.log", "src01.labels.csv", "src03.log"] {
        let fa = std::fs::read(a.parent().unwrap().join(name)).unwrap();
        let fb = std::fs::read(b.parent().unwrap().join(name)).unwrap();
        if name == "manifest.toml" {
            // Paths differ; the rest must not.
            let strip = |t: Vec<u8>, p: &Path| String::from_utf8(t).unwrap().replace(p.to_str().unwrap(), "");
            assert_eq!(strip(fa, a.parent().unwrap()), strip(fb, b.parent().unwrap()));
        } else {
            assert_eq!(fa, fb, "{name} differs");
        }
    }
    let labels = std::fs::read_to_string(a.parent().unwrap().join("src01.labels.csv")).unwrap();
    let anomalies = labels.lines().filter(|l| l.ends_with(",1")).count();
    assert_eq!(anomalies, (240.0f64 / 11.0).round() as usize);
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn loso_reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let m = manifest.to_str().unwrap();
    let r1 = dir.path().join("r1");
    let r2 = dir.path().join("r2");
    let out = ok(&with_small(&["loso", "--out", r1.to_str().unwrap()], m));
    ok(&with_small(&["loso", "--out", r2.to_str().unwrap()], m));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean f1"));
    let (a, b) = (tree(&r1), tree(&r2));
    assert!(a.iter().any(|(n, _)| n == "metadata.toml"));
    assert!(a.iter().any(|(n, _)| n.ends_with("src02.csv")));
    assert_eq!(a, b);
}

#[test]
fn stages_reproduce_a_loso_fold() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let m = manifest.to_str().unwrap();
    let loso = dir.path().join("loso");
    ok(&with_small(&["loso", "--out", loso.to_str().unwrap()], m));

    let f = dir.path().join("fold");
    let p = |name: &str| f.join(name).to_str().unwrap().to_string();
    let fs = f.to_str().unwrap();
    let h = ["--holdout", "src02"];
    let run = |args: Vec<&str>| {
        let mut a = args;
        a.extend(h);
        ok(&with_small(&a, m));
    };
    ok(&with_small(&["parse", "--out", fs], m));
    assert!(f.join("templates/src01.tsv").exists() && f.join("assignments.csv").exists());
    run(vec!["label", "--out", fs]);
    run(vec!["featurize", "--labels", &p("labels.csv"), "--out", fs]);
    run(vec!["select", "--features", &p("pool.csv"), "--out", fs]);
    run(vec!["balance", "--features", &p("pool.csv"), "--mask", &p("mask.txt"), "--out", fs]);
    run(vec!["train", "--pools", &p("pools.csv"), "--out", fs]);
    run(vec![
        "evaluate",
        "--checkpoint",
        &p("encoder.ckpt"),
        "--mask",
        &p("mask.txt"),
        "--train",
        &p("target_train.csv"),
        "--test",
        &p("target_test.csv"),
        "--out",
        fs,
    ]);
    let read = |p: PathBuf| std::fs::read_to_string(p).unwrap();
    assert_eq!(read(f.join("predictions.csv")), read(loso.join("predictions/src02.csv")));
    assert_eq!(read(f.join("curve.csv")), read(loso.join("curves/src02.csv")));

    let pred = dir.path().join("pred.csv");
    run(vec![
        "predict",
        "--checkpoint",
        &p("encoder.ckpt"),
        "--mask",
        &p("mask.txt"),
        "--support",
        &p("target_train.csv"),
        "--input",
        &p("target_test.csv"),
        "--out",
        pred.to_str().unwrap(),
    ]);
    let evaluated: Vec<String> = read(f.join("predictions.csv"))
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            format!("{},{},{}", c[0], c[2], c[3])
        })
        .collect();
    let predicted: Vec<String> = read(pred).lines().skip(1).map(str::to_string).collect();
    assert_eq!(evaluated, predicted);
}

#[test]
fn config_file_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "manifest = \"corpus/manifest.toml\"\nseed = 3\n[select]\nk = 30\n[meta]\nepisodes_per_phase = [4, 4, 4]\nhidden = [8]\n",
    )
    .unwrap();
    assert!(manifest.exists());
    let out_dir = dir.path().join("out");
    let out = Command::new(env!("CARGO_BIN_EXE_logmeta"))
        .args(["loso", "--out", out_dir.to_str().unwrap()])
        .env("LOGMETA_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let meta = std::fs::read_to_string(out_dir.join("metadata.toml")).unwrap();
    assert!(meta.contains("seed = 3"), "{meta}");
    assert!(meta.contains("k = 30"), "{meta}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = logmeta(&["parse", "--out", "x", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
