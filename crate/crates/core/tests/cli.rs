use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--samples",
    "400",
    "--lookback",
    "32",
    "--horizon",
    "8",
    "--scales",
    "2",
    "--kernel",
    "5",
    "--hidden",
    "8",
];

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossscale"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CROSSSCALE_OUT")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn gen_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        vec![
            "gen",
            "--dataset",
            "SYN1",
            "--samples",
            "300",
            "--seed",
            "7",
            "--out",
            out,
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()
    };
    for out in ["a", "b"] {
        let a = args(out);
        ok(
            &a.iter().map(String::as_str).collect::<Vec<_>>(),
            dir.path(),
        );
    }
    for file in [
        "SYN1.csv",
        "SYN1.json",
        "SYN1_mask.csv",
        "resolved_config.json",
    ] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        if file == "resolved_config.json" {
            // the snapshot records its own output directory
            assert_eq!(
                String::from_utf8(a).unwrap().replace("\"a\"", "\"b\""),
                String::from_utf8(b).unwrap()
            );
        } else {
            assert_eq!(a, b, "{file}");
        }
    }
    let rows = fs::read_to_string(dir.path().join("a/SYN1.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 1 + 300 - 15);
}

#[test]
fn default_output_goes_under_out_root() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &[
            "--out-root",
            "runs",
            "gen",
            "--dataset",
            "SYN5",
            "--samples",
            "200",
        ],
        dir.path(),
    );
    assert!(dir.path().join("runs/gen/SYN5.csv").exists());
}

#[test]
fn invalid_settings_fail_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--data", "SYN1", "--out", "bad"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--patch", "32", "--epochs", "1"]);
    let out = run(&args, dir.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("patch"), "{stderr}");
    assert!(!dir.path().join("bad").exists());

    let out = run(&["gen", "--dataset", "SYN42", "--out", "g"], dir.path());
    assert!(!out.status.success());
    assert!(!dir.path().join("g").exists());
    let out = run(
        &[
            "train",
            "--data",
            "SYN1",
            "--variant",
            "multi_head",
            "--out",
            "v",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
}

#[test]
fn train_then_explain() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        &[
            "gen",
            "--dataset",
            "SYN1",
            "--samples",
            "400",
            "--lookback",
            "32",
            "--out",
            "g",
        ],
        p,
    );
    let mut train = vec![
        "train", "--data", "SYN1", "--out", "t", "--patch", "4", "--epochs", "2",
    ];
    train.extend_from_slice(SMALL);
    ok(&train, p);
    for f in [
        "model.ckpt",
        "history.csv",
        "metrics.json",
        "resolved_config.json",
    ] {
        assert!(p.join("t").join(f).exists(), "{f}");
    }
    let explain = |out: &str, truth: Option<&str>| {
        let mut a = vec![
            "explain",
            "--checkpoint",
            "t/model.ckpt",
            "--data",
            "SYN1",
            "--samples",
            "400",
            "--ig-steps",
            "8",
            "--ig-windows",
            "2",
            "--out",
            out,
        ];
        if let Some(t) = truth {
            a.extend_from_slice(&["--truth", t]);
        }
        ok(&a, p);
        let text = fs::read_to_string(p.join(out).join("report.json")).unwrap();
        serde_json::from_str::<serde_json::Value>(&text).unwrap()
    };
    let with = explain("e1", Some("g/SYN1_mask.csv"));
    assert!(with.get("agreement").is_some());
    let without = explain("e2", None);
    assert!(without.get("agreement").is_none());
    for f in ["saliency.csv", "saliency.pgm", "ig_map.csv", "ig_map.pgm"] {
        assert!(p.join("e2").join(f).exists(), "{f}");
    }
    assert!(p.join("e1/truth.pgm").exists());

    // the replayable snapshot reproduces the run
    ok(
        &["train", "--config", "t/resolved_config.json", "--out", "t2"],
        p,
    );
    assert_eq!(
        fs::read(p.join("t/model.ckpt")).unwrap(),
        fs::read(p.join("t2/model.ckpt")).unwrap()
    );
}

#[test]
fn ablation_table_has_one_row_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "ablation",
        "--dataset",
        "SYN1,SYN2",
        "--variants",
        "self_attention,patch_attention,cross_shared_key,cross_dual_key",
        "--seeds",
        "1",
        "--out",
        "abl",
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--patch", "4", "--epochs", "1"]);
    ok(&args, dir.path());
    let csv = fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "dataset,variant,mse,mae,runs,failures");
    assert_eq!(lines.len(), 1 + 8);
    assert!(lines[1..].iter().all(|l| l.ends_with(",1,0")));
    assert!(dir.path().join("abl/ablation.md").exists());
}
