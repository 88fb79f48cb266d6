use std::path::Path;
use std::process::{Command, Output};

fn rpcl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpcl"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_small(dir: &Path) {
    let o = rpcl(
        &[
            "gen-data", "--seed", "5", "--output-dir", "data",
            "--set", "source_train=10", "--set", "source_test=3",
            "--set", "target_train=10", "--set", "target_test=4",
        ],
        dir,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["frobnicate"],
        &["train", "--no-such-flag"],
        &["train"],
        &["ablate", "--steps", "1"],
        &["train", "--seed", "1", "--set", "stepz=3"],
        &["train", "--seed", "1", "--set", "weights.sigma=2"],
        &["gen-data"],
    ];
    for args in cases {
        let o = rpcl(args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty(), "{args:?}");
    }
    let o = rpcl(&["train", "--seed", "1", "--set", "stepz=3"], dir.path());
    assert!(stderr(&o).contains("stepz"));
    let o = rpcl(&["frobnicate"], dir.path());
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn config_file_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"version": 1, "optimizer": {"lr": "fast"}}"#).unwrap();
    let o = rpcl(&["train", "--seed", "1", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("optimizer.lr"), "{}", stderr(&o));
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let o = rpcl(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    for sub in ["gen-data", "train", "eval", "ablate", "gradcheck", "plot"] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
}

#[test]
fn missing_dataset_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = rpcl(&["train", "--seed", "1", "--data-dir", "absent", "--steps", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent"), "{}", stderr(&o));
}

#[test]
fn train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let o = rpcl(
        &["train", "--seed", "2", "--data-dir", "data", "--steps", "6", "--output-dir", "run", "--set", "eval_interval=3", "--set", "top_k=8"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["checkpoint.bin", "metrics.csv", "timing.csv", "config.resolved.json", "predictions.jsonl"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }

    let o = rpcl(&["eval", "--predictions", "run/predictions.jsonl", "--index", "data/target/test.json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("mAP ")).map(str::to_owned).expect("mAP line");
    let map: f64 = line["mAP ".len()..].trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&map));
    let csv = std::fs::read_to_string(dir.path().join("run/eval.csv")).unwrap();
    assert!(csv.starts_with("class,AP\n"));
    assert!(csv.lines().any(|l| l.starts_with("mAP,")));

    let o = rpcl(&["plot", "--metrics", "run"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["loss.png", "map.png"] {
        let bytes = std::fs::read(dir.path().join("run").join(f)).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}

#[test]
fn eval_rejects_unknown_classes_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    std::fs::write(
        dir.path().join("p.jsonl"),
        "{\"image_id\":10,\"class_id\":7,\"box\":[0,0,4,4],\"confidence\":0.9}\n",
    )
    .unwrap();
    let o = rpcl(&["eval", "--predictions", "p.jsonl", "--index", "data/target/test.json"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

// finite differences at the default step need f64
#[cfg(not(feature = "single-precision"))]
#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = rpcl(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    for term in ["detection", "uda", "rotation_proprot", "rotation_imgrot", "consistency"] {
        assert!(out.lines().any(|l| l.starts_with(term) && l.ends_with("ok")), "{term}\n{out}");
    }
}

#[test]
fn gen_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_small(a.path());
    gen_small(b.path());
    for rel in ["data/source/train.json", "data/target/test.json", "data/source/images/000012.png", "data/target/images/000003.png"] {
        assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
}
