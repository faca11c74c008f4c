use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_av-anchor"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn av-anchor")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, layers: bool) {
    let mut args = vec![
        "synth",
        "--labels",
        "happy,sad,angry",
        "--per-label",
        "15",
        "--feature-dim",
        "8",
        "--noise",
        "0.05",
        "--out",
        p(dir),
    ];
    if layers {
        args.extend(["--layers", "2", "--frames", "3"]);
    }
    ok(&args);
}

#[test]
fn stagewise_commands_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(&d.join("data"), true);
    let manifest = d.join("data/manifest.csv");
    let truth = d.join("data/truth.csv");
    let cfg = d.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"head": {"feature_dim": 8, "epochs": 20}, "embed": {"epochs": 100}}"#,
    )
    .unwrap();

    ok(&[
        "--config",
        p(&cfg),
        "train-head",
        "--manifest",
        p(&manifest),
        "--out",
        p(&d.join("h.avhd")),
    ]);
    ok(&[
        "extract",
        "--head",
        p(&d.join("h.avhd")),
        "--manifest",
        p(&manifest),
        "--out",
        p(&d.join("f.avfm")),
    ]);
    ok(&[
        "extract",
        "--head",
        p(&d.join("h.avhd")),
        "--manifest",
        p(&manifest),
        "--out",
        p(&d.join("f.csv")),
    ]);
    ok(&[
        "graph",
        "--features",
        p(&d.join("f.avfm")),
        "--manifest",
        p(&manifest),
        "--k",
        "5",
        "--out",
        p(&d.join("g.json")),
    ]);
    let g: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("g.json")).unwrap()).unwrap();
    assert_eq!(g["k"], 5);
    assert_eq!(g["ids"].as_array().unwrap().len(), 45);

    ok(&[
        "--config",
        p(&cfg),
        "fit",
        "--features",
        p(&d.join("f.avfm")),
        "--manifest",
        p(&manifest),
        "--out",
        p(&d.join("m.avem")),
    ]);
    ok(&[
        "transform",
        "--model",
        p(&d.join("m.avem")),
        "--features",
        p(&d.join("f.csv")),
        "--manifest",
        p(&manifest),
        "--out",
        p(&d.join("av.csv")),
    ]);
    ok(&[
        "transform",
        "--model",
        p(&d.join("m.avem")),
        "--features",
        p(&d.join("f.avfm")),
        "--manifest",
        p(&manifest),
        "--use-labels",
        "--out",
        p(&d.join("avl.csv")),
    ]);

    let report: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--pred", p(&d.join("av.csv")), "--ref", p(&truth)])).unwrap();
    assert_eq!(report["n"], 9);
    assert!(report["valence"]["ccc"].as_f64().unwrap().is_finite());

    let mae: serde_json::Value = serde_json::from_str(&ok(&["anchor-mae", "--pred", p(&d.join("avl.csv"))])).unwrap();
    assert!(mae.is_object());
    ok(&["plot", "--pred", p(&d.join("av.csv")), "--out", p(&d.join("plot.svg"))]);
    assert!(std::fs::read_to_string(d.join("plot.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn run_writes_outputs_and_prints_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(&d.join("data"), true);
    let cfg = d.join("cfg.json");
    std::fs::write(&cfg, r#"{"head": {"feature_dim": 8}}"#).unwrap();
    let stdout = ok(&[
        "--config",
        p(&cfg),
        "--seed",
        "3",
        "run",
        "--manifest",
        p(&d.join("data/manifest.csv")),
        "--ref",
        p(&d.join("data/truth.csv")),
        "--with-labels",
        "--out",
        p(&d.join("out")),
    ]);
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["n"], 9);
    for f in [
        "head.avhd",
        "features.avfm",
        "model.avem",
        "av.csv",
        "av_with_labels.csv",
        "plot.svg",
        "run_log.json",
    ] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    let log: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("out/run_log.json")).unwrap()).unwrap();
    assert_eq!(log["embed_seed"], 3);
    assert_eq!(log["head_seed"], 3);
}

#[test]
fn io_errors_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--pred",
        p(&dir.path().join("nope.csv")),
        "--ref",
        p(&dir.path().join("nope.csv")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn input_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--labels", "elated", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "utterance_id,valence,arousal,label\na,notanumber,0.1,\n").unwrap();
    let out = run(&["plot", "--pred", p(&bad), "--out", p(&dir.path().join("x.svg"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["fit"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut bytes = b"AVLS".to_vec();
    for v in [1u32, 1, 2] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&f32::NAN.to_le_bytes());
    bytes.extend_from_slice(&1.0f32.to_le_bytes());
    std::fs::write(d.join("a.avls"), &bytes).unwrap();
    std::fs::write(
        d.join("m.csv"),
        format!(
            "utterance_id,label,speaker,split,feature_path\na,happy,s,train,{}\n",
            p(&d.join("a.avls"))
        ),
    )
    .unwrap();
    let out = run(&[
        "train-head",
        "--manifest",
        p(&d.join("m.csv")),
        "--out",
        p(&d.join("h.avhd")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn parallel_mode_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(&d.join("data"), false);
    ok(&[
        "--deterministic",
        "false",
        "--threads",
        "2",
        "fit",
        "--features",
        p(&d.join("data/features.avfm")),
        "--manifest",
        p(&d.join("data/manifest.csv")),
        "--out",
        p(&d.join("m.avem")),
    ]);
    assert!(d.join("m.avem").exists());
}
