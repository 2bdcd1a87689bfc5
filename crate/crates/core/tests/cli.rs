use std::path::Path;
use std::process::Command;

use graphino::cli::run;

fn run_args(args: &[&str]) -> i32 {
    let mut argv = vec!["graphino"];
    argv.extend_from_slice(args);
    run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn svg_root_name(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    doc.root_element().tag_name().name().to_string()
}

#[test]
fn full_pipeline_through_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("grid");
    let out = dir.path().join("run");
    let ckpt = out.join("model.ckpt");
    assert_eq!(
        run_args(&["synth-data", "--out", s(&data), "--months", "80", "--seed", "4"]),
        0
    );
    assert!(data.join("manifest.json").exists());

    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"model": {"layer_dims": [8, 8]}, "train": {"epochs": 3}, "data": {"window": 2}}"#,
    )
    .unwrap();
    assert_eq!(
        run_args(&[
            "train",
            "--config",
            s(&config),
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--seed",
            "2",
            "--preset",
            "gcn3a"
        ]),
        0
    );
    assert!(ckpt.exists());
    let history = std::fs::read_to_string(out.join("loss_history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,loss"));
    assert_eq!(history.lines().count(), 1 + 3);

    let eval = out.join("eval");
    assert_eq!(
        run_args(&[
            "evaluate",
            "--data",
            s(&data),
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&eval)
        ]),
        0
    );
    let summary = std::fs::read_to_string(out.join("eval.summary.csv")).unwrap();
    assert!(summary.starts_with("lead,r,rmse,n\n1,"));
    assert_eq!(svg_root_name(&out.join("eval.svg")), "svg");

    let preds = out.join("pred.csv");
    assert_eq!(
        run_args(&[
            "predict",
            "--data",
            s(&data),
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&preds)
        ]),
        0
    );
    let text = std::fs::read_to_string(&preds).unwrap();
    // every complete window of 2 months
    assert_eq!(text.lines().count(), 1 + 79);
}

#[test]
fn local_edges_and_ablation_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("grid");
    assert_eq!(run_args(&["synth-data", "--out", s(&data), "--months", "60"]), 0);
    let out = dir.path().join("local");
    assert_eq!(
        run_args(&["train", "--data", s(&data), "--edges", "local", "--out", s(&out)]),
        0
    );
    let heat = out.join("h");
    assert_eq!(
        run_args(&[
            "centrality",
            "--checkpoint",
            s(&out.join("model.ckpt")),
            "--out",
            s(&heat)
        ]),
        0
    );
    let csv = std::fs::read_to_string(out.join("h.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("lat,lon,centrality"));
    // 8x8 grid with three land cells; the ONI node is not a map cell
    assert_eq!(csv.lines().count(), 1 + 61);
    assert_eq!(svg_root_name(&out.join("h.svg")), "svg");
    let report = dir.path().join("ablation.json");
    assert_eq!(
        run_args(&[
            "ablation",
            "--data",
            s(&data),
            "--seeds",
            "0,1",
            "--epochs",
            "2",
            "--out",
            s(&report)
        ]),
        0
    );
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn exit_codes() {
    // missing required flag is a configuration error
    assert_eq!(run_args(&["train"]), 1);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run_args(&["evaluate", "--data", s(dir.path()), "--checkpoint", "absent.ckpt"]),
        2
    );
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run_args(&["train", "--config", s(&bad), "--data", s(dir.path())]), 1);
    assert_eq!(run_args(&["gradcheck"]), 0);
}

#[test]
fn binary_exit_codes_for_usage_errors() {
    let exe = env!("CARGO_BIN_EXE_graphino");
    let code = |args: &[&str]| Command::new(exe).args(args).output().unwrap();
    assert_eq!(code(&["--version"]).status.code(), Some(0));
    let help = code(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("centrality"));
    for args in [
        &["train", "--no-such-flag"][..],
        &["train", "--edges", "sideways"],
        &["frobnicate"],
    ] {
        assert_eq!(code(args).status.code(), Some(1), "{args:?}");
    }
    let bad = code(&["centrality", "--bogus"]);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("--bogus"));
}
