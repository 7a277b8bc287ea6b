use std::path::Path;
use std::process::{Command, Output};

fn stgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stgnn"))
        .arg("-q")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = stgnn(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pipeline(root: &Path) -> Vec<u8> {
    let data = root.join("data");
    let ingested = root.join("ingested");
    let graph = root.join("graph");
    let run = root.join("run");
    ok(&[
        "simulate",
        "--counties",
        "22",
        "--horizon",
        "151",
        "--seed",
        "3",
        "--out",
        s(&data),
    ]);
    ok(&[
        "dp-aggregate",
        "--seed",
        "3",
        s(&data.join("trips.csv")),
        s(&data.join("flows.csv")),
    ]);
    ok(&[
        "ingest",
        "--cases",
        s(&data.join("cases.csv")),
        "--trends",
        s(&data.join("trends.csv")),
        "--populations",
        s(&data.join("population.csv")),
        "--out",
        s(&ingested),
    ]);
    ok(&[
        "build-graph",
        "--cases",
        s(&ingested.join("cases.json")),
        "--trends",
        s(&ingested.join("trends.json")),
        "--flows",
        s(&data.join("flows.csv")),
        "--out",
        s(&graph),
    ]);
    ok(&[
        "train",
        "--graph",
        s(&graph),
        "--steps",
        "300",
        "--out",
        s(&run.join("model.json")),
    ]);
    ok(&[
        "forecast",
        "--model",
        s(&run.join("model.json")),
        "--graph",
        s(&graph),
        "--days",
        "120:150",
        "--out",
        s(&run.join("gnn.json")),
    ]);
    let cases = ingested.join("cases.json");
    for m in ["prev-cases", "prev-delta", "arima"] {
        let out = run.join(format!("{m}.json"));
        ok(&[
            "baseline",
            "--method",
            m,
            "--cases",
            s(&cases),
            "--out",
            s(&out),
        ]);
    }
    let mut args = vec!["evaluate".to_string()];
    for m in ["gnn", "prev-cases", "prev-delta", "arima"] {
        args.push("--pred".into());
        args.push(run.join(format!("{m}.json")).to_string_lossy().into_owned());
    }
    args.extend([
        "--truth".into(),
        s(&cases).into(),
        "--out".into(),
        s(&run.join("report.json")).into(),
    ]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    std::fs::read(run.join("report.json")).unwrap()
}

#[test]
fn help_and_usage_errors() {
    let help = stgnn(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("build-graph"));
    assert_eq!(
        stgnn(&["simulate", "--no-such-flag"]).status.code(),
        Some(1)
    );
    assert_eq!(
        stgnn(&["baseline", "--method", "lstm", "--cases", "x", "--out", "y"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("cases.csv");
    std::fs::write(
        &bad,
        "date,county,state,fips,cases,deaths\n2020-03-01,A,S,1001,many,0\n",
    )
    .unwrap();
    let out = stgnn(&["ingest", "--cases", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let missing = stgnn(&[
        "ingest",
        "--cases",
        s(&dir.path().join("nope.csv")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn full_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    assert_eq!(first, pipeline(b.path()));

    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    let models: Vec<&str> = report["models"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["model"].as_str().unwrap())
        .collect();
    assert_eq!(models, ["gnn", "prev-cases", "prev-delta", "arima"]);
    assert_eq!(report["pairs"], 600);
    assert!(report["models"][1]["delta_corr"].is_null());

    let run = a.path().join("run");
    for echo in [
        "config.train.json",
        "config.forecast.json",
        "config.baseline.arima.json",
        "config.evaluate.json",
    ] {
        let v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(run.join(echo)).unwrap()).unwrap();
        assert!(
            v["subcommand"].is_string() && v["args"].is_object(),
            "{echo}"
        );
    }
    for dir in ["data", "ingested", "graph"] {
        let found = std::fs::read_dir(a.path().join(dir)).unwrap().any(|e| {
            e.unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("config.")
        });
        assert!(found, "{dir}");
    }
    assert!(run.join("train_history.json").exists());
    assert!(a.path().join("graph/index.json").exists());
}
