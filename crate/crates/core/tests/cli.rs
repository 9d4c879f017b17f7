use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use mmgr_core::api::OPS;
use mmgr_core::cli::{self, Io, EXIT_API, EXIT_OK, EXIT_USAGE};
use tempfile::TempDir;

struct Workspace {
    dir: TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("mmgr.toml");
        let data = dir.path().join("data");
        std::fs::write(&config, format!("data_dir = {:?}\n", data.to_str().unwrap())).unwrap();
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs the CLI in-process; returns (exit code, stdout, stderr).
    fn run(&self, args: &[&str]) -> (i32, String, String) {
        let mut argv = vec!["mmgr", "--config", self.config.to_str().unwrap()];
        argv.extend_from_slice(args);
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let mut stdin: &[u8] = b"";
        let code = cli::run(
            argv,
            &mut Io {
                stdin: &mut stdin,
                stdout: &mut out,
                stderr: &mut err,
            },
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    fn ok(&self, args: &[&str]) -> String {
        let (code, out, err) = self.run(args);
        assert_eq!(code, EXIT_OK, "{args:?}: {err}");
        out
    }
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn empty_model_list_prints_a_header_only() {
    let ws = Workspace::new();
    let out = ws.ok(&["model", "list"]);
    assert_eq!(out, "id  name  version  status  predecessor  created_by_run\n");
    assert_eq!(ws.ok(&["--format", "json", "model", "list"]), "[]\n");
}

#[test]
fn snapshot_ingest_prints_the_new_id() {
    let ws = Workspace::new();
    let ds = ws.ok(&["dataset", "create", "--set", "name=d"]).trim().to_string();
    let csv = write(&ws.path("x.csv"), "x,y\n0,1\n1,3\n2,5\n");
    let snap = ws.ok(&["snapshot", "ingest", "--dataset", &ds, "--file", &csv]);
    assert!(snap.trim().starts_with("snap-"), "{snap}");
    let same = ws.ok(&["snapshot", "show", snap.trim()]);
    assert!(same.contains("row_count"));
    let export = ws.ok(&["snapshot", "export", snap.trim()]);
    assert_eq!(export, "x,y\n0,1\n1,3\n2,5\n");
}

#[test]
fn usage_and_service_errors_have_distinct_exit_codes() {
    let ws = Workspace::new();
    let (code, _, err) = ws.run(&["model", "list", "--bogus"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("Usage"), "{err}");
    let (code, _, _) = ws.run(&["model", "show"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, err) = ws.run(&["model", "show", "nope"]);
    assert_eq!(code, EXIT_API);
    assert!(err.starts_with("error[not_found]"), "{err}");
    let (code, out, _) = ws.run(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("model"));
}

#[test]
fn train_gate_and_lineage_from_the_command_line() {
    let ws = Workspace::new();
    let ds = ws.ok(&["dataset", "create", "--json", r#"{"name":"plant"}"#]).trim().to_string();
    let csv = write(&ws.path("t.csv"), "x,y\n0,1\n1,3.1\n2,4.9\n3,7\n4,9.1\n");
    let snap = ws.ok(&["snapshot", "ingest", &ds, "--file", &csv]).trim().to_string();
    let out = ws.ok(&[
        "--format",
        "json",
        "model",
        "train",
        "--set",
        "name=m",
        "--set",
        &format!("snapshot={snap}"),
        "--set",
        r#"features=["x"]"#,
        "--set",
        "target=y",
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let model = v["model"]["id"].as_str().unwrap().to_string();
    let gate = ws.ok(&["--format", "json", "model", "gate", &model]);
    assert!(gate.contains("\"passed\": true"), "{gate}");
    ws.ok(&["model", "status", &model, "--set", "status=validated"]);
    let lineage = ws.ok(&["lineage", "export"]);
    assert!(lineage.contains(&format!("{model}\ttrained_on\t{snap}")), "{lineage}");
    let reproduce = ws.ok(&["--format", "json", "model", "reproduce", &model]);
    assert!(reproduce.contains("\"identical\": true"), "{reproduce}");
}

#[test]
fn every_operation_has_a_command_and_nothing_else_does() {
    let from_ops: BTreeSet<(String, String)> = OPS
        .iter()
        .map(|op| {
            let (n, v) = op.cli_words();
            (n.to_string(), v.to_string())
        })
        .collect();
    let mut expected = from_ops.clone();
    expected.insert(("agent".into(), "run".into()));
    expected.insert(("agent".into(), "gen-csv".into()));
    assert_eq!(cli::command_paths(), expected);
    cli::command().debug_assert();
}

#[test]
fn binary_reports_exit_codes() {
    let ws = Workspace::new();
    let bin = env!("CARGO_BIN_EXE_mmgr");
    let status = |args: &[&str]| {
        Command::new(bin)
            .arg("--config")
            .arg(&ws.config)
            .args(args)
            .output()
            .unwrap()
    };
    let out = status(&["model", "list"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "id  name  version  status  predecessor  created_by_run\n");
    assert_eq!(status(&["model", "frobnicate"]).status.code(), Some(2));
    assert_eq!(status(&["model", "show", "nope"]).status.code(), Some(1));
}

#[test]
fn agent_generates_training_csv() {
    let ws = Workspace::new();
    let process = write(
        &ws.path("p.json"),
        r#"{"features":[{"name":"x","low":-1,"high":1}],"coefficients":[2.0],"intercept":1.0,"noise_std":0.1,"seed":3}"#,
    );
    let out = ws.ok(&["agent", "gen-csv", "--process", &process, "--rows", "5", "--seed", "9"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0], "x,y");
    assert_eq!(out, ws.ok(&["agent", "gen-csv", "--process", &process, "--rows", "5", "--seed", "9"]));
}
