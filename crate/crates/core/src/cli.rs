//! The `mmgr` command line.
//!
//! Every operation in [`OPS`] becomes `mmgr <noun> <verb>`. Path parameters
//! are positional (or given as `--<resource>`), query parameters are flags,
//! and request bodies come from `--file`, `--json` or repeated `--set k=v`.
//! With `--endpoint` the command talks to a running server; without it the
//! registry under the configured data directory is opened in-process.
//!
//! Exit status: 0 on success, 1 when the service reports an error, 2 on a
//! usage error.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::{Map, Value};

use crate::agent::{generate_training_csv, run_agent, AgentOptions, ProcessSpec};
use crate::api::{BodyKind, Caller, Client, HttpCaller, OpSpec, ReplyKind, Service, OPS};
use crate::clock::SystemClock;
use crate::config::{Config, JobMode};
use crate::error::{Error, Result};
use crate::registry::Registry;

pub const EXIT_OK: i32 = 0;
pub const EXIT_API: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Table,
}

/// Flag name under which path parameter `param` of `op` is also accepted.
pub fn param_flag(op: &OpSpec, param: &'static str) -> String {
    if param != "id" {
        return param.to_string();
    }
    let first = op.path.split('/').nth(1).unwrap_or("id");
    first.strip_suffix('s').unwrap_or(first).to_string()
}

fn global_args(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("endpoint")
            .long("endpoint")
            .global(true)
            .value_name("URL")
            .help("Base URL of a running service; without it the local data directory is used"),
    )
    .arg(
        Arg::new("format")
            .long("format")
            .global(true)
            .value_parser(["json", "table"])
            .default_value("table")
            .help("Output format for JSON replies"),
    )
    .arg(
        Arg::new("config")
            .long("config")
            .global(true)
            .value_name("PATH")
            .value_parser(clap::value_parser!(PathBuf))
            .help("TOML configuration file"),
    )
}

fn op_command(op: &'static OpSpec) -> Command {
    let (_, verb) = op.cli_words();
    let mut cmd = Command::new(verb).about(op.summary);
    for p in op.path_params() {
        let flag = param_flag(op, p);
        let flag_id = format!("{p}__flag");
        cmd = cmd
            .arg(Arg::new(p).value_name(p.to_uppercase()).help(format!("{p} (or --{flag})")))
            .arg(
                Arg::new(flag_id.clone())
                    .long(flag)
                    .value_name(p.to_uppercase())
                    .conflicts_with(p)
                    .hide(true),
            );
    }
    for q in op.query {
        cmd = cmd.arg(Arg::new(*q).long(*q).value_name("VALUE"));
    }
    match op.body {
        BodyKind::None => {}
        BodyKind::Json => {
            cmd = cmd
                .arg(Arg::new("file").long("file").value_name("PATH").help("JSON body from a file, `-` for stdin"))
                .arg(Arg::new("json").long("json").value_name("JSON").conflicts_with("file").help("Inline JSON body"))
                .arg(
                    Arg::new("set")
                        .long("set")
                        .value_name("KEY=VALUE")
                        .action(ArgAction::Append)
                        .help("Body field; VALUE is parsed as JSON when possible"),
                );
        }
        BodyKind::Csv | BodyKind::Ndjson | BodyKind::Binary => {
            cmd = cmd.arg(
                Arg::new("file")
                    .long("file")
                    .value_name("PATH")
                    .required(true)
                    .help("Request body, `-` for stdin"),
            );
        }
    }
    if op.reply != ReplyKind::Json {
        cmd = cmd.arg(Arg::new("out").long("out").value_name("PATH").help("Write the reply to a file"));
    }
    cmd
}

fn agent_command() -> Command {
    let process = Arg::new("process")
        .long("process")
        .value_name("PATH")
        .required(true)
        .value_parser(clap::value_parser!(PathBuf))
        .help("Process description (JSON)");
    Command::new("agent")
        .about("Simulated edge agent")
        .subcommand_required(true)
        .subcommand(
            Command::new("run")
                .about("Serve a deployment against a simulated process and report")
                .arg(Arg::new("deployment").long("deployment").required(true).value_name("ID"))
                .arg(process.clone())
                .arg(
                    Arg::new("steps")
                        .long("steps")
                        .required(true)
                        .value_parser(clap::value_parser!(u64)),
                )
                .arg(
                    Arg::new("options")
                        .long("options")
                        .value_name("PATH")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("Agent options (JSON)"),
                )
                .arg(Arg::new("report").long("report").value_name("PATH").help("Write the NDJSON report here")),
        )
        .subcommand(
            Command::new("gen-csv")
                .about("Sample a training CSV from a simulated process")
                .arg(process)
                .arg(
                    Arg::new("rows")
                        .long("rows")
                        .required(true)
                        .value_parser(clap::value_parser!(usize)),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .default_value("0")
                        .value_parser(clap::value_parser!(u64)),
                )
                .arg(Arg::new("out").long("out").value_name("PATH")),
        )
}

fn noun_about(noun: &str) -> &'static str {
    match noun {
        "alarm" => "Drift alarms",
        "blob" => "Content-addressed blobs",
        "bundle" => "Deployment bundles",
        "dataset" => "Datasets",
        "deployment" => "Deployments",
        "drift" => "Drift detector state",
        "feedback" => "Feedback logs",
        "jobs" => "Tuning jobs",
        "lineage" => "Lineage queries",
        "link" => "Semantic links",
        "model" => "Models",
        "notification" => "Notifications",
        "registry" => "Registry checks",
        "run" => "Training runs",
        "service" => "Service metadata",
        "snapshot" => "Dataset snapshots",
        "verdict" => "Promotion verdicts",
        _ => "",
    }
}

/// The full command tree.
pub fn command() -> Command {
    let mut nouns: BTreeMap<&str, Vec<&'static OpSpec>> = BTreeMap::new();
    for op in OPS {
        nouns.entry(op.cli_words().0).or_default().push(op);
    }
    let mut root = Command::new("mmgr")
        .about("Model lifecycle management")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    root = global_args(root);
    for (noun, ops) in nouns {
        let mut sub = Command::new(noun).about(noun_about(noun)).subcommand_required(true);
        for op in ops {
            sub = sub.subcommand(op_command(op));
        }
        root = root.subcommand(sub);
    }
    root.subcommand(
        Command::new("serve")
            .about("Run the HTTP service")
            .arg(Arg::new("bind").long("bind").value_name("ADDR")),
    )
    .subcommand(agent_command())
}

/// Every `(noun, verb)` the command tree accepts.
pub fn command_paths() -> BTreeSet<(String, String)> {
    let mut out = BTreeSet::new();
    for noun in command().get_subcommands() {
        for verb in noun.get_subcommands() {
            out.insert((noun.get_name().to_string(), verb.get_name().to_string()));
        }
    }
    out
}

enum Failure {
    Usage(String),
    Api(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Api(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read_input(path: &str, stdin: &mut dyn Read) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    if path == "-" {
        stdin
            .read_to_end(&mut buf)
            .map_err(|e| Failure::Usage(format!("cannot read stdin: {e}")))?;
        return Ok(buf);
    }
    std::fs::read(path).map_err(|e| Failure::Usage(format!("cannot read {path}: {e}")))
}

fn write_output(path: &str, data: &[u8]) -> CliResult<()> {
    std::fs::write(path, data).map_err(|e| Failure::Usage(format!("cannot write {path}: {e}")))
}

fn json_body(m: &ArgMatches, stdin: &mut dyn Read) -> CliResult<Vec<u8>> {
    let mut obj = if let Some(path) = m.get_one::<String>("file") {
        let raw = read_input(path, stdin)?;
        serde_json::from_slice::<Value>(&raw).map_err(|e| Failure::Usage(format!("{path} is not JSON: {e}")))?
    } else if let Some(text) = m.get_one::<String>("json") {
        serde_json::from_str::<Value>(text).map_err(|e| Failure::Usage(format!("--json is not JSON: {e}")))?
    } else {
        Value::Object(Map::new())
    };
    let sets: Vec<&String> = m.get_many::<String>("set").map(|v| v.collect()).unwrap_or_default();
    if !sets.is_empty() {
        let map = obj
            .as_object_mut()
            .ok_or_else(|| Failure::Usage("--set needs a JSON object body".into()))?;
        for kv in sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv}")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            map.insert(k.to_string(), value);
        }
    }
    if obj.as_object().is_some_and(|m| m.is_empty()) {
        return Ok(Vec::new());
    }
    Ok(serde_json::to_vec(&obj).expect("JSON value serializes"))
}

fn cell(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => "-".into(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    }
}

fn is_scalar(v: &Value) -> bool {
    !matches!(v, Value::Array(_) | Value::Object(_))
}

fn render_rows(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i + 1 == cells.len() {
                s.push_str(c);
            } else {
                s.push_str(&format!("{c:<w$}  "));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

/// Renders a JSON reply as a plain-text table.
pub fn render_table(op: &OpSpec, value: &Value) -> String {
    match value {
        Value::Array(items) => {
            let header: Vec<String> = if !op.columns.is_empty() {
                op.columns.iter().map(|c| c.to_string()).collect()
            } else {
                let mut keys: Vec<String> = Vec::new();
                for item in items {
                    if let Value::Object(m) = item {
                        for (k, v) in m {
                            if is_scalar(v) && !keys.contains(k) {
                                keys.push(k.clone());
                            }
                        }
                    }
                }
                if keys.is_empty() {
                    keys.push("value".into());
                }
                keys
            };
            let rows: Vec<Vec<String>> = items
                .iter()
                .map(|item| match item {
                    Value::Object(m) => header.iter().map(|h| cell(m.get(h))).collect(),
                    other => vec![cell(Some(other))],
                })
                .collect();
            render_rows(&header, &rows)
        }
        Value::Object(m) => {
            if op.status == 201 {
                if let Some(Value::String(id)) = m.get("id") {
                    return format!("{id}\n");
                }
            }
            let rows: Vec<Vec<String>> = m.iter().map(|(k, v)| vec![k.clone(), cell(Some(v))]).collect();
            render_rows(&["field".into(), "value".into()], &rows)
        }
        other => format!("{}\n", cell(Some(other))),
    }
}

fn load_config(m: &ArgMatches) -> CliResult<Config> {
    Config::load(m.get_one::<PathBuf>("config").map(PathBuf::as_path)).map_err(|e| Failure::Usage(e.to_string()))
}

fn local_service(config: Config) -> Result<Service> {
    let dir = config.data_dir.clone();
    let registry = Registry::open(dir, config, Arc::new(SystemClock))?;
    Ok(Service::new(Arc::new(registry), JobMode::Inline, 1))
}

fn caller(m: &ArgMatches) -> CliResult<Box<dyn Caller>> {
    if let Some(endpoint) = m.get_one::<String>("endpoint") {
        return Ok(Box::new(HttpCaller::new(endpoint)));
    }
    let config = load_config(m)?;
    Ok(Box::new(local_service(config)?))
}

fn run_op(
    op: &'static OpSpec,
    root: &ArgMatches,
    m: &ArgMatches,
    io: &mut Io<'_>,
) -> CliResult<()> {
    let mut params: BTreeMap<&str, String> = BTreeMap::new();
    for p in op.path_params() {
        let flag_id = format!("{p}__flag");
        let v = m
            .get_one::<String>(p)
            .or_else(|| m.get_one::<String>(&flag_id))
            .ok_or_else(|| Failure::Usage(format!("missing {} (positional or --{})", p.to_uppercase(), param_flag(op, p))))?;
        params.insert(p, v.clone());
    }
    let client = Client::new(caller(root)?);
    let mut req = client.request(op.name, &params)?;
    for q in op.query {
        if let Some(v) = m.get_one::<String>(q) {
            req = req.query(q, v);
        }
    }
    req.body = match op.body {
        BodyKind::None => Vec::new(),
        BodyKind::Json => json_body(m, io.stdin)?,
        _ => read_input(m.get_one::<String>("file").expect("required"), io.stdin)?,
    };
    let resp = client.send(&req)?;
    if op.reply != ReplyKind::Json {
        if let Some(path) = m.get_one::<String>("out") {
            return write_output(path, &resp.body);
        }
        let _ = io.stdout.write_all(&resp.body);
        return Ok(());
    }
    let value = resp.json_value()?;
    let format = match root.get_one::<String>("format").map(String::as_str) {
        Some("json") => Format::Json,
        _ => Format::Table,
    };
    let text = match format {
        Format::Json => serde_json::to_string_pretty(&value).expect("JSON value serializes") + "\n",
        Format::Table => render_table(op, &value),
    };
    let _ = io.stdout.write_all(text.as_bytes());
    Ok(())
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let raw = std::fs::read(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&raw).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn run_agent_cmd(root: &ArgMatches, m: &ArgMatches, io: &mut Io<'_>) -> CliResult<()> {
    match m.subcommand() {
        Some(("run", a)) => {
            let process: ProcessSpec = read_json_file(a.get_one::<PathBuf>("process").expect("required"))?;
            let opts: AgentOptions = match a.get_one::<PathBuf>("options") {
                Some(p) => read_json_file(p)?,
                None => AgentOptions::default(),
            };
            let dep = a.get_one::<String>("deployment").expect("required");
            let steps = *a.get_one::<u64>("steps").expect("required");
            let mut client = Client::new(caller(root)?);
            let bundle = client.send(&client.request("deployment.bundle", &BTreeMap::from([("id", dep.clone())]))?)?.body;
            let report = run_agent(&bundle, dep, &process, steps, &mut client, &opts)?;
            let ndjson = report.to_ndjson();
            match a.get_one::<String>("report") {
                Some(path) => write_output(path, ndjson.as_bytes()),
                None => {
                    let _ = io.stdout.write_all(ndjson.as_bytes());
                    Ok(())
                }
            }
        }
        Some(("gen-csv", a)) => {
            let process: ProcessSpec = read_json_file(a.get_one::<PathBuf>("process").expect("required"))?;
            let rows = *a.get_one::<usize>("rows").expect("required");
            let seed = *a.get_one::<u64>("seed").expect("has default");
            let csv = generate_training_csv(&process, rows, seed)?;
            match a.get_one::<String>("out") {
                Some(path) => write_output(path, &csv),
                None => {
                    let _ = io.stdout.write_all(&csv);
                    Ok(())
                }
            }
        }
        _ => unreachable!("subcommand required"),
    }
}

fn run_serve(root: &ArgMatches, m: &ArgMatches, io: &mut Io<'_>) -> CliResult<()> {
    let config = load_config(root)?;
    let bind = m.get_one::<String>("bind").cloned().unwrap_or_else(|| config.server.bind.clone());
    let threads = config.server.workers;
    let mode = config.server.job_mode;
    let job_workers = config.tuning.workers;
    let dir = config.data_dir.clone();
    let registry = Registry::open(dir, config, Arc::new(SystemClock))?;
    let service = Arc::new(Service::new(Arc::new(registry), mode, job_workers));
    let stdout = &mut *io.stdout;
    crate::api::serve(service, &bind, threads, |addr| {
        let _ = writeln!(stdout, "listening on http://{addr}");
        let _ = stdout.flush();
    })?;
    Ok(())
}

/// Standard streams of one invocation.
pub struct Io<'a> {
    pub stdin: &'a mut dyn Read,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
}

/// Runs one invocation and returns its exit status.
pub fn run<I, T>(args: I, io: &mut Io<'_>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { io.stderr } else { io.stdout };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    let outcome = match matches.subcommand() {
        Some(("serve", m)) => run_serve(&matches, m, io),
        Some(("agent", m)) => run_agent_cmd(&matches, m, io),
        Some((noun, nm)) => {
            let (verb, vm) = nm.subcommand().expect("subcommand required");
            let cli = format!("{noun} {verb}");
            let op = OPS.iter().find(|o| o.cli == cli).expect("command tree is built from OPS");
            run_op(op, &matches, vm, io)
        }
        None => unreachable!("subcommand required"),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(io.stderr, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Api(e)) => {
            let _ = writeln!(io.stderr, "error[{}]: {e}", e.code().as_str());
            EXIT_API
        }
    }
}
