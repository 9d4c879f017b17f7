use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::ops::{BodyKind, OpSpec, ReplyKind, OPS};
use super::{ApiRequest, ApiResponse, CSV, JSON, MAX_BODY, NDJSON, OCTETS, TEXT};
use crate::bundle::{canonical_json, verify_bundle, MonitoringOverrides};
use crate::config::JobMode;
use crate::drift::{parse_feedback_ndjson, to_ndjson, FeedbackEvent};
use crate::error::{Error, Result};
use crate::lineage::EdgeKind;
use crate::orchestrator::JobRunner;
use crate::registry::{
    AutoEvaluation, DeploySpec, JobRecord, JobStatus, ManualJobSpec, ModelStatus, Registry, RunSpec, TrainSpec,
};
use crate::store::is_valid_hash;

/// The request handler behind both the HTTP server and in-process callers.
pub struct Service {
    registry: Arc<Registry>,
    runner: JobRunner,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewDataset {
    name: String,
    #[serde(default)]
    description: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewLink {
    from: String,
    to: String,
    kind: String,
    #[serde(default)]
    annotation: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StatusChange {
    status: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateRequest {
    #[serde(default)]
    snapshot: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackRange {
    #[serde(default)]
    epoch: Option<u32>,
    from: u64,
    to: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AlarmDelivery {
    deployment_id: String,
    alarm_at: u64,
}

#[derive(Serialize)]
struct Trained<'a> {
    run: &'a crate::registry::RunRecord,
    model: &'a crate::registry::ModelRecord,
}

/// A matched route: the operation and its decoded path parameters.
struct Route {
    op: &'static OpSpec,
    params: BTreeMap<&'static str, String>,
}

impl Route {
    fn param(&self, name: &str) -> &str {
        self.params.get(name).map(String::as_str).expect("router checked path params")
    }
}

fn match_route(method: super::Method, path: &str) -> Result<Route> {
    let segments: Vec<&str> = path.trim_end_matches('/').split('/').skip(1).collect();
    let mut best: Option<(usize, Route)> = None;
    let mut path_known = false;
    'ops: for op in OPS {
        let template: Vec<&str> = op.path.split('/').skip(1).collect();
        if template.len() != segments.len() {
            continue;
        }
        let mut params = BTreeMap::new();
        let mut literals = 0;
        for (t, s) in template.iter().zip(&segments) {
            match t.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
                Some(name) => {
                    let decoded = percent_encoding::percent_decode_str(s)
                        .decode_utf8()
                        .map_err(|_| Error::validation("path is not valid UTF-8"))?;
                    if decoded.is_empty() {
                        continue 'ops;
                    }
                    params.insert(name, decoded.into_owned());
                }
                None if t == s => literals += 1,
                None => continue 'ops,
            }
        }
        path_known = true;
        if op.method != method {
            continue;
        }
        if best.as_ref().is_none_or(|(l, _)| literals > *l) {
            best = Some((literals, Route { op, params }));
        }
    }
    match best {
        Some((_, r)) => Ok(r),
        None if path_known => Err(Error::validation(format!("{} is not supported on {path}", method.as_str()))),
        None => Err(Error::not_found("route", format!("{} {path}", method.as_str()))),
    }
}

fn json_body<T: DeserializeOwned>(body: &[u8]) -> Result<T> {
    let body = if body.iter().all(u8::is_ascii_whitespace) { b"{}".as_slice() } else { body };
    serde_json::from_slice(body).map_err(|e| Error::validation(format!("invalid request body: {e}")))
}

fn parse_query<T: std::str::FromStr>(req: &ApiRequest, key: &str) -> Result<Option<T>> {
    req.query
        .get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Error::validation(format!("query parameter {key}={v:?} is not valid")))
        })
        .transpose()
}

fn required_query(req: &ApiRequest, key: &str) -> Result<String> {
    req.query
        .get(key)
        .cloned()
        .ok_or_else(|| Error::validation(format!("query parameter {key} is required")))
}

enum Reply {
    Json(Vec<u8>),
    Raw(Vec<u8>),
    /// A job-producing operation; answered with 202 in background mode.
    Job(Vec<u8>),
}

fn json<T: Serialize>(v: &T) -> Result<Reply> {
    Ok(Reply::Json(canonical_json(v)))
}

impl Service {
    pub fn new(registry: Arc<Registry>, mode: JobMode, workers: usize) -> Self {
        let runner = JobRunner::new(registry.clone(), mode, workers);
        Self { registry, runner }
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn runner(&self) -> &JobRunner {
        &self.runner
    }

    /// Answers one request. Never panics: every failure becomes an error
    /// envelope with a mapped code.
    pub fn handle(&self, req: &ApiRequest) -> ApiResponse {
        match catch_unwind(AssertUnwindSafe(|| self.try_handle(req))) {
            Ok(Ok(resp)) => resp,
            Ok(Err(e)) => ApiResponse::error(&e),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_default();
                log::error!("request {} {} panicked: {msg}", req.method.as_str(), req.path);
                ApiResponse::error(&Error::corruption("internal error while handling the request"))
            }
        }
    }

    fn try_handle(&self, req: &ApiRequest) -> Result<ApiResponse> {
        let route = match_route(req.method, &req.path)?;
        let op = route.op;
        if let Some(k) = req.query.keys().find(|k| !op.query.contains(&k.as_str())) {
            return Err(Error::validation(format!("unknown query parameter {k:?}")));
        }
        if req.body.len() > MAX_BODY {
            return Err(Error::validation(format!("request body exceeds {MAX_BODY} bytes")));
        }
        if op.body == BodyKind::None && !req.body.iter().all(u8::is_ascii_whitespace) {
            return Err(Error::validation(format!("{} takes no request body", op.name)));
        }
        let reply = self.dispatch(&route, req)?;
        let content_type = match op.reply {
            ReplyKind::Json => JSON,
            ReplyKind::Csv => CSV,
            ReplyKind::Ndjson => NDJSON,
            ReplyKind::Binary => OCTETS,
            ReplyKind::Text => TEXT,
        };
        let (status, body) = match reply {
            Reply::Json(b) | Reply::Raw(b) => (op.status, b),
            Reply::Job(b) if self.runner.mode() == JobMode::Background => (202, b),
            Reply::Job(b) => (op.status, b),
        };
        Ok(ApiResponse {
            status,
            content_type,
            body,
        })
    }

    /// Lets the runner pick up jobs a request may have made ready.
    fn kick(&self) {
        if let Err(e) = self.runner.kick() {
            log::warn!("job execution stopped early: {e}");
        }
    }

    fn start_job(&self, job: JobRecord) -> Result<Reply> {
        let job = match self.runner.mode() {
            JobMode::Inline => self.runner.run(&job.id)?,
            JobMode::Background => {
                self.runner.spawn(&job.id)?;
                job
            }
        };
        Ok(Reply::Job(canonical_json(&job)))
    }

    fn dispatch(&self, route: &Route, req: &ApiRequest) -> Result<Reply> {
        let reg = &self.registry;
        let id = || route.param("id");
        match route.op.name {
            "health" => json(&json!({"status": "ok", "version": env!("CARGO_PKG_VERSION")})),
            "reference" => json(&super::reference_document()),

            "dataset.create" => {
                let b: NewDataset = json_body(&req.body)?;
                json(&reg.create_dataset(&b.name, &b.description)?)
            }
            "dataset.list" => json(&reg.list_datasets()?),
            "dataset.show" => json(&reg.get_dataset(id())?),
            "snapshot.ingest" => {
                let parent = req.query.get("parent").map(String::as_str);
                json(&reg.ingest_snapshot(id(), &req.body, parent)?)
            }
            "snapshot.list" => {
                let dataset = req.query.get("dataset");
                if let Some(d) = dataset {
                    reg.get_dataset(d)?;
                }
                let all = reg.read(|tx| tx.all_snapshots())?;
                json(&all.into_iter().filter(|s| dataset.is_none_or(|d| *d == s.dataset_id)).collect::<Vec<_>>())
            }
            "snapshot.show" => json(&reg.get_snapshot(id())?),
            "snapshot.data" => Ok(Reply::Raw(reg.read(|tx| tx.materialize(id()))?.to_csv())),

            "blob.put" => json(&reg.put_blob(&req.body)?),
            "blob.get" => {
                let hash = route.param("hash");
                if !is_valid_hash(hash) {
                    return Err(Error::validation("blob address must be 64 lowercase hex digits"));
                }
                Ok(Reply::Raw(reg.get_blob(hash)?))
            }

            "link.add" => {
                let b: NewLink = json_body(&req.body)?;
                let kind: EdgeKind = b.kind.parse()?;
                json(&reg.add_link(&b.from, &b.to, kind, b.annotation.as_deref())?)
            }
            "link.remove" => {
                let kind: EdgeKind = required_query(req, "kind")?.parse()?;
                let (from, to) = (required_query(req, "from")?, required_query(req, "to")?);
                reg.remove_link(&from, &to, kind)?;
                json(&json!({"removed": {"from": from, "kind": kind.as_str(), "to": to}}))
            }
            "link.list" => {
                let kind: Option<EdgeKind> = req.query.get("kind").map(|k| k.parse()).transpose()?;
                json(&reg.read(|tx| tx.edges(kind))?)
            }
            "lineage.connected" => {
                let kind: EdgeKind = required_query(req, "kind")?.parse()?;
                let depth: Option<usize> = parse_query(req, "depth")?;
                let set = reg.connected(id(), kind, depth)?;
                json(&json!({"id": id(), "kind": kind.as_str(), "depth": depth, "artifacts": set}))
            }
            "lineage.scope" => {
                if reg.read(|tx| tx.artifact_kind(id()))?.as_deref() != Some("snapshot") {
                    return Err(Error::not_found("snapshot", id()));
                }
                let scope = reg.read(|tx| tx.evaluation_scope(id()))?;
                json(&json!({"snapshot": id(), "scope": scope}))
            }
            "lineage.export" => Ok(Reply::Raw(reg.export_lineage()?.into_bytes())),

            "run.record" => {
                let spec: RunSpec = json_body(&req.body)?;
                let (run, model) = reg.record_run(&spec)?;
                json(&Trained {
                    run: &run,
                    model: &model,
                })
            }
            "run.list" => json(&reg.read(|tx| tx.list_runs())?),
            "run.show" => json(&reg.get_run(id())?),
            "model.train" => {
                let spec: TrainSpec = json_body(&req.body)?;
                let (run, model) = reg.train(&spec)?;
                json(&Trained {
                    run: &run,
                    model: &model,
                })
            }
            "model.list" => {
                let status: Option<ModelStatus> = parse_query_with(req, "status", str::parse)?;
                json(&reg.list_models(req.query.get("name").map(String::as_str), status)?)
            }
            "model.show" => json(&reg.get_model(id())?),
            "model.status" => {
                let b: StatusChange = json_body(&req.body)?;
                let model = reg.transition(id(), b.status.parse()?)?;
                self.kick();
                json(&model)
            }
            "model.reproduce" => json(&reg.reproduce(id())?),
            "model.evaluate" => {
                let b: EvaluateRequest = json_body(&req.body)?;
                match b.snapshot {
                    Some(s) => {
                        let report = reg.evaluate(id(), &s)?;
                        json(&AutoEvaluation {
                            model_id: id().into(),
                            reports: vec![report],
                            skipped: vec![],
                        })
                    }
                    None => json(&reg.auto_evaluate(id())?),
                }
            }
            "model.evaluations" => {
                reg.get_model(id())?;
                json(&reg.evaluations(Some(id()))?)
            }
            "model.gate" => json(&reg.gate(id())?),
            "model.fanout" => {
                let jobs = reg.on_new_base_model(id())?;
                self.kick();
                let jobs: Vec<JobRecord> = jobs.iter().map(|j| reg.get_job(&j.id)).collect::<Result<_>>()?;
                Ok(Reply::Job(canonical_json(&json!({"jobs": jobs}))))
            }
            "verdict.list" => json(&reg.read(|tx| tx.verdicts())?),
            "verdict.show" => json(&reg.read(|tx| tx.get_verdict(id()))?),

            "bundle.build" => {
                let overrides: MonitoringOverrides = json_body(&req.body)?;
                json(&reg.build_bundle(id(), &overrides)?)
            }
            "bundle.show" => json(&reg.get_bundle(id())?),
            "bundle.download" => {
                let b = reg.get_bundle(id())?;
                Ok(Reply::Raw(reg.blobs().get_ref(&b.blob)?))
            }
            "bundle.verify" => json(&verify_bundle(&req.body)?),
            "deployment.create" => {
                let spec: DeploySpec = json_body(&req.body)?;
                json(&reg.create_deployment(&spec)?)
            }
            "deployment.list" => {
                let active: Option<bool> = parse_query(req, "active")?;
                json(&reg.list_deployments(req.query.get("target").map(String::as_str), active.unwrap_or(false))?)
            }
            "deployment.show" => json(&reg.get_deployment(id())?),
            "deployment.command" => json(&reg.deployment_command(id())?),
            "deployment.bundle" => {
                let d = reg.get_deployment(id())?;
                Ok(Reply::Raw(reg.blobs().get_ref(&d.bundle)?))
            }

            "feedback.ingest" => {
                let events = parse_events(&req.body)?;
                let result = reg.ingest_feedback(id(), &events)?;
                if !result.jobs.is_empty() {
                    self.kick();
                }
                json(&result)
            }
            "feedback.export" => {
                let dep = reg.get_deployment(id())?;
                let epoch: u32 = parse_query(req, "epoch")?.unwrap_or(dep.epoch);
                let from: u64 = parse_query(req, "from")?.unwrap_or(1);
                let to: u64 = parse_query(req, "to")?.unwrap_or(u64::MAX);
                let events = reg.read(|tx| tx.feedback_events(id(), epoch, from, to))?;
                Ok(Reply::Raw(to_ndjson(&events).into_bytes()))
            }
            "feedback.snapshot" => {
                let b: FeedbackRange = json_body(&req.body)?;
                json(&reg.feedback_to_snapshot(id(), b.epoch, b.from, b.to)?)
            }
            "drift.show" => json(&reg.drift_state(id())?),
            "drift.reset" => json(&reg.reset_drift(id())?),
            "alarm.list" => {
                let dep = req.query.get("deployment").map(String::as_str);
                json(&reg.read(|tx| tx.alarms(dep))?)
            }
            "alarm.deliver" => {
                let b: AlarmDelivery = json_body(&req.body)?;
                let job = reg.deliver_alarm(&b.deployment_id, b.alarm_at)?;
                self.kick();
                Ok(Reply::Job(canonical_json(&reg.get_job(&job.id)?)))
            }

            "job.list" => {
                let status = parse_query_with(req, "status", JobStatus::parse)?;
                json(&reg.list_jobs(status)?)
            }
            "job.create" => {
                let spec: ManualJobSpec = json_body(&req.body)?;
                let job = reg.create_manual_job(&spec)?;
                self.start_job(job)
            }
            "job.show" => json(&reg.get_job(id())?),
            "job.run" => {
                let job = reg.get_job(id())?;
                if job.status.is_terminal() {
                    return Ok(Reply::Json(canonical_json(&job)));
                }
                self.start_job(job)
            }
            "job.cancel" => json(&reg.cancel_job(id())?),
            "job.replay" => {
                let jobs = reg.replay_triggers()?;
                self.kick();
                let jobs: Vec<JobRecord> = jobs.iter().map(|j| reg.get_job(&j.id)).collect::<Result<_>>()?;
                Ok(Reply::Job(canonical_json(&json!({"jobs": jobs}))))
            }
            "notification.list" => {
                let mut out = String::new();
                for n in reg.read(|tx| tx.notifications())? {
                    out.push_str(&String::from_utf8(canonical_json(&n)).expect("JSON is UTF-8"));
                    out.push('\n');
                }
                Ok(Reply::Raw(out.into_bytes()))
            }
            "audit.run" => json(&reg.audit()?),
            other => Err(Error::Unsupported(format!("operation {other} is not implemented"))),
        }
    }
}

fn parse_query_with<T>(req: &ApiRequest, key: &str, f: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
    req.query
        .get(key)
        .map(|v| f(v).map_err(|_| Error::validation(format!("query parameter {key}={v:?} is not valid"))))
        .transpose()
}

/// NDJSON, or a JSON array of events.
fn parse_events(body: &[u8]) -> Result<Vec<FeedbackEvent>> {
    let first = body.iter().find(|b| !b.is_ascii_whitespace());
    if first == Some(&b'[') {
        let events: Vec<FeedbackEvent> =
            serde_json::from_slice(body).map_err(|e| Error::validation(format!("invalid feedback array: {e}")))?;
        if events.is_empty() {
            return Err(Error::validation("feedback batch is empty"));
        }
        return Ok(events);
    }
    parse_feedback_ndjson(body)
}

#[cfg(test)]
mod tests {
    use super::super::Method;
    use super::*;

    #[test]
    fn literal_segments_win_over_placeholders() {
        let r = match_route(Method::Post, "/jobs/replay").unwrap();
        assert_eq!(r.op.name, "job.replay");
        let r = match_route(Method::Post, "/jobs/job-000001/run").unwrap();
        assert_eq!(r.op.name, "job.run");
        assert_eq!(r.param("id"), "job-000001");
    }

    #[test]
    fn every_op_is_reachable_from_its_own_template() {
        for op in OPS {
            let path = op
                .path
                .split('/')
                .map(|s| if s.starts_with('{') { "x-1" } else { s })
                .collect::<Vec<_>>()
                .join("/");
            assert_eq!(match_route(op.method, &path).unwrap().op.name, op.name);
        }
    }

    #[test]
    fn unknown_routes_and_methods() {
        assert!(matches!(match_route(Method::Get, "/nope"), Err(Error::NotFound { .. })));
        assert!(matches!(match_route(Method::Delete, "/datasets"), Err(Error::Validation(_))));
    }

    #[test]
    fn path_params_are_percent_decoded() {
        let r = match_route(Method::Get, "/datasets/a%20b").unwrap();
        assert_eq!(r.param("id"), "a b");
    }
}
