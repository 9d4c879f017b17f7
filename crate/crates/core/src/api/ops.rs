use super::Method;
use super::Method::{Delete, Get, Post};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyKind {
    None,
    /// A JSON object; `{}` when the body is empty.
    Json,
    Csv,
    Ndjson,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyKind {
    Json,
    Csv,
    Ndjson,
    Binary,
    Text,
}

/// One operation of the public interface.
#[derive(Debug, Clone, Copy)]
pub struct OpSpec {
    pub name: &'static str,
    pub method: Method,
    /// Template with `{param}` placeholders.
    pub path: &'static str,
    /// `noun verb` of the matching CLI command.
    pub cli: &'static str,
    pub summary: &'static str,
    pub query: &'static [&'static str],
    pub body: BodyKind,
    pub reply: ReplyKind,
    pub status: u16,
    /// Answers 202 with the job when jobs run in the background.
    pub background: bool,
    /// Columns shown by the CLI table format; empty means all scalar fields.
    pub columns: &'static [&'static str],
}

const fn op(name: &'static str, method: Method, path: &'static str, cli: &'static str, summary: &'static str) -> OpSpec {
    OpSpec {
        name,
        method,
        path,
        cli,
        summary,
        query: &[],
        body: BodyKind::None,
        reply: ReplyKind::Json,
        status: 200,
        background: false,
        columns: &[],
    }
}

impl OpSpec {
    const fn query(mut self, q: &'static [&'static str]) -> Self {
        self.query = q;
        self
    }

    const fn body(mut self, b: BodyKind) -> Self {
        self.body = b;
        self
    }

    const fn reply(mut self, r: ReplyKind) -> Self {
        self.reply = r;
        self
    }

    const fn created(mut self) -> Self {
        self.status = 201;
        self
    }

    const fn background(mut self) -> Self {
        self.background = true;
        self
    }

    const fn columns(mut self, c: &'static [&'static str]) -> Self {
        self.columns = c;
        self
    }

    /// Names of the `{param}` placeholders in path order.
    pub fn path_params(&self) -> Vec<&'static str> {
        self.path
            .split('/')
            .filter_map(|s| s.strip_prefix('{').and_then(|s| s.strip_suffix('}')))
            .collect()
    }

    pub fn cli_words(&self) -> (&'static str, &'static str) {
        self.cli.split_once(' ').expect("cli is `noun verb`")
    }
}

use BodyKind as B;
use ReplyKind as R;

const DATASET_COLS: &[&str] = &["id", "name", "description", "created_at"];
const SNAPSHOT_COLS: &[&str] = &["id", "dataset_id", "row_count", "parent_snapshot", "created_at"];
const EDGE_COLS: &[&str] = &["from", "kind", "to", "annotation"];
const RUN_COLS: &[&str] = &["id", "algorithm", "input_snapshot", "seed", "produced_model"];
const MODEL_COLS: &[&str] = &["id", "name", "version", "status", "predecessor", "created_by_run"];
const EVAL_COLS: &[&str] = &["model_id", "snapshot_id", "metrics", "evaluated_at"];
const VERDICT_COLS: &[&str] = &["id", "candidate", "predecessor", "passed", "mode", "reason"];
const DEPLOYMENT_COLS: &[&str] = &["id", "model_id", "target", "active", "epoch", "next_seq", "superseded_by"];
const ALARM_COLS: &[&str] = &["deployment_id", "epoch", "alarm_at", "change_point", "statistic"];
const JOB_COLS: &[&str] = &["id", "trigger", "status", "source_model", "model_name", "result_model", "failure"];

pub static OPS: &[OpSpec] = &[
    op("health", Get, "/health", "service health", "Service liveness and version."),
    op("reference", Get, "/reference", "service reference", "This interface as a machine-readable document."),
    // datasets and snapshots
    op("dataset.create", Post, "/datasets", "dataset create", "Create a named dataset.").body(B::Json).created(),
    op("dataset.list", Get, "/datasets", "dataset list", "List datasets.").columns(DATASET_COLS),
    op("dataset.show", Get, "/datasets/{id}", "dataset show", "Show a dataset and its snapshots."),
    op("snapshot.ingest", Post, "/datasets/{id}/snapshots", "snapshot ingest", "Ingest a CSV body as a new immutable snapshot.")
        .query(&["parent"])
        .body(B::Csv)
        .created(),
    op("snapshot.list", Get, "/snapshots", "snapshot list", "List snapshots, optionally of one dataset.")
        .query(&["dataset"])
        .columns(SNAPSHOT_COLS),
    op("snapshot.show", Get, "/snapshots/{id}", "snapshot show", "Show snapshot metadata."),
    op("snapshot.data", Get, "/snapshots/{id}/data", "snapshot export", "Materialize a snapshot as canonical CSV.").reply(R::Csv),
    // blobs
    op("blob.put", Post, "/blobs", "blob put", "Store content; returns its address.").body(B::Binary).created(),
    op("blob.get", Get, "/blobs/{hash}", "blob get", "Fetch content by address.").reply(R::Binary),
    // lineage
    op("link.add", Post, "/links", "link add", "Add a typed lineage edge.").body(B::Json).created(),
    op("link.remove", Delete, "/links", "link remove", "Remove a lineage edge.").query(&["from", "to", "kind"]),
    op("link.list", Get, "/links", "link list", "List lineage edges.").query(&["kind"]).columns(EDGE_COLS),
    op("lineage.connected", Get, "/artifacts/{id}/connected", "lineage connected", "Artifacts reachable over one edge kind.")
        .query(&["kind", "depth"]),
    op("lineage.scope", Get, "/snapshots/{id}/scope", "lineage scope", "Snapshots an evaluation starting here covers."),
    op("lineage.export", Get, "/lineage", "lineage export", "All edges, one `from<TAB>kind<TAB>to` line each.").reply(R::Text),
    // runs and models
    op("run.record", Post, "/runs", "run record", "Record an externally executed training run.").body(B::Json).created(),
    op("run.list", Get, "/runs", "run list", "List runs.").columns(RUN_COLS),
    op("run.show", Get, "/runs/{id}", "run show", "Show a run."),
    op("model.train", Post, "/train", "model train", "Train (or tune) a model with the built-in runtime.").body(B::Json).created(),
    op("model.list", Get, "/models", "model list", "List models, optionally by name and status.")
        .query(&["name", "status"])
        .columns(MODEL_COLS),
    op("model.show", Get, "/models/{id}", "model show", "Show a model."),
    op("model.status", Post, "/models/{id}/status", "model status", "Move a model along its status automaton.").body(B::Json),
    op("model.reproduce", Post, "/models/{id}/reproduce", "model reproduce", "Re-execute the producing run and compare artifacts."),
    op("model.evaluate", Post, "/models/{id}/evaluate", "model evaluate", "Evaluate on one snapshot, or on the automatic scope.")
        .body(B::Json),
    op("model.evaluations", Get, "/models/{id}/evaluations", "model evaluations", "Stored evaluation reports.").columns(EVAL_COLS),
    op("model.gate", Post, "/models/{id}/gate", "model gate", "Evaluate and record a promotion verdict."),
    op("model.fanout", Post, "/models/{id}/fanout", "model fanout", "Create tuning jobs for every base_of-connected dataset.")
        .background(),
    op("verdict.list", Get, "/verdicts", "verdict list", "List gate verdicts.").columns(VERDICT_COLS),
    op("verdict.show", Get, "/verdicts/{id}", "verdict show", "Show a gate verdict."),
    // bundles and deployments
    op("bundle.build", Post, "/models/{id}/bundle", "bundle build", "Build the deployment bundle of a validated model.")
        .body(B::Json)
        .created(),
    op("bundle.show", Get, "/bundles/{id}", "bundle show", "Show a bundle and its manifest."),
    op("bundle.download", Get, "/bundles/{id}/archive", "bundle download", "Fetch the bundle archive.").reply(R::Binary),
    op("bundle.verify", Post, "/bundles/verify", "bundle verify", "Verify an archive and return its manifest.").body(B::Binary),
    op("deployment.create", Post, "/deployments", "deployment create", "Deploy a model to a target.").body(B::Json).created(),
    op("deployment.list", Get, "/deployments", "deployment list", "List deployments.")
        .query(&["target", "active"])
        .columns(DEPLOYMENT_COLS),
    op("deployment.show", Get, "/deployments/{id}", "deployment show", "Show a deployment."),
    op("deployment.command", Get, "/deployments/{id}/command", "deployment command", "Command for an agent polling this deployment."),
    op("deployment.bundle", Get, "/deployments/{id}/bundle", "deployment bundle", "Fetch the archive this deployment serves.")
        .reply(R::Binary),
    // feedback and drift
    op("feedback.ingest", Post, "/deployments/{id}/feedback", "feedback send", "Append a batch of feedback events.")
        .body(B::Ndjson),
    op("feedback.export", Get, "/deployments/{id}/feedback", "feedback export", "Logged feedback as NDJSON.")
        .query(&["epoch", "from", "to"])
        .reply(R::Ndjson),
    op("feedback.snapshot", Post, "/deployments/{id}/feedback/snapshot", "feedback snapshot", "Materialize logged feedback as a snapshot.")
        .body(B::Json)
        .created(),
    op("drift.show", Get, "/deployments/{id}/drift", "drift show", "Current drift-monitor state."),
    op("drift.reset", Post, "/deployments/{id}/drift/reset", "drift reset", "Start a new monitoring epoch."),
    op("alarm.list", Get, "/alarms", "alarm list", "Latched drift alarms.").query(&["deployment"]).columns(ALARM_COLS),
    op("alarm.deliver", Post, "/alarms/deliver", "alarm deliver", "Deliver a recorded alarm to the orchestrator.")
        .body(B::Json)
        .background(),
    // jobs
    op("job.list", Get, "/jobs", "jobs list", "List tuning jobs.").query(&["status"]).columns(JOB_COLS),
    op("job.create", Post, "/jobs", "jobs create", "Queue a manual tuning job.").body(B::Json).background().created(),
    op("job.show", Get, "/jobs/{id}", "jobs show", "Show a job."),
    op("job.run", Post, "/jobs/{id}/run", "jobs run", "Execute a job now.").background(),
    op("job.cancel", Post, "/jobs/{id}/cancel", "jobs cancel", "Cancel a queued job."),
    op("job.replay", Post, "/jobs/replay", "jobs replay", "Redeliver every recorded trigger.").background(),
    op("notification.list", Get, "/notifications", "notification export", "Operator notifications as NDJSON.").reply(R::Ndjson),
    op("audit.run", Get, "/audit", "registry audit", "Check registry consistency and safety invariants."),
];

pub fn find_op(name: &str) -> Option<&'static OpSpec> {
    OPS.iter().find(|o| o.name == name)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn names_routes_and_commands_are_unique() {
        let names: BTreeSet<_> = OPS.iter().map(|o| o.name).collect();
        let routes: BTreeSet<_> = OPS.iter().map(|o| (o.method, o.path)).collect();
        let clis: BTreeSet<_> = OPS.iter().map(|o| o.cli).collect();
        assert_eq!(names.len(), OPS.len());
        assert_eq!(routes.len(), OPS.len());
        assert_eq!(clis.len(), OPS.len());
    }

    #[test]
    fn declared_query_keys_do_not_shadow_path_params() {
        for op in OPS {
            for p in op.path_params() {
                assert!(!op.query.contains(&p), "{}", op.name);
            }
        }
    }
}
