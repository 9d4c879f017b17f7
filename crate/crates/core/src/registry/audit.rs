use std::collections::{BTreeMap, BTreeSet};

use rusqlite::params;
use serde::{Deserialize, Serialize};

use super::{JobStatus, ModelStatus, Registry, Tx};
use crate::error::Result;

/// Outcome of a full consistency check of the registry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub ok: bool,
    /// Number of records examined per table.
    pub checked: BTreeMap<String, u64>,
    pub violations: Vec<String>,
}

impl AuditReport {
    fn count(&mut self, what: &str, n: usize) {
        *self.checked.entry(what.into()).or_default() += n as u64;
    }
}

impl Tx<'_> {
    pub fn audit(&self) -> Result<AuditReport> {
        let mut report = AuditReport::default();
        let v = &mut Vec::new();

        let datasets = self.list_datasets()?;
        let dataset_ids: BTreeSet<_> = datasets.iter().map(|d| d.id.clone()).collect();
        report.count("datasets", datasets.len());

        let snapshots = self.all_snapshots()?;
        report.count("snapshots", snapshots.len());
        for s in &snapshots {
            if !dataset_ids.contains(&s.dataset_id) {
                v.push(format!("snapshot {} belongs to unknown dataset {}", s.id, s.dataset_id));
            }
            if !self.blobs.contains(&s.blob.hash) {
                v.push(format!("snapshot {} blob {} is missing", s.id, s.blob.hash));
            }
        }

        let edges = self.edges(None)?;
        report.count("edges", edges.len());
        for e in &edges {
            for end in [&e.from, &e.to] {
                if !self.artifact_exists(end)? {
                    v.push(format!("edge {} {} {} references unknown artifact {end}", e.from, e.kind, e.to));
                }
            }
        }

        let models = self.list_models(None, None)?;
        report.count("models", models.len());
        let mut by_name: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        let mut deployed_per_name: BTreeMap<&str, usize> = BTreeMap::new();
        for m in &models {
            by_name.entry(&m.name).or_default().push(m.version);
            if m.status == ModelStatus::Deployed {
                *deployed_per_name.entry(&m.name).or_default() += 1;
            }
            if !self.blobs.contains(&m.artifact.hash) {
                v.push(format!("model {} artifact {} is missing", m.id, m.artifact.hash));
            }
            match self.get_run(&m.created_by_run) {
                Ok(run) => {
                    if run.produced_model != m.id {
                        v.push(format!("run {} does not name model {} as its product", run.id, m.id));
                    }
                    if !self.artifact_exists(&run.input_snapshot)? {
                        v.push(format!("run {} trained on unknown snapshot {}", run.id, run.input_snapshot));
                    }
                }
                Err(_) => v.push(format!("model {} was created by unknown run {}", m.id, m.created_by_run)),
            }
            if matches!(m.status, ModelStatus::Validated | ModelStatus::Deployed)
                && self.latest_verdict_passed(&m.id)? != Some(true)
            {
                v.push(format!("model {} is {} without a passing gate verdict", m.id, m.status));
            }
        }
        for (name, versions) in &by_name {
            let expected: Vec<u32> = (1..=versions.len() as u32).collect();
            if *versions != expected {
                v.push(format!("model {name} has non-contiguous versions {versions:?}"));
            }
        }
        for (name, n) in deployed_per_name {
            if n > 1 {
                v.push(format!("{n} versions of model {name} are deployed at once"));
            }
        }

        let verdicts = self.verdicts()?;
        report.count("verdicts", verdicts.len());

        let deployments = self.list_deployments(None, false)?;
        report.count("deployments", deployments.len());
        let mut active_per_target: BTreeMap<&str, usize> = BTreeMap::new();
        for d in &deployments {
            if d.active {
                *active_per_target.entry(&d.target).or_default() += 1;
            }
            if !self.blobs.contains(&d.bundle.hash) {
                v.push(format!("deployment {} bundle blob is missing", d.id));
            }
            match self.get_bundle(&d.bundle_id) {
                Ok(b) if b.model_id != d.model_id => {
                    v.push(format!("deployment {} ships bundle {} of another model", d.id, b.id))
                }
                Ok(_) => {}
                Err(_) => v.push(format!("deployment {} references unknown bundle {}", d.id, d.bundle_id)),
            }
            let gated = verdicts
                .iter()
                .any(|g| g.candidate == d.model_id && g.passed && g.created_at <= d.deployed_at);
            if !gated {
                v.push(format!("deployment {} of model {} has no earlier passing gate verdict", d.id, d.model_id));
            }
            self.audit_feedback(d.id.as_str(), d.epoch, d.next_seq, v)?;
        }
        for (target, n) in active_per_target {
            if n > 1 {
                v.push(format!("target {target} has {n} active deployments"));
            }
        }

        let jobs = self.list_jobs(None)?;
        report.count("jobs", jobs.len());
        for j in &jobs {
            if j.status.is_terminal() && j.result_model.is_none() && j.failure.is_none() {
                v.push(format!("job {} is terminal without a result or failure reason", j.id));
            }
            if j.status == JobStatus::Succeeded && j.failure.is_some() {
                v.push(format!("job {} succeeded but records a failure", j.id));
            }
            if let Some(dep) = &j.new_deployment {
                let ok = match (&j.verdict_id, &j.result_model) {
                    (Some(vid), Some(model)) => self
                        .get_verdict(vid)
                        .map(|g| g.passed && &g.candidate == model)
                        .unwrap_or(false),
                    _ => false,
                };
                if !ok {
                    v.push(format!("job {} deployed {dep} without a passing verdict of its own", j.id));
                }
            }
        }

        report.ok = v.is_empty();
        report.violations = std::mem::take(v);
        Ok(report)
    }

    fn audit_feedback(&self, dep: &str, epoch: u32, next_seq: u64, v: &mut Vec<String>) -> Result<()> {
        let mut stmt = self.conn.prepare(
            "SELECT epoch, COUNT(*), MIN(seq), MAX(seq) FROM feedback WHERE deployment_id = ?1 GROUP BY epoch",
        )?;
        let rows = stmt.query_map(params![dep], |r| {
            Ok((r.get::<_, u32>(0)?, r.get::<_, i64>(1)?, r.get::<_, i64>(2)?, r.get::<_, i64>(3)?))
        })?;
        let mut current_seen = false;
        for row in rows {
            let (e, count, min, max) = row?;
            if min != 1 || max != count {
                v.push(format!("feedback of {dep} epoch {e} is not contiguous from 1"));
            }
            if e == epoch {
                current_seen = true;
                if next_seq != count as u64 + 1 {
                    v.push(format!("deployment {dep} expects seq {next_seq} but has logged {count} events"));
                }
            }
            if e > epoch {
                v.push(format!("feedback of {dep} is logged under future epoch {e}"));
            }
        }
        if !current_seen && next_seq != 1 {
            v.push(format!("deployment {dep} expects seq {next_seq} but has logged none"));
        }
        Ok(())
    }
}

impl Registry {
    pub fn audit(&self) -> Result<AuditReport> {
        self.read(|tx| tx.audit())
    }
}
