use std::collections::BTreeSet;

use rusqlite::{params, OptionalExtension, Row};
use serde::{Deserialize, Serialize};

use super::{DeploySpec, Fault, JobRecord, JobStatus, JobTrigger, ModelStatus, Registry, TrainSpec, Tx};
use crate::bundle::MonitoringOverrides;
use crate::error::{Error, Result};
use crate::lineage::EdgeKind;

const JOB_COLS: &str = "id, trigger_kind, dedup_key, source_model, target_dataset, target_snapshot, deployment_id, epoch, \
     alarm_at, change_point, model_name, lambda, tau, status, ready, result_model, verdict_id, new_deployment, failure, \
     created_at, updated_at";

fn job_row(r: &Row) -> rusqlite::Result<JobRecord> {
    let conv = |i: usize, e: Error| rusqlite::Error::FromSqlConversionFailure(i, rusqlite::types::Type::Text, Box::new(e));
    Ok(JobRecord {
        id: r.get(0)?,
        trigger: JobTrigger::parse(&r.get::<_, String>(1)?).map_err(|e| conv(1, e))?,
        dedup_key: r.get(2)?,
        source_model: r.get(3)?,
        target_dataset: r.get(4)?,
        target_snapshot: r.get(5)?,
        deployment_id: r.get(6)?,
        epoch: r.get(7)?,
        alarm_at: r.get::<_, Option<i64>>(8)?.map(|v| v as u64),
        change_point: r.get::<_, Option<i64>>(9)?.map(|v| v as u64),
        model_name: r.get(10)?,
        lambda: r.get(11)?,
        tau: r.get(12)?,
        status: JobStatus::parse(&r.get::<_, String>(13)?).map_err(|e| conv(13, e))?,
        ready: r.get(14)?,
        result_model: r.get(15)?,
        verdict_id: r.get(16)?,
        new_deployment: r.get(17)?,
        failure: r.get(18)?,
        created_at: r.get(19)?,
        updated_at: r.get(20)?,
    })
}

/// An operator-requested tuning of `source_model` on `snapshot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManualJobSpec {
    pub source_model: String,
    pub snapshot: String,
    /// Name of the resulting model; defaults to the source model's name.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
}

struct NewJob<'a> {
    trigger: JobTrigger,
    dedup_key: String,
    source_model: &'a str,
    target_dataset: Option<&'a str>,
    target_snapshot: Option<&'a str>,
    deployment_id: Option<&'a str>,
    epoch: Option<u32>,
    alarm_at: Option<u64>,
    change_point: Option<u64>,
    model_name: String,
    lambda: f64,
    tau: f64,
    status: JobStatus,
    ready: bool,
    failure: Option<String>,
}

/// What a finished pipeline recorded.
struct Outcome {
    result_model: Option<String>,
    verdict_id: Option<String>,
    new_deployment: Option<String>,
    failure: Option<String>,
}

impl Tx<'_> {
    pub fn get_job(&self, id: &str) -> Result<JobRecord> {
        self.conn
            .query_row(&format!("SELECT {JOB_COLS} FROM jobs WHERE id = ?1"), params![id], job_row)
            .optional()?
            .ok_or_else(|| Error::not_found("job", id))
    }

    fn job_by_key(&self, key: &str) -> Result<Option<JobRecord>> {
        Ok(self
            .conn
            .query_row(&format!("SELECT {JOB_COLS} FROM jobs WHERE dedup_key = ?1"), params![key], job_row)
            .optional()?)
    }

    pub fn list_jobs(&self, status: Option<JobStatus>) -> Result<Vec<JobRecord>> {
        let mut stmt = self.conn.prepare(&format!("SELECT {JOB_COLS} FROM jobs ORDER BY id"))?;
        let rows = stmt.query_map([], job_row)?;
        let mut out = Vec::new();
        for j in rows {
            let j = j?;
            if status.is_none_or(|s| s == j.status) {
                out.push(j);
            }
        }
        Ok(out)
    }

    /// Queued jobs that may run now, oldest first.
    pub fn ready_jobs(&self) -> Result<Vec<JobRecord>> {
        Ok(self
            .list_jobs(Some(JobStatus::Queued))?
            .into_iter()
            .filter(|j| j.ready)
            .collect())
    }

    /// Inserts a job unless one with the same dedup key exists, in which
    /// case the existing job is returned untouched.
    fn insert_job(&self, job: NewJob) -> Result<JobRecord> {
        if let Some(existing) = self.job_by_key(&job.dedup_key)? {
            return Ok(existing);
        }
        let id = self.next_id("job")?;
        let dedup_key = if job.dedup_key.is_empty() { format!("manual:{id}") } else { job.dedup_key };
        let now = self.now();
        self.conn.execute(
            &format!(
                "INSERT INTO jobs ({JOB_COLS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15,
                 NULL, NULL, NULL, ?16, ?17, ?17)"
            ),
            params![
                id,
                job.trigger.as_str(),
                dedup_key,
                job.source_model,
                job.target_dataset,
                job.target_snapshot,
                job.deployment_id,
                job.epoch,
                job.alarm_at.map(|v| v as i64),
                job.change_point.map(|v| v as i64),
                job.model_name,
                job.lambda,
                job.tau,
                job.status.as_str(),
                job.ready,
                job.failure,
                now
            ],
        )?;
        if let Some(reason) = &job.failure {
            self.notify(Some(&id), "job_failed", &format!("job {id}: {reason}"))?;
        }
        self.get_job(&id)
    }

    /// Records the tuning job answering a latched alarm. Delivering the same
    /// alarm again returns the job created the first time.
    pub(crate) fn on_drift_alarm(&self, deployment_id: &str, epoch: u32, alarm_at: u64, change_point: u64) -> Result<JobRecord> {
        let dep = self.get_deployment(deployment_id)?;
        let source = self.get_model(&dep.model_id)?;
        let tuning = &self.config.tuning;
        let ready = tuning.auto_tune && self.feedback_count_from(deployment_id, epoch, alarm_at)? >= tuning.window;
        self.insert_job(NewJob {
            trigger: JobTrigger::DriftAlarm,
            dedup_key: format!("drift:{deployment_id}:{epoch}:{alarm_at}"),
            source_model: &source.id,
            target_dataset: None,
            target_snapshot: None,
            deployment_id: Some(deployment_id),
            epoch: Some(epoch),
            alarm_at: Some(alarm_at),
            change_point: Some(change_point),
            model_name: source.name.clone(),
            lambda: tuning.lambda,
            tau: tuning.tau,
            status: if tuning.auto_tune { JobStatus::Queued } else { JobStatus::Failed },
            ready,
            failure: (!tuning.auto_tune).then(|| "auto-tuning is disabled".to_string()),
        })
    }

    /// Redelivers a recorded alarm to the orchestrator.
    pub fn deliver_alarm(&self, deployment_id: &str, alarm_at: u64) -> Result<JobRecord> {
        let alarm = self
            .alarms(Some(deployment_id))?
            .into_iter()
            .rev()
            .find(|a| a.alarm_at == alarm_at)
            .ok_or_else(|| Error::not_found("alarm", format!("{deployment_id}@{alarm_at}")))?;
        self.on_drift_alarm(deployment_id, alarm.epoch, alarm.alarm_at, alarm.change_point)
    }

    /// Marks queued drift jobs of `deployment_id` ready once the tuning
    /// window starting at their alarm has been logged. Returns the ids
    /// that became ready.
    pub(crate) fn refresh_drift_readiness(&self, deployment_id: &str) -> Result<Vec<String>> {
        let window = self.config.tuning.window;
        let mut out = Vec::new();
        for job in self.list_jobs(Some(JobStatus::Queued))? {
            if job.ready || job.trigger != JobTrigger::DriftAlarm || job.deployment_id.as_deref() != Some(deployment_id) {
                continue;
            }
            let (Some(epoch), Some(start)) = (job.epoch, job.alarm_at) else {
                continue;
            };
            if self.feedback_count_from(deployment_id, epoch, start)? >= window {
                self.conn.execute(
                    "UPDATE jobs SET ready = 1, updated_at = ?2 WHERE id = ?1",
                    params![job.id, self.now()],
                )?;
                out.push(job.id);
            }
        }
        Ok(out)
    }

    /// Datasets reachable from `snapshot` over `base_of` edges, whether the
    /// edge points at the dataset itself or at one of its snapshots.
    pub fn base_of_targets(&self, snapshot: &str) -> Result<BTreeSet<String>> {
        let own = self.get_snapshot(snapshot)?.dataset_id;
        let mut out = BTreeSet::new();
        for id in self.connected(snapshot, EdgeKind::BaseOf, None)? {
            let dataset = match self.artifact_kind(&id)?.as_deref() {
                Some("dataset") => id,
                Some("snapshot") => self.get_snapshot(&id)?.dataset_id,
                _ => continue,
            };
            if dataset != own {
                out.insert(dataset);
            }
        }
        Ok(out)
    }

    /// Creates one tuning job per dataset connected by `base_of` to the
    /// model's training snapshot, each targeting that dataset's latest snapshot.
    pub fn on_new_base_model(&self, model_id: &str) -> Result<Vec<JobRecord>> {
        let model = self.get_model(model_id)?;
        let snapshot = self.get_run(&model.created_by_run)?.input_snapshot;
        let tuning = &self.config.tuning;
        let mut jobs = Vec::new();
        for dataset_id in self.base_of_targets(&snapshot)? {
            let dataset = self.get_dataset(&dataset_id)?;
            let latest = self.latest_snapshot(&dataset_id)?;
            let failure = match (&latest, tuning.auto_tune) {
                (_, false) => Some("auto-tuning is disabled".to_string()),
                (None, true) => Some(format!("dataset {dataset_id} has no snapshots")),
                _ => None,
            };
            jobs.push(self.insert_job(NewJob {
                trigger: JobTrigger::NewBaseModel,
                dedup_key: format!("base:{model_id}:{dataset_id}"),
                source_model: model_id,
                target_dataset: Some(&dataset_id),
                target_snapshot: latest.as_ref().map(|s| s.id.as_str()),
                deployment_id: None,
                epoch: None,
                alarm_at: None,
                change_point: None,
                model_name: format!("{}@{}", model.name, dataset.name),
                lambda: tuning.lambda,
                tau: tuning.tau,
                status: if failure.is_some() { JobStatus::Failed } else { JobStatus::Queued },
                ready: failure.is_none(),
                failure,
            })?);
        }
        Ok(jobs)
    }

    pub fn create_manual_job(&self, spec: &ManualJobSpec) -> Result<JobRecord> {
        let source = self.get_model(&spec.source_model)?;
        let snapshot = self.get_snapshot(&spec.snapshot)?;
        let name = spec.name.clone().unwrap_or_else(|| source.name.clone());
        if name.trim().is_empty() {
            return Err(Error::validation("model name must not be empty"));
        }
        let lambda = spec.lambda.unwrap_or(self.config.tuning.lambda);
        let tau = spec.tau.unwrap_or(self.config.tuning.tau);
        if !(lambda.is_finite() && lambda >= 0.0 && tau.is_finite() && tau >= 0.0) {
            return Err(Error::validation("lambda and tau must be finite and non-negative"));
        }
        self.insert_job(NewJob {
            trigger: JobTrigger::Manual,
            dedup_key: String::new(),
            source_model: &source.id,
            target_dataset: Some(&snapshot.dataset_id),
            target_snapshot: Some(&snapshot.id),
            deployment_id: None,
            epoch: None,
            alarm_at: None,
            change_point: None,
            model_name: name,
            lambda,
            tau,
            status: JobStatus::Queued,
            ready: true,
            failure: None,
        })
    }

    pub fn cancel_job(&self, id: &str) -> Result<JobRecord> {
        let job = self.get_job(id)?;
        if job.status != JobStatus::Queued {
            return Err(Error::State(format!("job {id} is {}; only queued jobs can be cancelled", job.status.as_str())));
        }
        self.finish_job(
            id,
            &Outcome {
                result_model: None,
                verdict_id: None,
                new_deployment: None,
                failure: Some("cancelled by operator".into()),
            },
        )
    }

    fn finish_job(&self, id: &str, outcome: &Outcome) -> Result<JobRecord> {
        let status = if outcome.failure.is_some() { JobStatus::Failed } else { JobStatus::Succeeded };
        self.conn.execute(
            "UPDATE jobs SET status = ?2, result_model = ?3, verdict_id = ?4, new_deployment = ?5, failure = ?6,
                             updated_at = ?7
             WHERE id = ?1",
            params![
                id,
                status.as_str(),
                outcome.result_model,
                outcome.verdict_id,
                outcome.new_deployment,
                outcome.failure,
                self.now()
            ],
        )?;
        if let Some(reason) = &outcome.failure {
            self.notify(Some(id), "job_failed", &format!("job {id}: {reason}"))?;
        }
        self.get_job(id)
    }

    /// Tune, evaluate, gate and, on a pass, validate and redeploy.
    fn run_pipeline(&self, job: &JobRecord) -> Result<Outcome> {
        let (snapshot, old_deployment) = match job.trigger {
            JobTrigger::DriftAlarm => {
                let dep_id = job
                    .deployment_id
                    .as_deref()
                    .ok_or_else(|| Error::corruption(format!("drift job {} has no deployment", job.id)))?;
                let dep = self.get_deployment(dep_id)?;
                if !dep.active {
                    return Err(Error::State(format!("deployment {dep_id} is no longer active")));
                }
                let from = job.alarm_at.unwrap_or(1);
                let to = from + self.config.tuning.window.saturating_sub(1);
                let snap = self.feedback_to_snapshot(dep_id, job.epoch, from, to)?;
                let window = self.config.tuning.window;
                if (snap.row_count as u64) < window {
                    return Ok(Outcome {
                        result_model: None,
                        verdict_id: None,
                        new_deployment: None,
                        failure: Some(format!(
                            "gate failed: insufficient feedback rows ({} of {window})",
                            snap.row_count
                        )),
                    });
                }
                (snap.id, Some(dep))
            }
            JobTrigger::NewBaseModel | JobTrigger::Manual => {
                let snap = job
                    .target_snapshot
                    .clone()
                    .ok_or_else(|| Error::validation(format!("job {} has no target snapshot", job.id)))?;
                (snap, None)
            }
        };
        let (_, model) = self.train(&TrainSpec {
            name: job.model_name.clone(),
            snapshot,
            features: Vec::new(),
            target: None,
            lambda: job.lambda,
            seed: 0,
            train_fraction: 1.0,
            base_model: Some(job.source_model.clone()),
            tau: Some(job.tau),
        })?;
        let verdict = self.gate(&model.id)?;
        let mut outcome = Outcome {
            result_model: Some(model.id.clone()),
            verdict_id: Some(verdict.id.clone()),
            new_deployment: None,
            failure: None,
        };
        if !verdict.passed {
            outcome.failure = Some(format!("gate failed: {}", verdict.reason));
            return Ok(outcome);
        }
        self.transition(&model.id, ModelStatus::Validated)?;
        let targets: Vec<(String, Option<String>)> = match &old_deployment {
            Some(dep) => vec![(dep.target.clone(), Some(dep.id.clone()))],
            None => {
                let mut t = Vec::new();
                for dep in self.list_deployments(None, true)? {
                    if dep.model_id != model.id && self.get_model(&dep.model_id)?.name == model.name {
                        t.push((dep.target, None));
                    }
                }
                t
            }
        };
        if targets.is_empty() {
            return Ok(outcome);
        }
        let bundle = self.build_bundle(&model.id, &MonitoringOverrides::default())?;
        for (target, old) in targets {
            let dep = self.create_deployment(&DeploySpec {
                model_id: model.id.clone(),
                target,
                bundle_id: Some(bundle.id.clone()),
                delta: None,
                lambda: None,
            })?;
            outcome.new_deployment.get_or_insert(dep.id);
            if let Some(old) = old {
                self.reset_drift(&old)?;
            }
        }
        Ok(outcome)
    }

    /// Runs the pipeline for an already-claimed job inside this transaction.
    /// A domain error rolls the pipeline's work back and fails the job.
    fn execute_job(&self, id: &str) -> Result<JobRecord> {
        let job = self.get_job(id)?;
        if job.status.is_terminal() {
            return Ok(job);
        }
        self.conn.execute_batch("SAVEPOINT pipeline")?;
        let outcome = match self.run_pipeline(&job) {
            Ok(o) => {
                self.conn.execute_batch("RELEASE pipeline")?;
                o
            }
            Err(e) => {
                self.conn.execute_batch("ROLLBACK TO pipeline; RELEASE pipeline")?;
                Outcome {
                    result_model: None,
                    verdict_id: None,
                    new_deployment: None,
                    failure: Some(format!("{}: {e}", e.code().as_str())),
                }
            }
        };
        let done = self.finish_job(id, &outcome)?;
        if self.fault() == Some(Fault::BeforeJobCommit) {
            return Err(Error::Store("injected fault before job commit".into()));
        }
        Ok(done)
    }

    /// Redelivers every recorded trigger: all alarms and every model that
    /// passed its gate. Existing jobs are returned instead of duplicated.
    pub fn replay_triggers(&self) -> Result<Vec<JobRecord>> {
        let mut out = Vec::new();
        for alarm in self.alarms(None)? {
            out.push(self.on_drift_alarm(&alarm.deployment_id, alarm.epoch, alarm.alarm_at, alarm.change_point)?);
        }
        for model in self.list_models(None, None)? {
            if model.status != ModelStatus::Candidate && self.latest_verdict_passed(&model.id)? == Some(true) {
                out.extend(self.on_new_base_model(&model.id)?);
            }
        }
        Ok(out)
    }
}

impl Registry {
    pub fn get_job(&self, id: &str) -> Result<JobRecord> {
        self.read(|tx| tx.get_job(id))
    }

    pub fn list_jobs(&self, status: Option<JobStatus>) -> Result<Vec<JobRecord>> {
        self.read(|tx| tx.list_jobs(status))
    }

    pub fn ready_jobs(&self) -> Result<Vec<JobRecord>> {
        self.read(|tx| tx.ready_jobs())
    }

    pub fn on_new_base_model(&self, model_id: &str) -> Result<Vec<JobRecord>> {
        self.write(|tx| tx.on_new_base_model(model_id))
    }

    pub fn deliver_alarm(&self, deployment_id: &str, alarm_at: u64) -> Result<JobRecord> {
        self.write(|tx| tx.deliver_alarm(deployment_id, alarm_at))
    }

    pub fn create_manual_job(&self, spec: &ManualJobSpec) -> Result<JobRecord> {
        self.write(|tx| tx.create_manual_job(spec))
    }

    pub fn cancel_job(&self, id: &str) -> Result<JobRecord> {
        self.write(|tx| tx.cancel_job(id))
    }

    pub fn replay_triggers(&self) -> Result<Vec<JobRecord>> {
        self.write(|tx| tx.replay_triggers())
    }

    /// Executes a job with at-most-once effect. A succeeded or failed job is
    /// returned unchanged; otherwise it is marked running in its own commit
    /// and the whole pipeline then commits atomically with its final status.
    /// If that commit does not happen the job stays running and can be rerun.
    pub fn run_job(&self, id: &str) -> Result<JobRecord> {
        let claimed = self.write(|tx| {
            let job = tx.get_job(id)?;
            if job.status.is_terminal() {
                return Ok(job);
            }
            tx.conn.execute(
                "UPDATE jobs SET status = 'running', updated_at = ?2 WHERE id = ?1",
                params![id, tx.now()],
            )?;
            tx.get_job(id)
        })?;
        if claimed.status.is_terminal() {
            return Ok(claimed);
        }
        self.write_job(|tx| tx.execute_job(id))
    }
}
