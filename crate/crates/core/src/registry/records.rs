use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bundle::{BundleManifest, InputSchema};
use crate::drift::DriftParams;
use crate::error::{Error, Result};
use crate::eval::{Comparison, Metrics};
use crate::store::BlobRef;
use crate::table::SchemaField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub name: String,
    pub description: String,
    pub created_at: String,
    pub snapshots: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub id: String,
    pub dataset_id: String,
    pub blob: BlobRef,
    pub schema: Vec<SchemaField>,
    pub row_count: u64,
    pub created_at: String,
    pub parent_snapshot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameworkMeta {
    pub name: String,
    pub version: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl FrameworkMeta {
    pub fn builtin() -> Self {
        Self {
            name: "mmgr-builtin".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub algorithm: String,
    /// Canonical JSON object (sorted keys, no whitespace).
    pub hyperparameters: String,
    pub framework_meta: FrameworkMeta,
    pub input_snapshot: String,
    pub train_fraction: f64,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub produced_model: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelStatus {
    Candidate,
    Validated,
    Deployed,
    Retired,
}

impl ModelStatus {
    pub const ALL: [ModelStatus; 4] = [
        ModelStatus::Candidate,
        ModelStatus::Validated,
        ModelStatus::Deployed,
        ModelStatus::Retired,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelStatus::Candidate => "candidate",
            ModelStatus::Validated => "validated",
            ModelStatus::Deployed => "deployed",
            ModelStatus::Retired => "retired",
        }
    }

    /// The declared automaton: candidate → validated → deployed → retired,
    /// plus retirement from any non-retired state.
    pub fn can_transition(self, to: ModelStatus) -> bool {
        use ModelStatus::*;
        matches!(
            (self, to),
            (Candidate, Validated) | (Validated, Deployed) | (Candidate | Validated | Deployed, Retired)
        )
    }
}

impl fmt::Display for ModelStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown model status {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub name: String,
    pub version: u32,
    pub artifact: BlobRef,
    pub input_schema: InputSchema,
    pub created_by_run: String,
    pub status: ModelStatus,
    pub predecessor: Option<String>,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub model_id: String,
    pub snapshot_id: String,
    pub metrics: Metrics,
    pub evaluated_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub snapshot_id: String,
    pub code: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoEvaluation {
    pub model_id: String,
    pub reports: Vec<EvaluationRecord>,
    pub skipped: Vec<SkipRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub id: String,
    pub candidate: String,
    pub predecessor: Option<String>,
    pub passed: bool,
    pub mode: String,
    pub reason: String,
    pub comparisons: Vec<Comparison>,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleRecord {
    pub id: String,
    pub model_id: String,
    pub blob: BlobRef,
    pub manifest: BundleManifest,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentRecord {
    pub id: String,
    pub model_id: String,
    pub bundle_id: String,
    pub bundle: BlobRef,
    pub target: String,
    pub deployed_at: String,
    pub active: bool,
    pub superseded_by: Option<String>,
    pub drift_params: DriftParams,
    pub epoch: u32,
    pub next_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftStateRecord {
    pub deployment_id: String,
    pub epoch: u32,
    pub n: u64,
    pub mean_abs_err: f64,
    pub ph_m: f64,
    pub ph_min: f64,
    pub ph_min_at: u64,
    pub alarm: bool,
    pub alarm_at: Option<u64>,
    pub change_point: Option<u64>,
    pub params: DriftParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub deployment_id: String,
    pub epoch: u32,
    pub alarm_at: u64,
    pub change_point: u64,
    pub statistic: f64,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestResult {
    pub accepted: u64,
    pub state: DriftStateRecord,
    pub alarm: Option<AlarmRecord>,
    /// Jobs created or made runnable by this batch.
    pub jobs: Vec<String>,
}

/// Command returned to an agent polling its deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum DeploymentCommand {
    None,
    Swap {
        deployment_id: String,
        model_id: String,
        bundle: BlobRef,
    },
    Halt {
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobTrigger {
    DriftAlarm,
    NewBaseModel,
    Manual,
}

impl JobTrigger {
    pub fn as_str(self) -> &'static str {
        match self {
            JobTrigger::DriftAlarm => "drift_alarm",
            JobTrigger::NewBaseModel => "new_base_model",
            JobTrigger::Manual => "manual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "drift_alarm" => Ok(JobTrigger::DriftAlarm),
            "new_base_model" => Ok(JobTrigger::NewBaseModel),
            "manual" => Ok(JobTrigger::Manual),
            _ => Err(Error::corruption(format!("unknown job trigger {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Queued => "queued",
            JobStatus::Running => "running",
            JobStatus::Succeeded => "succeeded",
            JobStatus::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "queued" => Ok(JobStatus::Queued),
            "running" => Ok(JobStatus::Running),
            "succeeded" => Ok(JobStatus::Succeeded),
            "failed" => Ok(JobStatus::Failed),
            _ => Err(Error::corruption(format!("unknown job status {s:?}"))),
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Succeeded | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub trigger: JobTrigger,
    pub dedup_key: String,
    pub source_model: String,
    pub target_dataset: Option<String>,
    pub target_snapshot: Option<String>,
    pub deployment_id: Option<String>,
    pub epoch: Option<u32>,
    pub alarm_at: Option<u64>,
    pub change_point: Option<u64>,
    pub model_name: String,
    pub lambda: f64,
    pub tau: f64,
    pub status: JobStatus,
    /// Whether the job may be picked up automatically.
    pub ready: bool,
    pub result_model: Option<String>,
    pub verdict_id: Option<String>,
    pub new_deployment: Option<String>,
    pub failure: Option<String>,
    pub created_at: String,
    pub updated_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub id: String,
    pub job_id: Option<String>,
    pub kind: String,
    pub message: String,
    pub created_at: String,
}
