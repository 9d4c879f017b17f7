use rusqlite::{params, OptionalExtension, Row};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{json_col, json_text, FrameworkMeta, ModelRecord, ModelStatus, Registry, RunRecord, Tx};
use crate::bundle::{canonical_json, InputSchema};
use crate::error::{Error, Result};
use crate::lineage::EdgeKind;
use crate::runtime::{self, FitParams, LinearModel};
use crate::store::{is_valid_hash, BlobRef};

pub const ALGO_OLS: &str = "builtin.ols";
pub const ALGO_TUNE: &str = "builtin.tune";

/// Everything a caller supplies to record a run it executed itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    pub algorithm: String,
    pub hyperparameters: String,
    pub framework_meta: FrameworkMeta,
    pub input_snapshot: String,
    pub train_fraction: f64,
    pub seed: u64,
    /// Hash of the already-stored model artifact.
    pub artifact: String,
    #[serde(default)]
    pub input_schema: Option<InputSchema>,
    #[serde(default)]
    pub started_at: Option<String>,
    #[serde(default)]
    pub finished_at: Option<String>,
}

/// A training request executed by the built-in runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub name: String,
    pub snapshot: String,
    #[serde(default)]
    pub features: Vec<String>,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub train_fraction: f64,
    /// Warm-start from this model (proximal tuning) instead of fitting from scratch.
    #[serde(default)]
    pub base_model: Option<String>,
    #[serde(default)]
    pub tau: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceResult {
    pub run_id: String,
    pub model_id: String,
    pub original: BlobRef,
    pub reproduced: BlobRef,
    pub identical: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OlsParams {
    features: Vec<String>,
    lambda: f64,
    target: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TuneParams {
    base_artifact: String,
    features: Vec<String>,
    lambda: f64,
    target: String,
    tau: f64,
}

/// Accepts only the canonical serialisation of a JSON object.
pub fn check_hyperparameters(text: &str) -> Result<Value> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| Error::validation(format!("hyperparameters are not JSON: {e}")))?;
    if !value.is_object() {
        return Err(Error::validation("hyperparameters must be a JSON object"));
    }
    let canonical = canonical_json(&value);
    if canonical != text.as_bytes() {
        return Err(Error::validation(format!(
            "hyperparameters are not canonically serialised; expected {}",
            String::from_utf8_lossy(&canonical)
        )));
    }
    Ok(value)
}

const RUN_COLS: &str = "id, algorithm, hyperparameters, framework_meta, input_snapshot, train_fraction, seed, started_at, finished_at, produced_model";
const MODEL_COLS: &str = "id, name, version, artifact_hash, artifact_size, features_json, target, created_by_run, status, predecessor, created_at";

fn run_row(r: &Row) -> rusqlite::Result<RunRecord> {
    Ok(RunRecord {
        id: r.get(0)?,
        algorithm: r.get(1)?,
        hyperparameters: r.get(2)?,
        framework_meta: json_col(r.get(3)?)?,
        input_snapshot: r.get(4)?,
        train_fraction: r.get(5)?,
        seed: r.get::<_, i64>(6)? as u64,
        started_at: r.get(7)?,
        finished_at: r.get(8)?,
        produced_model: r.get(9)?,
    })
}

fn model_row(r: &Row) -> rusqlite::Result<ModelRecord> {
    let status: String = r.get(8)?;
    Ok(ModelRecord {
        id: r.get(0)?,
        name: r.get(1)?,
        version: r.get(2)?,
        artifact: BlobRef {
            hash: r.get(3)?,
            size: r.get::<_, i64>(4)? as u64,
        },
        input_schema: InputSchema {
            features: json_col(r.get(5)?)?,
            target: r.get(6)?,
        },
        created_by_run: r.get(7)?,
        status: status.parse().map_err(|e: Error| {
            rusqlite::Error::FromSqlConversionFailure(8, rusqlite::types::Type::Text, Box::new(e))
        })?,
        predecessor: r.get(9)?,
        created_at: r.get(10)?,
    })
}

impl Tx<'_> {
    pub fn record_run(&self, spec: &RunSpec) -> Result<(RunRecord, ModelRecord)> {
        let name = spec.name.trim();
        if name.is_empty() {
            return Err(Error::validation("model name must not be empty"));
        }
        if spec.algorithm.trim().is_empty() {
            return Err(Error::validation("algorithm must not be empty"));
        }
        if !(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0) {
            return Err(Error::validation("train_fraction must lie in (0, 1]"));
        }
        check_hyperparameters(&spec.hyperparameters)?;
        self.get_snapshot(&spec.input_snapshot)?;
        if !is_valid_hash(&spec.artifact) {
            return Err(Error::validation("artifact must be a 64-character lowercase hex digest"));
        }
        let bytes = self.blobs.get(&spec.artifact)?;
        let artifact = BlobRef::of(&bytes);
        let derived = LinearModel::from_bytes(&bytes).ok().map(|m| InputSchema {
            features: m.features,
            target: m.target,
        });
        let input_schema = match (derived, &spec.input_schema) {
            (Some(d), Some(given)) if &d != given => {
                return Err(Error::validation("input_schema disagrees with the model artifact"))
            }
            (Some(d), _) => d,
            (None, Some(given)) => given.clone(),
            (None, None) => {
                return Err(Error::validation(
                    "input_schema is required for artifacts the built-in runtime cannot read",
                ))
            }
        };
        if input_schema.target.is_empty() || input_schema.features.iter().any(String::is_empty) {
            return Err(Error::validation("input_schema names must not be empty"));
        }
        let started_at = spec.started_at.clone().unwrap_or_else(|| self.now());
        let finished_at = spec.finished_at.clone().unwrap_or_else(|| self.now());
        if finished_at < started_at {
            return Err(Error::validation("finished_at precedes started_at"));
        }

        let previous: Option<(String, u32)> = self
            .conn
            .query_row(
                "SELECT id, version FROM models WHERE name = ?1 ORDER BY version DESC LIMIT 1",
                params![name],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()?;
        let version = previous.as_ref().map_or(1, |(_, v)| v + 1);
        let run_id = self.next_id("run")?;
        let model_id = self.next_id("model")?;
        let now = self.now();
        self.conn.execute(
            &format!("INSERT INTO runs ({RUN_COLS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10)"),
            params![
                run_id,
                spec.algorithm,
                spec.hyperparameters,
                json_text(&spec.framework_meta),
                spec.input_snapshot,
                spec.train_fraction,
                spec.seed as i64,
                started_at,
                finished_at,
                model_id
            ],
        )?;
        self.conn.execute(
            &format!("INSERT INTO models ({MODEL_COLS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)"),
            params![
                model_id,
                name,
                version,
                artifact.hash,
                artifact.size as i64,
                json_text(&input_schema.features),
                input_schema.target,
                run_id,
                ModelStatus::Candidate.as_str(),
                previous.map(|(id, _)| id),
                now
            ],
        )?;
        self.register_artifact(&run_id, "run", &now)?;
        self.register_artifact(&model_id, "model", &now)?;
        self.ensure_link(&model_id, &spec.input_snapshot, EdgeKind::TrainedOn)?;
        Ok((self.get_run(&run_id)?, self.get_model(&model_id)?))
    }

    pub fn train(&self, spec: &TrainSpec) -> Result<(RunRecord, ModelRecord)> {
        let table = self.materialize(&spec.snapshot)?;
        let started_at = self.now();
        let (algorithm, hyperparameters, model, base_id) = match &spec.base_model {
            None => {
                let target = spec
                    .target
                    .clone()
                    .ok_or_else(|| Error::validation("target is required"))?;
                if spec.features.is_empty() {
                    return Err(Error::validation("at least one feature is required"));
                }
                if spec.tau.is_some() {
                    return Err(Error::validation("tau applies only when base_model is given"));
                }
                let params = FitParams {
                    ridge: spec.lambda,
                    seed: spec.seed,
                    train_fraction: spec.train_fraction,
                };
                let model = runtime::fit(&table, &spec.features, &target, &params)?;
                let hp = OlsParams {
                    features: spec.features.clone(),
                    lambda: spec.lambda,
                    target,
                };
                (ALGO_OLS, hp_text(&hp), model, None)
            }
            Some(base_id) => {
                if spec.train_fraction != 1.0 {
                    return Err(Error::validation("tuning always uses every row; train_fraction must be 1"));
                }
                let (base_record, base) = self.load_model(base_id)?;
                if !spec.features.is_empty() && spec.features != base.features {
                    return Err(Error::validation("tuning keeps the base model's features"));
                }
                if spec.target.as_ref().is_some_and(|t| *t != base.target) {
                    return Err(Error::validation("tuning keeps the base model's target"));
                }
                let tau = spec.tau.unwrap_or(self.config.tuning.tau);
                let model = runtime::tune(&base, &table, spec.lambda, tau)?;
                let hp = TuneParams {
                    base_artifact: base_record.artifact.hash.clone(),
                    features: base.features.clone(),
                    lambda: spec.lambda,
                    target: base.target.clone(),
                    tau,
                };
                (ALGO_TUNE, hp_text(&hp), model, Some(base_record.id))
            }
        };
        let artifact = self.blobs.put(&model.to_bytes())?;
        let finished_at = self.now();
        let run_spec = RunSpec {
            name: spec.name.clone(),
            algorithm: algorithm.into(),
            hyperparameters,
            framework_meta: FrameworkMeta::builtin(),
            input_snapshot: spec.snapshot.clone(),
            train_fraction: spec.train_fraction,
            seed: spec.seed,
            artifact: artifact.hash,
            input_schema: None,
            started_at: Some(started_at),
            finished_at: Some(finished_at),
        };
        let (run, record) = self.record_run(&run_spec)?;
        if let Some(base) = base_id {
            self.ensure_link(&record.id, &base, EdgeKind::TunedFrom)?;
        }
        Ok((run, record))
    }

    pub fn get_run(&self, id: &str) -> Result<RunRecord> {
        self.conn
            .query_row(&format!("SELECT {RUN_COLS} FROM runs WHERE id = ?1"), params![id], run_row)
            .optional()?
            .ok_or_else(|| Error::not_found("run", id))
    }

    pub fn list_runs(&self) -> Result<Vec<RunRecord>> {
        let mut stmt = self.conn.prepare(&format!("SELECT {RUN_COLS} FROM runs ORDER BY id"))?;
        let rows = stmt.query_map([], run_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn get_model(&self, id: &str) -> Result<ModelRecord> {
        self.conn
            .query_row(&format!("SELECT {MODEL_COLS} FROM models WHERE id = ?1"), params![id], model_row)
            .optional()?
            .ok_or_else(|| Error::not_found("model", id))
    }

    /// Models ordered by name then version, optionally filtered.
    pub fn list_models(&self, name: Option<&str>, status: Option<ModelStatus>) -> Result<Vec<ModelRecord>> {
        let mut stmt = self
            .conn
            .prepare(&format!("SELECT {MODEL_COLS} FROM models ORDER BY name, version"))?;
        let rows = stmt.query_map([], model_row)?;
        let mut out = Vec::new();
        for m in rows {
            let m = m?;
            if name.is_some_and(|n| n != m.name) || status.is_some_and(|s| s != m.status) {
                continue;
            }
            out.push(m);
        }
        Ok(out)
    }

    pub fn history(&self, name: &str) -> Result<Vec<ModelRecord>> {
        let models = self.list_models(Some(name), None)?;
        if models.is_empty() {
            return Err(Error::not_found("model name", name));
        }
        Ok(models)
    }

    /// The record plus its decoded artifact.
    pub fn load_model(&self, id: &str) -> Result<(ModelRecord, LinearModel)> {
        let record = self.get_model(id)?;
        let bytes = self.blobs.get_ref(&record.artifact).map_err(|e| match e {
            Error::NotFound { .. } => Error::corrupt_path(
                record.artifact.hash.clone(),
                format!("artifact of model {id} is missing from the blob store"),
            ),
            e => e,
        })?;
        let model = LinearModel::from_bytes(&bytes)?;
        Ok((record, model))
    }

    pub fn latest_verdict_passed(&self, model_id: &str) -> Result<Option<bool>> {
        Ok(self
            .conn
            .query_row(
                "SELECT passed FROM verdicts WHERE candidate = ?1 ORDER BY id DESC LIMIT 1",
                params![model_id],
                |r| r.get::<_, bool>(0),
            )
            .optional()?)
    }

    fn set_status(&self, id: &str, status: ModelStatus) -> Result<()> {
        self.conn
            .execute("UPDATE models SET status = ?1 WHERE id = ?2", params![status.as_str(), id])?;
        Ok(())
    }

    pub fn transition(&self, id: &str, to: ModelStatus) -> Result<ModelRecord> {
        let model = self.get_model(id)?;
        if !model.status.can_transition(to) {
            return Err(Error::Transition {
                current: model.status.to_string(),
                requested: to.to_string(),
            });
        }
        if matches!(to, ModelStatus::Validated | ModelStatus::Deployed) {
            match self.latest_verdict_passed(id)? {
                Some(true) => {}
                Some(false) => {
                    return Err(Error::State(format!(
                        "model {id} cannot become {to}: its latest gate verdict failed"
                    )))
                }
                None => {
                    return Err(Error::State(format!(
                        "model {id} cannot become {to}: no gate verdict has been recorded"
                    )))
                }
            }
        }
        match to {
            ModelStatus::Deployed => {
                let others = self.list_models(Some(&model.name), Some(ModelStatus::Deployed))?;
                for other in others {
                    self.set_status(&other.id, ModelStatus::Retired)?;
                    self.halt_deployments_of(&other.id)?;
                }
            }
            ModelStatus::Retired => {
                self.halt_deployments_of(id)?;
            }
            _ => {}
        }
        self.set_status(id, to)?;
        if to == ModelStatus::Validated {
            self.on_new_base_model(id)?;
        }
        self.get_model(id)
    }

    /// Re-executes the recorded run of `id` (a model or run id) without storing anything.
    pub fn reproduce(&self, id: &str) -> Result<ReproduceResult> {
        let run = if id.starts_with("run-") {
            self.get_run(id)?
        } else {
            let model = self.get_model(id)?;
            self.get_run(&model.created_by_run)?
        };
        let model = self.get_model(&run.produced_model)?;
        let unreadable = |e: serde_json::Error| Error::corruption(format!("stored hyperparameters of {} are unreadable: {e}", run.id));
        let missing = |what: String| {
            move |e: Error| match e {
                Error::NotFound { .. } => Error::corruption(format!("{what} needed to reproduce is missing")),
                e => e,
            }
        };
        let rebuilt = match run.algorithm.as_str() {
            ALGO_OLS => {
                let hp: OlsParams = serde_json::from_str(&run.hyperparameters).map_err(unreadable)?;
                let table = self
                    .materialize(&run.input_snapshot)
                    .map_err(missing(format!("snapshot {}", run.input_snapshot)))?;
                let params = FitParams {
                    ridge: hp.lambda,
                    seed: run.seed,
                    train_fraction: run.train_fraction,
                };
                runtime::fit(&table, &hp.features, &hp.target, &params)?
            }
            ALGO_TUNE => {
                let hp: TuneParams = serde_json::from_str(&run.hyperparameters).map_err(unreadable)?;
                let table = self
                    .materialize(&run.input_snapshot)
                    .map_err(missing(format!("snapshot {}", run.input_snapshot)))?;
                let base_bytes = self
                    .blobs
                    .get(&hp.base_artifact)
                    .map_err(missing(format!("base artifact {}", hp.base_artifact)))?;
                let base = LinearModel::from_bytes(&base_bytes)?;
                runtime::tune(&base, &table, hp.lambda, hp.tau)?
            }
            other => {
                return Err(Error::Unsupported(format!(
                    "runs of algorithm {other:?} cannot be reproduced by the built-in runtime"
                )))
            }
        };
        let reproduced = BlobRef::of(&rebuilt.to_bytes());
        Ok(ReproduceResult {
            run_id: run.id,
            model_id: model.id,
            identical: reproduced == model.artifact,
            original: model.artifact,
            reproduced,
        })
    }
}

fn hp_text<T: Serialize>(hp: &T) -> String {
    String::from_utf8(canonical_json(hp)).expect("JSON is UTF-8")
}

/// Hyperparameter JSON for a built-in OLS run, as the registry records it.
pub fn ols_hyperparameters(features: &[String], lambda: f64, target: &str) -> String {
    hp_text(&json!({"features": features, "lambda": lambda, "target": target}))
}

impl Registry {
    pub fn record_run(&self, spec: &RunSpec) -> Result<(RunRecord, ModelRecord)> {
        self.write(|tx| tx.record_run(spec))
    }

    pub fn train(&self, spec: &TrainSpec) -> Result<(RunRecord, ModelRecord)> {
        self.write(|tx| tx.train(spec))
    }

    pub fn get_run(&self, id: &str) -> Result<RunRecord> {
        self.read(|tx| tx.get_run(id))
    }

    pub fn get_model(&self, id: &str) -> Result<ModelRecord> {
        self.read(|tx| tx.get_model(id))
    }

    pub fn list_models(&self, name: Option<&str>, status: Option<ModelStatus>) -> Result<Vec<ModelRecord>> {
        self.read(|tx| tx.list_models(name, status))
    }

    pub fn history(&self, name: &str) -> Result<Vec<ModelRecord>> {
        self.read(|tx| tx.history(name))
    }

    pub fn transition(&self, id: &str, to: ModelStatus) -> Result<ModelRecord> {
        self.write(|tx| tx.transition(id, to))
    }

    pub fn reproduce(&self, id: &str) -> Result<ReproduceResult> {
        self.read(|tx| tx.reproduce(id))
    }
}
