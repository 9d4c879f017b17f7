use std::collections::BTreeMap;

use rusqlite::{params, OptionalExtension, Row};

use super::{
    from_json_text, json_text, BundleRecord, DeploymentCommand, DeploymentRecord, ModelStatus, Registry, Tx,
};
use crate::bundle::{self, BundleInput, GateSummary, MonitoringOverrides, DEFAULT_RUNTIME_REQUIREMENT};
use crate::drift::DriftParams;
use crate::error::{Error, Result};
use crate::lineage::EdgeKind;
use crate::store::BlobRef;

const DEPLOYMENT_COLS: &str =
    "d.id, d.model_id, d.bundle_id, b.blob_hash, b.blob_size, d.target, d.deployed_at, d.active, d.superseded_by, d.delta, d.lambda, d.epoch, d.next_seq";

fn deployment_row(r: &Row) -> rusqlite::Result<DeploymentRecord> {
    Ok(DeploymentRecord {
        id: r.get(0)?,
        model_id: r.get(1)?,
        bundle_id: r.get(2)?,
        bundle: BlobRef {
            hash: r.get(3)?,
            size: r.get::<_, i64>(4)? as u64,
        },
        target: r.get(5)?,
        deployed_at: r.get(6)?,
        active: r.get(7)?,
        superseded_by: r.get(8)?,
        drift_params: DriftParams {
            delta: r.get(9)?,
            lambda: r.get(10)?,
        },
        epoch: r.get(11)?,
        next_seq: r.get::<_, i64>(12)? as u64,
    })
}

/// Request to put a model into service on a target.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploySpec {
    pub model_id: String,
    pub target: String,
    /// Existing bundle to ship; built on the fly when absent.
    #[serde(default)]
    pub bundle_id: Option<String>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
}

impl Tx<'_> {
    pub fn build_bundle(&self, model_id: &str, monitoring: &MonitoringOverrides) -> Result<BundleRecord> {
        let model = self.get_model(model_id)?;
        if !matches!(model.status, ModelStatus::Validated | ModelStatus::Deployed) {
            return Err(Error::State(format!(
                "model {model_id} is {}; only validated models can be bundled",
                model.status
            )));
        }
        let bad_delta = monitoring.delta.is_some_and(|d| !(d.is_finite() && d >= 0.0));
        let bad_lambda = monitoring.lambda.is_some_and(|l| !(l.is_finite() && l > 0.0));
        if bad_delta || bad_lambda {
            return Err(Error::validation("monitoring overrides must be finite with delta >= 0 and lambda > 0"));
        }
        let verdict = self
            .latest_verdict(model_id)?
            .filter(|v| v.passed)
            .ok_or_else(|| Error::State(format!("model {model_id} has no passing gate verdict")))?;
        let model_bytes = self.blobs.get_ref(&model.artifact).map_err(|e| match e {
            Error::NotFound { .. } => Error::corruption(format!("artifact of model {model_id} is missing")),
            e => e,
        })?;
        let input = BundleInput {
            model_id: model.id.clone(),
            model_name: model.name.clone(),
            model_version: model.version,
            created_at: model.created_at.clone(),
            model_bytes,
            gate: GateSummary {
                mode: verdict.mode.clone(),
                passed: verdict.passed,
                reason: verdict.reason.clone(),
                rmse: verdict
                    .comparisons
                    .iter()
                    .map(|c| (c.snapshot.clone(), c.candidate_rmse))
                    .collect::<BTreeMap<_, _>>(),
                verdict_id: verdict.id.clone(),
            },
            monitoring: monitoring.clone(),
            runtime: DEFAULT_RUNTIME_REQUIREMENT.into(),
        };
        let built = bundle::build_bundle(&input)?;
        let blob = self.blobs.put(&built.bytes)?;
        let id = format!("bundle-{}", &blob.hash[..16]);
        let now = self.now();
        self.conn.execute(
            "INSERT OR IGNORE INTO bundles (id, model_id, blob_hash, blob_size, manifest_json, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![id, model_id, blob.hash, blob.size as i64, json_text(&built.manifest), now],
        )?;
        self.register_artifact(&id, "bundle", &now)?;
        self.ensure_link(model_id, &id, EdgeKind::DeployedAs)?;
        self.get_bundle(&id)
    }

    pub fn get_bundle(&self, id: &str) -> Result<BundleRecord> {
        let row = self
            .conn
            .query_row(
                "SELECT id, model_id, blob_hash, blob_size, manifest_json, created_at FROM bundles WHERE id = ?1",
                params![id],
                |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, String>(1)?,
                        r.get::<_, String>(2)?,
                        r.get::<_, i64>(3)?,
                        r.get::<_, String>(4)?,
                        r.get::<_, String>(5)?,
                    ))
                },
            )
            .optional()?
            .ok_or_else(|| Error::not_found("bundle", id))?;
        Ok(BundleRecord {
            id: row.0,
            model_id: row.1,
            blob: BlobRef {
                hash: row.2,
                size: row.3 as u64,
            },
            manifest: from_json_text(&row.4, "bundle manifest")?,
            created_at: row.5,
        })
    }

    pub fn create_deployment(&self, spec: &DeploySpec) -> Result<DeploymentRecord> {
        let target = spec.target.trim();
        if target.is_empty() {
            return Err(Error::validation("deployment target must not be empty"));
        }
        let (model, linear) = self.load_model(&spec.model_id)?;
        if !matches!(model.status, ModelStatus::Validated | ModelStatus::Deployed) {
            return Err(Error::State(format!(
                "model {} is {}; only validated models can be deployed",
                model.id, model.status
            )));
        }
        let bundle = match &spec.bundle_id {
            Some(b) => {
                let rec = self.get_bundle(b)?;
                if rec.model_id != model.id {
                    return Err(Error::validation(format!("bundle {b} does not contain model {}", model.id)));
                }
                rec
            }
            None => self.build_bundle(&model.id, &MonitoringOverrides::default())?,
        };
        let defaults = self.config.drift.params_for(linear.train_residual_std);
        let params = DriftParams {
            delta: spec.delta.or(bundle.manifest.monitoring.delta).unwrap_or(defaults.delta),
            lambda: spec.lambda.or(bundle.manifest.monitoring.lambda).unwrap_or(defaults.lambda),
        };
        params.validate()?;

        let id = self.next_id("dep")?;
        let now = self.now();
        self.conn.execute(
            "UPDATE deployments SET active = 0, superseded_by = ?1 WHERE target = ?2 AND active = 1",
            params![id, target],
        )?;
        self.conn.execute(
            "INSERT INTO deployments (id, model_id, bundle_id, target, deployed_at, active, superseded_by, delta, lambda,
                                      epoch, next_seq, ph_n, ph_mean, ph_m, ph_min, ph_min_at, ph_alarm_at)
             VALUES (?1, ?2, ?3, ?4, ?5, 1, NULL, ?6, ?7, 1, 1, 0, 0.0, 0.0, 0.0, 0, NULL)",
            params![id, model.id, bundle.id, target, now, params.delta, params.lambda],
        )?;
        self.register_artifact(&id, "deployment", &now)?;
        self.ensure_link(&bundle.id, &id, EdgeKind::DeployedAs)?;
        if model.status == ModelStatus::Validated {
            self.transition(&model.id, ModelStatus::Deployed)?;
        }
        self.get_deployment(&id)
    }

    /// Deactivates every active deployment of `model_id` without a successor.
    pub(crate) fn halt_deployments_of(&self, model_id: &str) -> Result<()> {
        self.conn.execute(
            "UPDATE deployments SET active = 0 WHERE model_id = ?1 AND active = 1",
            params![model_id],
        )?;
        Ok(())
    }

    pub fn get_deployment(&self, id: &str) -> Result<DeploymentRecord> {
        self.conn
            .query_row(
                &format!("SELECT {DEPLOYMENT_COLS} FROM deployments d JOIN bundles b ON b.id = d.bundle_id WHERE d.id = ?1"),
                params![id],
                deployment_row,
            )
            .optional()?
            .ok_or_else(|| Error::not_found("deployment", id))
    }

    pub fn list_deployments(&self, target: Option<&str>, active_only: bool) -> Result<Vec<DeploymentRecord>> {
        let mut stmt = self.conn.prepare(&format!(
            "SELECT {DEPLOYMENT_COLS} FROM deployments d JOIN bundles b ON b.id = d.bundle_id ORDER BY d.id"
        ))?;
        let rows = stmt.query_map([], deployment_row)?;
        let mut out = Vec::new();
        for d in rows {
            let d = d?;
            if target.is_some_and(|t| t != d.target) || (active_only && !d.active) {
                continue;
            }
            out.push(d);
        }
        Ok(out)
    }

    pub fn deployment_command(&self, id: &str) -> Result<DeploymentCommand> {
        let dep = self.get_deployment(id)?;
        if dep.active {
            return Ok(DeploymentCommand::None);
        }
        // Follow the successor chain to the deployment now serving the target.
        let mut current = dep.clone();
        let mut hops = 0;
        while let Some(next) = current.superseded_by.clone() {
            current = self.get_deployment(&next)?;
            hops += 1;
            if current.active || hops > 10_000 {
                break;
            }
        }
        if current.active && current.id != dep.id {
            return Ok(DeploymentCommand::Swap {
                deployment_id: current.id,
                model_id: current.model_id,
                bundle: current.bundle,
            });
        }
        Ok(DeploymentCommand::Halt {
            reason: format!("deployment {id} is no longer active and has no active successor"),
        })
    }
}

impl Registry {
    pub fn build_bundle(&self, model_id: &str, monitoring: &MonitoringOverrides) -> Result<BundleRecord> {
        self.write(|tx| tx.build_bundle(model_id, monitoring))
    }

    pub fn get_bundle(&self, id: &str) -> Result<BundleRecord> {
        self.read(|tx| tx.get_bundle(id))
    }

    pub fn create_deployment(&self, spec: &DeploySpec) -> Result<DeploymentRecord> {
        self.write(|tx| tx.create_deployment(spec))
    }

    pub fn get_deployment(&self, id: &str) -> Result<DeploymentRecord> {
        self.read(|tx| tx.get_deployment(id))
    }

    pub fn list_deployments(&self, target: Option<&str>, active_only: bool) -> Result<Vec<DeploymentRecord>> {
        self.read(|tx| tx.list_deployments(target, active_only))
    }

    pub fn deployment_command(&self, id: &str) -> Result<DeploymentCommand> {
        self.read(|tx| tx.deployment_command(id))
    }
}
