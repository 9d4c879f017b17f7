use rusqlite::{params, OptionalExtension, Row};

use super::{json_col, json_text, AutoEvaluation, EvaluationRecord, Registry, SkipRecord, Tx, VerdictRecord};
use crate::error::{Error, Result};
use crate::eval::{self, Metrics};
use crate::lineage::EdgeKind;

fn evaluation_row(r: &Row) -> rusqlite::Result<EvaluationRecord> {
    Ok(EvaluationRecord {
        model_id: r.get(0)?,
        snapshot_id: r.get(1)?,
        metrics: Metrics {
            rmse: r.get(2)?,
            mae: r.get(3)?,
            r2: r.get(4)?,
            n: r.get::<_, i64>(5)? as usize,
        },
        evaluated_at: r.get(6)?,
    })
}

fn verdict_row(r: &Row) -> rusqlite::Result<VerdictRecord> {
    Ok(VerdictRecord {
        id: r.get(0)?,
        candidate: r.get(1)?,
        predecessor: r.get(2)?,
        passed: r.get(3)?,
        mode: r.get(4)?,
        reason: r.get(5)?,
        comparisons: json_col(r.get(6)?)?,
        created_at: r.get(7)?,
    })
}

const VERDICT_COLS: &str = "id, candidate, predecessor, passed, mode, reason, comparisons_json, created_at";

impl Tx<'_> {
    pub fn evaluate(&self, model_id: &str, snapshot_id: &str) -> Result<EvaluationRecord> {
        let (_, model) = self.load_model(model_id)?;
        let snapshot = self.get_snapshot(snapshot_id)?;
        let mut missing: Vec<String> = model
            .features
            .iter()
            .chain(std::iter::once(&model.target))
            .filter(|c| !snapshot.schema.iter().any(|f| &f.name == *c))
            .cloned()
            .collect();
        missing.dedup();
        if !missing.is_empty() {
            return Err(Error::missing_columns(missing));
        }
        let table = self.materialize(snapshot_id)?;
        let y = table.float_columns(&[model.target.as_str()])?[0];
        let y_hat = model.predict_table(&table)?;
        let metrics = eval::compute_metrics(y, &y_hat)?;
        let now = self.now();
        self.conn.execute(
            "INSERT INTO evaluations (model_id, snapshot_id, rmse, mae, r2, n, evaluated_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)
             ON CONFLICT (model_id, snapshot_id) DO UPDATE SET
                rmse = excluded.rmse, mae = excluded.mae, r2 = excluded.r2, n = excluded.n,
                evaluated_at = excluded.evaluated_at",
            params![model_id, snapshot_id, metrics.rmse, metrics.mae, metrics.r2, metrics.n as i64, now],
        )?;
        self.ensure_link(model_id, snapshot_id, EdgeKind::EvaluatedOn)?;
        Ok(EvaluationRecord {
            model_id: model_id.into(),
            snapshot_id: snapshot_id.into(),
            metrics,
            evaluated_at: now,
        })
    }

    pub fn evaluations(&self, model_id: Option<&str>) -> Result<Vec<EvaluationRecord>> {
        let sql = "SELECT model_id, snapshot_id, rmse, mae, r2, n, evaluated_at FROM evaluations";
        let mut stmt = match model_id {
            Some(_) => self.conn.prepare(&format!("{sql} WHERE model_id = ?1 ORDER BY model_id, snapshot_id"))?,
            None => self.conn.prepare(&format!("{sql} ORDER BY model_id, snapshot_id"))?,
        };
        let rows = match model_id {
            Some(m) => stmt.query_map(params![m], evaluation_row)?.collect::<rusqlite::Result<Vec<_>>>()?,
            None => stmt.query_map([], evaluation_row)?.collect::<rusqlite::Result<Vec<_>>>()?,
        };
        Ok(rows)
    }

    /// Snapshots a model is automatically evaluated on: its training
    /// snapshot first, then the rest of the evaluation scope in id order.
    pub fn auto_evaluation_targets(&self, model_id: &str) -> Result<Vec<String>> {
        let model = self.get_model(model_id)?;
        let start = self.get_run(&model.created_by_run)?.input_snapshot;
        let scope = self.evaluation_scope(&start)?;
        let mut out = vec![start.clone()];
        out.extend(scope.into_iter().filter(|s| *s != start));
        Ok(out)
    }

    pub fn auto_evaluate(&self, model_id: &str) -> Result<AutoEvaluation> {
        let targets = self.auto_evaluation_targets(model_id)?;
        let mut reports = Vec::new();
        let mut skipped = Vec::new();
        for snap in targets {
            if self.artifact_kind(&snap)?.as_deref() != Some("snapshot") {
                skipped.push(SkipRecord {
                    snapshot_id: snap,
                    code: "validation".into(),
                    reason: "linked artifact is not a snapshot".into(),
                });
                continue;
            }
            match self.evaluate(model_id, &snap) {
                Ok(r) => reports.push(r),
                Err(e @ Error::Store(_)) => return Err(e),
                Err(e) => skipped.push(SkipRecord {
                    snapshot_id: snap,
                    code: e.code().as_str().into(),
                    reason: e.to_string(),
                }),
            }
        }
        Ok(AutoEvaluation {
            model_id: model_id.into(),
            reports,
            skipped,
        })
    }

    /// Evaluates the candidate over its scope, compares it with its
    /// predecessor (or the absolute threshold) and records the verdict.
    pub fn gate(&self, candidate: &str) -> Result<VerdictRecord> {
        let model = self.get_model(candidate)?;
        let auto = self.auto_evaluate(candidate)?;
        let cfg = self.config.gate_config();
        let decision = match &model.predecessor {
            Some(pred) => {
                let mut pairs = Vec::new();
                for report in &auto.reports {
                    match self.evaluate(pred, &report.snapshot_id) {
                        Ok(p) => pairs.push((report.snapshot_id.clone(), report.metrics.rmse, p.metrics.rmse)),
                        Err(e @ Error::Store(_)) => return Err(e),
                        Err(_) => {}
                    }
                }
                eval::gate_against_predecessor(&pairs, &cfg)?
            }
            None => {
                let train_snapshot = self.get_run(&model.created_by_run)?.input_snapshot;
                let own = auto
                    .reports
                    .iter()
                    .find(|r| r.snapshot_id == train_snapshot)
                    .map(|r| r.metrics.rmse);
                let threshold = match (cfg.abs_threshold, own) {
                    (Some(t), _) => t,
                    (None, Some(rmse)) => eval::absolute_threshold(&cfg, rmse),
                    (None, None) => {
                        return Err(Error::Inconclusive(format!(
                            "model {candidate} could not be evaluated on its training snapshot"
                        )))
                    }
                };
                let results: Vec<(String, f64)> = auto
                    .reports
                    .iter()
                    .map(|r| (r.snapshot_id.clone(), r.metrics.rmse))
                    .collect();
                eval::gate_absolute(&results, threshold)?
            }
        };
        let id = self.next_id("gate")?;
        let now = self.now();
        self.conn.execute(
            &format!("INSERT INTO verdicts ({VERDICT_COLS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)"),
            params![
                id,
                candidate,
                model.predecessor,
                decision.passed,
                decision.mode,
                decision.reason,
                json_text(&decision.comparisons),
                now
            ],
        )?;
        self.get_verdict(&id)
    }

    pub fn get_verdict(&self, id: &str) -> Result<VerdictRecord> {
        self.conn
            .query_row(&format!("SELECT {VERDICT_COLS} FROM verdicts WHERE id = ?1"), params![id], verdict_row)
            .optional()?
            .ok_or_else(|| Error::not_found("gate verdict", id))
    }

    pub fn latest_verdict(&self, model_id: &str) -> Result<Option<VerdictRecord>> {
        Ok(self
            .conn
            .query_row(
                &format!("SELECT {VERDICT_COLS} FROM verdicts WHERE candidate = ?1 ORDER BY id DESC LIMIT 1"),
                params![model_id],
                verdict_row,
            )
            .optional()?)
    }

    pub fn verdicts(&self) -> Result<Vec<VerdictRecord>> {
        let mut stmt = self.conn.prepare(&format!("SELECT {VERDICT_COLS} FROM verdicts ORDER BY id"))?;
        let rows = stmt.query_map([], verdict_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }
}

impl Registry {
    pub fn evaluate(&self, model_id: &str, snapshot_id: &str) -> Result<EvaluationRecord> {
        self.write(|tx| tx.evaluate(model_id, snapshot_id))
    }

    pub fn auto_evaluate(&self, model_id: &str) -> Result<AutoEvaluation> {
        self.write(|tx| tx.auto_evaluate(model_id))
    }

    pub fn gate(&self, candidate: &str) -> Result<VerdictRecord> {
        self.write(|tx| tx.gate(candidate))
    }

    pub fn evaluations(&self, model_id: Option<&str>) -> Result<Vec<EvaluationRecord>> {
        self.read(|tx| tx.evaluations(model_id))
    }
}
