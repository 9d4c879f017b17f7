use std::collections::BTreeMap;

use rusqlite::{params, OptionalExtension};

use super::{json_col, json_text, AlarmRecord, DriftStateRecord, IngestResult, Registry, SnapshotRecord, Tx};
use crate::drift::{DriftParams, FeedbackEvent, PageHinkley};
use crate::error::{Error, Result};
use crate::lineage::EdgeKind;
use crate::table::{Column, Table};

impl Tx<'_> {
    fn load_detector(&self, deployment_id: &str) -> Result<(u32, u64, bool, PageHinkley)> {
        self.conn
            .query_row(
                "SELECT epoch, next_seq, active, delta, lambda, ph_n, ph_mean, ph_m, ph_min, ph_min_at, ph_alarm_at
                 FROM deployments WHERE id = ?1",
                params![deployment_id],
                |r| {
                    let alarm_at: Option<i64> = r.get(10)?;
                    Ok((
                        r.get(0)?,
                        r.get::<_, i64>(1)? as u64,
                        r.get(2)?,
                        PageHinkley {
                            params: DriftParams {
                                delta: r.get(3)?,
                                lambda: r.get(4)?,
                            },
                            n: r.get::<_, i64>(5)? as u64,
                            mean: r.get(6)?,
                            cumulative: r.get(7)?,
                            minimum: r.get(8)?,
                            minimum_at: r.get::<_, i64>(9)? as u64,
                            alarm: alarm_at.is_some(),
                            alarm_at: alarm_at.map(|a| a as u64),
                        },
                    ))
                },
            )
            .optional()?
            .ok_or_else(|| Error::not_found("deployment", deployment_id))
    }

    fn store_detector(&self, deployment_id: &str, next_seq: u64, ph: &PageHinkley) -> Result<()> {
        self.conn.execute(
            "UPDATE deployments SET next_seq = ?2, ph_n = ?3, ph_mean = ?4, ph_m = ?5, ph_min = ?6, ph_min_at = ?7,
                                    ph_alarm_at = ?8
             WHERE id = ?1",
            params![
                deployment_id,
                next_seq as i64,
                ph.n as i64,
                ph.mean,
                ph.cumulative,
                ph.minimum,
                ph.minimum_at as i64,
                ph.alarm_at.map(|a| a as i64)
            ],
        )?;
        Ok(())
    }

    pub fn drift_state(&self, deployment_id: &str) -> Result<DriftStateRecord> {
        let (epoch, _, _, ph) = self.load_detector(deployment_id)?;
        Ok(state_record(deployment_id, epoch, &ph))
    }

    /// Appends a batch of events atomically: either every event is accepted
    /// or none is.
    pub fn ingest_feedback(&self, deployment_id: &str, events: &[FeedbackEvent]) -> Result<IngestResult> {
        let (epoch, mut next_seq, active, mut ph) = self.load_detector(deployment_id)?;
        if !active {
            return Err(Error::State(format!("deployment {deployment_id} is not active")));
        }
        if events.is_empty() {
            return Err(Error::validation("feedback batch is empty"));
        }
        let dep = self.get_deployment(deployment_id)?;
        let features = self.get_model(&dep.model_id)?.input_schema.features;
        let mut alarm = None;
        for (i, ev) in events.iter().enumerate() {
            if ev.deployment_id != deployment_id {
                return Err(Error::validation(format!(
                    "event {} is addressed to {}, not {deployment_id}",
                    i + 1,
                    ev.deployment_id
                )));
            }
            if ev.seq != next_seq {
                return Err(Error::Ordering {
                    expected: next_seq,
                    got: ev.seq,
                });
            }
            let missing: Vec<String> = features.iter().filter(|f| !ev.features.contains_key(*f)).cloned().collect();
            if !missing.is_empty() {
                return Err(Error::Schema {
                    message: format!("event seq {} lacks features: {}", ev.seq, missing.join(", ")),
                    row: Some(i + 1),
                    columns: missing,
                });
            }
            if ph.observe(ev.abs_error())? {
                alarm = Some(AlarmRecord {
                    deployment_id: deployment_id.into(),
                    epoch,
                    alarm_at: ev.seq,
                    change_point: ph.change_point().expect("alarm implies change point"),
                    statistic: ph.statistic(),
                    created_at: self.now(),
                });
            }
            self.conn.execute(
                "INSERT INTO feedback (deployment_id, epoch, seq, ts, features_json, prediction, observation)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
                params![deployment_id, epoch, ev.seq as i64, ev.ts, json_text(&ev.features), ev.prediction, ev.observation],
            )?;
            next_seq += 1;
        }
        self.store_detector(deployment_id, next_seq, &ph)?;
        let mut jobs = Vec::new();
        if let Some(a) = &alarm {
            self.conn.execute(
                "INSERT OR IGNORE INTO alarms (deployment_id, epoch, alarm_at, change_point, statistic, created_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                params![a.deployment_id, a.epoch, a.alarm_at as i64, a.change_point as i64, a.statistic, a.created_at],
            )?;
            jobs.push(self.on_drift_alarm(deployment_id, epoch, a.alarm_at, a.change_point)?.id);
        }
        for job in self.refresh_drift_readiness(deployment_id)? {
            if !jobs.contains(&job) {
                jobs.push(job);
            }
        }
        Ok(IngestResult {
            accepted: events.len() as u64,
            state: state_record(deployment_id, epoch, &ph),
            alarm,
            jobs,
        })
    }

    pub fn reset_drift(&self, deployment_id: &str) -> Result<DriftStateRecord> {
        let (epoch, _, _, ph) = self.load_detector(deployment_id)?;
        let fresh = PageHinkley::new(ph.params);
        self.conn.execute(
            "UPDATE deployments SET epoch = ?2 WHERE id = ?1",
            params![deployment_id, epoch + 1],
        )?;
        self.store_detector(deployment_id, 1, &fresh)?;
        Ok(state_record(deployment_id, epoch + 1, &fresh))
    }

    pub fn alarms(&self, deployment_id: Option<&str>) -> Result<Vec<AlarmRecord>> {
        let mut stmt = self.conn.prepare(
            "SELECT deployment_id, epoch, alarm_at, change_point, statistic, created_at FROM alarms
             ORDER BY deployment_id, epoch, alarm_at",
        )?;
        let rows = stmt.query_map([], |r| {
            Ok(AlarmRecord {
                deployment_id: r.get(0)?,
                epoch: r.get(1)?,
                alarm_at: r.get::<_, i64>(2)? as u64,
                change_point: r.get::<_, i64>(3)? as u64,
                statistic: r.get(4)?,
                created_at: r.get(5)?,
            })
        })?;
        let mut out = Vec::new();
        for a in rows {
            let a = a?;
            if deployment_id.is_none_or(|d| d == a.deployment_id) {
                out.push(a);
            }
        }
        Ok(out)
    }

    /// Logged events of one epoch with `from <= seq <= to`, in sequence order.
    pub fn feedback_events(&self, deployment_id: &str, epoch: u32, from: u64, to: u64) -> Result<Vec<FeedbackEvent>> {
        let mut stmt = self.conn.prepare(
            "SELECT seq, ts, features_json, prediction, observation FROM feedback
             WHERE deployment_id = ?1 AND epoch = ?2 AND seq >= ?3 AND seq <= ?4 ORDER BY seq",
        )?;
        let rows = stmt.query_map(
            params![deployment_id, epoch, from.min(i64::MAX as u64) as i64, to.min(i64::MAX as u64) as i64],
            |r| {
                Ok(FeedbackEvent {
                    deployment_id: deployment_id.to_string(),
                    seq: r.get::<_, i64>(0)? as u64,
                    ts: r.get(1)?,
                    features: json_col::<BTreeMap<String, f64>>(r.get(2)?)?,
                    prediction: r.get(3)?,
                    observation: r.get(4)?,
                })
            },
        )?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub(crate) fn feedback_count_from(&self, deployment_id: &str, epoch: u32, from: u64) -> Result<u64> {
        let n: i64 = self.conn.query_row(
            "SELECT COUNT(*) FROM feedback WHERE deployment_id = ?1 AND epoch = ?2 AND seq >= ?3",
            params![deployment_id, epoch, from as i64],
            |r| r.get(0),
        )?;
        Ok(n as u64)
    }

    /// Materialises logged feedback as a new snapshot of the deployed
    /// model's training dataset, recorded as a newer recording of the
    /// training snapshot. `epoch` defaults to the current one.
    pub fn feedback_to_snapshot(
        &self,
        deployment_id: &str,
        epoch: Option<u32>,
        from: u64,
        to: u64,
    ) -> Result<SnapshotRecord> {
        let dep = self.get_deployment(deployment_id)?;
        if from == 0 || to < from {
            return Err(Error::validation(format!("invalid feedback range {from}..={to}")));
        }
        let epoch = epoch.unwrap_or(dep.epoch);
        let events = self.feedback_events(deployment_id, epoch, from, to)?;
        if events.is_empty() {
            return Err(Error::validation(format!(
                "no feedback logged for {deployment_id} epoch {epoch} in {from}..={to}"
            )));
        }
        let model = self.get_model(&dep.model_id)?;
        let training = self.get_snapshot(&self.get_run(&model.created_by_run)?.input_snapshot)?;
        let mut columns = Vec::new();
        for name in &model.input_schema.features {
            let mut values = Vec::with_capacity(events.len());
            for ev in &events {
                values.push(*ev.features.get(name).ok_or_else(|| Error::missing_columns(vec![name.clone()]))?);
            }
            columns.push(Column::float(name.clone(), values));
        }
        columns.push(Column::float(
            model.input_schema.target.clone(),
            events.iter().map(|e| e.observation).collect(),
        ));
        let table = Table::new(columns)?;
        let snap = self.insert_snapshot(&training.dataset_id, &table, Some(&training.id))?;
        self.ensure_link(&snap.id, &training.id, EdgeKind::NewerRecordingOf)?;
        Ok(snap)
    }
}

fn state_record(deployment_id: &str, epoch: u32, ph: &PageHinkley) -> DriftStateRecord {
    DriftStateRecord {
        deployment_id: deployment_id.into(),
        epoch,
        n: ph.n,
        mean_abs_err: ph.mean,
        ph_m: ph.cumulative,
        ph_min: ph.minimum,
        ph_min_at: ph.minimum_at,
        alarm: ph.alarm,
        alarm_at: ph.alarm_at,
        change_point: ph.change_point(),
        params: ph.params,
    }
}

impl Registry {
    pub fn ingest_feedback(&self, deployment_id: &str, events: &[FeedbackEvent]) -> Result<IngestResult> {
        self.write(|tx| tx.ingest_feedback(deployment_id, events))
    }

    pub fn drift_state(&self, deployment_id: &str) -> Result<DriftStateRecord> {
        self.read(|tx| tx.drift_state(deployment_id))
    }

    pub fn reset_drift(&self, deployment_id: &str) -> Result<DriftStateRecord> {
        self.write(|tx| tx.reset_drift(deployment_id))
    }

    pub fn feedback_to_snapshot(&self, deployment_id: &str, epoch: Option<u32>, from: u64, to: u64) -> Result<SnapshotRecord> {
        self.write(|tx| tx.feedback_to_snapshot(deployment_id, epoch, from, to))
    }
}
