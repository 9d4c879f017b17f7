//! System of record: datasets, snapshots, lineage, runs, models,
//! evaluations, gate verdicts, bundles, deployments, feedback and jobs.
//!
//! State lives in one SQLite file (`registry.sqlite`) next to a
//! content-addressed blob directory. Every mutation runs inside a single
//! `BEGIN IMMEDIATE` transaction; all domain operations are methods on
//! [`Tx`] so that composite workflows (the tuning pipeline) commit or roll
//! back as a unit.

mod audit;
mod data;
mod deploy;
mod evaluation;
mod feedback;
mod graph;
mod jobs;
mod models;
mod records;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use rusqlite::{params, Connection, OptionalExtension, TransactionBehavior};

use crate::clock::{Clock, SystemClock};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::store::BlobStore;

pub use audit::AuditReport;
pub use deploy::DeploySpec;
pub use jobs::ManualJobSpec;
pub use models::{ols_hyperparameters, ReproduceResult, RunSpec, TrainSpec, ALGO_OLS, ALGO_TUNE};
pub use records::*;

const SCHEMA: &str = r#"
CREATE TABLE IF NOT EXISTS counters (
    prefix TEXT PRIMARY KEY,
    value  INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS artifacts (
    id         TEXT PRIMARY KEY,
    kind       TEXT NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS datasets (
    id          TEXT PRIMARY KEY,
    name        TEXT NOT NULL UNIQUE,
    description TEXT NOT NULL,
    created_at  TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS snapshots (
    id          TEXT PRIMARY KEY,
    dataset_id  TEXT NOT NULL REFERENCES datasets(id),
    ordinal     INTEGER NOT NULL,
    blob_hash   TEXT NOT NULL,
    blob_size   INTEGER NOT NULL,
    schema_json TEXT NOT NULL,
    row_count   INTEGER NOT NULL,
    created_at  TEXT NOT NULL,
    parent      TEXT,
    UNIQUE (dataset_id, ordinal)
);
CREATE TABLE IF NOT EXISTS edges (
    from_id    TEXT NOT NULL,
    to_id      TEXT NOT NULL,
    kind       TEXT NOT NULL,
    created_at TEXT NOT NULL,
    annotation TEXT,
    PRIMARY KEY (from_id, to_id, kind)
);
CREATE INDEX IF NOT EXISTS edges_to ON edges (to_id, kind);
CREATE TABLE IF NOT EXISTS runs (
    id              TEXT PRIMARY KEY,
    algorithm       TEXT NOT NULL,
    hyperparameters TEXT NOT NULL,
    framework_meta  TEXT NOT NULL,
    input_snapshot  TEXT NOT NULL,
    train_fraction  REAL NOT NULL,
    seed            INTEGER NOT NULL,
    started_at      TEXT NOT NULL,
    finished_at     TEXT NOT NULL,
    produced_model  TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS models (
    id             TEXT PRIMARY KEY,
    name           TEXT NOT NULL,
    version        INTEGER NOT NULL,
    artifact_hash  TEXT NOT NULL,
    artifact_size  INTEGER NOT NULL,
    features_json  TEXT NOT NULL,
    target         TEXT NOT NULL,
    created_by_run TEXT NOT NULL,
    status         TEXT NOT NULL,
    predecessor    TEXT,
    created_at     TEXT NOT NULL,
    UNIQUE (name, version)
);
CREATE TABLE IF NOT EXISTS evaluations (
    model_id     TEXT NOT NULL,
    snapshot_id  TEXT NOT NULL,
    rmse         REAL NOT NULL,
    mae          REAL NOT NULL,
    r2           REAL NOT NULL,
    n            INTEGER NOT NULL,
    evaluated_at TEXT NOT NULL,
    PRIMARY KEY (model_id, snapshot_id)
);
CREATE TABLE IF NOT EXISTS verdicts (
    id               TEXT PRIMARY KEY,
    candidate        TEXT NOT NULL,
    predecessor      TEXT,
    passed           INTEGER NOT NULL,
    mode             TEXT NOT NULL,
    reason           TEXT NOT NULL,
    comparisons_json TEXT NOT NULL,
    created_at       TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS verdicts_candidate ON verdicts (candidate);
CREATE TABLE IF NOT EXISTS bundles (
    id            TEXT PRIMARY KEY,
    model_id      TEXT NOT NULL,
    blob_hash     TEXT NOT NULL,
    blob_size     INTEGER NOT NULL,
    manifest_json TEXT NOT NULL,
    created_at    TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS deployments (
    id            TEXT PRIMARY KEY,
    model_id      TEXT NOT NULL,
    bundle_id     TEXT NOT NULL,
    target        TEXT NOT NULL,
    deployed_at   TEXT NOT NULL,
    active        INTEGER NOT NULL,
    superseded_by TEXT,
    delta         REAL NOT NULL,
    lambda        REAL NOT NULL,
    epoch         INTEGER NOT NULL,
    next_seq      INTEGER NOT NULL,
    ph_n          INTEGER NOT NULL,
    ph_mean       REAL NOT NULL,
    ph_m          REAL NOT NULL,
    ph_min        REAL NOT NULL,
    ph_min_at     INTEGER NOT NULL,
    ph_alarm_at   INTEGER
);
CREATE TABLE IF NOT EXISTS feedback (
    deployment_id TEXT NOT NULL,
    epoch         INTEGER NOT NULL,
    seq           INTEGER NOT NULL,
    ts            TEXT NOT NULL,
    features_json TEXT NOT NULL,
    prediction    REAL NOT NULL,
    observation   REAL NOT NULL,
    PRIMARY KEY (deployment_id, epoch, seq)
);
CREATE TABLE IF NOT EXISTS alarms (
    deployment_id TEXT NOT NULL,
    epoch         INTEGER NOT NULL,
    alarm_at      INTEGER NOT NULL,
    change_point  INTEGER NOT NULL,
    statistic     REAL NOT NULL,
    created_at    TEXT NOT NULL,
    PRIMARY KEY (deployment_id, epoch, alarm_at)
);
CREATE TABLE IF NOT EXISTS jobs (
    id              TEXT PRIMARY KEY,
    trigger_kind    TEXT NOT NULL,
    dedup_key       TEXT NOT NULL UNIQUE,
    source_model    TEXT NOT NULL,
    target_dataset  TEXT,
    target_snapshot TEXT,
    deployment_id   TEXT,
    epoch           INTEGER,
    alarm_at        INTEGER,
    change_point    INTEGER,
    model_name      TEXT NOT NULL,
    lambda          REAL NOT NULL,
    tau             REAL NOT NULL,
    status          TEXT NOT NULL,
    ready           INTEGER NOT NULL,
    result_model    TEXT,
    verdict_id      TEXT,
    new_deployment  TEXT,
    failure         TEXT,
    created_at      TEXT NOT NULL,
    updated_at      TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS notifications (
    id         TEXT PRIMARY KEY,
    job_id     TEXT,
    kind       TEXT NOT NULL,
    message    TEXT NOT NULL,
    created_at TEXT NOT NULL
);
"#;

/// Points at which a test can make the next job pipeline fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The pipeline completes its work but fails just before committing.
    BeforeJobCommit,
}

pub struct Registry {
    conn: Mutex<Connection>,
    blobs: BlobStore,
    clock: Arc<dyn Clock>,
    config: Config,
    root: PathBuf,
    fault: Mutex<Option<Fault>>,
}

/// A view of the registry inside one transaction (or a read).
pub struct Tx<'a> {
    pub(crate) conn: &'a Connection,
    pub(crate) blobs: &'a BlobStore,
    pub(crate) clock: &'a dyn Clock,
    pub(crate) config: &'a Config,
    fault: Option<Fault>,
}

impl Registry {
    pub fn open(dir: impl AsRef<Path>, config: Config, clock: Arc<dyn Clock>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        let blobs = BlobStore::open(root.join("blobs"))?;
        let conn = Connection::open(root.join("registry.sqlite"))?;
        conn.busy_timeout(std::time::Duration::from_secs(30))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.execute_batch(SCHEMA)?;
        // Jobs left running by a crashed process become runnable again.
        conn.execute("UPDATE jobs SET status = 'queued' WHERE status = 'running'", [])?;
        Ok(Self {
            conn: Mutex::new(conn),
            blobs,
            clock,
            config,
            root,
            fault: Mutex::new(None),
        })
    }

    /// Opens with the system clock and `config.data_dir`.
    pub fn from_config(config: Config) -> Result<Self> {
        let dir = config.data_dir.clone();
        Self::open(dir, config, Arc::new(SystemClock))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn clock(&self) -> &dyn Clock {
        self.clock.as_ref()
    }

    pub fn inject_fault(&self, fault: Option<Fault>) {
        *lock(&self.fault) = fault;
    }

    fn take_fault(&self) -> Option<Fault> {
        lock(&self.fault).take()
    }

    /// Runs `f` in an immediate transaction, committing on `Ok`.
    pub fn write<T>(&self, f: impl FnOnce(&Tx) -> Result<T>) -> Result<T> {
        self.write_with_fault(None, f)
    }

    pub(crate) fn write_with_fault<T>(&self, fault: Option<Fault>, f: impl FnOnce(&Tx) -> Result<T>) -> Result<T> {
        let mut guard = lock(&self.conn);
        if !guard.is_autocommit() {
            guard.execute_batch("ROLLBACK")?;
        }
        let txn = guard.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let out = {
            let tx = Tx {
                conn: &txn,
                blobs: &self.blobs,
                clock: self.clock.as_ref(),
                config: &self.config,
                fault,
            };
            f(&tx)?
        };
        txn.commit()?;
        Ok(out)
    }

    /// Runs the next job pipeline with any injected fault armed.
    pub(crate) fn write_job<T>(&self, f: impl FnOnce(&Tx) -> Result<T>) -> Result<T> {
        let fault = self.take_fault();
        self.write_with_fault(fault, f)
    }

    pub fn read<T>(&self, f: impl FnOnce(&Tx) -> Result<T>) -> Result<T> {
        let guard = lock(&self.conn);
        if !guard.is_autocommit() {
            guard.execute_batch("ROLLBACK")?;
        }
        let tx = Tx {
            conn: &guard,
            blobs: &self.blobs,
            clock: self.clock.as_ref(),
            config: &self.config,
            fault: None,
        };
        f(&tx)
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Tx<'_> {
    pub fn now(&self) -> String {
        self.clock.timestamp()
    }

    pub(crate) fn fault(&self) -> Option<Fault> {
        self.fault
    }

    /// Allocates `<prefix>-NNNNNN` from a per-prefix counter.
    pub(crate) fn next_id(&self, prefix: &str) -> Result<String> {
        let n: i64 = self.conn.query_row(
            "INSERT INTO counters (prefix, value) VALUES (?1, 1)
             ON CONFLICT (prefix) DO UPDATE SET value = value + 1
             RETURNING value",
            params![prefix],
            |r| r.get(0),
        )?;
        Ok(format!("{prefix}-{n:06}"))
    }

    pub(crate) fn register_artifact(&self, id: &str, kind: &str, created_at: &str) -> Result<()> {
        self.conn.execute(
            "INSERT OR IGNORE INTO artifacts (id, kind, created_at) VALUES (?1, ?2, ?3)",
            params![id, kind, created_at],
        )?;
        Ok(())
    }

    pub fn artifact_kind(&self, id: &str) -> Result<Option<String>> {
        Ok(self
            .conn
            .query_row("SELECT kind FROM artifacts WHERE id = ?1", params![id], |r| r.get(0))
            .optional()?)
    }

    pub fn artifact_exists(&self, id: &str) -> Result<bool> {
        Ok(self.artifact_kind(id)?.is_some())
    }

    pub(crate) fn notify(&self, job_id: Option<&str>, kind: &str, message: &str) -> Result<String> {
        let id = self.next_id("note")?;
        self.conn.execute(
            "INSERT INTO notifications (id, job_id, kind, message, created_at) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![id, job_id, kind, message, self.now()],
        )?;
        Ok(id)
    }

    pub fn notifications(&self) -> Result<Vec<Notification>> {
        let mut stmt = self
            .conn
            .prepare("SELECT id, job_id, kind, message, created_at FROM notifications ORDER BY id")?;
        let rows = stmt.query_map([], |r| {
            Ok(Notification {
                id: r.get(0)?,
                job_id: r.get(1)?,
                kind: r.get(2)?,
                message: r.get(3)?,
                created_at: r.get(4)?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }
}

pub(crate) fn json_text<T: serde::Serialize>(v: &T) -> String {
    String::from_utf8(crate::bundle::canonical_json(v)).expect("JSON is UTF-8")
}

pub(crate) fn from_json_text<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::corruption(format!("stored {what} is unreadable: {e}")))
}

/// Converts a row-mapping closure result for JSON columns.
pub(crate) fn json_col<T: serde::de::DeserializeOwned>(text: String) -> rusqlite::Result<T> {
    serde_json::from_str(&text).map_err(|e| {
        rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e))
    })
}
