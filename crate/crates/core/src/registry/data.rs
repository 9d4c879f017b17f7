use rusqlite::{params, OptionalExtension, Row};

use super::{json_col, json_text, DatasetRecord, Registry, SnapshotRecord, Tx};
use crate::error::{Error, Result};
use crate::store::BlobRef;
use crate::table::Table;

const SNAPSHOT_COLS: &str =
    "id, dataset_id, blob_hash, blob_size, schema_json, row_count, created_at, parent";

fn snapshot_row(r: &Row) -> rusqlite::Result<SnapshotRecord> {
    Ok(SnapshotRecord {
        id: r.get(0)?,
        dataset_id: r.get(1)?,
        blob: BlobRef {
            hash: r.get(2)?,
            size: r.get::<_, i64>(3)? as u64,
        },
        schema: json_col(r.get(4)?)?,
        row_count: r.get::<_, i64>(5)? as u64,
        created_at: r.get(6)?,
        parent_snapshot: r.get(7)?,
    })
}

impl Tx<'_> {
    pub fn create_dataset(&self, name: &str, description: &str) -> Result<DatasetRecord> {
        let name = name.trim();
        if name.is_empty() {
            return Err(Error::validation("dataset name must not be empty"));
        }
        let taken: Option<String> = self
            .conn
            .query_row("SELECT id FROM datasets WHERE name = ?1", params![name], |r| r.get(0))
            .optional()?;
        if taken.is_some() {
            return Err(Error::AlreadyExists {
                kind: "dataset",
                id: name.to_string(),
            });
        }
        let id = self.next_id("ds")?;
        let now = self.now();
        self.conn.execute(
            "INSERT INTO datasets (id, name, description, created_at) VALUES (?1, ?2, ?3, ?4)",
            params![id, name, description, now],
        )?;
        self.register_artifact(&id, "dataset", &now)?;
        self.get_dataset(&id)
    }

    pub fn get_dataset(&self, id: &str) -> Result<DatasetRecord> {
        let row = self
            .conn
            .query_row(
                "SELECT id, name, description, created_at FROM datasets WHERE id = ?1",
                params![id],
                |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)),
            )
            .optional()?;
        let (id, name, description, created_at): (String, String, String, String) =
            row.ok_or_else(|| Error::not_found("dataset", id))?;
        let mut stmt = self
            .conn
            .prepare("SELECT id FROM snapshots WHERE dataset_id = ?1 ORDER BY ordinal")?;
        let snapshots = stmt
            .query_map(params![id], |r| r.get(0))?
            .collect::<rusqlite::Result<Vec<String>>>()?;
        Ok(DatasetRecord {
            id,
            name,
            description,
            created_at,
            snapshots,
        })
    }

    pub fn list_datasets(&self) -> Result<Vec<DatasetRecord>> {
        let mut stmt = self.conn.prepare("SELECT id FROM datasets ORDER BY id")?;
        let ids = stmt
            .query_map([], |r| r.get(0))?
            .collect::<rusqlite::Result<Vec<String>>>()?;
        ids.iter().map(|id| self.get_dataset(id)).collect()
    }

    pub fn ingest_snapshot(&self, dataset_id: &str, csv: &[u8], parent: Option<&str>) -> Result<SnapshotRecord> {
        self.get_dataset(dataset_id)?;
        if let Some(p) = parent {
            self.get_snapshot(p)?;
        }
        let table = Table::from_csv(csv)?;
        self.insert_snapshot(dataset_id, &table, parent)
    }

    pub(crate) fn insert_snapshot(&self, dataset_id: &str, table: &Table, parent: Option<&str>) -> Result<SnapshotRecord> {
        let blob = self.blobs.put(&table.encode())?;
        let id = self.next_id("snap")?;
        let now = self.now();
        let ordinal: i64 = self.conn.query_row(
            "SELECT COALESCE(MAX(ordinal), 0) + 1 FROM snapshots WHERE dataset_id = ?1",
            params![dataset_id],
            |r| r.get(0),
        )?;
        self.conn.execute(
            "INSERT INTO snapshots (id, dataset_id, ordinal, blob_hash, blob_size, schema_json, row_count, created_at, parent)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
            params![
                id,
                dataset_id,
                ordinal,
                blob.hash,
                blob.size as i64,
                json_text(&table.schema()),
                table.row_count() as i64,
                now,
                parent
            ],
        )?;
        self.register_artifact(&id, "snapshot", &now)?;
        self.get_snapshot(&id)
    }

    pub fn get_snapshot(&self, id: &str) -> Result<SnapshotRecord> {
        self.conn
            .query_row(
                &format!("SELECT {SNAPSHOT_COLS} FROM snapshots WHERE id = ?1"),
                params![id],
                snapshot_row,
            )
            .optional()?
            .ok_or_else(|| Error::not_found("snapshot", id))
    }

    pub fn latest_snapshot(&self, dataset_id: &str) -> Result<Option<SnapshotRecord>> {
        Ok(self
            .conn
            .query_row(
                &format!(
                    "SELECT {SNAPSHOT_COLS} FROM snapshots WHERE dataset_id = ?1 ORDER BY ordinal DESC LIMIT 1"
                ),
                params![dataset_id],
                snapshot_row,
            )
            .optional()?)
    }

    pub fn all_snapshots(&self) -> Result<Vec<SnapshotRecord>> {
        let mut stmt = self
            .conn
            .prepare(&format!("SELECT {SNAPSHOT_COLS} FROM snapshots ORDER BY id"))?;
        let rows = stmt.query_map([], snapshot_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Decodes a registered snapshot. A missing or altered payload of a
    /// registered snapshot is corruption, not absence.
    pub fn materialize(&self, id: &str) -> Result<Table> {
        let snap = self.get_snapshot(id)?;
        let bytes = self.blobs.get_ref(&snap.blob).map_err(|e| match e {
            Error::NotFound { .. } => Error::corrupt_path(
                snap.blob.hash.clone(),
                format!("payload of snapshot {id} is missing from the blob store"),
            ),
            e => e,
        })?;
        let table = Table::decode(&bytes)?;
        if table.row_count() as u64 != snap.row_count {
            return Err(Error::corruption(format!("snapshot {id} row count disagrees with its payload")));
        }
        Ok(table)
    }
}

impl Registry {
    pub fn put_blob(&self, content: &[u8]) -> Result<BlobRef> {
        self.blobs().put(content)
    }

    pub fn get_blob(&self, hash: &str) -> Result<Vec<u8>> {
        self.blobs().get(hash)
    }

    pub fn create_dataset(&self, name: &str, description: &str) -> Result<DatasetRecord> {
        self.write(|tx| tx.create_dataset(name, description))
    }

    pub fn get_dataset(&self, id: &str) -> Result<DatasetRecord> {
        self.read(|tx| tx.get_dataset(id))
    }

    pub fn list_datasets(&self) -> Result<Vec<DatasetRecord>> {
        self.read(|tx| tx.list_datasets())
    }

    pub fn ingest_snapshot(&self, dataset_id: &str, csv: &[u8], parent: Option<&str>) -> Result<SnapshotRecord> {
        self.write(|tx| tx.ingest_snapshot(dataset_id, csv, parent))
    }

    pub fn get_snapshot(&self, id: &str) -> Result<SnapshotRecord> {
        self.read(|tx| tx.get_snapshot(id))
    }

    pub fn materialize(&self, id: &str) -> Result<Table> {
        self.read(|tx| tx.materialize(id))
    }
}
