use std::collections::BTreeSet;

use rusqlite::{params, OptionalExtension};

use super::{Registry, Tx};
use crate::error::{Error, Result};
use crate::lineage::{self, Adjacency, EdgeKind, LineageEdge};

impl Tx<'_> {
    fn edges_where(&self, clause: &str, args: &[&dyn rusqlite::ToSql]) -> Result<Vec<LineageEdge>> {
        let mut stmt = self.conn.prepare(&format!(
            "SELECT from_id, to_id, kind, created_at, annotation FROM edges {clause} ORDER BY from_id, kind, to_id"
        ))?;
        let rows = stmt.query_map(args, |r| {
            Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?, r.get(3)?, r.get(4)?))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (from, to, kind, created_at, annotation) = row?;
            let kind: EdgeKind = kind
                .parse()
                .map_err(|_| Error::corruption(format!("stored edge has unknown kind {kind:?}")))?;
            out.push(LineageEdge {
                from,
                to,
                kind,
                created_at,
                annotation,
            });
        }
        Ok(out)
    }

    pub fn edges(&self, kind: Option<EdgeKind>) -> Result<Vec<LineageEdge>> {
        match kind {
            Some(k) => self.edges_where("WHERE kind = ?1", &[&k.as_str()]),
            None => self.edges_where("", &[]),
        }
    }

    fn adjacency(&self, kind: EdgeKind) -> Result<Adjacency> {
        let edges = self.edges(Some(kind))?;
        Ok(Adjacency::from_pairs(edges.iter().map(|e| (e.from.as_str(), e.to.as_str()))))
    }

    fn edge_exists(&self, from: &str, to: &str, kind: EdgeKind) -> Result<bool> {
        Ok(self
            .conn
            .query_row(
                "SELECT 1 FROM edges WHERE from_id = ?1 AND to_id = ?2 AND kind = ?3",
                params![from, to, kind.as_str()],
                |_| Ok(()),
            )
            .optional()?
            .is_some())
    }

    pub fn add_link(&self, from: &str, to: &str, kind: EdgeKind, annotation: Option<&str>) -> Result<LineageEdge> {
        let failure = std::cell::RefCell::new(None);
        let exists = |id: &str| {
            self.artifact_exists(id).unwrap_or_else(|e| {
                failure.borrow_mut().get_or_insert(e);
                false
            })
        };
        let result = lineage::check_link(from, to, kind, exists, || {
            self.adjacency(kind).unwrap_or_else(|e| {
                failure.borrow_mut().get_or_insert(e);
                Adjacency::new()
            })
        });
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        result?;
        if self.edge_exists(from, to, kind)? {
            return Err(Error::AlreadyExists {
                kind: "edge",
                id: format!("{from} {kind} {to}"),
            });
        }
        let now = self.now();
        let insert = |a: &str, b: &str| {
            self.conn.execute(
                "INSERT OR IGNORE INTO edges (from_id, to_id, kind, created_at, annotation) VALUES (?1, ?2, ?3, ?4, ?5)",
                params![a, b, kind.as_str(), now, annotation],
            )
        };
        insert(from, to)?;
        if kind.is_symmetric() {
            insert(to, from)?;
        }
        Ok(LineageEdge {
            from: from.into(),
            to: to.into(),
            kind,
            created_at: now,
            annotation: annotation.map(str::to_string),
        })
    }

    /// Adds a system-generated edge unless it already exists.
    pub(crate) fn ensure_link(&self, from: &str, to: &str, kind: EdgeKind) -> Result<()> {
        if self.edge_exists(from, to, kind)? {
            return Ok(());
        }
        self.add_link(from, to, kind, None).map(|_| ())
    }

    pub fn remove_link(&self, from: &str, to: &str, kind: EdgeKind) -> Result<()> {
        let n = self.conn.execute(
            "DELETE FROM edges WHERE from_id = ?1 AND to_id = ?2 AND kind = ?3",
            params![from, to, kind.as_str()],
        )?;
        if n == 0 {
            return Err(Error::not_found("edge", format!("{from} {kind} {to}")));
        }
        if kind.is_symmetric() {
            self.conn.execute(
                "DELETE FROM edges WHERE from_id = ?1 AND to_id = ?2 AND kind = ?3",
                params![to, from, kind.as_str()],
            )?;
        }
        Ok(())
    }

    pub fn connected(&self, id: &str, kind: EdgeKind, depth: Option<usize>) -> Result<BTreeSet<String>> {
        if !self.artifact_exists(id)? {
            return Err(Error::not_found("artifact", id));
        }
        Ok(self.adjacency(kind)?.reachable(id, depth))
    }

    /// Snapshot ids an evaluation starting at `snapshot` covers, start included.
    pub fn evaluation_scope(&self, snapshot: &str) -> Result<BTreeSet<String>> {
        if !self.artifact_exists(snapshot)? {
            return Err(Error::not_found("artifact", snapshot));
        }
        let mut edges = self.edges(Some(EdgeKind::CompatibleWith))?;
        edges.extend(self.edges(Some(EdgeKind::NewerRecordingOf))?);
        let adj = lineage::evaluation_adjacency(edges.iter().map(|e| (e.from.as_str(), e.kind, e.to.as_str())));
        Ok(lineage::evaluation_scope(&adj, snapshot))
    }

    pub fn export_lineage(&self) -> Result<String> {
        let edges = self.edges(None)?;
        Ok(lineage::export_lines(edges.iter().map(|e| (e.from.as_str(), e.kind, e.to.as_str()))))
    }
}

impl Registry {
    pub fn add_link(&self, from: &str, to: &str, kind: EdgeKind, annotation: Option<&str>) -> Result<LineageEdge> {
        self.write(|tx| tx.add_link(from, to, kind, annotation))
    }

    pub fn remove_link(&self, from: &str, to: &str, kind: EdgeKind) -> Result<()> {
        self.write(|tx| tx.remove_link(from, to, kind))
    }

    pub fn connected(&self, id: &str, kind: EdgeKind, depth: Option<usize>) -> Result<BTreeSet<String>> {
        self.read(|tx| tx.connected(id, kind, depth))
    }

    pub fn export_lineage(&self) -> Result<String> {
        self.read(|tx| tx.export_lineage())
    }
}
