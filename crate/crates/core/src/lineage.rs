//! Typed semantic connections between artifacts.
//!
//! This module holds the edge vocabulary and the graph algorithms. The
//! registry persists edges and calls into these functions inside its
//! transactions; [`LineageGraph`] is the same logic over an in-memory edge set.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    CompatibleWith,
    NewerRecordingOf,
    BaseOf,
    TunedFrom,
    TrainedOn,
    EvaluatedOn,
    DeployedAs,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 7] = [
        EdgeKind::CompatibleWith,
        EdgeKind::NewerRecordingOf,
        EdgeKind::BaseOf,
        EdgeKind::TunedFrom,
        EdgeKind::TrainedOn,
        EdgeKind::EvaluatedOn,
        EdgeKind::DeployedAs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::CompatibleWith => "compatible_with",
            EdgeKind::NewerRecordingOf => "newer_recording_of",
            EdgeKind::BaseOf => "base_of",
            EdgeKind::TunedFrom => "tuned_from",
            EdgeKind::TrainedOn => "trained_on",
            EdgeKind::EvaluatedOn => "evaluated_on",
            EdgeKind::DeployedAs => "deployed_as",
        }
    }

    /// Kinds whose restriction of the graph must stay a DAG.
    pub fn is_acyclic(self) -> bool {
        matches!(
            self,
            EdgeKind::BaseOf | EdgeKind::TunedFrom | EdgeKind::NewerRecordingOf
        )
    }

    pub fn is_symmetric(self) -> bool {
        self == EdgeKind::CompatibleWith
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EdgeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EdgeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown edge kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
    pub created_at: String,
    pub annotation: Option<String>,
}

/// Directed adjacency list with deterministic (sorted) iteration.
#[derive(Debug, Default, Clone)]
pub struct Adjacency {
    out: BTreeMap<String, BTreeSet<String>>,
}

impl Adjacency {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut adj = Self::new();
        for (a, b) in pairs {
            adj.insert(a, b);
        }
        adj
    }

    pub fn insert(&mut self, from: &str, to: &str) {
        self.out
            .entry(from.to_string())
            .or_default()
            .insert(to.to_string());
    }

    pub fn neighbors(&self, node: &str) -> impl Iterator<Item = &String> {
        self.out.get(node).into_iter().flatten()
    }

    /// Nodes reachable from `start` within `depth` hops (unbounded if `None`),
    /// excluding `start` itself.
    pub fn reachable(&self, start: &str, depth: Option<usize>) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([(start.to_string(), 0usize)]);
        let mut visited = BTreeSet::from([start.to_string()]);
        while let Some((node, d)) = queue.pop_front() {
            if depth.is_some_and(|max| d >= max) {
                continue;
            }
            for next in self.neighbors(&node) {
                if visited.insert(next.clone()) {
                    seen.insert(next.clone());
                    queue.push_back((next.clone(), d + 1));
                }
            }
        }
        seen
    }

    /// Shortest path `from ⇝ to` (inclusive), preferring lexicographically
    /// smaller neighbours on ties.
    pub fn find_path(&self, from: &str, to: &str) -> Option<Vec<String>> {
        let mut parent: BTreeMap<String, String> = BTreeMap::new();
        let mut queue = VecDeque::from([from.to_string()]);
        let mut visited = BTreeSet::from([from.to_string()]);
        while let Some(node) = queue.pop_front() {
            if node == to {
                let mut path = vec![node.clone()];
                let mut cur = node;
                while let Some(p) = parent.get(&cur) {
                    path.push(p.clone());
                    cur = p.clone();
                }
                path.reverse();
                return Some(path);
            }
            for next in self.neighbors(&node) {
                if visited.insert(next.clone()) {
                    parent.insert(next.clone(), node.clone());
                    queue.push_back(next.clone());
                }
            }
        }
        None
    }
}

/// The cycle an edge `from → to` would close, rendered starting at `to`
/// (e.g. existing A→B plus new B→A yields `[A, B, A]`).
pub fn cycle_through(adj: &Adjacency, from: &str, to: &str) -> Option<Vec<String>> {
    adj.find_path(to, from).map(|mut p| {
        p.push(to.to_string());
        p
    })
}

/// Adjacency used by automatic evaluation: `compatible_with` edges (stored in
/// both directions) are followed as-is, `newer_recording_of` edges are
/// followed in reverse, from a recording to the recordings made after it.
pub fn evaluation_adjacency<'a>(
    edges: impl IntoIterator<Item = (&'a str, EdgeKind, &'a str)>,
) -> Adjacency {
    let mut adj = Adjacency::new();
    for (from, kind, to) in edges {
        match kind {
            EdgeKind::CompatibleWith => {
                adj.insert(from, to);
                adj.insert(to, from);
            }
            EdgeKind::NewerRecordingOf => adj.insert(to, from),
            _ => {}
        }
    }
    adj
}

/// `{start} ∪ reachable(start)` over [`evaluation_adjacency`].
pub fn evaluation_scope(adj: &Adjacency, start: &str) -> BTreeSet<String> {
    let mut scope = adj.reachable(start, None);
    scope.insert(start.to_string());
    scope
}

/// One line per edge, `from<TAB>kind<TAB>to`, sorted lexicographically.
pub fn export_lines<'a>(edges: impl IntoIterator<Item = (&'a str, EdgeKind, &'a str)>) -> String {
    let mut lines: Vec<String> = edges
        .into_iter()
        .map(|(f, k, t)| format!("{f}\t{k}\t{t}"))
        .collect();
    lines.sort();
    lines.dedup();
    let mut out = lines.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    out
}

/// In-memory lineage graph with the same insertion rules as the registry.
#[derive(Debug, Default, Clone)]
pub struct LineageGraph {
    nodes: BTreeSet<String>,
    edges: BTreeSet<(String, EdgeKind, String)>,
}

impl LineageGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: impl Into<String>) {
        self.nodes.insert(id.into());
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains(id)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, EdgeKind, &str)> {
        self.edges.iter().map(|(f, k, t)| (f.as_str(), *k, t.as_str()))
    }

    fn adjacency(&self, kind: EdgeKind) -> Adjacency {
        Adjacency::from_pairs(
            self.edges()
                .filter(|(_, k, _)| *k == kind)
                .map(|(f, _, t)| (f, t)),
        )
    }

    pub fn add_link(&mut self, from: &str, to: &str, kind: EdgeKind) -> Result<()> {
        check_link(from, to, kind, |id| self.contains(id), || self.adjacency(kind))?;
        let key = (from.to_string(), kind, to.to_string());
        if self.edges.contains(&key) {
            return Err(Error::AlreadyExists {
                kind: "edge",
                id: format!("{from} {kind} {to}"),
            });
        }
        self.edges.insert(key);
        if kind.is_symmetric() {
            self.edges.insert((to.to_string(), kind, from.to_string()));
        }
        Ok(())
    }

    pub fn remove_link(&mut self, from: &str, to: &str, kind: EdgeKind) -> Result<()> {
        let key = (from.to_string(), kind, to.to_string());
        if !self.edges.remove(&key) {
            return Err(Error::not_found("edge", format!("{from} {kind} {to}")));
        }
        if kind.is_symmetric() {
            self.edges.remove(&(to.to_string(), kind, from.to_string()));
        }
        Ok(())
    }

    pub fn connected(&self, id: &str, kind: EdgeKind, depth: Option<usize>) -> Result<BTreeSet<String>> {
        if !self.contains(id) {
            return Err(Error::not_found("artifact", id));
        }
        Ok(self.adjacency(kind).reachable(id, depth))
    }

    pub fn evaluation_scope(&self, start: &str) -> Result<BTreeSet<String>> {
        if !self.contains(start) {
            return Err(Error::not_found("artifact", start));
        }
        Ok(evaluation_scope(&evaluation_adjacency(self.edges()), start))
    }

    pub fn export(&self) -> String {
        export_lines(self.edges())
    }
}

/// Shared precondition check for link insertion. `adjacency` is only built
/// for acyclic kinds.
pub(crate) fn check_link(
    from: &str,
    to: &str,
    kind: EdgeKind,
    exists: impl Fn(&str) -> bool,
    adjacency: impl FnOnce() -> Adjacency,
) -> Result<()> {
    if from == to {
        return Err(Error::validation("an edge cannot connect an artifact to itself"));
    }
    for id in [from, to] {
        if !exists(id) {
            return Err(Error::not_found("artifact", id));
        }
    }
    if kind.is_acyclic() {
        if let Some(path) = cycle_through(&adjacency(), from, to) {
            return Err(Error::Cycle {
                kind: kind.to_string(),
                path,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(nodes: &[&str]) -> LineageGraph {
        let mut g = LineageGraph::new();
        for n in nodes {
            g.add_node(*n);
        }
        g
    }

    #[test]
    fn two_cycle_reports_path() {
        let mut g = graph(&["A", "B"]);
        g.add_link("A", "B", EdgeKind::BaseOf).unwrap();
        match g.add_link("B", "A", EdgeKind::BaseOf).unwrap_err() {
            Error::Cycle { path, .. } => assert_eq!(path, vec!["A", "B", "A"]),
            e => panic!("{e:?}"),
        }
        // other kinds are independent
        g.add_link("B", "A", EdgeKind::TrainedOn).unwrap();
    }

    #[test]
    fn compatible_is_symmetric() {
        let mut g = graph(&["S1", "S2"]);
        g.add_link("S1", "S2", EdgeKind::CompatibleWith).unwrap();
        let c = g.connected("S2", EdgeKind::CompatibleWith, None).unwrap();
        assert!(c.contains("S1"));
        assert!(matches!(
            g.add_link("S2", "S1", EdgeKind::CompatibleWith),
            Err(Error::AlreadyExists { .. })
        ));
        g.remove_link("S2", "S1", EdgeKind::CompatibleWith).unwrap();
        assert!(g.connected("S1", EdgeKind::CompatibleWith, None).unwrap().is_empty());
        assert!(g.connected("S2", EdgeKind::CompatibleWith, None).unwrap().is_empty());
    }

    #[test]
    fn chain_depths() {
        let mut g = graph(&["A", "B", "C", "X"]);
        g.add_link("A", "B", EdgeKind::BaseOf).unwrap();
        g.add_link("B", "C", EdgeKind::BaseOf).unwrap();
        let all = g.connected("A", EdgeKind::BaseOf, None).unwrap();
        assert_eq!(all.into_iter().collect::<Vec<_>>(), vec!["B", "C"]);
        let one = g.connected("A", EdgeKind::BaseOf, Some(1)).unwrap();
        assert_eq!(one.into_iter().collect::<Vec<_>>(), vec!["B"]);
        for k in EdgeKind::ALL {
            assert!(g.connected("X", k, None).unwrap().is_empty());
        }
        assert!(matches!(
            g.connected("nope", EdgeKind::BaseOf, None),
            Err(Error::NotFound { .. })
        ));
    }

    #[test]
    fn link_errors() {
        let mut g = graph(&["A", "B"]);
        assert!(matches!(g.add_link("A", "A", EdgeKind::BaseOf), Err(Error::Validation(_))));
        assert!(matches!(g.add_link("A", "Z", EdgeKind::BaseOf), Err(Error::NotFound { .. })));
        g.add_link("A", "B", EdgeKind::BaseOf).unwrap();
        assert!(matches!(g.add_link("A", "B", EdgeKind::BaseOf), Err(Error::AlreadyExists { .. })));
        assert!(matches!(g.remove_link("B", "A", EdgeKind::BaseOf), Err(Error::NotFound { .. })));
        g.remove_link("A", "B", EdgeKind::BaseOf).unwrap();
        assert!(g.connected("A", EdgeKind::BaseOf, None).unwrap().is_empty());
    }

    #[test]
    fn evaluation_scope_follows_newer_recordings() {
        let mut g = graph(&["T", "F", "C", "OLD"]);
        g.add_link("F", "T", EdgeKind::NewerRecordingOf).unwrap();
        g.add_link("T", "OLD", EdgeKind::NewerRecordingOf).unwrap();
        g.add_link("F", "C", EdgeKind::CompatibleWith).unwrap();
        let from_t: Vec<_> = g.evaluation_scope("T").unwrap().into_iter().collect();
        assert_eq!(from_t, vec!["C", "F", "T"]);
        let from_f: Vec<_> = g.evaluation_scope("F").unwrap().into_iter().collect();
        assert_eq!(from_f, vec!["C", "F"]);
    }

    #[test]
    fn export_format() {
        let mut g = graph(&["b", "a", "c"]);
        g.add_link("b", "a", EdgeKind::BaseOf).unwrap();
        g.add_link("a", "c", EdgeKind::CompatibleWith).unwrap();
        assert_eq!(
            g.export(),
            "a\tcompatible_with\tc\nb\tbase_of\ta\nc\tcompatible_with\ta\n"
        );
        assert_eq!(LineageGraph::new().export(), "");
    }

    #[test]
    fn kind_names_parse() {
        for k in EdgeKind::ALL {
            assert_eq!(k.as_str().parse::<EdgeKind>().unwrap(), k);
        }
        assert!("parent_of".parse::<EdgeKind>().is_err());
    }
}
