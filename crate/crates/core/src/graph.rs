//! Pose-graph data model with session-scoped vertex ids and typed edges.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VertexId {
    pub session: u32,
    pub index: u32,
}

impl VertexId {
    pub const fn new(session: u32, index: u32) -> Self {
        Self { session, index }
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.session, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Active,
    Retained,
    Reference,
}

impl Role {
    fn may_become(self, next: Role) -> bool {
        matches!(
            (self, next),
            (Role::Active, Role::Retained) | (Role::Retained, Role::Reference)
        ) || self == next
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vertex {
    pub id: VertexId,
    pub pose: Pose,
    pub timestamp: f64,
    pub role: Role,
    /// Ground truth, for evaluation only.
    pub truth: Option<Pose>,
}

impl Vertex {
    pub fn new(id: VertexId, pose: Pose, timestamp: f64, role: Role) -> Self {
        Self {
            id,
            pose,
            timestamp,
            role,
            truth: None,
        }
    }

    pub fn with_truth(mut self, truth: Pose) -> Self {
        self.truth = Some(truth);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    Intra,
    Inter,
    Loop,
    Prior,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Intra => "INTRA",
            EdgeKind::Inter => "INTER",
            EdgeKind::Loop => "LOOP",
            EdgeKind::Prior => "PRIOR",
        }
    }
}

impl std::str::FromStr for EdgeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "INTRA" => Ok(EdgeKind::Intra),
            "INTER" => Ok(EdgeKind::Inter),
            "LOOP" => Ok(EdgeKind::Loop),
            "PRIOR" => Ok(EdgeKind::Prior),
            other => Err(format!("unknown edge kind {other:?}")),
        }
    }
}

/// A measurement between two vertices. PRIOR edges are unary (`from == to`)
/// and carry an absolute pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub from: VertexId,
    pub to: VertexId,
    pub kind: EdgeKind,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

impl Edge {
    pub fn new(
        from: VertexId,
        to: VertexId,
        kind: EdgeKind,
        measurement: Pose,
        information: Matrix6<f64>,
    ) -> Self {
        Self {
            from,
            to,
            kind,
            measurement,
            information,
        }
    }

    pub fn prior(id: VertexId, pose: Pose, information: Matrix6<f64>) -> Self {
        Self::new(id, id, EdgeKind::Prior, pose, information)
    }

    pub fn is_unary(&self) -> bool {
        self.kind == EdgeKind::Prior
    }

    pub fn other(&self, v: VertexId) -> VertexId {
        if self.from == v {
            self.to
        } else {
            self.from
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeId(pub u64);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("vertex {0} already exists")]
    DuplicateId(VertexId),
    #[error("edge endpoint {0} does not exist")]
    MissingEndpoint(VertexId),
    #[error("{kind:?} edge {from} -> {to} violates kind rules: {reason}")]
    KindViolation {
        kind: EdgeKind,
        from: VertexId,
        to: VertexId,
        reason: &'static str,
    },
    #[error("information matrix is not symmetric positive definite")]
    NonSpdInformation,
    #[error("unknown vertex {0}")]
    UnknownId(VertexId),
    #[error("unknown edge {0:?}")]
    UnknownEdge(EdgeId),
    #[error("vertex {id} cannot change role from {from:?} to {to:?}")]
    RoleTransition { id: VertexId, from: Role, to: Role },
}

/// Symmetric to 1e-9 (relative to the largest entry) with a positive smallest
/// eigenvalue.
pub fn is_spd(info: &Matrix6<f64>) -> bool {
    if info.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = info.amax().max(1.0);
    if (info - info.transpose()).amax() > 1e-9 * scale {
        return false;
    }
    let sym = 0.5 * (info + info.transpose());
    sym.symmetric_eigenvalues().min() > 0.0
}

#[derive(Clone, Debug, Default)]
pub struct PoseGraph {
    vertices: BTreeMap<VertexId, Vertex>,
    edges: BTreeMap<EdgeId, Edge>,
    adjacency: BTreeMap<VertexId, BTreeSet<EdgeId>>,
    next_edge: u64,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn contains(&self, id: VertexId) -> bool {
        self.vertices.contains_key(&id)
    }

    pub fn vertex(&self, id: VertexId) -> Option<&Vertex> {
        self.vertices.get(&id)
    }

    pub fn vertices(&self) -> impl Iterator<Item = &Vertex> {
        self.vertices.values()
    }

    pub fn vertex_ids(&self) -> impl Iterator<Item = VertexId> + '_ {
        self.vertices.keys().copied()
    }

    pub fn edge(&self, id: EdgeId) -> Option<&Edge> {
        self.edges.get(&id)
    }

    pub fn edges(&self) -> impl Iterator<Item = (EdgeId, &Edge)> {
        self.edges.iter().map(|(k, v)| (*k, v))
    }

    /// Edge ids incident to `id` (PRIOR edges included).
    pub fn incident(&self, id: VertexId) -> impl Iterator<Item = EdgeId> + '_ {
        self.adjacency
            .get(&id)
            .into_iter()
            .flat_map(|s| s.iter().copied())
    }

    /// Number of binary edges touching `id`.
    pub fn degree(&self, id: VertexId) -> usize {
        self.incident(id)
            .filter(|e| !self.edges[e].is_unary())
            .count()
    }

    /// Vertices joined to `id` by a binary edge, deduplicated and sorted.
    pub fn neighbors(&self, id: VertexId) -> Vec<VertexId> {
        let set: BTreeSet<VertexId> = self
            .incident(id)
            .map(|e| &self.edges[&e])
            .filter(|e| !e.is_unary())
            .map(|e| e.other(id))
            .collect();
        set.into_iter().collect()
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<VertexId> {
        self.vertices
            .values()
            .filter(|v| v.role == role)
            .map(|v| v.id)
            .collect()
    }

    pub fn add_vertex(&mut self, v: Vertex) -> Result<VertexId, GraphError> {
        if self.vertices.contains_key(&v.id) {
            return Err(GraphError::DuplicateId(v.id));
        }
        let id = v.id;
        self.vertices.insert(id, v);
        self.adjacency.insert(id, BTreeSet::new());
        Ok(id)
    }

    fn validate_edge(&self, e: &Edge) -> Result<(), GraphError> {
        let from = self
            .vertices
            .get(&e.from)
            .ok_or(GraphError::MissingEndpoint(e.from))?;
        let to = self
            .vertices
            .get(&e.to)
            .ok_or(GraphError::MissingEndpoint(e.to))?;
        let violation = |reason| GraphError::KindViolation {
            kind: e.kind,
            from: e.from,
            to: e.to,
            reason,
        };
        match e.kind {
            EdgeKind::Intra => {
                if e.from.session != e.to.session || e.to.index != e.from.index + 1 {
                    return Err(violation("must join consecutive vertices of one session"));
                }
            }
            EdgeKind::Inter => {
                if e.from == e.to {
                    return Err(violation("endpoints must differ"));
                }
                if to.role != Role::Reference {
                    return Err(violation("target must be a reference vertex"));
                }
            }
            EdgeKind::Loop => {
                if e.from == e.to {
                    return Err(violation("endpoints must differ"));
                }
                if from.role != Role::Reference || to.role != Role::Reference {
                    return Err(violation("both endpoints must be reference vertices"));
                }
            }
            EdgeKind::Prior => {
                if e.from != e.to {
                    return Err(violation("prior edges are unary"));
                }
            }
        }
        if !is_spd(&e.information) {
            return Err(GraphError::NonSpdInformation);
        }
        Ok(())
    }

    pub fn add_edge(&mut self, e: Edge) -> Result<EdgeId, GraphError> {
        self.validate_edge(&e)?;
        let id = EdgeId(self.next_edge);
        self.next_edge += 1;
        self.insert_edge_raw(id, e);
        Ok(id)
    }

    fn insert_edge_raw(&mut self, id: EdgeId, e: Edge) {
        self.adjacency.entry(e.from).or_default().insert(id);
        self.adjacency.entry(e.to).or_default().insert(id);
        self.edges.insert(id, e);
        self.next_edge = self.next_edge.max(id.0 + 1);
        self.debug_check();
    }

    pub fn remove_edge(&mut self, id: EdgeId) -> Result<Edge, GraphError> {
        let e = self.edges.remove(&id).ok_or(GraphError::UnknownEdge(id))?;
        for v in [e.from, e.to] {
            if let Some(s) = self.adjacency.get_mut(&v) {
                s.remove(&id);
            }
        }
        self.debug_check();
        Ok(e)
    }

    /// Removes a vertex together with every incident edge.
    pub fn remove_vertex(&mut self, id: VertexId) -> Result<Vertex, GraphError> {
        let v = self.vertices.remove(&id).ok_or(GraphError::UnknownId(id))?;
        let incident = self.adjacency.remove(&id).unwrap_or_default();
        for eid in incident {
            if let Some(e) = self.edges.remove(&eid) {
                let other = e.other(id);
                if let Some(s) = self.adjacency.get_mut(&other) {
                    s.remove(&eid);
                }
            }
        }
        self.debug_check();
        Ok(v)
    }

    pub fn set_role(&mut self, id: VertexId, role: Role) -> Result<(), GraphError> {
        let v = self.vertices.get_mut(&id).ok_or(GraphError::UnknownId(id))?;
        if !v.role.may_become(role) {
            return Err(GraphError::RoleTransition {
                id,
                from: v.role,
                to: role,
            });
        }
        v.role = role;
        Ok(())
    }

    pub fn set_pose(&mut self, id: VertexId, pose: Pose) -> Result<(), GraphError> {
        let v = self.vertices.get_mut(&id).ok_or(GraphError::UnknownId(id))?;
        v.pose = pose;
        Ok(())
    }

    pub fn poses(&self) -> BTreeMap<VertexId, Pose> {
        self.vertices.iter().map(|(k, v)| (*k, v.pose)).collect()
    }

    /// Copy with every ground-truth field cleared.
    pub fn without_truth(&self) -> PoseGraph {
        let mut g = self.clone();
        for v in g.vertices.values_mut() {
            v.truth = None;
        }
        g
    }

    /// Induced subgraph over `ids`, preserving edge ids.
    pub fn subgraph(&self, ids: &BTreeSet<VertexId>) -> Result<PoseGraph, GraphError> {
        let mut out = PoseGraph::new();
        for id in ids {
            let v = self.vertices.get(id).ok_or(GraphError::UnknownId(*id))?;
            out.vertices.insert(*id, v.clone());
            out.adjacency.insert(*id, BTreeSet::new());
        }
        for (eid, e) in &self.edges {
            if ids.contains(&e.from) && ids.contains(&e.to) {
                out.insert_edge_raw(*eid, e.clone());
            }
        }
        out.next_edge = self.next_edge;
        Ok(out)
    }

    /// Unweighted hop distance over binary edges; `None` when unreachable.
    pub fn graph_distance(&self, a: VertexId, b: VertexId) -> Result<Option<usize>, GraphError> {
        if !self.contains(a) {
            return Err(GraphError::UnknownId(a));
        }
        if !self.contains(b) {
            return Err(GraphError::UnknownId(b));
        }
        Ok(self.hop_distances(&[a]).get(&b).copied())
    }

    /// Multi-source BFS hop distances over binary edges.
    pub fn hop_distances(&self, sources: &[VertexId]) -> BTreeMap<VertexId, usize> {
        let mut dist = BTreeMap::new();
        let mut queue = VecDeque::new();
        for s in sources {
            if self.contains(*s) && !dist.contains_key(s) {
                dist.insert(*s, 0);
                queue.push_back(*s);
            }
        }
        while let Some(v) = queue.pop_front() {
            let d = dist[&v];
            for n in self.neighbors(v) {
                if let std::collections::btree_map::Entry::Vacant(slot) = dist.entry(n) {
                    slot.insert(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Connected components of the subgraph induced by `ids`, using only
    /// edges accepted by `keep`. Components are sorted by their smallest id.
    pub fn components<F>(&self, ids: &BTreeSet<VertexId>, keep: F) -> Vec<BTreeSet<VertexId>>
    where
        F: Fn(&Edge) -> bool,
    {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for start in ids {
            if seen.contains(start) {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut stack = vec![*start];
            seen.insert(*start);
            while let Some(v) = stack.pop() {
                comp.insert(v);
                for eid in self.incident(v) {
                    let e = &self.edges[&eid];
                    if e.is_unary() || !keep(e) {
                        continue;
                    }
                    let n = e.other(v);
                    if ids.contains(&n) && seen.insert(n) {
                        stack.push(n);
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    /// Rebuilds the adjacency index from the edge table.
    pub fn recomputed_adjacency(&self) -> BTreeMap<VertexId, BTreeSet<EdgeId>> {
        let mut adj: BTreeMap<VertexId, BTreeSet<EdgeId>> =
            self.vertices.keys().map(|k| (*k, BTreeSet::new())).collect();
        for (eid, e) in &self.edges {
            adj.entry(e.from).or_default().insert(*eid);
            adj.entry(e.to).or_default().insert(*eid);
        }
        adj
    }

    pub fn adjacency_consistent(&self) -> bool {
        self.recomputed_adjacency() == self.adjacency
            && self
                .edges
                .values()
                .all(|e| self.vertices.contains_key(&e.from) && self.vertices.contains_key(&e.to))
    }

    #[inline]
    fn debug_check(&self) {
        #[cfg(debug_assertions)]
        if self.vertices.len() < 64 {
            debug_assert!(self.adjacency_consistent());
        }
    }
}
