//! Multi-session orchestration: keyframe ingestion, the active window,
//! association against the reference model, candidate merging, loop-closure
//! search and the mode switches driven by the decision module.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::Instant;

use nalgebra::{Matrix6, Vector3, Vector6};
use thiserror::Error;

use crate::decision::{
    DecisionConfig, DecisionError, DecisionEvent, DecisionState, LazyLambda2, Mode,
};
use crate::geometry::Pose;
use crate::graph::{Edge, EdgeId, EdgeKind, GraphError, PoseGraph, Role, Vertex, VertexId};
use crate::optimizer::{
    edge_chi2, Kernels, OptimizationProblem, OptimizationResult, Termination, GAUGE_PRIOR_WEIGHT,
};
use crate::spectral::{self, SpectralError, Weighting};

/// A relative-pose measurement with its information matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub pose: Pose,
    pub information: Matrix6<f64>,
}

/// Registration between keyframes. Implementations must be pure functions
/// of their arguments so that runs are reproducible.
pub trait Matcher: Send + Sync {
    /// Measurement of `reference` in the frame of `query`.
    fn match_to_reference(&self, query: VertexId, reference: VertexId) -> Option<Measurement>;
    /// Measurement of `b` in the frame of `a`, for loop closure.
    fn match_pair(&self, a: VertexId, b: VertexId) -> Option<Measurement>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeEvent {
    pub session: u32,
    pub timestamp: f64,
    /// Motion since the previous keyframe; absent on a session's first event.
    pub odometry: Option<Measurement>,
    /// Known coarse pose at session start.
    pub initial_pose: Option<Pose>,
    pub truth: Option<Pose>,
}

impl KeyframeEvent {
    pub fn start(session: u32, timestamp: f64, pose: Pose) -> Self {
        Self {
            session,
            timestamp,
            odometry: None,
            initial_pose: Some(pose),
            truth: None,
        }
    }

    pub fn step(session: u32, timestamp: f64, odometry: Measurement) -> Self {
        Self {
            session,
            timestamp,
            odometry: Some(odometry),
            initial_pose: None,
            truth: None,
        }
    }

    pub fn with_truth(mut self, truth: Pose) -> Self {
        self.truth = Some(truth);
        self
    }
}

/// Which vertices the average degree driving the decision is taken over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegreeScope {
    /// `trace(L) / m` over every active and reference vertex.
    Joint,
    /// Mean joint-graph weighted degree of the newest `k` active keyframes.
    Newest(usize),
}

impl fmt::Display for DegreeScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DegreeScope::Joint => f.write_str("joint"),
            DegreeScope::Newest(k) => write!(f, "newest:{k}"),
        }
    }
}

impl FromStr for DegreeScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "joint" {
            return Ok(DegreeScope::Joint);
        }
        if let Some(k) = s.strip_prefix("newest:") {
            return match k.parse::<usize>() {
                Ok(k) if k > 0 => Ok(DegreeScope::Newest(k)),
                _ => Err(format!("bad keyframe count in {s:?}")),
            };
        }
        Err(format!("unknown degree scope {s:?} (expected joint or newest:K)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub window_size: usize,
    pub k_neighbors: usize,
    pub retention_age: usize,
    pub retention_distance: usize,
    pub association_radius: f64,
    pub lc_radius: f64,
    /// Minimum index gap for same-session loop candidates; also keeps a
    /// keyframe from associating with its own recent past.
    pub lc_min_separation: u32,
    pub lc_gate: f64,
    pub lc_max_candidates: usize,
    /// Keyframes between loop-closure batches.
    pub lc_interval: usize,
    pub loop_closure_enabled: bool,
    /// When false the decision module is bypassed and every session after
    /// the first only localizes.
    pub mapping_enabled: bool,
    pub degree_scope: DegreeScope,
    pub start_prior_sigma: [f64; 6],
    /// Run loop closure inline between keyframes instead of on a worker.
    pub determinism: bool,
    pub decision: DecisionConfig,
    pub kernels: Kernels,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            k_neighbors: 2,
            retention_age: 100,
            retention_distance: 50,
            association_radius: 10.0,
            lc_radius: 15.0,
            lc_min_separation: 20,
            lc_gate: 12.59,
            lc_max_candidates: 5,
            lc_interval: 5,
            loop_closure_enabled: true,
            mapping_enabled: true,
            degree_scope: DegreeScope::Newest(1),
            start_prior_sigma: [0.1, 0.1, 0.1, 0.01, 0.01, 0.01],
            determinism: true,
            decision: DecisionConfig::default(),
            kernels: Kernels::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |why: &str| Err(PipelineError::InvalidConfig(why.to_string()));
        if self.window_size < 2 {
            return bad("window_size must be at least 2");
        }
        if !(self.association_radius > 0.0 && self.lc_radius > 0.0) {
            return bad("radii must be positive");
        }
        if self.retention_age <= self.window_size {
            return bad("retention_age must exceed window_size");
        }
        if !(self.lc_gate > 0.0) {
            return bad("lc_gate must be positive");
        }
        if self.lc_interval == 0 {
            return bad("lc_interval must be at least 1");
        }
        if self.start_prior_sigma.iter().any(|s| !(*s > 0.0)) {
            return bad("start prior sigmas must be positive");
        }
        if let DegreeScope::Newest(0) = self.degree_scope {
            return bad("degree scope needs at least one keyframe");
        }
        self.decision.validate()?;
        Ok(())
    }

    fn start_prior_information(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::from_iterator(
            self.start_prior_sigma.iter().map(|s| 1.0 / (s * s)),
        ))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error("optimizer could not fix the gauge: {0}")]
    GaugeFailure(String),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("invalid keyframe event: {0}")]
    InvalidEvent(String),
    #[error("invalid prior model: {0}")]
    InvalidPrior(String),
}

/// One line of the metrics trace.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub keyframe: u32,
    pub session: u32,
    pub mode: Mode,
    pub d_bar: f64,
    pub lambda2: Option<f64>,
    pub mu: f64,
    pub sigma: f64,
    pub event: DecisionEvent,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeReport {
    pub id: VertexId,
    pub mode: Mode,
    pub event: DecisionEvent,
    pub d_bar: f64,
    pub lambda2: Option<f64>,
    pub inter_edges: usize,
    pub merged: usize,
    pub loops_committed: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineStats {
    pub keyframes: u64,
    pub enters: u64,
    pub exits: u64,
    pub global_pgo_runs: u64,
    pub inter_edges: u64,
    pub merged: u64,
    pub pruned: u64,
    pub discarded: u64,
    pub lc_proposed: u64,
    pub lc_accepted: u64,
    pub lc_rejected: u64,
    /// `(chi2 before, chi2 after)` of every global optimization.
    pub pgo_chi2: Vec<(f64, f64)>,
}

/// Per-session summary, filled when a session ends.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionSummary {
    pub session: u32,
    pub keyframes: u32,
    pub reference_added: usize,
    pub bootstrap: bool,
}

/// Immutable input to a loop-closure search.
#[derive(Clone, Debug)]
pub struct LcSnapshot {
    pub poses: BTreeMap<VertexId, Pose>,
    pub queries: Vec<VertexId>,
    /// Unordered vertex pairs already joined by an edge.
    pub linked: BTreeSet<(VertexId, VertexId)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LcOutcome {
    pub accepted: Vec<Edge>,
    pub proposed: usize,
    pub rejected: usize,
}

fn pair(a: VertexId, b: VertexId) -> (VertexId, VertexId) {
    (a.min(b), a.max(b))
}

fn separated(a: VertexId, b: VertexId, min_gap: u32) -> bool {
    a.session != b.session || a.index.abs_diff(b.index) >= min_gap
}

/// Proposes loop edges for the queried vertices against the snapshot's
/// reference poses. A match is accepted when its whitened residual under the
/// snapshot estimates passes the chi-square gate.
pub fn loop_closure_search(snapshot: &LcSnapshot, matcher: &dyn Matcher, config: &PipelineConfig) -> LcOutcome {
    let mut out = LcOutcome::default();
    let mut seen = BTreeSet::new();
    for q in &snapshot.queries {
        let Some(pq) = snapshot.poses.get(q) else {
            continue;
        };
        let mut near: Vec<(f64, VertexId)> = snapshot
            .poses
            .iter()
            .filter(|(u, _)| *u != q && separated(*q, **u, config.lc_min_separation))
            .map(|(u, p)| ((p.translation() - pq.translation()).norm(), *u))
            .filter(|(d, u)| *d <= config.lc_radius && !snapshot.linked.contains(&pair(*q, *u)))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, u) in near.into_iter().take(config.lc_max_candidates) {
            if !seen.insert(pair(*q, u)) {
                continue;
            }
            let Some(m) = matcher.match_pair(*q, u) else {
                continue;
            };
            out.proposed += 1;
            let edge = Edge::new(*q, u, EdgeKind::Loop, m.pose, m.information);
            if edge_chi2(&edge, &snapshot.poses) <= config.lc_gate {
                out.accepted.push(edge);
            } else {
                out.rejected += 1;
            }
        }
    }
    out
}

/// Uniform grid over reference positions.
#[derive(Clone, Debug, Default)]
struct SpatialIndex {
    cell: f64,
    cells: BTreeMap<(i64, i64, i64), BTreeSet<VertexId>>,
    positions: BTreeMap<VertexId, Vector3<f64>>,
}

impl SpatialIndex {
    fn new(cell: f64) -> Self {
        Self {
            cell,
            ..Self::default()
        }
    }

    fn key(&self, p: &Vector3<f64>) -> (i64, i64, i64) {
        let f = |x: f64| (x / self.cell).floor() as i64;
        (f(p.x), f(p.y), f(p.z))
    }

    fn insert(&mut self, id: VertexId, p: Vector3<f64>) {
        self.remove(id);
        let k = self.key(&p);
        self.cells.entry(k).or_default().insert(id);
        self.positions.insert(id, p);
    }

    fn remove(&mut self, id: VertexId) {
        if let Some(old) = self.positions.remove(&id) {
            let k = self.key(&old);
            if let Some(c) = self.cells.get_mut(&k) {
                c.remove(&id);
                if c.is_empty() {
                    self.cells.remove(&k);
                }
            }
        }
    }

    /// Ids within `radius` of `p`, nearest first.
    fn within(&self, p: &Vector3<f64>, radius: f64) -> Vec<(f64, VertexId)> {
        let reach = (radius / self.cell).ceil() as i64;
        let (cx, cy, cz) = self.key(p);
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(c) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for id in c {
                            let d = (self.positions[id] - p).norm();
                            if d <= radius {
                                out.push((d, *id));
                            }
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }
}

struct LcWorker {
    tx: Option<mpsc::Sender<LcSnapshot>>,
    rx: mpsc::Receiver<LcOutcome>,
    handle: Option<JoinHandle<()>>,
    in_flight: usize,
}

impl LcWorker {
    fn spawn(matcher: Arc<dyn Matcher>, config: PipelineConfig) -> Self {
        let (tx, jobs) = mpsc::channel::<LcSnapshot>();
        let (results, rx) = mpsc::channel();
        let handle = std::thread::spawn(move || {
            for snap in jobs {
                if results.send(loop_closure_search(&snap, matcher.as_ref(), &config)).is_err() {
                    break;
                }
            }
        });
        Self {
            tx: Some(tx),
            rx,
            handle: Some(handle),
            in_flight: 0,
        }
    }
}

impl Drop for LcWorker {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[derive(Clone, Debug)]
struct SessionState {
    id: u32,
    next_index: u32,
    last: Option<VertexId>,
    last_timestamp: f64,
    start_prior: Option<EdgeId>,
    bootstrap: bool,
    reference_added: usize,
}

pub struct Pipeline {
    graph: PoseGraph,
    config: PipelineConfig,
    matcher: Arc<dyn Matcher>,
    decision: DecisionState,
    lambda2: LazyLambda2,
    window: VecDeque<VertexId>,
    retained: BTreeSet<VertexId>,
    pending: BTreeSet<VertexId>,
    lc_queue: Vec<VertexId>,
    index: SpatialIndex,
    session: Option<SessionState>,
    finished_sessions: BTreeSet<u32>,
    summaries: Vec<SessionSummary>,
    rows: Vec<MetricsRow>,
    estimates: BTreeMap<VertexId, Pose>,
    stats: PipelineStats,
    worker: Option<LcWorker>,
}

impl Pipeline {
    /// Starts from a prior model whose vertices must all be reference
    /// vertices. An empty prior makes the first session build the map.
    pub fn new(prior: PoseGraph, config: PipelineConfig, matcher: Arc<dyn Matcher>) -> Result<Self, PipelineError> {
        config.validate()?;
        if let Some(v) = prior.vertices().find(|v| v.role != Role::Reference) {
            return Err(PipelineError::InvalidPrior(format!("vertex {} is not a reference vertex", v.id)));
        }
        let mut index = SpatialIndex::new(config.association_radius.max(config.lc_radius));
        for v in prior.vertices() {
            index.insert(v.id, *v.pose.translation());
        }
        let decision = DecisionState::new(config.decision.clone())?;
        let finished_sessions = prior.vertices().map(|v| v.id.session).collect();
        let worker = if config.determinism || !config.loop_closure_enabled {
            None
        } else {
            Some(LcWorker::spawn(matcher.clone(), config.clone()))
        };
        Ok(Self {
            graph: prior,
            config,
            matcher,
            decision,
            lambda2: LazyLambda2::new(),
            window: VecDeque::new(),
            retained: BTreeSet::new(),
            pending: BTreeSet::new(),
            lc_queue: Vec::new(),
            index,
            session: None,
            finished_sessions,
            summaries: Vec::new(),
            rows: Vec::new(),
            estimates: BTreeMap::new(),
            stats: PipelineStats::default(),
            worker,
        })
    }

    pub fn graph(&self) -> &PoseGraph {
        &self.graph
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn stats(&self) -> &PipelineStats {
        &self.stats
    }

    pub fn summaries(&self) -> &[SessionSummary] {
        &self.summaries
    }

    pub fn decision(&self) -> &DecisionState {
        &self.decision
    }

    /// Number of Fiedler-value solves requested by the decision module.
    pub fn lambda2_solves(&self) -> u64 {
        self.lambda2.solve_count()
    }

    pub fn mode(&self) -> Mode {
        self.decision.mode()
    }

    pub fn window(&self) -> Vec<VertexId> {
        self.window.iter().copied().collect()
    }

    pub fn retained(&self) -> &BTreeSet<VertexId> {
        &self.retained
    }

    pub fn pending(&self) -> &BTreeSet<VertexId> {
        &self.pending
    }

    pub fn reference_count(&self) -> usize {
        self.graph.ids_with_role(Role::Reference).len()
    }

    /// Latest estimate of every keyframe ever ingested.
    pub fn estimates(&self) -> &BTreeMap<VertexId, Pose> {
        &self.estimates
    }

    pub fn trajectory(&self, session: u32) -> Vec<(VertexId, Pose)> {
        self.estimates
            .range(VertexId::new(session, 0)..=VertexId::new(session, u32::MAX))
            .map(|(k, v)| (*k, *v))
            .collect()
    }

    pub fn into_graph(mut self) -> PoseGraph {
        self.worker.take();
        std::mem::take(&mut self.graph)
    }

    fn joint_ids(&self) -> BTreeSet<VertexId> {
        joint_ids(&self.graph)
    }

    /// Induced subgraph over active and reference vertices without priors.
    pub fn joint_metric_graph(&self) -> PoseGraph {
        let mut g = self
            .graph
            .subgraph(&self.joint_ids())
            .expect("ids come from the graph");
        let priors: Vec<EdgeId> = g.edges().filter(|(_, e)| e.is_unary()).map(|(id, _)| id).collect();
        for id in priors {
            g.remove_edge(id).expect("edge present");
        }
        g
    }

    /// Processes one keyframe.
    pub fn ingest(&mut self, event: &KeyframeEvent) -> Result<KeyframeReport, PipelineError> {
        let started = Instant::now();
        let mut loops_committed = self.collect_worker(false)?;
        let new_session = self.session.as_ref().map(|s| s.id) != Some(event.session);
        if new_session {
            if self.session.is_some() {
                self.end_session()?;
            }
            if self.finished_sessions.contains(&event.session) {
                return Err(PipelineError::InvalidEvent(format!(
                    "session {} was already processed",
                    event.session
                )));
            }
        } else if let Some(s) = &self.session {
            if !(event.timestamp > s.last_timestamp) {
                return Err(PipelineError::InvalidEvent(format!(
                    "timestamp {} does not increase",
                    event.timestamp
                )));
            }
        }
        self.lambda2.invalidate();
        self.stats.keyframes += 1;

        let id = self.add_keyframe(event, new_session)?;
        let inter_edges = self.associate(id)?;

        self.window.push_back(id);
        let mut merged = 0;
        while self.window.len() > self.config.window_size {
            let old = self.window.pop_front().expect("window nonempty");
            merged += self.retire(old)?;
        }
        self.optimize_window()?;

        let d_bar = self.degree_metric();
        let bootstrap = self.session.as_ref().is_some_and(|s| s.bootstrap);
        let (mode, event_kind, lambda2) = if self.config.mapping_enabled || bootstrap {
            let graph = &self.graph;
            let lazy = &mut self.lambda2;
            let mut failure = None;
            let out = self.decision.step(d_bar, || {
                lazy.get_or_compute(|| match joint_lambda2(graph) {
                    Ok(v) => v,
                    Err(e) => {
                        failure = Some(e);
                        0.0
                    }
                })
            })?;
            if let Some(e) = failure {
                return Err(e.into());
            }
            (out.mode, out.event, out.lambda2)
        } else {
            (Mode::Localization, DecisionEvent::None, None)
        };
        merged += self.mode_actions(event_kind)?;

        if self.mode() == Mode::Localization {
            self.prune_retained()?;
        }
        if self.stats.keyframes % self.config.lc_interval as u64 == 0 {
            loops_committed += self.run_loop_closure()?;
        }

        let (mu, sigma) = match (mode, self.decision.frozen()) {
            (Mode::Mapping, Some(f)) => f,
            _ => (self.decision.mu(), self.decision.sigma()),
        };
        self.rows.push(MetricsRow {
            keyframe: id.index,
            session: id.session,
            mode,
            d_bar,
            lambda2,
            mu,
            sigma,
            event: event_kind,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        Ok(KeyframeReport {
            id,
            mode,
            event: event_kind,
            d_bar,
            lambda2,
            inter_edges,
            merged,
            loops_committed,
        })
    }

    fn add_keyframe(&mut self, event: &KeyframeEvent, new_session: bool) -> Result<VertexId, PipelineError> {
        if new_session {
            let Some(initial) = event.initial_pose else {
                return Err(PipelineError::InvalidEvent(
                    "first keyframe of a session needs an initial pose".into(),
                ));
            };
            let bootstrap = self.reference_count() == 0;
            let id = VertexId::new(event.session, 0);
            let mut v = Vertex::new(id, initial, event.timestamp, Role::Active);
            v.truth = event.truth;
            self.graph.add_vertex(v)?;
            let info = if bootstrap {
                Matrix6::identity() * GAUGE_PRIOR_WEIGHT
            } else {
                self.config.start_prior_information()
            };
            let prior = self.graph.add_edge(Edge::prior(id, initial, info))?;
            self.decision = if bootstrap {
                DecisionState::bootstrap_mapping(self.config.decision.clone())?
            } else {
                DecisionState::new(self.config.decision.clone())?
            };
            self.session = Some(SessionState {
                id: event.session,
                next_index: 1,
                last: Some(id),
                last_timestamp: event.timestamp,
                // the bootstrap anchor stays as the map's gauge
                start_prior: (!bootstrap).then_some(prior),
                bootstrap,
                reference_added: 0,
            });
            self.estimates.insert(id, initial);
            return Ok(id);
        }
        let Some(odom) = event.odometry else {
            return Err(PipelineError::InvalidEvent("keyframe without odometry".into()));
        };
        let s = self.session.as_mut().expect("session active");
        let prev = s.last.expect("session has a keyframe");
        let id = VertexId::new(s.id, s.next_index);
        s.next_index += 1;
        s.last = Some(id);
        s.last_timestamp = event.timestamp;
        let pose = self.graph.vertex(prev).expect("previous keyframe present").pose * odom.pose;
        let mut v = Vertex::new(id, pose, event.timestamp, Role::Active);
        v.truth = event.truth;
        self.graph.add_vertex(v)?;
        self.graph
            .add_edge(Edge::new(prev, id, EdgeKind::Intra, odom.pose, odom.information))?;
        self.estimates.insert(id, pose);
        Ok(id)
    }

    /// Links the new keyframe to nearby reference vertices and their graph
    /// neighbors through the matcher.
    fn associate(&mut self, id: VertexId) -> Result<usize, PipelineError> {
        let p = *self.graph.vertex(id).expect("just added").pose.translation();
        let eligible = |u: VertexId| separated(id, u, self.config.lc_min_separation);
        let hits: Vec<VertexId> = self
            .index
            .within(&p, self.config.association_radius)
            .into_iter()
            .map(|(_, u)| u)
            .filter(|u| eligible(*u))
            .collect();
        let mut targets: BTreeSet<VertexId> = BTreeSet::new();
        for h in hits {
            let mut frontier = vec![h];
            targets.insert(h);
            for _ in 0..self.config.k_neighbors {
                let mut next = Vec::new();
                for v in frontier {
                    for eid in self.graph.incident(v) {
                        let e = self.graph.edge(eid).expect("consistent");
                        if !matches!(e.kind, EdgeKind::Intra | EdgeKind::Loop) {
                            continue;
                        }
                        let u = e.other(v);
                        let is_ref = self.graph.vertex(u).is_some_and(|x| x.role == Role::Reference);
                        if is_ref && eligible(u) && targets.insert(u) {
                            next.push(u);
                        }
                    }
                }
                frontier = next;
            }
        }
        let mut added = 0;
        for t in targets {
            if let Some(m) = self.matcher.match_to_reference(id, t) {
                self.graph
                    .add_edge(Edge::new(id, t, EdgeKind::Inter, m.pose, m.information))?;
                added += 1;
            }
        }
        self.stats.inter_edges += added as u64;
        Ok(added)
    }

    fn covered(&self, v: VertexId) -> bool {
        self.graph.incident(v).any(|eid| {
            let e = self.graph.edge(eid).expect("consistent");
            e.kind == EdgeKind::Inter && e.from == v
        })
    }

    /// Whether a vertex leaving the active set belongs in the map: it saw no
    /// reference vertex, or it is the covered neighbor through which such a
    /// stretch attaches to the existing map.
    fn mergeable(&self, v: VertexId) -> bool {
        if self.session.as_ref().is_some_and(|s| s.bootstrap) {
            return true;
        }
        if !self.covered(v) {
            return true;
        }
        let neighbors = [
            v.index.checked_sub(1).map(|i| VertexId::new(v.session, i)),
            Some(VertexId::new(v.session, v.index + 1)),
        ];
        neighbors
            .into_iter()
            .flatten()
            .any(|u| self.graph.contains(u) && !self.covered(u))
    }

    /// Moves a vertex out of the active window.
    fn retire(&mut self, old: VertexId) -> Result<usize, PipelineError> {
        if let Some(s) = self.session.as_mut() {
            if old.index == 0 {
                if let Some(p) = s.start_prior.take() {
                    self.graph.remove_edge(p)?;
                }
            }
        }
        self.graph.set_role(old, Role::Retained)?;
        if self.mode() == Mode::Mapping && self.mergeable(old) {
            self.pending.insert(old);
            self.merge_candidates()
        } else {
            self.retained.insert(old);
            Ok(0)
        }
    }

    /// Promotes pending candidates whose component touches the reference.
    pub fn merge_candidates(&mut self) -> Result<usize, PipelineError> {
        if self.pending.is_empty() {
            return Ok(0);
        }
        let seed_map = self.reference_count() == 0;
        let components = self.graph.components(&self.pending, |e| !e.is_unary());
        let mut merged = 0;
        for comp in components {
            let attached = seed_map
                || comp.iter().any(|v| {
                    self.graph.incident(*v).any(|eid| {
                        let e = self.graph.edge(eid).expect("consistent");
                        !e.is_unary()
                            && self
                                .graph
                                .vertex(e.other(*v))
                                .is_some_and(|x| x.role == Role::Reference)
                    })
                });
            if !attached {
                continue;
            }
            for v in comp {
                self.graph.set_role(v, Role::Reference)?;
                self.pending.remove(&v);
                let p = *self.graph.vertex(v).expect("present").pose.translation();
                self.index.insert(v, p);
                self.lc_queue.push(v);
                merged += 1;
            }
        }
        if let Some(s) = self.session.as_mut() {
            s.reference_added += merged;
        }
        self.stats.merged += merged as u64;
        Ok(merged)
    }

    fn optimize_window(&mut self) -> Result<(), PipelineError> {
        let free: BTreeSet<VertexId> = self.window.iter().copied().collect();
        let edges: BTreeSet<EdgeId> = free.iter().flat_map(|v| self.graph.incident(*v)).collect();
        let problem = OptimizationProblem::new(&self.graph, free, edges, self.config.kernels);
        let result = problem.optimize();
        self.apply(&result, "active window")
    }

    fn apply(&mut self, result: &OptimizationResult, what: &str) -> Result<(), PipelineError> {
        if result.termination == Termination::GaugeFailure {
            return Err(PipelineError::GaugeFailure(what.to_string()));
        }
        result.apply(&mut self.graph);
        for (v, p) in &result.poses {
            self.estimates.insert(*v, *p);
        }
        Ok(())
    }

    /// Joint optimization over active and reference vertices.
    pub fn global_optimization(&mut self) -> Result<(), PipelineError> {
        let problem = OptimizationProblem::mapping(&self.graph, self.config.kernels, false);
        let result = problem.optimize();
        self.apply(&result, "global optimization")?;
        self.stats.global_pgo_runs += 1;
        self.stats.pgo_chi2.push((result.initial_chi2, result.final_chi2));
        for v in self.graph.ids_with_role(Role::Reference) {
            let p = *self.graph.vertex(v).expect("present").pose.translation();
            self.index.insert(v, p);
        }
        Ok(())
    }

    fn degree_metric(&self) -> f64 {
        match self.config.degree_scope {
            DegreeScope::Joint => joint_average_degree(&self.graph),
            DegreeScope::Newest(k) => {
                let newest: Vec<VertexId> = self.window.iter().rev().take(k).copied().collect();
                if newest.is_empty() {
                    return 0.0;
                }
                let total: f64 = newest.iter().map(|v| joint_weighted_degree(&self.graph, *v)).sum();
                total / newest.len() as f64
            }
        }
    }

    fn mode_actions(&mut self, event: DecisionEvent) -> Result<usize, PipelineError> {
        match event {
            DecisionEvent::EnterMappingDisconnect | DecisionEvent::EnterMappingDegraded => {
                self.stats.enters += 1;
                let batch: Vec<VertexId> = self.retained.iter().copied().filter(|v| self.mergeable(*v)).collect();
                for v in batch {
                    self.retained.remove(&v);
                    self.pending.insert(v);
                }
                self.merge_candidates()
            }
            DecisionEvent::ExitMapping => {
                self.stats.exits += 1;
                let merged = self.flush_window()?;
                self.run_loop_closure()?;
                self.global_optimization()?;
                Ok(merged)
            }
            DecisionEvent::None => Ok(0),
        }
    }

    /// Sends every mergeable active vertex to the candidate set and merges.
    fn flush_window(&mut self) -> Result<usize, PipelineError> {
        let flush: Vec<VertexId> = self.window.iter().copied().filter(|v| self.mergeable(*v)).collect();
        for v in &flush {
            if let Some(s) = self.session.as_mut() {
                if v.index == 0 {
                    if let Some(p) = s.start_prior.take() {
                        self.graph.remove_edge(p)?;
                    }
                }
            }
            self.graph.set_role(*v, Role::Retained)?;
            self.pending.insert(*v);
        }
        self.window.retain(|v| !flush.contains(v));
        self.merge_candidates()
    }

    /// Drops retained vertices that are too old or too far from the newest
    /// keyframe, in hops along non-reference edges.
    fn prune_retained(&mut self) -> Result<(), PipelineError> {
        let Some(newest) = self.window.back().copied() else {
            return Ok(());
        };
        if self.retained.is_empty() {
            return Ok(());
        }
        let local: BTreeSet<VertexId> = self.retained.iter().chain(self.window.iter()).copied().collect();
        let mut hops: BTreeMap<VertexId, usize> = BTreeMap::from([(newest, 0)]);
        let mut queue = VecDeque::from([newest]);
        while let Some(v) = queue.pop_front() {
            let d = hops[&v];
            if d >= self.config.retention_distance {
                continue;
            }
            for eid in self.graph.incident(v) {
                let e = self.graph.edge(eid).expect("consistent");
                if e.is_unary() {
                    continue;
                }
                let u = e.other(v);
                if local.contains(&u) && !hops.contains_key(&u) {
                    hops.insert(u, d + 1);
                    queue.push_back(u);
                }
            }
        }
        let doomed: Vec<VertexId> = self
            .retained
            .iter()
            .copied()
            .filter(|v| {
                let age = if v.session == newest.session {
                    (newest.index - v.index) as usize
                } else {
                    usize::MAX
                };
                age > self.config.retention_age || !hops.contains_key(v)
            })
            .collect();
        for v in doomed {
            self.retained.remove(&v);
            self.graph.remove_vertex(v)?;
            self.stats.pruned += 1;
        }
        Ok(())
    }

    fn snapshot(&mut self) -> Option<LcSnapshot> {
        if self.lc_queue.is_empty() {
            return None;
        }
        let queries = std::mem::take(&mut self.lc_queue);
        let poses: BTreeMap<VertexId, Pose> = self
            .graph
            .vertices()
            .filter(|v| v.role == Role::Reference)
            .map(|v| (v.id, v.pose))
            .collect();
        let mut linked = BTreeSet::new();
        for q in &queries {
            for eid in self.graph.incident(*q) {
                let e = self.graph.edge(eid).expect("consistent");
                if !e.is_unary() {
                    linked.insert(pair(e.from, e.to));
                }
            }
        }
        Some(LcSnapshot {
            poses,
            queries,
            linked,
        })
    }

    fn commit(&mut self, outcome: LcOutcome) -> Result<usize, PipelineError> {
        self.stats.lc_proposed += outcome.proposed as u64;
        self.stats.lc_rejected += outcome.rejected as u64;
        let mut committed = 0;
        for e in outcome.accepted {
            let both_ref = [e.from, e.to]
                .iter()
                .all(|v| self.graph.vertex(*v).is_some_and(|x| x.role == Role::Reference));
            if both_ref {
                self.graph.add_edge(e)?;
                committed += 1;
            }
        }
        self.stats.lc_accepted += committed as u64;
        self.global_optimization()?;
        Ok(committed)
    }

    /// Searches loop closures for recently merged vertices. Inline in
    /// determinism mode; otherwise hands a snapshot to the worker.
    fn run_loop_closure(&mut self) -> Result<usize, PipelineError> {
        if !self.config.loop_closure_enabled {
            self.lc_queue.clear();
            return Ok(0);
        }
        let Some(snap) = self.snapshot() else {
            return Ok(0);
        };
        if let Some(w) = self.worker.as_mut() {
            w.tx.as_ref().expect("worker alive").send(snap).expect("worker alive");
            w.in_flight += 1;
            return Ok(0);
        }
        let outcome = loop_closure_search(&snap, self.matcher.as_ref(), &self.config);
        self.commit(outcome)
    }

    /// Commits finished worker batches; with `wait`, blocks until none are in
    /// flight.
    fn collect_worker(&mut self, wait: bool) -> Result<usize, PipelineError> {
        let mut outcomes = Vec::new();
        if let Some(w) = self.worker.as_mut() {
            while w.in_flight > 0 {
                let next = if wait {
                    w.rx.recv().ok()
                } else {
                    w.rx.try_recv().ok()
                };
                let Some(o) = next else {
                    break;
                };
                w.in_flight -= 1;
                outcomes.push(o);
            }
        }
        let mut committed = 0;
        for o in outcomes {
            committed += self.commit(o)?;
        }
        Ok(committed)
    }

    /// Closes the current session. A session still mapping merges its window
    /// and runs a final joint optimization; whatever did not enter the map is
    /// removed.
    pub fn end_session(&mut self) -> Result<Option<SessionSummary>, PipelineError> {
        let Some(s) = self.session.clone() else {
            return Ok(None);
        };
        self.collect_worker(true)?;
        if self.mode() == Mode::Mapping {
            self.flush_window()?;
            self.run_loop_closure()?;
            self.collect_worker(true)?;
            self.global_optimization()?;
        }
        let leftovers: Vec<VertexId> = self
            .graph
            .vertices()
            .filter(|v| v.id.session == s.id && v.role != Role::Reference)
            .map(|v| v.id)
            .collect();
        for v in leftovers {
            self.graph.remove_vertex(v)?;
            if self.pending.remove(&v) {
                self.stats.discarded += 1;
            }
        }
        self.window.clear();
        self.retained.clear();
        self.pending.clear();
        self.lc_queue.clear();
        self.decision.reset_localization();
        let added = self.session.as_ref().map_or(0, |x| x.reference_added);
        let summary = SessionSummary {
            session: s.id,
            keyframes: s.next_index,
            reference_added: added,
            bootstrap: s.bootstrap,
        };
        self.summaries.push(summary.clone());
        self.finished_sessions.insert(s.id);
        self.session = None;
        Ok(Some(summary))
    }

    /// Ends the open session, if any, and waits for outstanding work.
    pub fn finish(&mut self) -> Result<(), PipelineError> {
        self.end_session()?;
        self.collect_worker(true)?;
        Ok(())
    }

    /// Feeds a whole session.
    pub fn run_session(&mut self, events: &[KeyframeEvent]) -> Result<SessionSummary, PipelineError> {
        for e in events {
            self.ingest(e)?;
        }
        Ok(self.end_session()?.expect("session was open"))
    }
}

fn joint_ids(graph: &PoseGraph) -> BTreeSet<VertexId> {
    graph
        .vertices()
        .filter(|v| matches!(v.role, Role::Active | Role::Reference))
        .map(|v| v.id)
        .collect()
}

fn in_joint(graph: &PoseGraph, v: VertexId) -> bool {
    graph
        .vertex(v)
        .is_some_and(|x| matches!(x.role, Role::Active | Role::Reference))
}

/// Trace-weighted degree of `v` counting only edges into the joint graph.
pub fn joint_weighted_degree(graph: &PoseGraph, v: VertexId) -> f64 {
    graph
        .incident(v)
        .filter_map(|eid| graph.edge(eid))
        .filter(|e| !e.is_unary() && in_joint(graph, e.other(v)))
        .map(|e| e.information.trace())
        .sum::<f64>()
        // an empty float sum is -0.0
        + 0.0
}

/// `trace(L) / m` of the trace-weighted joint graph.
pub fn joint_average_degree(graph: &PoseGraph) -> f64 {
    let ids = joint_ids(graph);
    if ids.is_empty() {
        return 0.0;
    }
    let twice: f64 = graph
        .edges()
        .filter(|(_, e)| !e.is_unary() && e.from != e.to && ids.contains(&e.from) && ids.contains(&e.to))
        .map(|(_, e)| 2.0 * e.information.trace())
        .sum();
    (twice + 0.0) / ids.len() as f64
}

/// Fiedler value of the min-eigenvalue-weighted joint graph; zero below two
/// vertices.
pub fn joint_lambda2(graph: &PoseGraph) -> Result<f64, SpectralError> {
    let ids = joint_ids(graph);
    if ids.len() < 2 {
        return Ok(0.0);
    }
    let l = spectral::build_laplacian(graph, &ids, Weighting::FimMinEig)?;
    spectral::lambda2(&l)
}
