//! File formats: the line-oriented graph file with its JSON manifest, session
//! streams, metrics traces, trajectories and the flat key-value config.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::DecisionConfig;
use crate::geometry::Pose;
use crate::graph::{is_spd, Edge, EdgeKind, GraphError, PoseGraph, Role, Vertex, VertexId};
use crate::optimizer::Kernel;
use crate::pipeline::{DegreeScope, KeyframeEvent, Measurement, MetricsRow, PipelineConfig};
use crate::simulator::{NoiseModel, SessionStream};

pub const VERTEX_TAG: &str = "VERTEX_SE3:QUAT";
pub const EDGE_TAG: &str = "EDGE_SE3:QUAT";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: information matrix is not positive definite")]
    NonSpdInformation { line: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `[x, y, z, qx, qy, qz, qw]`.
pub fn pose_to_array(p: &Pose) -> [f64; 7] {
    let t = p.translation();
    let [qx, qy, qz, qw] = p.quat_xyzw();
    [t.x, t.y, t.z, qx, qy, qz, qw]
}

pub fn pose_from_array(a: &[f64; 7]) -> Option<Pose> {
    Pose::from_xyz_quat([a[0], a[1], a[2]], [a[3], a[4], a[5], a[6]])
}

/// Row-major upper triangle, 21 entries.
pub fn upper_triangle(m: &Matrix6<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(21);
    for r in 0..6 {
        for c in r..6 {
            out.push(m[(r, c)]);
        }
    }
    out
}

pub fn from_upper_triangle(v: &[f64]) -> Option<Matrix6<f64>> {
    if v.len() != 21 {
        return None;
    }
    let mut m = Matrix6::zeros();
    let mut k = 0;
    for r in 0..6 {
        for c in r..6 {
            m[(r, c)] = v[k];
            m[(c, r)] = v[k];
            k += 1;
        }
    }
    Some(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawVertex {
    pub id: u64,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawEdge {
    pub from: u64,
    pub to: u64,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

/// Contents of a graph file. An edge whose endpoints coincide is a prior.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphFile {
    pub vertices: Vec<RawVertex>,
    pub edges: Vec<RawEdge>,
}

fn numbers(tokens: &[&str], line: usize) -> Result<Vec<f64>, IoError> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| IoError::MalformedRecord {
                line,
                reason: format!("bad number {t:?}"),
            })
        })
        .collect()
}

fn flat_id(token: &str, line: usize) -> Result<u64, IoError> {
    token.parse().map_err(|_| IoError::MalformedRecord {
        line,
        reason: format!("bad id {token:?}"),
    })
}

fn pose_at(v: &[f64], line: usize) -> Result<Pose, IoError> {
    Pose::from_xyz_quat([v[0], v[1], v[2]], [v[3], v[4], v[5], v[6]]).ok_or_else(|| IoError::MalformedRecord {
        line,
        reason: "degenerate quaternion".into(),
    })
}

impl GraphFile {
    /// Parses the text form; returns the file and the number of skipped
    /// records of unknown type.
    pub fn parse(text: &str) -> Result<(Self, usize), IoError> {
        let mut out = GraphFile::default();
        let mut seen = BTreeSet::new();
        let mut skipped = 0;
        let mut edge_lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let tokens: Vec<&str> = raw.split_whitespace().collect();
            let Some(tag) = tokens.first() else {
                continue;
            };
            if tag.starts_with('#') {
                continue;
            }
            match *tag {
                VERTEX_TAG => {
                    if tokens.len() != 9 {
                        return Err(IoError::MalformedRecord {
                            line,
                            reason: format!("vertex needs 8 fields, found {}", tokens.len() - 1),
                        });
                    }
                    let id = flat_id(tokens[1], line)?;
                    if !seen.insert(id) {
                        return Err(IoError::MalformedRecord {
                            line,
                            reason: format!("duplicate vertex {id}"),
                        });
                    }
                    let v = numbers(&tokens[2..], line)?;
                    out.vertices.push(RawVertex {
                        id,
                        pose: pose_at(&v, line)?,
                    });
                }
                EDGE_TAG => {
                    if tokens.len() != 31 {
                        return Err(IoError::MalformedRecord {
                            line,
                            reason: format!("edge needs 30 fields, found {}", tokens.len() - 1),
                        });
                    }
                    let from = flat_id(tokens[1], line)?;
                    let to = flat_id(tokens[2], line)?;
                    let v = numbers(&tokens[3..], line)?;
                    let information = from_upper_triangle(&v[7..]).expect("21 entries");
                    if !is_spd(&information) {
                        return Err(IoError::NonSpdInformation { line });
                    }
                    out.edges.push(RawEdge {
                        from,
                        to,
                        measurement: pose_at(&v, line)?,
                        information,
                    });
                    edge_lines.push(line);
                }
                _ => skipped += 1,
            }
        }
        for (e, line) in out.edges.iter().zip(edge_lines) {
            for id in [e.from, e.to] {
                if !seen.contains(&id) {
                    return Err(IoError::MalformedRecord {
                        line,
                        reason: format!("edge references unknown vertex {id}"),
                    });
                }
            }
        }
        Ok((out, skipped))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut vertices: Vec<&RawVertex> = self.vertices.iter().collect();
        vertices.sort_by_key(|v| v.id);
        for v in vertices {
            let a = pose_to_array(&v.pose);
            write!(s, "{VERTEX_TAG} {}", v.id).unwrap();
            for x in a {
                write!(s, " {x}").unwrap();
            }
            s.push('\n');
        }
        for e in &self.edges {
            write!(s, "{EDGE_TAG} {} {}", e.from, e.to).unwrap();
            for x in pose_to_array(&e.measurement).into_iter().chain(upper_triangle(&e.information)) {
                write!(s, " {x}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Flattens a graph. Flat ids follow vertex id order; edges keep their
    /// id order.
    pub fn from_graph(graph: &PoseGraph, labels: &BTreeMap<u32, String>) -> (GraphFile, Manifest) {
        let flat: BTreeMap<VertexId, u64> = graph.vertex_ids().enumerate().map(|(i, v)| (v, i as u64)).collect();
        let mut file = GraphFile::default();
        let mut manifest = Manifest::default();
        let mut sessions = BTreeSet::new();
        for v in graph.vertices() {
            sessions.insert(v.id.session);
            file.vertices.push(RawVertex {
                id: flat[&v.id],
                pose: v.pose,
            });
            manifest.vertices.push(VertexEntry {
                id: flat[&v.id],
                session: v.id.session,
                index: v.id.index,
                role: v.role,
                timestamp: v.timestamp,
                truth: v.truth.as_ref().map(pose_to_array),
            });
        }
        for (_, e) in graph.edges() {
            file.edges.push(RawEdge {
                from: flat[&e.from],
                to: flat[&e.to],
                measurement: e.measurement,
                information: e.information,
            });
            manifest.edges.push(e.kind);
        }
        manifest.sessions = sessions
            .into_iter()
            .map(|id| SessionEntry {
                id,
                label: labels.get(&id).cloned().unwrap_or_else(|| format!("session-{id}")),
            })
            .collect();
        (file, manifest)
    }

    /// Rebuilds a pose graph. Without a manifest every vertex becomes a
    /// reference vertex of session 0 and edge kinds are inferred from ids.
    pub fn to_graph(&self, manifest: Option<&Manifest>) -> Result<PoseGraph, IoError> {
        let mut g = PoseGraph::new();
        let mut ids: BTreeMap<u64, VertexId> = BTreeMap::new();
        let kinds: Vec<EdgeKind> = match manifest {
            Some(m) => {
                m.check_covers(self)?;
                let entries: BTreeMap<u64, &VertexEntry> = m.vertices.iter().map(|v| (v.id, v)).collect();
                for v in &self.vertices {
                    let e = entries[&v.id];
                    let id = VertexId::new(e.session, e.index);
                    let mut vertex = Vertex::new(id, v.pose, e.timestamp, e.role);
                    if let Some(t) = &e.truth {
                        vertex.truth = Some(
                            pose_from_array(t).ok_or_else(|| IoError::Manifest(format!("bad truth for vertex {}", v.id)))?,
                        );
                    }
                    g.add_vertex(vertex)?;
                    ids.insert(v.id, id);
                }
                m.edges.clone()
            }
            None => {
                for v in &self.vertices {
                    let index = u32::try_from(v.id)
                        .map_err(|_| IoError::Manifest(format!("vertex id {} needs a manifest", v.id)))?;
                    let id = VertexId::new(0, index);
                    g.add_vertex(Vertex::new(id, v.pose, index as f64, Role::Reference))?;
                    ids.insert(v.id, id);
                }
                self.edges
                    .iter()
                    .map(|e| {
                        if e.from == e.to {
                            EdgeKind::Prior
                        } else if e.to == e.from + 1 {
                            EdgeKind::Intra
                        } else {
                            EdgeKind::Loop
                        }
                    })
                    .collect()
            }
        };
        for (e, kind) in self.edges.iter().zip(kinds) {
            let (from, to) = (ids[&e.from], ids[&e.to]);
            let edge = if kind == EdgeKind::Prior {
                if from != to {
                    return Err(IoError::Manifest(format!("prior edge {from} -> {to} is not unary")));
                }
                Edge::prior(from, e.measurement, e.information)
            } else {
                Edge::new(from, to, kind, e.measurement, e.information)
            };
            g.add_edge(edge)?;
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub id: u32,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexEntry {
    pub id: u64,
    pub session: u32,
    pub index: u32,
    pub role: Role,
    pub timestamp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<[f64; 7]>,
}

/// Sidecar describing what the graph file cannot: sessions, roles, edge
/// kinds and the run that produced it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sessions: Vec<SessionEntry>,
    pub vertices: Vec<VertexEntry>,
    pub edges: Vec<EdgeKind>,
    #[serde(default)]
    pub config: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn labels(&self) -> BTreeMap<u32, String> {
        self.sessions.iter().map(|s| (s.id, s.label.clone())).collect()
    }

    /// Fails unless the manifest describes exactly the file's vertices and
    /// edges.
    pub fn check_covers(&self, file: &GraphFile) -> Result<(), IoError> {
        let mine: BTreeSet<u64> = self.vertices.iter().map(|v| v.id).collect();
        let theirs: BTreeSet<u64> = file.vertices.iter().map(|v| v.id).collect();
        if mine.len() != self.vertices.len() {
            return Err(IoError::Manifest("duplicate vertex ids".into()));
        }
        if mine != theirs {
            return Err(IoError::Manifest("vertex table does not match the graph file".into()));
        }
        if self.edges.len() != file.edges.len() {
            return Err(IoError::Manifest(format!(
                "{} edge kinds for {} edges",
                self.edges.len(),
                file.edges.len()
            )));
        }
        Ok(())
    }
}

/// Reads a graph and, if given, its manifest.
pub fn load_graph(graph_text: &str, manifest_text: Option<&str>) -> Result<(PoseGraph, Option<Manifest>, usize), IoError> {
    let (file, skipped) = GraphFile::parse(graph_text)?;
    let manifest = manifest_text.map(Manifest::from_json).transpose()?;
    let graph = file.to_graph(manifest.as_ref())?;
    Ok((graph, manifest, skipped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub timestamp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_pose: Option<[f64; 7]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub odometry: Option<[f64; 7]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub information: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<[f64; 7]>,
}

/// A session's keyframe stream on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamFile {
    pub session: u32,
    pub label: String,
    pub events: Vec<EventRecord>,
}

impl StreamFile {
    pub fn from_stream(s: &SessionStream) -> Self {
        let events = s
            .events
            .iter()
            .map(|e| EventRecord {
                timestamp: e.timestamp,
                initial_pose: e.initial_pose.as_ref().map(pose_to_array),
                odometry: e.odometry.as_ref().map(|m| pose_to_array(&m.pose)),
                information: e.odometry.as_ref().map(|m| upper_triangle(&m.information)),
                truth: e.truth.as_ref().map(pose_to_array),
            })
            .collect();
        Self {
            session: s.session,
            label: s.label.clone(),
            events,
        }
    }

    pub fn to_stream(&self) -> Result<SessionStream, IoError> {
        let bad = |k: usize, what: &str| IoError::MalformedRecord {
            line: k + 1,
            reason: format!("event {k}: {what}"),
        };
        let mut events = Vec::with_capacity(self.events.len());
        for (k, r) in self.events.iter().enumerate() {
            let pose = |a: &[f64; 7]| pose_from_array(a).ok_or_else(|| bad(k, "degenerate quaternion"));
            let odometry = match (&r.odometry, &r.information) {
                (Some(p), Some(info)) => {
                    let information = from_upper_triangle(info).ok_or_else(|| bad(k, "information needs 21 entries"))?;
                    if !is_spd(&information) {
                        return Err(IoError::NonSpdInformation { line: k + 1 });
                    }
                    Some(Measurement {
                        pose: pose(p)?,
                        information,
                    })
                }
                (None, None) => None,
                _ => return Err(bad(k, "odometry and information go together")),
            };
            events.push(KeyframeEvent {
                session: self.session,
                timestamp: r.timestamp,
                odometry,
                initial_pose: r.initial_pose.as_ref().map(pose).transpose()?,
                truth: r.truth.as_ref().map(pose).transpose()?,
            });
        }
        Ok(SessionStream {
            session: self.session,
            label: self.label.clone(),
            events,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("stream serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// What a simulated session directory was generated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub scenario: String,
    pub seed: u64,
    pub noise: NoiseModel,
    pub sessions: Vec<String>,
}

impl ScenarioFile {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(text)?)
    }
}

pub const METRICS_HEADER: &str = "keyframe,session,mode,d_bar_trace,lambda2_eig,mu,sigma,event,wall_ms";

/// CSV trace. Timing is written as `NA` unless `timing` is set, so that
/// deterministic runs produce identical files.
pub fn metrics_csv(rows: &[MetricsRow], timing: bool) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let lambda2 = r.lambda2.map_or_else(|| "NA".to_string(), |v| format!("{v:.6e}"));
        let wall = if timing {
            format!("{:.6}", r.wall_ms)
        } else {
            "NA".to_string()
        };
        writeln!(
            s,
            "{},{},{},{:.6},{},{:.6},{:.6},{},{}",
            r.keyframe,
            r.session,
            r.mode.as_str(),
            r.d_bar,
            lambda2,
            r.mu,
            r.sigma,
            r.event.as_str(),
            wall
        )
        .unwrap();
    }
    s
}

/// Lines of `session:index x y z qx qy qz qw`.
pub fn trajectory_text(poses: &[(VertexId, Pose)]) -> String {
    let mut s = String::new();
    for (id, p) in poses {
        write!(s, "{id}").unwrap();
        for x in pose_to_array(p) {
            write!(s, " {x}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn parse_trajectory(text: &str) -> Result<Vec<(String, Pose)>, IoError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.is_empty() || tokens[0].starts_with('#') {
            continue;
        }
        if tokens.len() != 8 {
            return Err(IoError::MalformedRecord {
                line,
                reason: format!("trajectory line needs 8 fields, found {}", tokens.len()),
            });
        }
        if !seen.insert(tokens[0].to_string()) {
            return Err(IoError::MalformedRecord {
                line,
                reason: format!("duplicate id {}", tokens[0]),
            });
        }
        let v = numbers(&tokens[1..], line)?;
        out.push((tokens[0].to_string(), pose_at(&v, line)?));
    }
    Ok(out)
}

/// Pairs estimate and truth poses by id, in estimate order.
pub fn associate_trajectories(
    estimate: &[(String, Pose)],
    truth: &[(String, Pose)],
) -> Result<(Vec<Pose>, Vec<Pose>), IoError> {
    let lookup: BTreeMap<&str, &Pose> = truth.iter().map(|(k, p)| (k.as_str(), p)).collect();
    let mut e = Vec::with_capacity(estimate.len());
    let mut t = Vec::with_capacity(estimate.len());
    for (k, p) in estimate {
        let Some(q) = lookup.get(k.as_str()) else {
            return Err(IoError::Manifest(format!("id {k} has no ground truth")));
        };
        e.push(*p);
        t.push(**q);
    }
    Ok((e, t))
}

fn kernel_text(k: Kernel) -> String {
    match k {
        Kernel::None => "none".into(),
        Kernel::Huber(d) => format!("huber:{d}"),
    }
}

fn parse_kernel(s: &str) -> Result<Kernel, String> {
    if s == "none" {
        return Ok(Kernel::None);
    }
    match s.strip_prefix("huber:").map(str::parse::<f64>) {
        Some(Ok(d)) if d > 0.0 => Ok(Kernel::Huber(d)),
        _ => Err(format!("bad kernel {s:?} (expected none or huber:DELTA)")),
    }
}

/// Flat `key = value` form of a config, one key per line in a fixed order.
pub fn config_to_kv(c: &PipelineConfig) -> BTreeMap<String, String> {
    let d = &c.decision;
    let pairs: Vec<(&str, String)> = vec![
        ("window_size", c.window_size.to_string()),
        ("k_neighbors", c.k_neighbors.to_string()),
        ("retention_age", c.retention_age.to_string()),
        ("retention_distance", c.retention_distance.to_string()),
        ("association_radius", c.association_radius.to_string()),
        ("lc_radius", c.lc_radius.to_string()),
        ("lc_min_separation", c.lc_min_separation.to_string()),
        ("lc_gate", c.lc_gate.to_string()),
        ("lc_max_candidates", c.lc_max_candidates.to_string()),
        ("lc_interval", c.lc_interval.to_string()),
        ("loop_closure", c.loop_closure_enabled.to_string()),
        ("mapping", c.mapping_enabled.to_string()),
        ("degree_scope", c.degree_scope.to_string()),
        (
            "start_prior_sigma",
            c.start_prior_sigma.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        ),
        ("determinism", c.determinism.to_string()),
        ("decision.window", d.window.to_string()),
        ("decision.sigma_floor_rel", d.sigma_floor_rel.to_string()),
        ("decision.sigma_floor_abs", d.sigma_floor_abs.to_string()),
        ("decision.k2", d.k2.to_string()),
        ("decision.k4", d.k4.to_string()),
        ("decision.recovery_hysteresis", d.recovery_hysteresis.to_string()),
        ("decision.min_mapping_dwell", d.min_mapping_dwell.to_string()),
        ("kernel.intra", kernel_text(c.kernels.intra)),
        ("kernel.inter", kernel_text(c.kernels.inter)),
        ("kernel.loop", kernel_text(c.kernels.loop_closure)),
        ("kernel.prior", kernel_text(c.kernels.prior)),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn config_text(c: &PipelineConfig) -> String {
    config_to_kv(c).into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Parses `key = value` lines over the defaults. `#` starts a comment.
pub fn parse_config(text: &str) -> Result<PipelineConfig, IoError> {
    let mut c = PipelineConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(IoError::Config {
                line,
                reason: "expected key = value".into(),
            });
        };
        set_key(&mut c, key.trim(), value.trim()).map_err(|reason| IoError::Config { line, reason })?;
    }
    c.validate().map_err(|e| IoError::Config {
        line: 0,
        reason: e.to_string(),
    })?;
    Ok(c)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
}

fn set_key(c: &mut PipelineConfig, key: &str, v: &str) -> Result<(), String> {
    let d: &mut DecisionConfig = &mut c.decision;
    match key {
        "window_size" => c.window_size = num(key, v)?,
        "k_neighbors" => c.k_neighbors = num(key, v)?,
        "retention_age" => c.retention_age = num(key, v)?,
        "retention_distance" => c.retention_distance = num(key, v)?,
        "association_radius" => c.association_radius = num(key, v)?,
        "lc_radius" => c.lc_radius = num(key, v)?,
        "lc_min_separation" => c.lc_min_separation = num(key, v)?,
        "lc_gate" => c.lc_gate = num(key, v)?,
        "lc_max_candidates" => c.lc_max_candidates = num(key, v)?,
        "lc_interval" => c.lc_interval = num(key, v)?,
        "loop_closure" => c.loop_closure_enabled = num(key, v)?,
        "mapping" => c.mapping_enabled = num(key, v)?,
        "degree_scope" => c.degree_scope = v.parse::<DegreeScope>()?,
        "start_prior_sigma" => {
            let parts: Vec<f64> = v.split(',').map(|p| num(key, p.trim())).collect::<Result<_, _>>()?;
            c.start_prior_sigma = parts
                .try_into()
                .map_err(|_| format!("{key} needs 6 comma-separated values"))?;
        }
        "determinism" => c.determinism = num(key, v)?,
        "decision.window" => d.window = num(key, v)?,
        "decision.sigma_floor_rel" => d.sigma_floor_rel = num(key, v)?,
        "decision.sigma_floor_abs" => d.sigma_floor_abs = num(key, v)?,
        "decision.k2" => d.k2 = num(key, v)?,
        "decision.k4" => d.k4 = num(key, v)?,
        "decision.recovery_hysteresis" => d.recovery_hysteresis = num(key, v)?,
        "decision.min_mapping_dwell" => d.min_mapping_dwell = num(key, v)?,
        "kernel.intra" => c.kernels.intra = parse_kernel(v)?,
        "kernel.inter" => c.kernels.inter = parse_kernel(v)?,
        "kernel.loop" => c.kernels.loop_closure = parse_kernel(v)?,
        "kernel.prior" => c.kernels.prior = parse_kernel(v)?,
        other => return Err(format!("unknown key {other:?}")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_graph() -> PoseGraph {
        let mut g = PoseGraph::new();
        for i in 0..4 {
            let p = Pose::planar(i as f64, 0.5 * i as f64, 0.1, 0.3 * i as f64);
            g.add_vertex(Vertex::new(VertexId::new(0, i), p, i as f64, Role::Reference).with_truth(p))
                .unwrap();
        }
        let mut info = Matrix6::identity() * 50.0;
        info[(0, 1)] = 3.0;
        info[(1, 0)] = 3.0;
        for i in 0..3 {
            let m = Pose::planar(1.0, 0.5, 0.0, 0.3);
            g.add_edge(Edge::new(VertexId::new(0, i), VertexId::new(0, i + 1), EdgeKind::Intra, m, info))
                .unwrap();
        }
        g.add_edge(Edge::new(
            VertexId::new(0, 3),
            VertexId::new(0, 0),
            EdgeKind::Loop,
            Pose::planar(-3.0, -1.5, 0.0, -0.9),
            Matrix6::identity(),
        ))
        .unwrap();
        g.add_edge(Edge::prior(VertexId::new(0, 0), Pose::identity(), Matrix6::identity() * 1e6))
            .unwrap();
        g
    }

    #[test]
    fn vertex_record_parses() {
        let (f, skipped) = GraphFile::parse("VERTEX_SE3:QUAT 0 1 2 3 0 0 0 1\n").unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(f.vertices[0].pose, Pose::from_translation(1.0, 2.0, 3.0));
    }

    #[test]
    fn short_edge_is_malformed() {
        let mut text = String::from("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\n");
        text.push_str("EDGE_SE3:QUAT 0 1 1 0 0 0 0 0 1");
        for _ in 0..20 {
            text.push_str(" 1");
        }
        text.push('\n');
        assert!(matches!(
            GraphFile::parse(&text),
            Err(IoError::MalformedRecord { line: 3, .. })
        ));
    }

    #[test]
    fn non_spd_edge_is_rejected() {
        let mut text = String::from("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\n");
        text.push_str("EDGE_SE3:QUAT 0 1 1 0 0 0 0 0 1");
        for _ in 0..21 {
            text.push_str(" 0");
        }
        assert!(matches!(GraphFile::parse(&text), Err(IoError::NonSpdInformation { line: 3 })));
    }

    #[test]
    fn unknown_records_are_counted() {
        let text = "# comment\nFIX 0\nVERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_XY 1 2 3\n";
        let (f, skipped) = GraphFile::parse(text).unwrap();
        assert_eq!(skipped, 2);
        assert_eq!(f.vertices.len(), 1);
    }

    #[test]
    fn graph_and_manifest_round_trip() {
        let g = sample_graph();
        let (file, manifest) = GraphFile::from_graph(&g, &BTreeMap::from([(0, "A".to_string())]));
        let text = file.to_text();
        let json = manifest.to_json();
        let (back, m2, skipped) = load_graph(&text, Some(&json)).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(m2.unwrap(), manifest);
        assert_eq!(back.vertex_count(), g.vertex_count());
        for v in g.vertices() {
            let w = back.vertex(v.id).unwrap();
            let (a, d) = v.pose.error_to(&w.pose);
            assert!(a < 1e-12 && d < 1e-12);
            assert_eq!(w.role, v.role);
            assert_eq!(w.timestamp, v.timestamp);
        }
        let kinds: Vec<EdgeKind> = back.edges().map(|(_, e)| e.kind).collect();
        assert_eq!(kinds, vec![EdgeKind::Intra, EdgeKind::Intra, EdgeKind::Intra, EdgeKind::Loop, EdgeKind::Prior]);
        for ((_, a), (_, b)) in g.edges().zip(back.edges()) {
            assert!((a.information - b.information).abs().max() < 1e-12);
        }
        // serializing again gives the same bytes
        let (file2, manifest2) = GraphFile::from_graph(&back, &manifest.labels());
        assert_eq!(file2.to_text(), text);
        assert_eq!(manifest2.to_json(), json);
    }

    #[test]
    fn manifest_must_cover_the_file() {
        let (file, mut manifest) = GraphFile::from_graph(&sample_graph(), &BTreeMap::new());
        manifest.edges.pop();
        assert!(matches!(file.to_graph(Some(&manifest)), Err(IoError::Manifest(_))));
    }

    #[test]
    fn graph_without_manifest_infers_kinds() {
        let (file, _) = GraphFile::from_graph(&sample_graph(), &BTreeMap::new());
        let g = file.to_graph(None).unwrap();
        let kinds: Vec<EdgeKind> = g.edges().map(|(_, e)| e.kind).collect();
        assert_eq!(kinds, vec![EdgeKind::Intra, EdgeKind::Intra, EdgeKind::Intra, EdgeKind::Loop, EdgeKind::Prior]);
    }

    #[test]
    fn config_round_trip_and_errors() {
        let c = PipelineConfig {
            window_size: 7,
            degree_scope: DegreeScope::Joint,
            mapping_enabled: false,
            ..PipelineConfig::default()
        };
        let back = parse_config(&config_text(&c)).unwrap();
        assert_eq!(back, c);
        assert!(matches!(parse_config("bogus = 1"), Err(IoError::Config { line: 1, .. })));
        assert!(matches!(parse_config("\nwindow_size = x"), Err(IoError::Config { line: 2, .. })));
        assert!(parse_config("window_size = 1").is_err());
        assert_eq!(parse_config("# nothing\n\n").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn trajectory_round_trip() {
        let poses = vec![
            (VertexId::new(0, 0), Pose::planar(1.0, 2.0, 0.0, 0.5)),
            (VertexId::new(1, 4), Pose::planar(-1.0, 0.25, 3.0, -2.0)),
        ];
        let parsed = parse_trajectory(&trajectory_text(&poses)).unwrap();
        assert_eq!(parsed[1].0, "1:4");
        let (a, d) = parsed[1].1.error_to(&poses[1].1);
        assert!(a < 1e-12 && d < 1e-12);
        assert!(parse_trajectory("0:0 1 2 3").is_err());
    }
}
