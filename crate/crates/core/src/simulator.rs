//! Deterministic worlds, noisy multi-session trajectories and an oracle
//! matcher standing in for scan registration.
//!
//! Every random draw derives from the world seed. Matcher draws are keyed by
//! the vertex pair, so the outcome of a query does not depend on the order in
//! which queries are made.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{Matrix6, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Twist};
use crate::graph::VertexId;
use crate::pipeline::{KeyframeEvent, Matcher, Measurement};

const SALT_ODOMETRY: u64 = 0x6f64_6f6d;
const SALT_INTER: u64 = 0x696e_7472;
const SALT_LOOP: u64 = 0x6c6f_6f70;
/// Half-width of the cube wild translations are drawn from, in meters.
const WILD_TRANSLATION: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid route: {0}")]
    InvalidRoute(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waypoint {
    pub name: String,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub waypoints: Vec<Waypoint>,
    links: BTreeSet<(usize, usize)>,
    pub visibility_radius: f64,
    pub seed: u64,
}

impl World {
    pub fn new(
        waypoints: Vec<Waypoint>,
        links: &[(&str, &str)],
        visibility_radius: f64,
        seed: u64,
    ) -> Result<Self, SimError> {
        if waypoints.is_empty() {
            return Err(SimError::InvalidWorld("no waypoints".into()));
        }
        if !(visibility_radius > 0.0) {
            return Err(SimError::InvalidWorld("visibility radius must be positive".into()));
        }
        let names: BTreeMap<&str, usize> = waypoints
            .iter()
            .enumerate()
            .map(|(i, w)| (w.name.as_str(), i))
            .collect();
        if names.len() != waypoints.len() {
            return Err(SimError::InvalidWorld("duplicate waypoint name".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in links {
            let (Some(&i), Some(&j)) = (names.get(a), names.get(b)) else {
                return Err(SimError::InvalidWorld(format!("link {a}-{b} names an unknown waypoint")));
            };
            set.insert((i.min(j), i.max(j)));
        }
        let world = Self {
            waypoints,
            links: set,
            visibility_radius,
            seed,
        };
        if !world.connected() {
            return Err(SimError::InvalidWorld("waypoint graph is disconnected".into()));
        }
        Ok(world)
    }

    fn connected(&self) -> bool {
        let n = self.waypoints.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(a, b) in &self.links {
                let next = if a == v { b } else if b == v { a } else { continue };
                if !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.waypoints.iter().position(|w| w.name == name)
    }

    pub fn linked(&self, a: usize, b: usize) -> bool {
        self.links.contains(&(a.min(b), a.max(b)))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn resolve(&self, route: &[String]) -> Result<Vec<usize>, SimError> {
        if route.is_empty() {
            return Err(SimError::InvalidRoute("empty route".into()));
        }
        let idx = route
            .iter()
            .map(|n| {
                self.index_of(n)
                    .ok_or_else(|| SimError::InvalidRoute(format!("unknown waypoint {n:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for w in idx.windows(2) {
            if !self.linked(w[0], w[1]) {
                return Err(SimError::InvalidRoute(format!(
                    "{} and {} are not linked",
                    self.waypoints[w[0]].name, self.waypoints[w[1]].name
                )));
            }
        }
        Ok(idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Per-step odometry standard deviations, translation then rotation.
    pub odom_sigma: [f64; 6],
    pub match_sigma: [f64; 6],
    pub match_dropout: f64,
    pub outlier_rate: f64,
    /// Whether outliers also hit reference matches or only loop candidates.
    pub outliers_on_inter: bool,
    /// When false, measurements are exact; information matrices still come
    /// from the sigmas.
    pub sample_noise: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            odom_sigma: [0.02, 0.02, 0.02, 0.002, 0.002, 0.002],
            match_sigma: [0.05, 0.05, 0.05, 0.005, 0.005, 0.005],
            match_dropout: 0.1,
            outlier_rate: 0.0,
            outliers_on_inter: true,
            sample_noise: true,
        }
    }
}

impl NoiseModel {
    /// Exact measurements, no dropout, no outliers.
    pub fn noiseless() -> Self {
        Self {
            match_dropout: 0.0,
            outlier_rate: 0.0,
            sample_noise: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.odom_sigma.iter().chain(&self.match_sigma).any(|s| !(*s > 0.0)) {
            return Err(SimError::InvalidNoise("sigmas must be positive".into()));
        }
        for (name, p) in [("match_dropout", self.match_dropout), ("outlier_rate", self.outlier_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidNoise(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn odom_information(&self) -> Matrix6<f64> {
        diag_information(&self.odom_sigma)
    }

    pub fn match_information(&self) -> Matrix6<f64> {
        diag_information(&self.match_sigma)
    }
}

fn diag_information(sigma: &[f64; 6]) -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::from_iterator(sigma.iter().map(|s| 1.0 / (s * s))))
}

fn sample_twist<R: Rng>(sigma: &[f64; 6], rng: &mut R) -> Twist {
    let v = Vector6::from_iterator(sigma.iter().map(|s| {
        Normal::new(0.0, *s).expect("sigma validated positive").sample(rng)
    }));
    Twist::from_vector(&v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub label: String,
    pub route: Vec<String>,
    /// Keyframe spacing along the route, in meters.
    pub spacing: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioScript {
    pub name: String,
    pub sessions: Vec<SessionSpec>,
}

/// One session's keyframe events in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionStream {
    pub session: u32,
    pub label: String,
    pub events: Vec<KeyframeEvent>,
}

impl SessionStream {
    pub fn truths(&self) -> Vec<Pose> {
        self.events.iter().filter_map(|e| e.truth).collect()
    }
}

/// 64-bit mixer used to derive independent seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for p in parts {
        let mut z = h ^ p.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn vertex_key(v: VertexId) -> u64 {
    ((v.session as u64) << 32) | v.index as u64
}

/// Ground-truth keyframe poses along a route: translation interpolated
/// linearly and rotation spherically between consecutive waypoints.
pub fn interpolate_route(world: &World, route: &[String], spacing: f64) -> Result<Vec<Pose>, SimError> {
    if !(spacing > 0.0) {
        return Err(SimError::InvalidRoute("spacing must be positive".into()));
    }
    let idx = world.resolve(route)?;
    let poses: Vec<Pose> = idx.iter().map(|i| world.waypoints[*i].pose).collect();
    let lengths: Vec<f64> = poses
        .windows(2)
        .map(|w| (w[1].translation() - w[0].translation()).norm())
        .collect();
    let total: f64 = lengths.iter().sum();
    let count = (total / spacing + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(count);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 0..count {
        let s = k as f64 * spacing;
        while seg < lengths.len() && s > seg_start + lengths[seg] + 1e-9 {
            seg_start += lengths[seg];
            seg += 1;
        }
        if seg >= lengths.len() {
            out.push(*poses.last().expect("nonempty"));
            continue;
        }
        let (a, b) = (&poses[seg], &poses[seg + 1]);
        let t = if lengths[seg] > 0.0 {
            ((s - seg_start) / lengths[seg]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let translation = a.translation() + (b.translation() - a.translation()) * t;
        let rotation = a
            .rotation()
            .try_slerp(b.rotation(), t, 1e-12)
            .unwrap_or(*a.rotation());
        out.push(Pose::new(rotation, translation));
    }
    Ok(out)
}

/// Noisy keyframe events for one session. The first event carries the known
/// starting pose; the rest carry odometry.
pub fn generate_session(
    world: &World,
    noise: &NoiseModel,
    spec: &SessionSpec,
    session: u32,
) -> Result<SessionStream, SimError> {
    noise.validate()?;
    let truth = interpolate_route(world, &spec.route, spec.spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[world.seed, session as u64, SALT_ODOMETRY]));
    let info = noise.odom_information();
    let mut events = Vec::with_capacity(truth.len());
    for (k, t) in truth.iter().enumerate() {
        let timestamp = k as f64;
        if k == 0 {
            events.push(KeyframeEvent::start(session, timestamp, *t).with_truth(*t));
            continue;
        }
        let relative = truth[k - 1].between(t);
        let measured = if noise.sample_noise {
            relative * Pose::exp(&sample_twist(&noise.odom_sigma, &mut rng))
        } else {
            relative
        };
        events.push(
            KeyframeEvent::step(
                session,
                timestamp,
                Measurement {
                    pose: measured,
                    information: info,
                },
            )
            .with_truth(*t),
        );
    }
    Ok(SessionStream {
        session,
        label: spec.label.clone(),
        events,
    })
}

fn random_rotation<R: Rng>(rng: &mut R) -> UnitQuaternion<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let q = nalgebra::Quaternion::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng));
        if q.norm() > 1e-6 {
            return UnitQuaternion::from_quaternion(q);
        }
    }
}

/// Simulated registration between two true poses.
pub fn oracle_match<R: Rng>(
    world: &World,
    noise: &NoiseModel,
    query: &Pose,
    target: &Pose,
    allow_outlier: bool,
    rng: &mut R,
) -> Option<Measurement> {
    let distance = (query.translation() - target.translation()).norm();
    if distance > world.visibility_radius {
        return None;
    }
    // fixed draw order keeps results a pure function of the seed
    let dropout: f64 = rng.random();
    let outlier: f64 = rng.random();
    if dropout < noise.match_dropout {
        return None;
    }
    let information = noise.match_information();
    if allow_outlier && outlier < noise.outlier_rate {
        let t = Vector3::new(
            rng.random_range(-WILD_TRANSLATION..WILD_TRANSLATION),
            rng.random_range(-WILD_TRANSLATION..WILD_TRANSLATION),
            rng.random_range(-WILD_TRANSLATION..WILD_TRANSLATION),
        );
        return Some(Measurement {
            pose: Pose::new(random_rotation(rng), t),
            information,
        });
    }
    let relative = query.between(target);
    let pose = if noise.sample_noise {
        relative * Pose::exp(&sample_twist(&noise.match_sigma, rng))
    } else {
        relative
    };
    Some(Measurement { pose, information })
}

/// Matcher backed by ground truth for every vertex it may be asked about.
#[derive(Clone, Debug)]
pub struct SimMatcher {
    pub world: World,
    pub noise: NoiseModel,
    truth: BTreeMap<VertexId, Pose>,
}

impl SimMatcher {
    pub fn new(world: World, noise: NoiseModel) -> Self {
        Self {
            world,
            noise,
            truth: BTreeMap::new(),
        }
    }

    pub fn add_stream(&mut self, stream: &SessionStream) {
        for (k, e) in stream.events.iter().enumerate() {
            if let Some(t) = e.truth {
                self.truth.insert(VertexId::new(stream.session, k as u32), t);
            }
        }
    }

    pub fn add_truth(&mut self, id: VertexId, pose: Pose) {
        self.truth.insert(id, pose);
    }

    pub fn truth(&self, id: VertexId) -> Option<&Pose> {
        self.truth.get(&id)
    }

    fn query(&self, a: VertexId, b: VertexId, salt: u64, allow_outlier: bool) -> Option<Measurement> {
        let (pa, pb) = (self.truth.get(&a)?, self.truth.get(&b)?);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.world.seed, salt, vertex_key(a), vertex_key(b)]));
        oracle_match(&self.world, &self.noise, pa, pb, allow_outlier, &mut rng)
    }
}

impl Matcher for SimMatcher {
    fn match_to_reference(&self, query: VertexId, reference: VertexId) -> Option<Measurement> {
        self.query(query, reference, SALT_INTER, self.noise.outliers_on_inter)
    }

    fn match_pair(&self, a: VertexId, b: VertexId) -> Option<Measurement> {
        self.query(a, b, SALT_LOOP, true)
    }
}

/// A world plus its sessions, generated.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub world: World,
    pub script: ScenarioScript,
    pub noise: NoiseModel,
    pub streams: Vec<SessionStream>,
}

impl Scenario {
    pub fn generate(world: World, script: ScenarioScript, noise: NoiseModel) -> Result<Self, SimError> {
        let streams = script
            .sessions
            .iter()
            .enumerate()
            .map(|(i, s)| generate_session(&world, &noise, s, i as u32))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            world,
            script,
            noise,
            streams,
        })
    }

    pub fn matcher(&self) -> SimMatcher {
        let mut m = SimMatcher::new(self.world.clone(), self.noise.clone());
        for s in &self.streams {
            m.add_stream(s);
        }
        m
    }

    /// Whether a true pose lies within visibility of any keyframe of the given
    /// sessions.
    pub fn covered_by(&self, pose: &Pose, sessions: &[u32]) -> bool {
        self.streams
            .iter()
            .filter(|s| sessions.contains(&s.session))
            .flat_map(|s| s.truths())
            .any(|t| (t.translation() - pose.translation()).norm() <= self.world.visibility_radius)
    }
}

pub const SCENARIOS: [&str; 4] = ["three_stage", "overlap_pair", "loop_enforcer", "full_overlap"];

fn planar(name: &str, x: f64, y: f64, yaw_deg: f64) -> Waypoint {
    Waypoint {
        name: name.to_string(),
        pose: Pose::planar(x, y, 0.0, yaw_deg.to_radians()),
    }
}

fn route(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn session(label: &str, names: &[&str]) -> SessionSpec {
    SessionSpec {
        label: label.to_string(),
        route: route(names),
        spacing: 1.0,
    }
}

pub fn build_scenario(name: &str, seed: u64) -> Result<(World, ScenarioScript), SimError> {
    let (world, sessions) = match name {
        // a square courtyard mapped by A (with a short overlap to close the
        // loop); B leaves it through one corridor, maps a wing, and comes back
        // through a second corridor
        "three_stage" => {
            let w = vec![
                planar("c0", 0.0, 0.0, 0.0),
                planar("c0b", 20.0, 0.0, 0.0),
                planar("c1", 40.0, 0.0, 90.0),
                planar("c2", 40.0, 40.0, 180.0),
                planar("c3", 0.0, 40.0, 270.0),
                planar("x1", 0.0, 30.0, 180.0),
                planar("w1", -35.0, 30.0, 180.0),
                planar("w2", -55.0, 30.0, 270.0),
                planar("w3", -55.0, 10.0, 0.0),
                planar("w4", -35.0, 10.0, 0.0),
                planar("x2", 0.0, 10.0, 90.0),
            ];
            let links = [
                ("c0", "c0b"),
                ("c0b", "c1"),
                ("c1", "c2"),
                ("c2", "c3"),
                ("c3", "x1"),
                ("x1", "x2"),
                ("x2", "c0"),
                ("x1", "w1"),
                ("w1", "w2"),
                ("w2", "w3"),
                ("w3", "w4"),
                ("w4", "x2"),
            ];
            let world = World::new(w, &links, 8.0, seed)?;
            // 2 m spacing keeps the 8 m visibility footprint to about four
            // keyframes, so coverage changes register within a few steps
            let mut a = session("A", &["c0", "c0b", "c1", "c2", "c3", "x1", "x2", "c0", "c0b"]);
            let mut b = session("B", &["c1", "c2", "c3", "x1", "w1", "w2", "w3", "w4", "x2", "x1", "c3", "c2"]);
            a.spacing = 2.0;
            b.spacing = 2.0;
            (world, vec![a, b])
        }
        // B follows the first half of A's corridor, then turns into new ground
        "overlap_pair" => {
            let w = vec![
                planar("p0", 0.0, 0.0, 0.0),
                planar("p1", 80.0, 0.0, 0.0),
                planar("p2", 140.0, 0.0, 0.0),
                planar("q1", 80.0, -70.0, 270.0),
            ];
            let links = [("p0", "p1"), ("p1", "p2"), ("p1", "q1")];
            let world = World::new(w, &links, 8.0, seed)?;
            (
                world,
                vec![session("A", &["p0", "p1", "p2"]), session("B", &["p0", "p1", "q1"])],
            )
        }
        // A maps an open U; B's new connector closes it into a loop
        "loop_enforcer" => {
            let w = vec![
                planar("u0", 0.0, 0.0, 0.0),
                planar("u1", 100.0, 0.0, 90.0),
                planar("u2", 100.0, 40.0, 180.0),
                planar("u3", 0.0, 40.0, 180.0),
                planar("b0", 90.0, 0.0, 180.0),
                planar("b1", 60.0, 40.0, 0.0),
            ];
            let links = [
                ("u0", "b0"),
                ("b0", "u1"),
                ("u1", "u2"),
                ("u2", "b1"),
                ("b1", "u3"),
                ("u0", "u3"),
            ];
            let world = World::new(w, &links, 8.0, seed)?;
            (
                world,
                vec![
                    session("A", &["u0", "b0", "u1", "u2", "b1", "u3"]),
                    session("B", &["b0", "u0", "u3", "b1"]),
                ],
            )
        }
        // a 16-gon with 8 m sides; A stops one keyframe short of closing it so
        // every keyframe sees the same neighborhood, and B repeats A exactly
        "full_overlap" => {
            let sides = 16;
            let side = 8.0;
            let radius = side / (2.0 * (PI / sides as f64).sin());
            let mut w = Vec::new();
            let mut names = Vec::new();
            for i in 0..sides {
                let th = 2.0 * PI * i as f64 / sides as f64;
                let name = format!("g{i}");
                w.push(planar(&name, radius * th.cos(), radius * th.sin(), (th + PI / 2.0).to_degrees()));
                names.push(name);
            }
            let (first, last) = (*w[0].pose.translation(), *w[sides - 1].pose.translation());
            let end = last + (first - last) * ((side - 1.0) / side);
            let heading = (first - last).y.atan2((first - last).x);
            w.push(planar("g_end", end.x, end.y, heading.to_degrees()));
            let mut links: Vec<(String, String)> =
                (0..sides - 1).map(|i| (names[i].clone(), names[i + 1].clone())).collect();
            links.push((names[sides - 1].clone(), "g_end".into()));
            let link_refs: Vec<(&str, &str)> = links.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            // visibility kept clear of the 8 m keyframe spacing multiples
            let world = World::new(w, &link_refs, 8.5, seed)?;
            let mut r: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            r.push("g_end");
            (world, vec![session("A", &r), session("B", &r)])
        }
        other => return Err(SimError::UnknownScenario(other.to_string())),
    };
    Ok((
        world,
        ScenarioScript {
            name: name.to_string(),
            sessions,
        },
    ))
}

/// Builds and generates a canned scenario.
pub fn scenario(name: &str, seed: u64, noise: NoiseModel) -> Result<Scenario, SimError> {
    let (world, script) = build_scenario(name, seed)?;
    Scenario::generate(world, script, noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_world(length: f64) -> World {
        World::new(
            vec![planar("a", 0.0, 0.0, 0.0), planar("b", length, 0.0, 0.0)],
            &[("a", "b")],
            8.0,
            7,
        )
        .unwrap()
    }

    #[test]
    fn keyframe_count_matches_length() {
        let w = line_world(100.0);
        let spec = session("s", &["a", "b"]);
        let s = generate_session(&w, &NoiseModel::default(), &spec, 0).unwrap();
        assert_eq!(s.events.len(), 101);
        let last = s.events.last().unwrap().truth.unwrap();
        assert!((last.translation() - Vector3::new(100.0, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn noiseless_odometry_is_exact() {
        let (world, script) = build_scenario("three_stage", 3).unwrap();
        let s = generate_session(&world, &NoiseModel::noiseless(), &script.sessions[1], 1).unwrap();
        for k in 1..s.events.len() {
            let truth = s.events[k - 1].truth.unwrap().between(&s.events[k].truth.unwrap());
            let odo = s.events[k].odometry.as_ref().unwrap().pose;
            let (a, d) = truth.error_to(&odo);
            assert!(a < 1e-12 && d < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let a = scenario("overlap_pair", 11, NoiseModel::default()).unwrap();
        let b = scenario("overlap_pair", 11, NoiseModel::default()).unwrap();
        assert_eq!(a.streams, b.streams);
        let c = scenario("overlap_pair", 12, NoiseModel::default()).unwrap();
        assert_ne!(a.streams, c.streams);
    }

    #[test]
    fn invalid_routes() {
        let w = line_world(10.0);
        let bad = SessionSpec { label: "x".into(), route: route(&["a", "zz"]), spacing: 1.0 };
        assert!(matches!(generate_session(&w, &NoiseModel::default(), &bad, 0), Err(SimError::InvalidRoute(_))));
        let (world, _) = build_scenario("three_stage", 0).unwrap();
        let unlinked = session("x", &["c0", "c2"]);
        assert!(matches!(generate_session(&world, &NoiseModel::default(), &unlinked, 0), Err(SimError::InvalidRoute(_))));
        assert!(matches!(build_scenario("nope", 0), Err(SimError::UnknownScenario(_))));
    }

    #[test]
    fn oracle_match_cases() {
        let w = line_world(100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let far = Pose::from_translation(100.0, 0.0, 0.0);
        assert!(oracle_match(&w, &NoiseModel::default(), &Pose::identity(), &far, true, &mut rng).is_none());

        let m = oracle_match(&w, &NoiseModel::noiseless(), &Pose::identity(), &Pose::identity(), true, &mut rng).unwrap();
        let (a, d) = m.pose.error_to(&Pose::identity());
        assert_eq!((a, d), (0.0, 0.0));

        let always = NoiseModel { match_dropout: 1.0, ..NoiseModel::default() };
        for _ in 0..100 {
            assert!(oracle_match(&w, &always, &Pose::identity(), &Pose::identity(), true, &mut rng).is_none());
        }
    }

    #[test]
    fn outliers_are_wild() {
        let w = line_world(10.0);
        let noise = NoiseModel { outlier_rate: 1.0, match_dropout: 0.0, ..NoiseModel::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut far = 0;
        for _ in 0..100 {
            let m = oracle_match(&w, &noise, &Pose::identity(), &Pose::identity(), true, &mut rng).unwrap();
            if m.pose.translation().norm() > 1.0 {
                far += 1;
            }
        }
        assert!(far > 90);
        let m = oracle_match(&w, &noise, &Pose::identity(), &Pose::identity(), false, &mut rng).unwrap();
        assert!(m.pose.translation().norm() < 1.0);
    }

    #[test]
    fn matcher_is_order_independent() {
        let sc = scenario("overlap_pair", 4, NoiseModel::default()).unwrap();
        let m = sc.matcher();
        let (a, b) = (VertexId::new(1, 3), VertexId::new(0, 4));
        let first = m.match_to_reference(a, b);
        let _ = m.match_to_reference(VertexId::new(1, 9), VertexId::new(0, 9));
        assert_eq!(first, m.match_to_reference(a, b));
    }

    #[test]
    fn matches_never_exceed_visibility() {
        let sc = scenario("three_stage", 2, NoiseModel::default()).unwrap();
        let m = sc.matcher();
        let b = &sc.streams[1];
        for (k, e) in b.events.iter().enumerate().step_by(7) {
            for j in (0..sc.streams[0].events.len()).step_by(3) {
                let r = VertexId::new(0, j as u32);
                let q = VertexId::new(1, k as u32);
                if m.match_to_reference(q, r).is_some() {
                    let d = (e.truth.unwrap().translation() - m.truth(r).unwrap().translation()).norm();
                    assert!(d <= sc.world.visibility_radius);
                }
            }
        }
    }

    #[test]
    fn full_overlap_neighborhoods_are_uniform() {
        let sc = scenario("full_overlap", 1, NoiseModel::noiseless()).unwrap();
        let a = sc.streams[0].truths();
        assert_eq!(a.len(), 128);
        for p in &a {
            let n = a
                .iter()
                .filter(|q| (q.translation() - p.translation()).norm() <= sc.world.visibility_radius)
                .count();
            assert_eq!(n, 17);
        }
    }

    #[test]
    fn scenarios_build() {
        for name in SCENARIOS {
            let sc = scenario(name, 0, NoiseModel::default()).unwrap();
            assert_eq!(sc.streams.len(), 2, "{name}");
            assert!(sc.streams.iter().all(|s| s.events.len() > 60), "{name}");
        }
    }
}
