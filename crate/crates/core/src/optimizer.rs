//! Levenberg-Marquardt pose-graph optimization on SE(3).
//!
//! Residuals follow `e = log(Z^-1 * T_from^-1 * T_to)` for binary edges and
//! `e = log(Z^-1 * T)` for priors. Free poses are updated by left
//! retraction `T <- exp(delta) * T`. The damped normal equations are solved
//! with a sparse Cholesky factorization.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix6, Vector6};

use crate::geometry::{se3_left_jacobian_inv, Pose, Twist};
use crate::graph::{Edge, EdgeId, EdgeKind, PoseGraph, Role, VertexId};
use crate::linalg::SymmetricBuilder;

pub const INITIAL_DAMPING: f64 = 1e-4;
pub const DAMPING_FLOOR: f64 = 1e-12;
const DAMPING_CEILING: f64 = 1e12;
pub const GAUGE_PRIOR_WEIGHT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    None,
    /// Huber with threshold on the whitened residual norm.
    Huber(f64),
}

impl Kernel {
    /// Robust cost and IRLS weight for a squared whitened residual `s`.
    pub fn evaluate(self, s: f64) -> (f64, f64) {
        match self {
            Kernel::None => (s, 1.0),
            Kernel::Huber(delta) => {
                let r = s.sqrt();
                if r <= delta {
                    (s, 1.0)
                } else {
                    (2.0 * delta * r - delta * delta, delta / r)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernels {
    pub intra: Kernel,
    pub inter: Kernel,
    pub loop_closure: Kernel,
    pub prior: Kernel,
}

impl Default for Kernels {
    fn default() -> Self {
        Self {
            intra: Kernel::None,
            inter: Kernel::None,
            loop_closure: Kernel::Huber(1.0),
            prior: Kernel::None,
        }
    }
}

impl Kernels {
    pub fn none() -> Self {
        Self {
            intra: Kernel::None,
            inter: Kernel::None,
            loop_closure: Kernel::None,
            prior: Kernel::None,
        }
    }

    pub fn for_kind(&self, kind: EdgeKind) -> Kernel {
        match kind {
            EdgeKind::Intra => self.intra,
            EdgeKind::Inter => self.inter,
            EdgeKind::Loop => self.loop_closure,
            EdgeKind::Prior => self.prior,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Convergence {
    pub max_iterations: usize,
    pub relative_cost_tolerance: f64,
    pub update_tolerance: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            relative_cost_tolerance: 1e-8,
            update_tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    GaugeFailure,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationResult {
    pub poses: BTreeMap<VertexId, Pose>,
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub iterations: usize,
    pub termination: Termination,
}

impl OptimizationResult {
    /// Writes the optimized free poses back into `graph`.
    pub fn apply(&self, graph: &mut PoseGraph) {
        for (id, pose) in &self.poses {
            // free vertices come from this graph
            let _ = graph.set_pose(*id, *pose);
        }
    }
}

/// One factor of the problem: a graph edge or a synthetic gauge prior.
#[derive(Clone, Debug)]
struct Factor {
    edge: Edge,
    kernel: Kernel,
}

/// A least-squares problem over a graph snapshot: which vertices move, which
/// factors count.
#[derive(Clone, Debug)]
pub struct OptimizationProblem<'g> {
    graph: &'g PoseGraph,
    free: BTreeSet<VertexId>,
    factors: Vec<Factor>,
    pub convergence: Convergence,
}

impl<'g> OptimizationProblem<'g> {
    /// General constructor: the factors are every listed edge with at least
    /// one free endpoint.
    pub fn new(
        graph: &'g PoseGraph,
        free: BTreeSet<VertexId>,
        edges: impl IntoIterator<Item = EdgeId>,
        kernels: Kernels,
    ) -> Self {
        let mut ids: Vec<EdgeId> = edges.into_iter().collect();
        ids.sort();
        ids.dedup();
        let factors = ids
            .into_iter()
            .filter_map(|id| graph.edge(id))
            .filter(|e| free.contains(&e.from) || free.contains(&e.to))
            .map(|e| Factor {
                edge: e.clone(),
                kernel: kernels.for_kind(e.kind),
            })
            .collect();
        Self {
            graph,
            free,
            factors,
            convergence: Convergence::default(),
        }
    }

    /// Localization mode: active vertices move, everything they are tied to
    /// stays fixed.
    pub fn localization(graph: &'g PoseGraph, kernels: Kernels) -> Self {
        let free: BTreeSet<VertexId> = graph.ids_with_role(Role::Active).into_iter().collect();
        Self::new(graph, free, graph.edges().map(|(id, _)| id), kernels)
    }

    /// Mapping mode: active and reference vertices move jointly. The lowest
    /// reference vertex is anchored by a stiff prior at its current estimate.
    /// With `fix_reference` the reference set is held fixed instead, which
    /// reduces to [`OptimizationProblem::localization`].
    pub fn mapping(graph: &'g PoseGraph, kernels: Kernels, fix_reference: bool) -> Self {
        let mut free: BTreeSet<VertexId> = graph.ids_with_role(Role::Active).into_iter().collect();
        let reference = graph.ids_with_role(Role::Reference);
        if !fix_reference {
            free.extend(reference.iter().copied());
        }
        let mut problem = Self::new(graph, free, graph.edges().map(|(id, _)| id), kernels);
        if let Some(anchor) = reference.first() {
            problem.add_gauge_prior(*anchor);
        }
        problem
    }

    /// Anchors `id` at its current estimate with information
    /// `GAUGE_PRIOR_WEIGHT * I`. No-op unless `id` is free.
    pub fn add_gauge_prior(&mut self, id: VertexId) {
        if !self.free.contains(&id) {
            return;
        }
        let Some(v) = self.graph.vertex(id) else {
            return;
        };
        self.factors.push(Factor {
            edge: Edge::prior(id, v.pose, Matrix6::identity() * GAUGE_PRIOR_WEIGHT),
            kernel: Kernel::None,
        });
    }

    pub fn graph(&self) -> &PoseGraph {
        self.graph
    }

    pub fn free(&self) -> &BTreeSet<VertexId> {
        &self.free
    }

    /// Vertices touched by a factor but not free.
    pub fn fixed(&self) -> BTreeSet<VertexId> {
        self.factors
            .iter()
            .flat_map(|f| [f.edge.from, f.edge.to])
            .filter(|v| !self.free.contains(v))
            .collect()
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    /// Every free component must touch a fixed vertex or carry a prior.
    pub fn gauge_ok(&self) -> bool {
        let mut parent: BTreeMap<VertexId, VertexId> =
            self.free.iter().map(|v| (*v, *v)).collect();
        fn find(p: &mut BTreeMap<VertexId, VertexId>, v: VertexId) -> VertexId {
            let mut root = v;
            while p[&root] != root {
                root = p[&root];
            }
            let mut cur = v;
            while p[&cur] != root {
                let next = p[&cur];
                p.insert(cur, root);
                cur = next;
            }
            root
        }
        let mut anchored_members = Vec::new();
        for f in &self.factors {
            let e = &f.edge;
            let a_free = self.free.contains(&e.from);
            let b_free = self.free.contains(&e.to);
            if e.is_unary() || a_free != b_free {
                anchored_members.push(if a_free { e.from } else { e.to });
            } else if a_free && b_free {
                let ra = find(&mut parent, e.from);
                let rb = find(&mut parent, e.to);
                if ra != rb {
                    parent.insert(ra.max(rb), ra.min(rb));
                }
            }
        }
        let anchored: BTreeSet<VertexId> = anchored_members
            .into_iter()
            .map(|v| find(&mut parent, v))
            .collect();
        let free: Vec<VertexId> = self.free.iter().copied().collect();
        free.into_iter().all(|v| anchored.contains(&find(&mut parent, v)))
    }

    fn initial_poses(&self) -> BTreeMap<VertexId, Pose> {
        let mut poses = BTreeMap::new();
        for f in &self.factors {
            for v in [f.edge.from, f.edge.to] {
                if let Some(vx) = self.graph.vertex(v) {
                    poses.insert(v, vx.pose);
                }
            }
        }
        for v in &self.free {
            if let Some(vx) = self.graph.vertex(*v) {
                poses.insert(*v, vx.pose);
            }
        }
        poses
    }

    /// Robust cost at the graph's current estimates.
    pub fn chi_squared(&self) -> f64 {
        self.cost(&self.initial_poses())
    }

    fn cost(&self, poses: &BTreeMap<VertexId, Pose>) -> f64 {
        self.factors
            .iter()
            .map(|f| {
                let e = residual(&f.edge, poses).to_vector();
                f.kernel.evaluate(e.dot(&(f.edge.information * e))).0
            })
            .sum()
    }

    pub fn optimize(&self) -> OptimizationResult {
        let mut poses = self.initial_poses();
        let initial = self.cost(&poses);
        let free_poses = |poses: &BTreeMap<VertexId, Pose>| {
            self.free
                .iter()
                .filter_map(|v| poses.get(v).map(|p| (*v, *p)))
                .collect::<BTreeMap<_, _>>()
        };
        if self.free.is_empty() {
            return OptimizationResult {
                poses: BTreeMap::new(),
                initial_chi2: initial,
                final_chi2: initial,
                iterations: 0,
                termination: Termination::Converged,
            };
        }
        if !self.gauge_ok() {
            return OptimizationResult {
                poses: free_poses(&poses),
                initial_chi2: initial,
                final_chi2: initial,
                iterations: 0,
                termination: Termination::GaugeFailure,
            };
        }

        let index: BTreeMap<VertexId, usize> =
            self.free.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let dim = 6 * index.len();
        let mut cost = initial;
        let mut lambda = INITIAL_DAMPING;
        let mut iterations = 0;
        let mut termination = Termination::MaxIterations;

        'outer: while iterations < self.convergence.max_iterations {
            if cost == 0.0 {
                termination = Termination::Converged;
                break;
            }
            let (blocks, gradient) = self.normal_equations(&poses, &index);
            iterations += 1;
            loop {
                let Some(step) = solve_damped(&blocks, &gradient, dim, lambda) else {
                    lambda *= 10.0;
                    if lambda > DAMPING_CEILING {
                        termination = Termination::GaugeFailure;
                        break 'outer;
                    }
                    continue;
                };
                let mut candidate = poses.clone();
                for (v, i) in &index {
                    let d = Vector6::from_column_slice(&step[6 * i..6 * i + 6]);
                    let p = candidate.get_mut(v).expect("free pose present");
                    *p = p.retract(&Twist::from_vector(&d));
                }
                let new_cost = self.cost(&candidate);
                if new_cost < cost {
                    let step_norm = step.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let rel = (cost - new_cost) / cost;
                    poses = candidate;
                    cost = new_cost;
                    lambda = (lambda * 0.5).max(DAMPING_FLOOR);
                    if rel < self.convergence.relative_cost_tolerance
                        || step_norm < self.convergence.update_tolerance
                    {
                        termination = Termination::Converged;
                        break 'outer;
                    }
                    break;
                }
                lambda *= 10.0;
                if lambda > DAMPING_CEILING {
                    // no descent direction left
                    termination = Termination::Converged;
                    break 'outer;
                }
            }
        }

        OptimizationResult {
            poses: free_poses(&poses),
            initial_chi2: initial,
            final_chi2: cost,
            iterations,
            termination,
        }
    }

    fn normal_equations(
        &self,
        poses: &BTreeMap<VertexId, Pose>,
        index: &BTreeMap<VertexId, usize>,
    ) -> (BTreeMap<(usize, usize), Matrix6<f64>>, Vec<f64>) {
        let mut blocks: BTreeMap<(usize, usize), Matrix6<f64>> = BTreeMap::new();
        let mut gradient = vec![0.0; 6 * index.len()];
        for f in &self.factors {
            let lin = linearize(&f.edge, poses);
            let s = lin.residual.dot(&(f.edge.information * lin.residual));
            let (_, w) = f.kernel.evaluate(s);
            let omega = f.edge.information * w;
            let mut parts: Vec<(usize, Matrix6<f64>)> = Vec::with_capacity(2);
            if let Some(i) = index.get(&f.edge.to) {
                parts.push((*i, lin.jac_to));
            }
            if let (Some(i), Some(j)) = (index.get(&f.edge.from), lin.jac_from) {
                parts.push((*i, j));
            }
            for (a, ja) in &parts {
                let g = ja.transpose() * omega * lin.residual;
                for k in 0..6 {
                    gradient[6 * a + k] += g[k];
                }
                for (b, jb) in &parts {
                    if a >= b {
                        let h = ja.transpose() * omega * jb;
                        *blocks.entry((*a, *b)).or_insert_with(Matrix6::zeros) += h;
                    }
                }
            }
        }
        (blocks, gradient)
    }

    /// Largest relative deviation between analytic Jacobians and central
    /// finite differences with step `epsilon`, over every factor and both
    /// endpoints.
    pub fn jacobian_check(&self, epsilon: f64) -> f64 {
        let poses = self.initial_poses();
        let mut worst: f64 = 0.0;
        for f in &self.factors {
            let lin = linearize(&f.edge, &poses);
            let mut targets = vec![(f.edge.to, lin.jac_to)];
            if let Some(j) = lin.jac_from {
                targets.push((f.edge.from, j));
            }
            for (v, analytic) in targets {
                let mut numeric = Matrix6::zeros();
                for k in 0..6 {
                    let mut d = Vector6::zeros();
                    d[k] = epsilon;
                    let mut plus = poses.clone();
                    plus.insert(v, poses[&v].retract(&Twist::from_vector(&d)));
                    d[k] = -epsilon;
                    let mut minus = poses.clone();
                    minus.insert(v, poses[&v].retract(&Twist::from_vector(&d)));
                    let col = (residual(&f.edge, &plus).to_vector()
                        - residual(&f.edge, &minus).to_vector())
                        / (2.0 * epsilon);
                    numeric.set_column(k, &col);
                }
                let err = (analytic - numeric).norm() / numeric.norm().max(1.0);
                worst = worst.max(err);
            }
        }
        worst
    }
}

fn solve_damped(
    blocks: &BTreeMap<(usize, usize), Matrix6<f64>>,
    gradient: &[f64],
    dim: usize,
    lambda: f64,
) -> Option<Vec<f64>> {
    let mut builder = SymmetricBuilder::new(dim);
    for ((a, b), h) in blocks {
        for r in 0..6 {
            for c in 0..6 {
                let (row, col) = (6 * a + r, 6 * b + c);
                if row < col {
                    continue;
                }
                let mut v = h[(r, c)];
                if row == col {
                    v += lambda;
                }
                builder.add(row, col, v);
            }
        }
    }
    let factor = builder.factor()?;
    let rhs: Vec<f64> = gradient.iter().map(|g| -g).collect();
    let x = factor.solve(&rhs);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Residual of one edge under `poses`.
pub fn residual(edge: &Edge, poses: &BTreeMap<VertexId, Pose>) -> Twist {
    let z_inv = edge.measurement.inverse();
    if edge.is_unary() {
        z_inv.compose(&poses[&edge.from]).log()
    } else {
        let from = &poses[&edge.from];
        let to = &poses[&edge.to];
        z_inv.compose(&from.inverse()).compose(to).log()
    }
}

struct Linearization {
    residual: Vector6<f64>,
    jac_from: Option<Matrix6<f64>>,
    jac_to: Matrix6<f64>,
}

fn linearize(edge: &Edge, poses: &BTreeMap<VertexId, Pose>) -> Linearization {
    let e = residual(edge, poses);
    let jl_inv = se3_left_jacobian_inv(&e);
    if edge.is_unary() {
        let jac = jl_inv * edge.measurement.inverse().adjoint();
        Linearization {
            residual: e.to_vector(),
            jac_from: None,
            jac_to: jac,
        }
    } else {
        let from_z = poses[&edge.from].compose(&edge.measurement);
        let jac_to = jl_inv * from_z.inverse().adjoint();
        Linearization {
            residual: e.to_vector(),
            jac_from: Some(-jac_to),
            jac_to,
        }
    }
}

/// Per-edge straightforward chi-squared with no kernel, for cross-checks.
pub fn edge_chi2(edge: &Edge, poses: &BTreeMap<VertexId, Pose>) -> f64 {
    let e = residual(edge, poses).to_vector();
    e.dot(&(edge.information * e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Vertex;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vid(s: u32, i: u32) -> VertexId {
        VertexId::new(s, i)
    }

    fn random_pose(rng: &mut ChaCha8Rng, trans: f64, angle: f64) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        Pose::exp(&Twist::new(
            Vector3::new(
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
            ),
            axis * rng.random_range(0.0..angle),
        ))
    }

    #[test]
    fn residual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_pose(&mut rng, 3.0, 2.0);
        let z = random_pose(&mut rng, 3.0, 2.0);
        let mut poses = BTreeMap::new();
        poses.insert(vid(0, 0), a);
        poses.insert(vid(0, 1), a * z);
        let e = Edge::new(vid(0, 0), vid(0, 1), EdgeKind::Intra, z, Matrix6::identity());
        assert!(residual(&e, &poses).norm() < 1e-12);

        poses.insert(vid(0, 1), a);
        let e = Edge::new(vid(0, 0), vid(0, 1), EdgeKind::Intra, Pose::identity(), Matrix6::identity());
        assert!(residual(&e, &poses).norm() < 1e-12);
    }

    #[test]
    fn residual_first_order_in_perturbation() {
        // T_to = T_from * Z * exp(xi) gives residual exactly xi; a left
        // perturbation exp(xi) * T_to gives Ad((T_from Z)^-1) xi to first order.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let from = random_pose(&mut rng, 3.0, 2.0);
        let z = random_pose(&mut rng, 3.0, 2.0);
        let xi = Twist::new(Vector3::new(0.3, -0.2, 0.5), Vector3::new(0.1, 0.4, -0.7));
        let xi = Twist::from_vector(&(xi.to_vector().normalize() * 1e-4));
        let mut poses = BTreeMap::new();
        poses.insert(vid(0, 0), from);
        poses.insert(vid(0, 1), from * z * Pose::exp(&xi));
        let e = Edge::new(vid(0, 0), vid(0, 1), EdgeKind::Intra, z, Matrix6::identity());
        let r = residual(&e, &poses).to_vector();
        let rel = (r - xi.to_vector()).norm() / xi.norm();
        assert!(rel < 1e-5, "{rel}");
    }

    #[test]
    fn chi2_unit_twist() {
        let mut g = PoseGraph::new();
        g.add_vertex(Vertex::new(vid(0, 0), Pose::from_translation(1.0, 0.0, 0.0), 0.0, Role::Active))
            .unwrap();
        g.add_edge(Edge::prior(vid(0, 0), Pose::identity(), Matrix6::identity()))
            .unwrap();
        let p = OptimizationProblem::localization(&g, Kernels::none());
        assert!((p.chi_squared() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn huber_matches_plain_below_threshold() {
        let (c, w) = Kernel::Huber(1.0).evaluate(0.25);
        assert_eq!((c, w), (0.25, 1.0));
        let (c, w) = Kernel::Huber(1.0).evaluate(4.0);
        assert_eq!((c, w), (3.0, 0.5));
    }

    #[test]
    fn zero_free_vertices() {
        let mut g = PoseGraph::new();
        for i in 0..2 {
            g.add_vertex(Vertex::new(vid(0, i), Pose::from_translation(i as f64, 0.0, 0.0), 0.0, Role::Reference))
                .unwrap();
        }
        g.add_edge(Edge::new(vid(0, 0), vid(0, 1), EdgeKind::Intra, Pose::identity(), Matrix6::identity()))
            .unwrap();
        let p = OptimizationProblem::new(&g, BTreeSet::new(), g.edges().map(|(i, _)| i).collect::<Vec<_>>(), Kernels::none());
        let r = p.optimize();
        assert_eq!(r.termination, Termination::Converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.initial_chi2, r.final_chi2);
    }

    #[test]
    fn unanchored_component_is_gauge_failure() {
        let mut g = PoseGraph::new();
        for i in 0..3 {
            g.add_vertex(Vertex::new(vid(1, i), Pose::identity(), 0.0, Role::Active))
                .unwrap();
        }
        for i in 0..2 {
            g.add_edge(Edge::new(vid(1, i), vid(1, i + 1), EdgeKind::Intra, Pose::from_translation(1.0, 0.0, 0.0), Matrix6::identity()))
                .unwrap();
        }
        let p = OptimizationProblem::localization(&g, Kernels::default());
        assert!(!p.gauge_ok());
        assert_eq!(p.optimize().termination, Termination::GaugeFailure);
    }

    #[test]
    fn single_inter_edge_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let reference = random_pose(&mut rng, 5.0, 2.0);
        let z = random_pose(&mut rng, 2.0, 1.0);
        let mut g = PoseGraph::new();
        g.add_vertex(Vertex::new(vid(0, 0), reference, 0.0, Role::Reference)).unwrap();
        g.add_vertex(Vertex::new(vid(1, 0), random_pose(&mut rng, 5.0, 2.0), 0.0, Role::Active))
            .unwrap();
        g.add_edge(Edge::new(vid(1, 0), vid(0, 0), EdgeKind::Inter, z, Matrix6::identity()))
            .unwrap();
        let r = OptimizationProblem::localization(&g, Kernels::default()).optimize();
        assert_eq!(r.termination, Termination::Converged);
        // T_from * Z = T_to  =>  T_from = T_ref * Z^-1
        let expected = reference * z.inverse();
        let (ang, dist) = r.poses[&vid(1, 0)].error_to(&expected);
        assert!(ang < 1e-12 && dist < 1e-12, "{ang} {dist}");
        // the 1e-4 initial damping shrinks the first step; the rest is cleanup
        assert!(r.iterations <= 4, "{}", r.iterations);
    }

    #[test]
    fn pure_translation_jacobians_are_exact() {
        let mut g = PoseGraph::new();
        for i in 0..4 {
            g.add_vertex(Vertex::new(vid(0, i), Pose::from_translation(i as f64 * 1.3, 0.2, 0.0), 0.0, Role::Active))
                .unwrap();
        }
        for i in 0..3 {
            g.add_edge(Edge::new(vid(0, i), vid(0, i + 1), EdgeKind::Intra, Pose::from_translation(1.0, 0.5, -0.2), Matrix6::identity()))
                .unwrap();
        }
        g.add_edge(Edge::prior(vid(0, 0), Pose::identity(), Matrix6::identity())).unwrap();
        let p = OptimizationProblem::localization(&g, Kernels::none());
        assert!(p.jacobian_check(1e-6) < 1e-9);
    }

    #[test]
    fn prior_at_identity_jacobian() {
        let mut g = PoseGraph::new();
        g.add_vertex(Vertex::new(vid(0, 0), Pose::identity(), 0.0, Role::Active)).unwrap();
        g.add_edge(Edge::prior(vid(0, 0), Pose::identity(), Matrix6::identity())).unwrap();
        let p = OptimizationProblem::localization(&g, Kernels::none());
        assert!(p.jacobian_check(1e-6) < 1e-9);
    }
}
