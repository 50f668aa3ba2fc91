//! Weighted graph Laplacians and the connectivity indices derived from them.
//!
//! Edges are weighted by a scalar function of their information matrix: unit,
//! trace, or smallest eigenvalue. The average node degree is `trace(L) / m`;
//! the Fiedler value is the second-smallest eigenvalue of `L`, zero exactly
//! when the graph is disconnected.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{is_spd, Edge, EdgeId, PoseGraph, VertexId};
use crate::linalg::{self, SymmetricBuilder};

/// Relative zero threshold for the Fiedler value, applied after scaling `L` by
/// its largest diagonal entry.
pub const CONNECTIVITY_EPS: f64 = 1e-8;

/// Largest size handled by the dense eigensolver when only the Fiedler pair
/// is needed; above this the sparse inverse iteration takes over.
pub const DENSE_FIEDLER_LIMIT: usize = 400;

const INVERSE_ITERATION_TOL: f64 = 1e-10;
const INVERSE_ITERATION_CAP: usize = 500;
const INVERSE_ITERATION_BLOCK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Weighting {
    Unit,
    FimTrace,
    FimMinEig,
}

impl std::str::FromStr for Weighting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unit" => Ok(Weighting::Unit),
            "trace" => Ok(Weighting::FimTrace),
            "mineig" => Ok(Weighting::FimMinEig),
            other => Err(format!("unknown weighting {other:?} (expected unit, trace, mineig)")),
        }
    }
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Weighting::Unit => "unit",
            Weighting::FimTrace => "trace",
            Weighting::FimMinEig => "mineig",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("information matrix is not symmetric positive definite")]
    NonSpdInformation,
    #[error("prior edges carry no pairwise weight")]
    PriorEdge,
    #[error("vertex set is empty")]
    EmptyVertexSet,
    #[error("unknown vertex {0}")]
    UnknownId(VertexId),
    #[error("at least two vertices are required, got {0}")]
    TooFewVertices(usize),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("eigensolver failed")]
    Eigensolver,
}

pub fn edge_weight(e: &Edge, weighting: Weighting) -> Result<f64, SpectralError> {
    if e.is_unary() {
        return Err(SpectralError::PriorEdge);
    }
    if !is_spd(&e.information) {
        return Err(SpectralError::NonSpdInformation);
    }
    Ok(match weighting {
        Weighting::Unit => 1.0,
        Weighting::FimTrace => e.information.trace(),
        Weighting::FimMinEig => {
            let sym = 0.5 * (e.information + e.information.transpose());
            sym.symmetric_eigenvalues().min()
        }
    })
}

/// Dense weighted Laplacian over an ordered vertex set.
#[derive(Clone, Debug)]
pub struct WeightedLaplacian {
    m: usize,
    data: Vec<f64>,
    order: Vec<VertexId>,
    /// `(row, col, weight, edge)` for every contributing edge, `row < col`.
    links: Vec<(usize, usize, f64, Option<EdgeId>)>,
    pub weighting: Weighting,
}

impl WeightedLaplacian {
    /// Laplacian of an abstract weighted graph on `m` vertices; vertex ids are
    /// synthesized as `(0, i)`.
    pub fn from_edges(m: usize, edges: &[(usize, usize, f64)]) -> Self {
        let order = (0..m as u32).map(|i| VertexId::new(0, i)).collect();
        let mut l = Self {
            m,
            data: vec![0.0; m * m],
            order,
            links: Vec::new(),
            weighting: Weighting::Unit,
        };
        for &(a, b, w) in edges {
            l.link(a, b, w, None);
        }
        l
    }

    fn link(&mut self, a: usize, b: usize, w: f64, id: Option<EdgeId>) {
        if a == b {
            return;
        }
        let m = self.m;
        self.data[a * m + a] += w;
        self.data[b * m + b] += w;
        self.data[a * m + b] -= w;
        self.data[b * m + a] -= w;
        self.links.push((a.min(b), a.max(b), w, id));
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn order(&self) -> &[VertexId] {
        &self.order
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.m + col]
    }

    pub fn row_major(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.m).map(|i| self.get(i, i)).sum()
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..self.m).map(|i| self.get(i, i)).fold(0.0, f64::max)
    }

    /// Full ascending spectrum (dense).
    pub fn eigenvalues(&self) -> Result<Vec<f64>, SpectralError> {
        linalg::symmetric_eigenvalues(self.m, &self.data).ok_or(SpectralError::Eigensolver)
    }

    fn clamp_lambda2(&self, lambda2: f64) -> f64 {
        let scale = self.max_diagonal();
        if scale <= 0.0 || lambda2 / scale < CONNECTIVITY_EPS {
            0.0
        } else {
            lambda2
        }
    }
}

pub fn build_laplacian(
    g: &PoseGraph,
    ids: &BTreeSet<VertexId>,
    weighting: Weighting,
) -> Result<WeightedLaplacian, SpectralError> {
    if ids.is_empty() {
        return Err(SpectralError::EmptyVertexSet);
    }
    let order: Vec<VertexId> = ids.iter().copied().collect();
    let index: BTreeMap<VertexId, usize> = order.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    for v in &order {
        if !g.contains(*v) {
            return Err(SpectralError::UnknownId(*v));
        }
    }
    let m = order.len();
    let mut l = WeightedLaplacian {
        m,
        data: vec![0.0; m * m],
        order,
        links: Vec::new(),
        weighting,
    };
    // walk incident edges of the set rather than the whole edge table
    let mut seen = BTreeSet::new();
    for v in ids {
        for eid in g.incident(*v) {
            if !seen.insert(eid) {
                continue;
            }
            let e = g.edge(eid).expect("adjacency is consistent");
            if e.is_unary() {
                continue;
            }
            if let (Some(a), Some(b)) = (index.get(&e.from), index.get(&e.to)) {
                let w = edge_weight(e, weighting)?;
                l.link(*a, *b, w, Some(eid));
            }
        }
    }
    Ok(l)
}

/// `trace(L) / m`, which also equals the mean eigenvalue of `L`.
pub fn average_node_degree(l: &WeightedLaplacian) -> f64 {
    if l.m == 0 {
        return 0.0;
    }
    l.trace() / l.m as f64
}

/// Per-vertex weighted degree (the diagonal of `L`).
pub fn node_degrees(l: &WeightedLaplacian) -> Vec<(VertexId, f64)> {
    l.order
        .iter()
        .enumerate()
        .map(|(i, v)| (*v, l.get(i, i)))
        .collect()
}

/// Second-smallest eigenvalue and a unit eigenvector orthogonal to the ones
/// vector. Values below the connectivity threshold are reported as zero.
pub fn fiedler(l: &WeightedLaplacian) -> Result<(f64, Vec<f64>), SpectralError> {
    if l.m < 2 {
        return Err(SpectralError::TooFewVertices(l.m));
    }
    let (value, vector) = if l.m <= DENSE_FIEDLER_LIMIT {
        fiedler_dense(l)?
    } else {
        fiedler_inverse_iteration(l)?
    };
    Ok((l.clamp_lambda2(value), canonical_sign(vector)))
}

/// Fiedler value through the dense eigensolver regardless of size.
pub fn fiedler_dense(l: &WeightedLaplacian) -> Result<(f64, Vec<f64>), SpectralError> {
    if l.m < 2 {
        return Err(SpectralError::TooFewVertices(l.m));
    }
    let (vals, vecs) = linalg::symmetric_eigen(l.m, &l.data).ok_or(SpectralError::Eigensolver)?;
    // inside a degenerate null space the solver may return a mix with the
    // ones vector; strip it
    let mut v = project_out_mean(&vecs[1]);
    if norm(&v) < 1e-6 {
        v = project_out_mean(&vecs[0]);
    }
    normalize(&mut v);
    Ok((vals[1].max(0.0), v))
}

/// Fiedler pair by block inverse iteration on a sparse Cholesky factor of
/// `L + s I`, restricted to the complement of the ones vector.
pub fn fiedler_inverse_iteration(l: &WeightedLaplacian) -> Result<(f64, Vec<f64>), SpectralError> {
    let m = l.m;
    if m < 2 {
        return Err(SpectralError::TooFewVertices(m));
    }
    let scale = l.max_diagonal();
    if scale <= 0.0 {
        let mut v: Vec<f64> = (0..m).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        v = project_out_mean(&v);
        normalize(&mut v);
        return Ok((0.0, v));
    }
    let shift = 1e-7 * scale;
    let mut builder = SymmetricBuilder::new(m);
    for i in 0..m {
        builder.add(i, i, l.get(i, i) + shift);
    }
    for &(a, b, w, _) in &l.links {
        builder.add(b, a, -w);
    }
    let factor = builder.factor().ok_or(SpectralError::Eigensolver)?;

    let block = INVERSE_ITERATION_BLOCK.min(m - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f1ed);
    let mut basis: Vec<Vec<f64>> = (0..block)
        .map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    orthonormalize(&mut basis, &mut rng);

    let mut best = (f64::INFINITY, basis[0].clone());
    for _ in 0..INVERSE_ITERATION_CAP {
        let mut next = factor.solve_columns(&basis);
        orthonormalize(&mut next, &mut rng);
        let lx: Vec<Vec<f64>> = next.iter().map(|x| laplacian_apply(l, x)).collect();
        let k = next.len();
        let t = DMatrix::from_fn(k, k, |i, j| dot(&next[i], &lx[j]));
        let t = 0.5 * (&t + t.transpose());
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
        let rotate = |src: &[Vec<f64>]| -> Vec<Vec<f64>> {
            order
                .iter()
                .map(|&c| {
                    let mut out = vec![0.0; m];
                    for (r, col) in src.iter().enumerate() {
                        let coef = eig.eigenvectors[(r, c)];
                        for (o, x) in out.iter_mut().zip(col) {
                            *o += coef * x;
                        }
                    }
                    out
                })
                .collect()
        };
        basis = rotate(&next);
        let l_first = rotate(&lx).swap_remove(0);
        let theta = eig.eigenvalues[order[0]];
        let resid: f64 = l_first
            .iter()
            .zip(&basis[0])
            .map(|(a, x)| (a - theta * x).powi(2))
            .sum::<f64>()
            .sqrt();
        best = (theta, basis[0].clone());
        if resid <= INVERSE_ITERATION_TOL * scale {
            break;
        }
    }
    let (theta, mut v) = best;
    normalize(&mut v);
    Ok((theta.max(0.0), v))
}

/// Fiedler value only; cheaper than [`fiedler`] for mid-sized graphs.
pub fn lambda2(l: &WeightedLaplacian) -> Result<f64, SpectralError> {
    if l.m < 2 {
        return Err(SpectralError::TooFewVertices(l.m));
    }
    if l.m <= DENSE_FIEDLER_LIMIT {
        let vals = l.eigenvalues()?;
        Ok(l.clamp_lambda2(vals[1].max(0.0)))
    } else {
        let (v, _) = fiedler_inverse_iteration(l)?;
        Ok(l.clamp_lambda2(v))
    }
}

/// Edges cut by the spectral bisection: vertices are split at the median of
/// the Fiedler vector and every edge joining the two halves is returned.
pub fn weakest_edges(l: &WeightedLaplacian) -> Result<Vec<EdgeId>, SpectralError> {
    let side = bisection(l)?;
    let mut out: Vec<EdgeId> = l
        .links
        .iter()
        .filter(|(a, b, _, _)| side[*a] != side[*b])
        .filter_map(|(_, _, _, id)| *id)
        .collect();
    out.sort();
    out.dedup();
    Ok(out)
}

/// Side assignment (`true` = lower half) of the spectral bisection.
pub fn bisection(l: &WeightedLaplacian) -> Result<Vec<bool>, SpectralError> {
    let (lambda2, vector) = fiedler(l)?;
    if lambda2 == 0.0 {
        return Err(SpectralError::Disconnected);
    }
    let mut idx: Vec<usize> = (0..l.m).collect();
    idx.sort_by(|a, b| vector[*a].total_cmp(&vector[*b]).then(a.cmp(b)));
    let mut side = vec![false; l.m];
    for i in idx.into_iter().take(l.m / 2) {
        side[i] = true;
    }
    Ok(side)
}

/// `log det(L_reduced) / (m - 1)`, with the first row and column removed.
pub fn spanning_tree_log(l: &WeightedLaplacian) -> Result<f64, SpectralError> {
    if l.m < 2 {
        return Ok(0.0);
    }
    let r = l.m - 1;
    let reduced: Vec<f64> = (0..r)
        .flat_map(|i| (0..r).map(move |j| (i, j)))
        .map(|(i, j)| l.get(i + 1, j + 1))
        .collect();
    let logdet = linalg::dense_cholesky_logdet(r, &reduced).ok_or(SpectralError::Disconnected)?;
    Ok(logdet / r as f64)
}

/// Geometric-mean normalized weighted spanning-tree count.
pub fn spanning_tree_measure(l: &WeightedLaplacian) -> Result<f64, SpectralError> {
    Ok(spanning_tree_log(l)?.exp())
}

/// One snapshot of the connectivity indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralReport {
    pub m: usize,
    pub weighting: Weighting,
    pub d_bar: f64,
    pub lambda2_bar: f64,
    pub fiedler_vector: Option<Vec<f64>>,
    pub spanning_tree_log: Option<f64>,
    pub spanning_tree_measure: Option<f64>,
    pub weakest_edges: Vec<EdgeId>,
    pub node_degrees: Vec<(VertexId, f64)>,
}

impl SpectralReport {
    pub fn compute(
        g: &PoseGraph,
        ids: &BTreeSet<VertexId>,
        weighting: Weighting,
    ) -> Result<Self, SpectralError> {
        let l = build_laplacian(g, ids, weighting)?;
        let d_bar = average_node_degree(&l);
        let (lambda2_bar, fiedler_vector) = if l.size() >= 2 {
            let (v, vec) = fiedler(&l)?;
            (v, Some(vec))
        } else {
            (0.0, None)
        };
        let connected = lambda2_bar > 0.0 || l.size() == 1;
        let spanning_tree_log = if connected {
            spanning_tree_log(&l).ok()
        } else {
            None
        };
        let weakest = if lambda2_bar > 0.0 {
            weakest_edges(&l)?
        } else {
            Vec::new()
        };
        Ok(Self {
            m: l.size(),
            weighting,
            d_bar,
            lambda2_bar,
            fiedler_vector,
            spanning_tree_log,
            spanning_tree_measure: spanning_tree_log.map(f64::exp),
            weakest_edges: weakest,
            node_degrees: node_degrees(&l),
        })
    }
}

fn laplacian_apply(l: &WeightedLaplacian, x: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = (0..l.m).map(|i| l.get(i, i) * x[i]).collect();
    for &(a, b, w, _) in &l.links {
        out[a] -= w * x[b];
        out[b] -= w * x[a];
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn project_out_mean(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Modified Gram-Schmidt against the ones vector and each other. Collapsed
/// columns are replaced by fresh random directions.
fn orthonormalize(cols: &mut [Vec<f64>], rng: &mut ChaCha8Rng) {
    for i in 0..cols.len() {
        for attempt in 0..3 {
            let mut v = project_out_mean(&cols[i]);
            for j in 0..i {
                let c = dot(&v, &cols[j]);
                v.iter_mut().zip(&cols[j]).for_each(|(x, y)| *x -= c * y);
            }
            let n = norm(&v);
            let before = norm(&cols[i]);
            if n > 1e-10 * before.max(f64::MIN_POSITIVE) && n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
                cols[i] = v;
                break;
            }
            if attempt == 2 {
                cols[i] = v;
                break;
            }
            cols[i] = (0..v.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
    }
}

/// Flips `v` so its first clearly nonzero entry is positive.
fn canonical_sign(mut v: Vec<f64>) -> Vec<f64> {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}
