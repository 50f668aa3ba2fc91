//! Absolute trajectory error after rigid alignment.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AteError {
    #[error("trajectories differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("alignment needs at least three non-collinear positions")]
    DegenerateAlignment,
}

/// Rotation and translation taking `from` onto `to` in the least-squares
/// sense.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Alignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn collinear(points: &[Vector3<f64>]) -> bool {
    let c = centroid(points);
    let cov: Matrix3<f64> = points.iter().map(|p| (p - c) * (p - c).transpose()).sum();
    let mut ev: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0]
}

/// Closed-form rigid alignment of `from` onto `to` (no scale).
pub fn align(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Result<Alignment, AteError> {
    if from.len() != to.len() {
        return Err(AteError::LengthMismatch(from.len(), to.len()));
    }
    if from.len() < 3 || collinear(from) || collinear(to) {
        return Err(AteError::DegenerateAlignment);
    }
    let (cf, ct) = (centroid(from), centroid(to));
    let h: Matrix3<f64> = from
        .iter()
        .zip(to)
        .map(|(f, t)| (f - cf) * (t - ct).transpose())
        .sum();
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok(Alignment {
        rotation,
        translation: ct - rotation * cf,
    })
}

/// Position RMSE after aligning `estimate` onto `truth`.
pub fn ate_rmse(estimate: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<f64, AteError> {
    let a = align(estimate, truth)?;
    let sq: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(e, t)| (a.apply(e) - t).norm_squared())
        .sum();
    Ok((sq / estimate.len() as f64).sqrt())
}

/// ATE over associated pose lists.
pub fn evaluate_ate(estimate: &[Pose], truth: &[Pose]) -> Result<f64, AteError> {
    let e: Vec<Vector3<f64>> = estimate.iter().map(|p| *p.translation()).collect();
    let t: Vec<Vector3<f64>> = truth.iter().map(|p| *p.translation()).collect();
    ate_rmse(&e, &t)
}
