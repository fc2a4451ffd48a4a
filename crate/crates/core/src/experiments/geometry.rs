//! Rigid transforms used as registration states.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Rotation2, Rotation3, Vector2, Vector3};

use crate::solver::Manifold;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Planar transform `p ↦ R(θ) p + t`. Tangent order: `[tx, ty, θ]`, all additive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    pub translation: Vector2<f64>,
    pub angle: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, angle: f64) -> Self {
        Self { translation: Vector2::new(x, y), angle }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        *Rotation2::new(self.angle).matrix()
    }

    pub fn transform(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.rotation() * p + self.translation
    }

    pub fn inverse_transform(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.rotation().transpose() * (p - self.translation)
    }

    /// `∂(R m + t)/∂[t, θ]`.
    pub fn point_jacobian(&self, m: &Vector2<f64>) -> DMatrix<f64> {
        let (s, c) = self.angle.sin_cos();
        let d = Vector2::new(-s * m.x - c * m.y, c * m.x - s * m.y);
        DMatrix::from_row_slice(2, 3, &[1.0, 0.0, d.x, 0.0, 1.0, d.y])
    }

    /// `[t̂ - t; wrap(θ̂ - θ)]`.
    pub fn error_to(&self, truth: &Pose2) -> DVector<f64> {
        let dt = self.translation - truth.translation;
        DVector::from_column_slice(&[dt.x, dt.y, wrap_angle(self.angle - truth.angle)])
    }

    pub fn rotation_error_deg(&self, truth: &Pose2) -> f64 {
        wrap_angle(self.angle - truth.angle).abs().to_degrees()
    }
}

impl Manifold for Pose2 {
    fn tangent_dim(&self) -> usize {
        3
    }

    fn retract(&self, delta: &DVector<f64>) -> Self {
        Self::new(self.translation.x + delta[0], self.translation.y + delta[1], self.angle + delta[2])
    }

    fn norm(&self) -> f64 {
        (self.translation.norm_squared() + self.angle * self.angle).sqrt()
    }
}

/// Spatial transform `p ↦ R p + t`. Tangent order: `[t, ω]`, with `t`
/// additive and `R ↦ R exp(ω)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose3 {
    pub translation: Vector3<f64>,
    pub rotation: Rotation3<f64>,
}

impl Pose3 {
    pub fn new(translation: Vector3<f64>, rotation: Rotation3<f64>) -> Self {
        Self { translation, rotation }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Rotation3::identity())
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    /// `∂(R m + t)/∂[t, ω]` for the right-multiplicative chart.
    pub fn point_jacobian(&self, m: &Vector3<f64>) -> DMatrix<f64> {
        let dr = -(self.rotation.matrix() * skew(m));
        let mut j = DMatrix::zeros(3, 6);
        j.view_mut((0, 0), (3, 3)).fill_with_identity();
        j.view_mut((0, 3), (3, 3)).copy_from(&dr);
        j
    }

    /// `[t̂ - t; log(Rᵀ R̂)]`.
    pub fn error_to(&self, truth: &Pose3) -> DVector<f64> {
        let dt = self.translation - truth.translation;
        let dr = (truth.rotation.inverse() * self.rotation).scaled_axis();
        DVector::from_column_slice(&[dt.x, dt.y, dt.z, dr.x, dr.y, dr.z])
    }

    /// Geodesic angle of `R̂ Rᵀ` in degrees.
    pub fn rotation_error_deg(&self, truth: &Pose3) -> f64 {
        (self.rotation * truth.rotation.inverse()).angle().to_degrees()
    }
}

impl Manifold for Pose3 {
    fn tangent_dim(&self) -> usize {
        6
    }

    fn retract(&self, delta: &DVector<f64>) -> Self {
        let t = self.translation + Vector3::new(delta[0], delta[1], delta[2]);
        let w = Vector3::new(delta[3], delta[4], delta[5]);
        let mut r = self.rotation * Rotation3::new(w);
        r.renormalize();
        Self::new(t, r)
    }

    fn norm(&self) -> f64 {
        (self.translation.norm_squared() + self.rotation.scaled_axis().norm_squared()).sqrt()
    }
}

/// Common view of [`Pose2`] and [`Pose3`] over dynamically sized vectors.
pub trait RigidTransform: Manifold + fmt::Debug + 'static {
    /// Dimension of the points it acts on.
    const POINT_DIM: usize;

    fn identity() -> Self;
    fn rotation_matrix(&self) -> DMatrix<f64>;
    fn transform_point(&self, p: &DVector<f64>) -> DVector<f64>;
    fn inverse_transform_point(&self, p: &DVector<f64>) -> DVector<f64>;
    /// `∂(R m + t)/∂x` over the tangent space.
    fn transform_jacobian(&self, m: &DVector<f64>) -> DMatrix<f64>;
    /// Tangent error of `self` relative to `truth`.
    fn error_vector(&self, truth: &Self) -> DVector<f64>;
    fn translation_error(&self, truth: &Self) -> f64;
    fn rotation_error_deg(&self, truth: &Self) -> f64;
    fn to_vec(&self) -> Vec<f64>;
}

impl RigidTransform for Pose2 {
    const POINT_DIM: usize = 2;

    fn identity() -> Self {
        Pose2::identity()
    }

    fn rotation_matrix(&self) -> DMatrix<f64> {
        let r = self.rotation();
        DMatrix::from_column_slice(2, 2, r.as_slice())
    }

    fn transform_point(&self, p: &DVector<f64>) -> DVector<f64> {
        let q = self.transform(&Vector2::new(p[0], p[1]));
        DVector::from_column_slice(q.as_slice())
    }

    fn inverse_transform_point(&self, p: &DVector<f64>) -> DVector<f64> {
        let q = self.inverse_transform(&Vector2::new(p[0], p[1]));
        DVector::from_column_slice(q.as_slice())
    }

    fn transform_jacobian(&self, m: &DVector<f64>) -> DMatrix<f64> {
        self.point_jacobian(&Vector2::new(m[0], m[1]))
    }

    fn error_vector(&self, truth: &Self) -> DVector<f64> {
        self.error_to(truth)
    }

    fn translation_error(&self, truth: &Self) -> f64 {
        (self.translation - truth.translation).norm()
    }

    fn rotation_error_deg(&self, truth: &Self) -> f64 {
        Pose2::rotation_error_deg(self, truth)
    }

    fn to_vec(&self) -> Vec<f64> {
        vec![self.translation.x, self.translation.y, self.angle]
    }
}

impl RigidTransform for Pose3 {
    const POINT_DIM: usize = 3;

    fn identity() -> Self {
        Pose3::identity()
    }

    fn rotation_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(3, 3, self.rotation.matrix().as_slice())
    }

    fn transform_point(&self, p: &DVector<f64>) -> DVector<f64> {
        let q = self.transform(&Vector3::new(p[0], p[1], p[2]));
        DVector::from_column_slice(q.as_slice())
    }

    fn inverse_transform_point(&self, p: &DVector<f64>) -> DVector<f64> {
        let q = self.inverse_transform(&Vector3::new(p[0], p[1], p[2]));
        DVector::from_column_slice(q.as_slice())
    }

    fn transform_jacobian(&self, m: &DVector<f64>) -> DMatrix<f64> {
        self.point_jacobian(&Vector3::new(m[0], m[1], m[2]))
    }

    fn error_vector(&self, truth: &Self) -> DVector<f64> {
        self.error_to(truth)
    }

    fn translation_error(&self, truth: &Self) -> f64 {
        (self.translation - truth.translation).norm()
    }

    fn rotation_error_deg(&self, truth: &Self) -> f64 {
        Pose3::rotation_error_deg(self, truth)
    }

    /// Translation followed by the rotation vector.
    fn to_vec(&self) -> Vec<f64> {
        let w = self.rotation.scaled_axis();
        vec![self.translation.x, self.translation.y, self.translation.z, w.x, w.y, w.z]
    }
}
