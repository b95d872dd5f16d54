use super::GeometryError;
use crate::Vec3;
use nalgebra::{Matrix3, Rotation3, UnitQuaternion};

const ORTHO_TOL: f64 = 1e-9;

/// Similarity transform `p ↦ s·R·p + t` with `s > 0` and `R ∈ SO(3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    scale: f64,
    rotation: Rotation3<f64>,
    translation: Vec3,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Rotation3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(scale: f64, rotation: Rotation3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GeometryError::InvalidTransform(format!("scale must be positive, got {scale}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidTransform("translation is not finite".into()));
        }
        check_rotation(rotation.matrix())?;
        Ok(Self { scale, rotation, translation })
    }

    /// Builds from a raw 3×3 matrix, checking `RᵀR = I` and `det R = 1`.
    pub fn from_matrix(scale: f64, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        Self::new(scale, Rotation3::from_matrix_unchecked(rotation), translation)
    }

    pub fn from_quaternion(
        scale: f64,
        rotation: UnitQuaternion<f64>,
        translation: Vec3,
    ) -> Result<Self, GeometryError> {
        Self::new(scale, rotation.to_rotation_matrix(), translation)
    }

    pub fn translation_only(t: Vec3) -> Self {
        Self { scale: 1.0, rotation: Rotation3::identity(), translation: t }
    }

    pub(crate) fn new_unchecked(scale: f64, rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Self { scale, rotation, translation }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
        }
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let inv_rot = self.rotation.inverse();
        let inv_scale = 1.0 / self.scale;
        SimilarityTransform {
            scale: inv_scale,
            rotation: inv_rot,
            translation: -(inv_rot * self.translation) * inv_scale,
        }
    }

    /// Rotation angle of `self.R⁻¹ · other.R`, in radians.
    pub fn rotation_angle_to(&self, other: &SimilarityTransform) -> f64 {
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&(self.rotation.inverse() * other.rotation));
        2.0 * q.imag().norm().atan2(q.w.abs())
    }
}

/// Free-function form of [`SimilarityTransform::apply`].
pub fn apply_similarity(t: &SimilarityTransform, p: &Vec3) -> Vec3 {
    t.apply(p)
}

fn check_rotation(m: &Matrix3<f64>) -> Result<(), GeometryError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::InvalidTransform("rotation is not finite".into()));
    }
    let err = (m.transpose() * m - Matrix3::identity()).abs().max();
    if err > ORTHO_TOL {
        return Err(GeometryError::InvalidTransform(format!("rotation not orthonormal (error {err:e})")));
    }
    let det = m.determinant();
    if (det - 1.0).abs() > ORTHO_TOL {
        return Err(GeometryError::InvalidTransform(format!("rotation determinant {det} != 1")));
    }
    Ok(())
}
