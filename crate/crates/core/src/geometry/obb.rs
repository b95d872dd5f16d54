use super::GeometryError;
use crate::Vec3;
use nalgebra::{Matrix3, SymmetricEigen};

/// Oriented bounding box. `axes` holds the frame as columns, ordered by
/// descending variance of the fitted points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub center: Vec3,
    pub axes: Matrix3<f64>,
    pub half_extents: Vec3,
}

impl Obb {
    pub fn axis(&self, k: usize) -> Vec3 {
        self.axes.column(k).into_owned()
    }

    pub fn diagonal(&self) -> f64 {
        2.0 * self.half_extents.norm()
    }

    /// True if `p` lies inside the box enlarged by `slack` along every axis.
    pub fn contains(&self, p: &Vec3, slack: f64) -> bool {
        let d = p - self.center;
        (0..3).all(|k| self.axis(k).dot(&d).abs() <= self.half_extents[k] + slack)
    }

    /// Column index of the axis most aligned with world +y.
    pub fn vertical_axis(&self) -> usize {
        (0..3)
            .max_by(|&a, &b| {
                self.axes[(1, a)].abs().total_cmp(&self.axes[(1, b)].abs()).then(b.cmp(&a))
            })
            .unwrap_or(0)
    }
}

const CANONICAL: [Vec3; 3] = [
    Vec3::new(1.0, 0.0, 0.0),
    Vec3::new(0.0, 1.0, 0.0),
    Vec3::new(0.0, 0.0, 1.0),
];

/// Flips `axis` so its first non-negligible component along +x, +y, +z
/// (in that order) is positive.
fn sign_fix(axis: Vec3) -> Vec3 {
    for c in &CANONICAL {
        let d = axis.dot(c);
        if d.abs() > 1e-9 {
            return if d < 0.0 { -axis } else { axis };
        }
    }
    axis
}

/// PCA-fitted oriented bounding box.
///
/// The two leading axes are covariance eigenvectors sign-fixed against the
/// canonical directions; the third is their cross product, so the frame is
/// always right-handed. Planar inputs are accepted, collinear ones are not.
pub fn pca_obb(points: &[Vec3]) -> Result<Obb, GeometryError> {
    if points.len() < 3 {
        return Err(GeometryError::DegenerateGeometry(format!(
            "OBB needs at least 3 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lead = eig.eigenvalues[order[0]];
    let second = eig.eigenvalues[order[1]];
    if !(lead > 0.0) || second <= lead * 1e-12 {
        return Err(GeometryError::DegenerateGeometry(
            "point covariance has rank < 2 (collinear or coincident points)".into(),
        ));
    }

    let a0 = sign_fix(eig.eigenvectors.column(order[0]).normalize());
    // Re-orthogonalize against a0 before fixing the sign.
    let raw1 = eig.eigenvectors.column(order[1]).into_owned();
    let a1 = sign_fix((raw1 - a0 * a0.dot(&raw1)).normalize());
    let a2 = a0.cross(&a1).normalize();
    let axes = Matrix3::from_columns(&[a0, a1, a2]);

    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        let local = axes.transpose() * (p - mean);
        lo = lo.inf(&local);
        hi = hi.sup(&local);
    }
    let mid_local = (lo + hi) * 0.5;
    Ok(Obb { center: mean + axes * mid_local, axes, half_extents: (hi - lo) * 0.5 })
}
