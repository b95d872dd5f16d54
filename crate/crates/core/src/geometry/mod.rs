//! Geometric kernels shared by the layout, ergonomics and projection stages.

mod index;
mod mesh;
mod obb;
mod sampling;
mod transform;
mod umeyama;

pub use index::{nearest_linear, SpatialIndex};
pub use mesh::{parse_obj, read_obj, write_obj, MeshInstance, ObjError};
pub use obb::{pca_obb, Obb};
pub use sampling::{rng_from_seed, sample_surface, uniform_subsample, uniform_subsample_indices};
pub use transform::{apply_similarity, SimilarityTransform};
pub use umeyama::umeyama_align;

use crate::Vec3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("DegenerateGeometry: {0}")]
    DegenerateGeometry(String),
    #[error("EmptyPointSet: point set is empty")]
    EmptyPointSet,
    #[error("InvalidTransform: {0}")]
    InvalidTransform(String),
}

/// `max(0, x)`.
#[inline]
pub fn hinge(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// Componentwise extrema of `points`; `None` when empty.
    pub fn from_points<'a, I>(points: I) -> Option<Aabb>
    where
        I: IntoIterator<Item = &'a Vec3>,
    {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = Aabb { min: first, max: first };
        for p in it {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        Some(b)
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x.max(0.0) * e.y.max(0.0) * e.z.max(0.0)
    }

    /// Intersection-over-union of two boxes. Degenerate (zero-volume) boxes
    /// compare equal only when identical.
    pub fn iou(&self, other: &Aabb) -> f64 {
        let lo = self.min.sup(&other.min);
        let hi = self.max.inf(&other.max);
        let d = hi - lo;
        if d.x < 0.0 || d.y < 0.0 || d.z < 0.0 {
            return 0.0;
        }
        let inter = d.x * d.y * d.z;
        let union = self.volume() + other.volume() - inter;
        if union <= 0.0 {
            return if self == other { 1.0 } else { 0.0 };
        }
        inter / union
    }
}
