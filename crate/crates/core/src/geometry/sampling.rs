use super::{GeometryError, MeshInstance};
use crate::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The crate's seeded generator (ChaCha8, platform independent).
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Indices of a uniform sample without replacement, sorted ascending.
/// Returns `0..len` when `n >= len`.
pub fn uniform_subsample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut rng = rng_from_seed(seed);
    let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

/// `n` points drawn uniformly without replacement, in original order.
pub fn uniform_subsample(points: &[Vec3], n: usize, seed: u64) -> Vec<Vec3> {
    uniform_subsample_indices(points.len(), n.max(1), seed).into_iter().map(|i| points[i]).collect()
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface(mesh: &MeshInstance, n: usize, seed: u64) -> Result<Vec<Vec3>, GeometryError> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for tri in &mesh.triangles {
        let [a, b, c] = mesh.triangle_vertices(tri);
        total += 0.5 * (b - a).cross(&(c - a)).norm();
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(GeometryError::DegenerateGeometry("mesh has zero surface area".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random::<f64>() * total;
        let k = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangle_vertices(&mesh.triangles[k]);
        let r1: f64 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        out.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
    }
    Ok(out)
}
