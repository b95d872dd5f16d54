use super::{GeometryError, SimilarityTransform};
use crate::Vec3;
use nalgebra::{Matrix3, Rotation3};

/// Closed-form least-squares alignment of matched pairs (Umeyama).
///
/// Returns the similarity (or rigid transform when `with_scale` is false)
/// minimizing `Σ ‖T(src_i) − dst_i‖²`.
pub fn umeyama_align(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<SimilarityTransform, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::DegenerateGeometry(format!(
            "point count mismatch: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(GeometryError::DegenerateGeometry(format!(
            "alignment needs at least 3 pairs, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let mu_src = src.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mu_dst = dst.iter().fold(Vec3::zeros(), |a, p| a + p) / n;

    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let ds = s - mu_src;
        cov += (d - mu_dst) * ds.transpose();
        var_src += ds.norm_squared();
    }
    cov /= n;
    var_src /= n;
    if !(var_src > 0.0) || !cov.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::DegenerateGeometry("source points are coincident".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::DegenerateGeometry("SVD failed".into())),
    };
    // nalgebra does not sort singular values; order them descending.
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if sv[order[1]] <= sv[order[0]] * 1e-12 {
        return Err(GeometryError::DegenerateGeometry("cross-covariance has rank < 2".into()));
    }

    let mut d = Vec3::repeat(1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        d[order[2]] = -1.0;
    }
    let rot = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = if with_scale {
        let trace: f64 = (0..3).map(|k| sv[k] * d[k]).sum();
        trace / var_src
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(GeometryError::DegenerateGeometry(format!("non-positive scale {scale}")));
    }
    // Re-orthonormalize to keep the SO(3) invariant tight.
    let rotation = Rotation3::from_matrix_eps(&rot, 1e-15, 64, Rotation3::identity());
    let translation = mu_dst - rotation * mu_src * scale;
    Ok(SimilarityTransform::new_unchecked(scale, rotation, translation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Unit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn residual(t: &SimilarityTransform, src: &[Vec3], dst: &[Vec3]) -> f64 {
        src.iter().zip(dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn random_similarity(rng: &mut ChaCha8Rng) -> SimilarityTransform {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random_range(-3.1..3.1));
        let t = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        SimilarityTransform::new(rng.random_range(0.2..5.0), rot, t).unwrap()
    }

    #[test]
    fn identity_when_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 20);
        let t = umeyama_align(&pts, &pts, true).unwrap();
        assert!((t.scale() - 1.0).abs() < 1e-12);
        assert!(t.translation().norm() < 1e-12);
        assert!(t.rotation().angle() < 1e-7);
    }

    #[test]
    fn scaled_and_shifted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_points(&mut rng, 30);
        let dst: Vec<Vec3> = src.iter().map(|p| p * 2.0 + Vec3::x()).collect();
        let t = umeyama_align(&src, &dst, true).unwrap();
        assert!((t.scale() - 2.0).abs() < 1e-9);
        assert!((t.translation() - Vec3::x()).norm() < 1e-9);
        assert!((t.rotation().matrix() - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn recovers_constructed_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let truth = random_similarity(&mut rng);
            let src = random_points(&mut rng, 50);
            let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
            let est = umeyama_align(&src, &dst, true).unwrap();
            assert!((est.scale() - truth.scale()).abs() < 1e-6);
            assert!(est.rotation_angle_to(&truth) < 1e-6, "{} {:?} {:?}", est.rotation_angle_to(&truth), est, truth);
            assert!((est.translation() - truth.translation()).norm() < 1e-6);
        }
    }

    #[test]
    fn rigid_mode_keeps_unit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = random_points(&mut rng, 30);
        let dst: Vec<Vec3> = src.iter().map(|p| p * 3.0).collect();
        assert_eq!(umeyama_align(&src, &dst, false).unwrap().scale(), 1.0);
    }

    #[test]
    fn degenerate_inputs() {
        let p = vec![Vec3::zeros(); 5];
        assert!(umeyama_align(&p, &p, true).is_err());
        assert!(umeyama_align(&p[..2], &p[..2], true).is_err());
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::x() * i as f64).collect();
        assert!(umeyama_align(&line, &line, true).is_err());
        assert!(umeyama_align(&line, &line[..4], true).is_err());
    }

    #[test]
    fn no_random_transform_beats_the_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = random_points(&mut rng, 40);
        let truth = random_similarity(&mut rng);
        let dst: Vec<Vec3> = src
            .iter()
            .map(|p| truth.apply(p) + Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
            .collect();
        let est = umeyama_align(&src, &dst, true).unwrap();
        let best = residual(&est, &src, &dst);
        for _ in 0..1000 {
            let mut cand = random_similarity(&mut rng);
            // Half of the probes are small perturbations of the optimum.
            if rng.random_bool(0.5) {
                let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let small = Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random_range(-0.01..0.01));
                cand = SimilarityTransform::new(
                    est.scale() * rng.random_range(0.99..1.01),
                    small * est.rotation(),
                    est.translation() + Vec3::repeat(rng.random_range(-0.01..0.01)),
                )
                .unwrap();
            }
            assert!(residual(&cand, &src, &dst) >= best);
        }
    }
}
