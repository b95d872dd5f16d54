//! Coarse layout: per-instance similarity alignment of a mesh to its
//! observed point-cloud segment.
//!
//! Initialization matches centroids, takes the scale from the ratio of OBB
//! diagonals and picks the best of a few OBB axis assignments. ICP then
//! alternates nearest-neighbor correspondences with closed-form Umeyama
//! updates on a fixed subsample.

use crate::context::{InstanceId, LabeledPointCloud, SpatialContext};
use crate::ergonomics::Pose;
use crate::exec::Execution;
use crate::geometry::{
    pca_obb, sample_surface, uniform_subsample, umeyama_align, GeometryError, MeshInstance, Obb,
    SimilarityTransform, SpatialIndex,
};
use crate::Vec3;
use nalgebra::{Matrix3, Rotation3};
use std::collections::BTreeMap;
use thiserror::Error;

pub const MIN_SCALE: f64 = 0.1;
pub const MAX_SCALE: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("NonFinite: alignment objective is not finite")]
    NonFinite,
    #[error("InvalidParams: {0}")]
    InvalidParams(String),
    #[error("UnknownInstance: {0}")]
    UnknownInstance(InstanceId),
    #[error("EmptyInstance: instance {0} has no points")]
    EmptyInstance(InstanceId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Stop once the relative objective decrease falls to this value.
    pub rel_tolerance: f64,
    pub subsample_mesh: usize,
    pub subsample_target: usize,
    pub with_scale: bool,
    pub seed: u64,
    /// Draw a fresh mesh subsample every iteration. Descent is then no
    /// longer guaranteed.
    pub resample_each_iteration: bool,
    /// Fraction of the worst correspondences dropped before each update.
    pub trim_fraction: f64,
    /// Search all 24 axis assignments at initialization instead of the 4
    /// rotations about the vertical axis.
    pub full_orientation_search: bool,
    pub execution: Execution,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            rel_tolerance: 1e-6,
            subsample_mesh: 2048,
            subsample_target: 2048,
            with_scale: true,
            seed: 0,
            resample_each_iteration: false,
            trim_fraction: 0.0,
            full_orientation_search: false,
            execution: Execution::default(),
        }
    }
}

impl IcpParams {
    pub fn check(&self) -> Result<(), LayoutError> {
        let bad = |m: &str| Err(LayoutError::InvalidParams(m.to_string()));
        if self.max_iterations == 0 || self.subsample_mesh == 0 || self.subsample_target == 0 {
            return bad("counts must be at least 1");
        }
        if !(self.rel_tolerance > 0.0) {
            return bad("rel_tolerance must be positive");
        }
        if !(0.0..1.0).contains(&self.trim_fraction) {
            return bad("trim_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub transform: SimilarityTransform,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective before the first update and after every accepted one.
    pub history: Vec<f64>,
}

/// Sum of squared distances from transformed mesh points to their nearest
/// target points.
pub fn alignment_objective(
    t: &SimilarityTransform,
    mesh_pts: &[Vec3],
    target: &SpatialIndex,
) -> Result<f64, LayoutError> {
    alignment_objective_with(t, mesh_pts, target, Execution::default())
}

pub fn alignment_objective_with(
    t: &SimilarityTransform,
    mesh_pts: &[Vec3],
    target: &SpatialIndex,
    exec: Execution,
) -> Result<f64, LayoutError> {
    if mesh_pts.is_empty() || target.is_empty() {
        return Err(GeometryError::EmptyPointSet.into());
    }
    let moved: Vec<Vec3> = mesh_pts.iter().map(|p| t.apply(p)).collect();
    let sum: f64 = exec.map(&moved, |q| target.nearest_squared(q).1).iter().sum();
    if !sum.is_finite() {
        return Err(LayoutError::NonFinite);
    }
    Ok(sum)
}

/// Points standing in for the mesh: its vertices when it has no faces or
/// is at least as dense as requested, otherwise area-weighted surface
/// samples.
pub fn mesh_points(mesh: &MeshInstance, n: usize, seed: u64) -> Result<Vec<Vec3>, GeometryError> {
    if mesh.triangles.is_empty() || mesh.vertices.len() >= n {
        Ok(uniform_subsample(&mesh.vertices, n, seed))
    } else {
        sample_surface(mesh, n, seed)
    }
}

fn target_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_7A26_E700_0001
}

/// Right-handed frame `[h, up, h × up]` of an OBB with `up` its axis most
/// aligned with world +y, flipped to point upward.
fn upright_frame(obb: &Obb) -> Matrix3<f64> {
    let v = obb.vertical_axis();
    let mut up = obb.axis(v);
    if up.y < 0.0 {
        up = -up;
    }
    let h = obb.axis(if v == 0 { 1 } else { 0 });
    Matrix3::from_columns(&[h, up, h.cross(&up)])
}

/// Signed permutation matrices with determinant +1.
fn proper_axis_assignments() -> Vec<Matrix3<f64>> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for p in perms {
        for signs in 0..8u8 {
            let mut m = Matrix3::zeros();
            for (col, &row) in p.iter().enumerate() {
                m[(row, col)] = if signs & (1 << col) != 0 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

fn yaw_quarter_turns() -> Vec<Matrix3<f64>> {
    (0..4)
        .map(|k| *Rotation3::from_axis_angle(&Vec3::y_axis(), k as f64 * std::f64::consts::FRAC_PI_2).matrix())
        .collect()
}

/// One initialization candidate and its objective.
#[derive(Debug, Clone, PartialEq)]
pub struct InitCandidate {
    pub transform: SimilarityTransform,
    pub objective: f64,
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len() as f64
}

struct Prepared {
    mesh_pts: Vec<Vec3>,
    target: SpatialIndex,
}

fn prepare(mesh: &MeshInstance, target: &LabeledPointCloud, params: &IcpParams) -> Result<Prepared, LayoutError> {
    params.check()?;
    if target.is_empty() {
        return Err(GeometryError::EmptyPointSet.into());
    }
    let mesh_pts = mesh_points(mesh, params.subsample_mesh, params.seed)?;
    let target_pts = uniform_subsample(&target.positions(), params.subsample_target, target_seed(params.seed));
    Ok(Prepared { mesh_pts, target: SpatialIndex::build(&target_pts)? })
}

fn candidates_for(prep: &Prepared, params: &IcpParams) -> Result<Vec<InitCandidate>, LayoutError> {
    let obb_m = pca_obb(&prep.mesh_pts)?;
    let obb_t = pca_obb(prep.target.points())?;
    let fm = upright_frame(&obb_m);
    let ft = upright_frame(&obb_t);
    let scale = if params.with_scale {
        let d = obb_t.diagonal() / obb_m.diagonal();
        if !(d.is_finite() && d > 0.0) {
            return Err(GeometryError::DegenerateGeometry("OBB diagonal ratio is not positive".into()).into());
        }
        d.clamp(MIN_SCALE, MAX_SCALE)
    } else {
        1.0
    };
    let cm = centroid(&prep.mesh_pts);
    let ct = centroid(prep.target.points());
    let middles = if params.full_orientation_search { proper_axis_assignments() } else { yaw_quarter_turns() };
    middles
        .iter()
        .map(|mid| {
            let r = Rotation3::from_matrix_eps(&(ft * mid * fm.transpose()), 1e-15, 64, Rotation3::identity());
            let t = SimilarityTransform::new_unchecked(scale, r, ct - r * cm * scale);
            let objective = alignment_objective_with(&t, &prep.mesh_pts, &prep.target, params.execution)?;
            Ok(InitCandidate { transform: t, objective })
        })
        .collect()
}

/// All initialization candidates, in search order.
pub fn init_candidates(
    mesh: &MeshInstance,
    target: &LabeledPointCloud,
    params: &IcpParams,
) -> Result<Vec<InitCandidate>, LayoutError> {
    candidates_for(&prepare(mesh, target, params)?, params)
}

fn best(candidates: Vec<InitCandidate>) -> SimilarityTransform {
    candidates
        .into_iter()
        .enumerate()
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective).then(a.0.cmp(&b.0)))
        .map(|(_, c)| c.transform)
        .expect("at least one candidate")
}

/// Centroid, OBB-scale and axis-assignment initialization.
pub fn init_alignment(
    mesh: &MeshInstance,
    target: &LabeledPointCloud,
    params: &IcpParams,
) -> Result<SimilarityTransform, LayoutError> {
    Ok(best(init_candidates(mesh, target, params)?))
}

/// Umeyama on correspondences with the scale clamped; the translation is
/// re-solved for the clamped scale.
fn update(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<SimilarityTransform, LayoutError> {
    let t = umeyama_align(src, dst, with_scale)?;
    let s = t.scale();
    if (MIN_SCALE..=MAX_SCALE).contains(&s) {
        return Ok(t);
    }
    let s = s.clamp(MIN_SCALE, MAX_SCALE);
    let r = *t.rotation();
    let shift = centroid(dst) - r * centroid(src) * s;
    Ok(SimilarityTransform::new_unchecked(s, r, shift))
}

fn refine_prepared(
    prep: &Prepared,
    t0: &SimilarityTransform,
    params: &IcpParams,
) -> Result<AlignmentResult, LayoutError> {
    let exec = params.execution;
    let mut current = *t0;
    let mut mesh_pts = prep.mesh_pts.clone();
    let mut objective = alignment_objective_with(&current, &mesh_pts, &prep.target, exec)?;
    let mut history = vec![objective];
    let mut converged = objective == 0.0;
    let mut iterations = 0;
    while !converged && iterations < params.max_iterations {
        iterations += 1;
        let moved: Vec<Vec3> = mesh_pts.iter().map(|p| current.apply(p)).collect();
        let hits = exec.map(&moved, |q| prep.target.nearest_squared(q));
        let mut pairs: Vec<usize> = (0..mesh_pts.len()).collect();
        if params.trim_fraction > 0.0 {
            let keep = ((1.0 - params.trim_fraction) * pairs.len() as f64).ceil() as usize;
            pairs.sort_by(|&a, &b| hits[a].1.total_cmp(&hits[b].1).then(a.cmp(&b)));
            pairs.truncate(keep.max(3));
            pairs.sort_unstable();
        }
        let src: Vec<Vec3> = pairs.iter().map(|&k| mesh_pts[k]).collect();
        let dst: Vec<Vec3> = pairs.iter().map(|&k| *prep.target.point(hits[k].0)).collect();
        let next = update(&src, &dst, params.with_scale)?;

        if params.resample_each_iteration {
            let pool = &prep.mesh_pts;
            mesh_pts = uniform_subsample(pool, pool.len(), params.seed.wrapping_add(iterations as u64));
        }
        let next_objective = alignment_objective_with(&next, &mesh_pts, &prep.target, exec)?;
        if !params.resample_each_iteration && next_objective > objective {
            // Only reachable through scale clamping or trimming; keep the
            // better transform and stop.
            converged = true;
            break;
        }
        let decrease = objective - next_objective;
        current = next;
        converged = next_objective == 0.0 || decrease.abs() <= params.rel_tolerance * objective;
        objective = next_objective;
        history.push(objective);
    }
    Ok(AlignmentResult { transform: current, objective, iterations, converged, history })
}

/// ICP refinement from `t0`.
pub fn icp_refine(
    mesh: &MeshInstance,
    target: &LabeledPointCloud,
    t0: &SimilarityTransform,
    params: &IcpParams,
) -> Result<AlignmentResult, LayoutError> {
    let prep = prepare(mesh, target, params)?;
    refine_prepared(&prep, t0, params)
}

/// Initialization followed by refinement.
pub fn align_instance(
    mesh: &MeshInstance,
    target: &LabeledPointCloud,
    params: &IcpParams,
) -> Result<AlignmentResult, LayoutError> {
    let prep = prepare(mesh, target, params)?;
    let t0 = best(candidates_for(&prep, params)?);
    refine_prepared(&prep, &t0, params)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayoutReport {
    pub results: BTreeMap<InstanceId, AlignmentResult>,
    pub failures: BTreeMap<InstanceId, LayoutError>,
}

/// Aligns every mesh to its instance segment and records the resulting
/// pose and mesh in the returned context. Instances without a mesh are left
/// alone; a failing instance is reported and does not stop the others.
pub fn plan_layout(
    ctx: &SpatialContext,
    meshes: &BTreeMap<InstanceId, MeshInstance>,
    params: &IcpParams,
) -> Result<(SpatialContext, LayoutReport), LayoutError> {
    params.check()?;
    let jobs: Vec<(InstanceId, &MeshInstance)> = meshes.iter().map(|(id, m)| (*id, m)).collect();
    // Instances run in parallel; each alignment stays sequential inside.
    let inner = IcpParams { execution: Execution::Sequential, ..params.clone() };
    let outcomes = params.execution.map(&jobs, |(id, mesh)| {
        let segment = match ctx.extract_instance(*id) {
            Ok(s) => s,
            Err(crate::context::ContextError::UnknownInstance(i)) => return Err(LayoutError::UnknownInstance(i)),
            Err(_) => return Err(LayoutError::EmptyInstance(*id)),
        };
        align_instance(mesh, &segment, &inner)
    });
    let mut out = ctx.clone();
    let mut report = LayoutReport::default();
    for ((id, mesh), outcome) in jobs.into_iter().zip(outcomes) {
        match outcome {
            Ok(result) => {
                out.poses.insert(id, Pose::from_similarity(&result.transform));
                let mut mesh = mesh.clone();
                mesh.label = id;
                out.meshes.insert(id, mesh);
                report.results.insert(id, result);
            }
            Err(e) => {
                report.failures.insert(id, e);
            }
        }
    }
    Ok((out, report))
}
