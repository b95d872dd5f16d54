//! Relation-driven pose refinement.
//!
//! Each hyperedge contributes a weighted loss over the poses of its members;
//! the poses of all instances are optimized jointly by first-order descent
//! with backtracking. Scale is carried on [`Pose`] but never optimized here.
//!
//! Instance geometry lives in a local frame mapped to the world by its pose:
//! the mesh when one is attached, otherwise the cloud segment pulled back
//! through the current pose (identity when the instance has no pose).

use crate::context::{AxisSet, InstanceId, Relation, SpatialContext, BACKGROUND};
use crate::exec::Execution;
use crate::geometry::{hinge, sample_surface, Aabb, GeometryError, MeshInstance, SimilarityTransform, SpatialIndex};
use crate::Vec3;
use nalgebra::{Unit, UnitQuaternion};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_SYMMETRY_AXES: AxisSet = AxisSet::X;
pub const DEFAULT_ALIGNMENT_AXES: AxisSet = AxisSet::X;
pub const DEFAULT_EQUIDISTANCE_AXIS: Vec3 = Vec3::new(1.0, 0.0, 0.0);
/// Central-difference step, in scene units and radians.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ErgonomicsError {
    #[error("UnknownInstance: {0}")]
    UnknownInstance(InstanceId),
    #[error("MissingPose: instance {0} has neither a pose nor observed geometry")]
    MissingPose(InstanceId),
    #[error("MissingMesh: contact edge {edge} needs a mesh for instance {id}")]
    MissingMesh { edge: usize, id: InstanceId },
    #[error("EmptyPointSet: contact sample set is empty")]
    EmptyPointSet,
    #[error("NonUnitAxis: equidistance axis has norm {0}")]
    NonUnitAxis(f64),
    #[error("DuplicateMembers: relation members must be distinct")]
    DuplicateMembers,
    #[error("ArityMismatch: edge {edge} has {found} members")]
    ArityMismatch { edge: usize, found: usize },
    #[error("InvalidParams: edge {edge}: {detail}")]
    InvalidParams { edge: usize, detail: String },
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("NonFinite: energy became non-finite")]
    NonFinite,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Instance pose: `x ↦ scale·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
    pub scale: f64,
}

pub type PoseSet = BTreeMap<InstanceId, Pose>;

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vec3::zeros(), scale: 1.0 }
    }

    pub fn rigid(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation, translation, scale: 1.0 }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    pub fn to_similarity(&self) -> SimilarityTransform {
        SimilarityTransform::new_unchecked(self.scale, self.rotation.to_rotation_matrix(), self.translation)
    }

    pub fn from_similarity(t: &SimilarityTransform) -> Self {
        Self { rotation: t.quaternion(), translation: *t.translation(), scale: t.scale() }
    }

    pub fn check(&self) -> Result<(), String> {
        let n = self.rotation.as_ref().norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(format!("quaternion norm {n}"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(format!("scale {}", self.scale));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err("translation not finite".into());
        }
        Ok(())
    }

    /// Applies a world-space increment about the pose origin: rotation by
    /// the rotation vector `dr`, then translation by `dt`.
    pub fn perturbed(&self, dt: &Vec3, dr: &Vec3) -> Pose {
        Pose {
            rotation: UnitQuaternion::from_scaled_axis(*dr) * self.rotation,
            translation: self.translation + dt,
            scale: self.scale,
        }
    }
}

// ---------------------------------------------------------------------------
// Relation losses

/// Hard minimum distance between two transformed sample sets.
fn min_pair_distance(p: &[Vec3], q: &[Vec3], exec: Execution) -> Result<(f64, usize, usize), ErgonomicsError> {
    if p.is_empty() || q.is_empty() {
        return Err(ErgonomicsError::EmptyPointSet);
    }
    let index = SpatialIndex::build(q)?;
    let hits = index.nearest_batch(p, exec);
    let (i, &(j, d)) = hits
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.0.cmp(&b.0)))
        .expect("non-empty");
    Ok((d, i, j))
}

/// Contact loss `[min ‖p̃ − q̃‖ − ε]₊²` over transformed surface samples.
pub fn contact_loss(
    points_i: &[Vec3],
    points_j: &[Vec3],
    pose_i: &Pose,
    pose_j: &Pose,
    epsilon: f64,
) -> Result<f64, ErgonomicsError> {
    contact_loss_with(points_i, points_j, pose_i, pose_j, epsilon, Execution::default())
}

pub fn contact_loss_with(
    points_i: &[Vec3],
    points_j: &[Vec3],
    pose_i: &Pose,
    pose_j: &Pose,
    epsilon: f64,
    exec: Execution,
) -> Result<f64, ErgonomicsError> {
    if !(epsilon > 0.0) {
        return Err(ErgonomicsError::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    let p: Vec<Vec3> = points_i.iter().map(|x| pose_i.apply(x)).collect();
    let q: Vec<Vec3> = points_j.iter().map(|x| pose_j.apply(x)).collect();
    let (d, _, _) = min_pair_distance(&p, &q, exec)?;
    Ok(hinge(d - epsilon).powi(2))
}

/// Log-sum-exp soft minimum of all pairwise distances at `temperature`.
fn soft_min_distance(p: &[Vec3], q: &[Vec3], temperature: f64) -> (f64, Vec<(usize, usize, f64)>) {
    let mut dists = Vec::with_capacity(p.len() * q.len());
    for (i, a) in p.iter().enumerate() {
        for (j, b) in q.iter().enumerate() {
            dists.push((i, j, (a - b).norm()));
        }
    }
    let dmin = dists.iter().map(|d| d.2).fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = dists.iter().map(|d| (-(d.2 - dmin) / temperature).exp()).collect();
    let z: f64 = weights.iter().sum();
    let soft = dmin - temperature * z.ln();
    let grads = dists.iter().zip(&weights).map(|(d, w)| (d.0, d.1, w / z)).collect();
    (soft, grads)
}

/// Clearance loss `Σ_{v'≠v} [d_min − ‖õ_v − õ_v'‖]₊²` over transformed centers.
/// Instances without a pose are placed with the identity.
pub fn clearance_loss(
    poses: &PoseSet,
    centers: &BTreeMap<InstanceId, Vec3>,
    v: InstanceId,
    d_min: f64,
) -> Result<f64, ErgonomicsError> {
    let identity = Pose::identity();
    let place = |id: &InstanceId, c: &Vec3| poses.get(id).unwrap_or(&identity).apply(c);
    let cv = centers.get(&v).ok_or(ErgonomicsError::UnknownInstance(v))?;
    let ov = place(&v, cv);
    Ok(centers
        .iter()
        .filter(|(id, _)| **id != v)
        .map(|(id, c)| hinge(d_min - (ov - place(id, c)).norm()).powi(2))
        .sum())
}

/// Alignment loss `‖A(õ_i − õ_j)‖²`.
pub fn alignment_loss(pose_i: &Pose, pose_j: &Pose, center_i: &Vec3, center_j: &Vec3, axes: AxisSet) -> f64 {
    axes.project_norm_squared(&(pose_i.apply(center_i) - pose_j.apply(center_j)))
}

/// Symmetry loss `‖A((õ_i + õ_j)/2 − õ_k)‖²`; the third member is the reference.
pub fn symmetry_loss(
    ids: [InstanceId; 3],
    poses: [&Pose; 3],
    centers: [Vec3; 3],
    axes: AxisSet,
) -> Result<f64, ErgonomicsError> {
    if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
        return Err(ErgonomicsError::DuplicateMembers);
    }
    let o: Vec<Vec3> = (0..3).map(|k| poses[k].apply(&centers[k])).collect();
    Ok(symmetry_world(&o[0], &o[1], &o[2], axes))
}

/// Equidistance loss `(aᵀ(õ_i − õ_k) − aᵀ(õ_j − õ_k))²`.
pub fn equidistance_loss(poses: [&Pose; 3], centers: [Vec3; 3], axis: &Vec3) -> Result<f64, ErgonomicsError> {
    check_unit(axis)?;
    let o: Vec<Vec3> = (0..3).map(|k| poses[k].apply(&centers[k])).collect();
    Ok(equidistance_world(&o[0], &o[1], &o[2], axis))
}

fn check_unit(axis: &Vec3) -> Result<(), ErgonomicsError> {
    let n = axis.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(ErgonomicsError::NonUnitAxis(n));
    }
    Ok(())
}

fn symmetry_world(oi: &Vec3, oj: &Vec3, ok: &Vec3, axes: AxisSet) -> f64 {
    axes.project_norm_squared(&((oi + oj) * 0.5 - ok))
}

fn equidistance_world(oi: &Vec3, oj: &Vec3, ok: &Vec3, a: &Vec3) -> f64 {
    (a.dot(&(oi - ok)) - a.dot(&(oj - ok))).powi(2)
}

// ---------------------------------------------------------------------------
// Energy model

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationDofs {
    /// Rotation held fixed.
    Locked,
    /// Rotation about world +y only.
    Yaw,
    /// Full rotation vector.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    CentralDifference,
    Analytic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub rotation_dofs: RotationDofs,
    /// Translation components left free.
    pub translation_axes: AxisSet,
    /// Instances whose poses are held fixed.
    pub fixed: BTreeSet<InstanceId>,
    pub max_iterations: usize,
    pub step_size: f64,
    pub max_halvings: usize,
    pub grad_tolerance: f64,
    pub contact_samples: usize,
    /// Log-sum-exp smoothing of the contact minimum; `None` is the hard min.
    pub contact_temperature: Option<f64>,
    pub gradient: GradientMode,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rotation_dofs: RotationDofs::Yaw,
            translation_axes: AxisSet::XYZ,
            fixed: BTreeSet::new(),
            max_iterations: 500,
            step_size: 1e-2,
            max_halvings: 40,
            grad_tolerance: 1e-6,
            contact_samples: 512,
            contact_temperature: None,
            gradient: GradientMode::CentralDifference,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl OptimizerConfig {
    fn check(&self) -> Result<(), ErgonomicsError> {
        let bad = |m: &str| Err(ErgonomicsError::InvalidConfig(m.to_string()));
        if !(self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if !(self.grad_tolerance > 0.0) {
            return bad("grad_tolerance must be positive");
        }
        if self.contact_samples == 0 {
            return bad("contact_samples must be at least 1");
        }
        if matches!(self.contact_temperature, Some(t) if !(t > 0.0)) {
            return bad("contact temperature must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeEnergy {
    pub ordinal: usize,
    pub relation: Relation,
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub per_edge: Vec<EdgeEnergy>,
}

#[derive(Debug, Clone)]
struct Instance {
    id: InstanceId,
    base: Pose,
    center: Vec3,
    samples: Option<Vec<Vec3>>,
    default_clearance: f64,
}

#[derive(Debug, Clone)]
enum Term {
    Contact { i: usize, j: usize, epsilon: f64 },
    Clearance { v: usize, d_min: f64 },
    Alignment { i: usize, j: usize, axes: AxisSet },
    Symmetry { i: usize, j: usize, k: usize, axes: AxisSet },
    Equidistance { i: usize, j: usize, k: usize, axis: Vec3 },
}

#[derive(Debug, Clone)]
struct Edge {
    ordinal: usize,
    relation: Relation,
    weight: f64,
    term: Term,
}

/// Per-instance gradient with respect to the world increment (dt, dr).
#[derive(Debug, Clone, Copy, Default)]
struct PoseGrad {
    dt: Vec3,
    dr: Vec3,
}

/// The resolved objective: instances in local frames plus typed terms.
struct EnergyModel {
    instances: Vec<Instance>,
    slot: BTreeMap<InstanceId, usize>,
    edges: Vec<Edge>,
    temperature: Option<f64>,
    exec: Execution,
}

fn sample_seed(seed: u64, id: InstanceId) -> u64 {
    seed ^ (id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Local-frame surface samples the contact term uses for instance `id`.
pub fn contact_samples(mesh: &MeshInstance, id: InstanceId, config: &OptimizerConfig) -> Result<Vec<Vec3>, ErgonomicsError> {
    Ok(sample_surface(mesh, config.contact_samples, sample_seed(config.seed, id))?)
}

impl EnergyModel {
    fn build(ctx: &SpatialContext, config: &OptimizerConfig) -> Result<Self, ErgonomicsError> {
        config.check()?;
        let needs_mesh: BTreeSet<InstanceId> = ctx
            .graph
            .edges
            .iter()
            .filter(|e| e.relation == Relation::Contact)
            .flat_map(|e| e.members.iter().copied())
            .collect();

        let mut segments: BTreeMap<InstanceId, Vec<Vec3>> = BTreeMap::new();
        for p in &ctx.cloud.points {
            if p.label != BACKGROUND && ctx.graph.contains(p.label) {
                segments.entry(p.label).or_default().push(p.position);
            }
        }

        let mut instances = Vec::new();
        let mut slot = BTreeMap::new();
        for &id in ctx.graph.nodes.keys() {
            let base = ctx.poses.get(&id).copied();
            let (aabb, samples) = if let Some(mesh) = ctx.meshes.get(&id) {
                let samples = if needs_mesh.contains(&id) {
                    Some(contact_samples(mesh, id, config)?)
                } else {
                    None
                };
                (mesh.aabb(), samples)
            } else if let Some(world) = segments.get(&id) {
                let inv = base.unwrap_or_default().to_similarity().inverse();
                let local: Vec<Vec3> = world.iter().map(|p| inv.apply(p)).collect();
                (Aabb::from_points(&local).expect("non-empty segment"), None)
            } else {
                // Planned instance without geometry: not part of the objective.
                continue;
            };
            let base = base.unwrap_or_default();
            slot.insert(id, instances.len());
            instances.push(Instance {
                id,
                base,
                center: aabb.center(),
                samples,
                default_clearance: 0.5 * aabb.extent().max() * base.scale,
            });
        }

        let mut edges = Vec::new();
        for (ordinal, e) in ctx.graph.edges.iter().enumerate() {
            if e.members.len() != e.relation.arity() {
                return Err(ErgonomicsError::ArityMismatch { edge: ordinal, found: e.members.len() });
            }
            let mut idx = Vec::with_capacity(e.members.len());
            for &m in &e.members {
                if !ctx.graph.contains(m) {
                    return Err(ErgonomicsError::UnknownInstance(m));
                }
                idx.push(*slot.get(&m).ok_or(ErgonomicsError::MissingPose(m))?);
            }
            let distinct: BTreeSet<_> = idx.iter().collect();
            if distinct.len() != idx.len() {
                return Err(ErgonomicsError::DuplicateMembers);
            }
            let invalid = |detail: String| ErgonomicsError::InvalidParams { edge: ordinal, detail };
            let term = match e.relation {
                Relation::Contact => {
                    for (&m, &s) in e.members.iter().zip(&idx) {
                        if instances[s].samples.is_none() {
                            return Err(ErgonomicsError::MissingMesh { edge: ordinal, id: m });
                        }
                    }
                    let epsilon = e.params.epsilon.unwrap_or(DEFAULT_EPSILON);
                    if !(epsilon > 0.0) {
                        return Err(invalid(format!("eps {epsilon}")));
                    }
                    Term::Contact { i: idx[0], j: idx[1], epsilon }
                }
                Relation::Clearance => {
                    let d_min = e.params.clearance_radius.unwrap_or(instances[idx[0]].default_clearance);
                    if !(d_min >= 0.0) {
                        return Err(invalid(format!("dmin {d_min}")));
                    }
                    Term::Clearance { v: idx[0], d_min }
                }
                Relation::Alignment => Term::Alignment {
                    i: idx[0],
                    j: idx[1],
                    axes: e.params.axes.unwrap_or(DEFAULT_ALIGNMENT_AXES),
                },
                Relation::Symmetry => Term::Symmetry {
                    i: idx[0],
                    j: idx[1],
                    k: idx[2],
                    axes: e.params.axes.unwrap_or(DEFAULT_SYMMETRY_AXES),
                },
                Relation::Equidistance => {
                    let axis = e.params.axis.unwrap_or(DEFAULT_EQUIDISTANCE_AXIS);
                    check_unit(&axis)?;
                    Term::Equidistance { i: idx[0], j: idx[1], k: idx[2], axis }
                }
            };
            if !(e.weight >= 0.0 && e.weight.is_finite()) {
                return Err(invalid(format!("weight {}", e.weight)));
            }
            edges.push(Edge { ordinal, relation: e.relation, weight: e.weight, term });
        }
        Ok(Self { instances, slot, edges, temperature: config.contact_temperature, exec: config.execution })
    }

    fn base_poses(&self) -> Vec<Pose> {
        self.instances.iter().map(|i| i.base).collect()
    }

    fn world_center(&self, poses: &[Pose], k: usize) -> Vec3 {
        poses[k].apply(&self.instances[k].center)
    }

    fn world_samples(&self, poses: &[Pose], k: usize) -> Vec<Vec3> {
        let pose = &poses[k];
        self.instances[k].samples.as_ref().expect("contact member has samples").iter().map(|p| pose.apply(p)).collect()
    }

    fn contact_distance(&self, poses: &[Pose], i: usize, j: usize) -> f64 {
        let p = self.world_samples(poses, i);
        let q = self.world_samples(poses, j);
        match self.temperature {
            Some(t) => soft_min_distance(&p, &q, t).0,
            // Inner queries stay sequential; parallelism is across edges and dofs.
            None => min_pair_distance(&p, &q, Execution::Sequential).expect("non-empty samples").0,
        }
    }

    fn term_loss(&self, term: &Term, poses: &[Pose]) -> f64 {
        match *term {
            Term::Contact { i, j, epsilon } => hinge(self.contact_distance(poses, i, j) - epsilon).powi(2),
            Term::Clearance { v, d_min } => {
                let ov = self.world_center(poses, v);
                (0..self.instances.len())
                    .filter(|&k| k != v)
                    .map(|k| hinge(d_min - (ov - self.world_center(poses, k)).norm()).powi(2))
                    .sum()
            }
            Term::Alignment { i, j, axes } => {
                axes.project_norm_squared(&(self.world_center(poses, i) - self.world_center(poses, j)))
            }
            Term::Symmetry { i, j, k, axes } => symmetry_world(
                &self.world_center(poses, i),
                &self.world_center(poses, j),
                &self.world_center(poses, k),
                axes,
            ),
            Term::Equidistance { i, j, k, axis } => equidistance_world(
                &self.world_center(poses, i),
                &self.world_center(poses, j),
                &self.world_center(poses, k),
                &axis,
            ),
        }
    }

    fn breakdown(&self, poses: &[Pose]) -> EnergyBreakdown {
        let per_edge: Vec<EdgeEnergy> = self.exec.map(&self.edges, |e| EdgeEnergy {
            ordinal: e.ordinal,
            relation: e.relation,
            weighted: e.weight * self.term_loss(&e.term, poses),
        });
        let total = per_edge.iter().map(|e| e.weighted).sum();
        EnergyBreakdown { total, per_edge }
    }

    fn total(&self, poses: &[Pose]) -> f64 {
        self.breakdown(poses).total
    }

    fn involves(&self, term: &Term, k: usize) -> bool {
        match *term {
            Term::Contact { i, j, .. } | Term::Alignment { i, j, .. } => i == k || j == k,
            Term::Symmetry { i, j, k: r, .. } | Term::Equidistance { i, j, k: r, .. } => i == k || j == k || r == k,
            Term::Clearance { .. } => true,
        }
    }

    /// Accumulates the gradient of world point `w` of instance `k`.
    fn push_point_grad(grads: &mut [PoseGrad], poses: &[Pose], k: usize, w: &Vec3, g: &Vec3) {
        grads[k].dt += g;
        grads[k].dr += (w - poses[k].translation).cross(g);
    }

    fn term_grad(&self, term: &Term, weight: f64, poses: &[Pose], grads: &mut [PoseGrad]) {
        let center = |k: usize| self.world_center(poses, k);
        match *term {
            Term::Contact { i, j, epsilon } => {
                let p = self.world_samples(poses, i);
                let q = self.world_samples(poses, j);
                match self.temperature {
                    None => {
                        let (d, a, b) = min_pair_distance(&p, &q, Execution::Sequential).expect("non-empty");
                        let h = hinge(d - epsilon);
                        if h > 0.0 && d > 0.0 {
                            let g = (p[a] - q[b]) * (2.0 * h / d * weight);
                            Self::push_point_grad(grads, poses, i, &p[a], &g);
                            Self::push_point_grad(grads, poses, j, &q[b], &(-g));
                        }
                    }
                    Some(t) => {
                        let (d, pairs) = soft_min_distance(&p, &q, t);
                        let h = hinge(d - epsilon);
                        if h > 0.0 {
                            for (a, b, w) in pairs {
                                let diff = p[a] - q[b];
                                let n = diff.norm();
                                if n > 0.0 && w > 0.0 {
                                    let g = diff * (2.0 * h * w / n * weight);
                                    Self::push_point_grad(grads, poses, i, &p[a], &g);
                                    Self::push_point_grad(grads, poses, j, &q[b], &(-g));
                                }
                            }
                        }
                    }
                }
            }
            Term::Clearance { v, d_min } => {
                let ov = center(v);
                for k in (0..self.instances.len()).filter(|&k| k != v) {
                    let ok = center(k);
                    let diff = ov - ok;
                    let n = diff.norm();
                    let h = hinge(d_min - n);
                    if h > 0.0 && n > 0.0 {
                        let g = diff * (-2.0 * h / n * weight);
                        Self::push_point_grad(grads, poses, v, &ov, &g);
                        Self::push_point_grad(grads, poses, k, &ok, &(-g));
                    }
                }
            }
            Term::Alignment { i, j, axes } => {
                let (oi, oj) = (center(i), center(j));
                let g = (oi - oj).component_mul(&axes.mask()) * (2.0 * weight);
                Self::push_point_grad(grads, poses, i, &oi, &g);
                Self::push_point_grad(grads, poses, j, &oj, &(-g));
            }
            Term::Symmetry { i, j, k, axes } => {
                let (oi, oj, ok) = (center(i), center(j), center(k));
                let m = ((oi + oj) * 0.5 - ok).component_mul(&axes.mask()) * weight;
                Self::push_point_grad(grads, poses, i, &oi, &m);
                Self::push_point_grad(grads, poses, j, &oj, &m);
                Self::push_point_grad(grads, poses, k, &ok, &(m * -2.0));
            }
            Term::Equidistance { i, j, k, axis } => {
                let (oi, oj, ok) = (center(i), center(j), center(k));
                let s = axis.dot(&(oi - ok)) - axis.dot(&(oj - ok));
                let g = axis * (2.0 * s * weight);
                Self::push_point_grad(grads, poses, i, &oi, &g);
                Self::push_point_grad(grads, poses, j, &oj, &(-g));
                // The reference cancels out of the loss.
                Self::push_point_grad(grads, poses, k, &ok, &Vec3::zeros());
            }
        }
    }
}

/// One optimization variable: a component of an instance's increment.
#[derive(Debug, Clone, Copy)]
struct Dof {
    slot: usize,
    /// 0..3 translation, 3..6 rotation vector.
    component: usize,
}

fn increment(component: usize, h: f64) -> (Vec3, Vec3) {
    let mut dt = Vec3::zeros();
    let mut dr = Vec3::zeros();
    if component < 3 {
        dt[component] = h;
    } else {
        dr[component - 3] = h;
    }
    (dt, dr)
}

fn dofs_for(model: &EnergyModel, config: &OptimizerConfig) -> Vec<Dof> {
    let mut active = BTreeSet::new();
    for e in &model.edges {
        match e.term {
            Term::Clearance { .. } => active.extend(0..model.instances.len()),
            Term::Contact { i, j, .. } | Term::Alignment { i, j, .. } => {
                active.insert(i);
                active.insert(j);
            }
            Term::Symmetry { i, j, k, .. } | Term::Equidistance { i, j, k, .. } => {
                active.extend([i, j, k]);
            }
        }
    }
    let rot: &[usize] = match config.rotation_dofs {
        RotationDofs::Locked => &[],
        RotationDofs::Yaw => &[4],
        RotationDofs::Full => &[3, 4, 5],
    };
    let mut dofs = Vec::new();
    for slot in active {
        if config.fixed.contains(&model.instances[slot].id) {
            continue;
        }
        for c in (0..3).filter(|&c| config.translation_axes.contains(c)) {
            dofs.push(Dof { slot, component: c });
        }
        for &c in rot {
            dofs.push(Dof { slot, component: c });
        }
    }
    dofs
}

fn central_difference_gradient(model: &EnergyModel, poses: &[Pose], dofs: &[Dof], exec: Execution) -> Vec<f64> {
    exec.map(dofs, |dof| {
        let affected: Vec<&Edge> = model.edges.iter().filter(|e| model.involves(&e.term, dof.slot)).collect();
        let eval = |h: f64| {
            let mut p = poses.to_vec();
            let (dt, dr) = increment(dof.component, h);
            p[dof.slot] = poses[dof.slot].perturbed(&dt, &dr);
            affected.iter().map(|e| e.weight * model.term_loss(&e.term, &p)).sum::<f64>()
        };
        (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
    })
}

fn analytic_gradient(model: &EnergyModel, poses: &[Pose], dofs: &[Dof]) -> Vec<f64> {
    let mut grads = vec![PoseGrad::default(); model.instances.len()];
    for e in &model.edges {
        model.term_grad(&e.term, e.weight, poses, &mut grads);
    }
    dofs.iter()
        .map(|d| if d.component < 3 { grads[d.slot].dt[d.component] } else { grads[d.slot].dr[d.component - 3] })
        .collect()
}

fn retract(poses: &[Pose], dofs: &[Dof], step: &[f64]) -> Vec<Pose> {
    let mut dt = vec![Vec3::zeros(); poses.len()];
    let mut dr = vec![Vec3::zeros(); poses.len()];
    for (d, s) in dofs.iter().zip(step) {
        if d.component < 3 {
            dt[d.slot][d.component] += s;
        } else {
            dr[d.slot][d.component - 3] += s;
        }
    }
    poses.iter().enumerate().map(|(k, p)| p.perturbed(&dt[k], &dr[k])).collect()
}

/// Weighted energy of `poses` (instances absent from `poses` keep their
/// context pose).
pub fn total_energy(
    ctx: &SpatialContext,
    poses: &PoseSet,
    config: &OptimizerConfig,
) -> Result<EnergyBreakdown, ErgonomicsError> {
    let model = EnergyModel::build(ctx, config)?;
    let current: Vec<Pose> = model.instances.iter().map(|i| poses.get(&i.id).copied().unwrap_or(i.base)).collect();
    let breakdown = model.breakdown(&current);
    if !breakdown.total.is_finite() {
        return Err(ErgonomicsError::NonFinite);
    }
    Ok(breakdown)
}

/// Gradient of the energy at the context poses with respect to every free
/// dof, as `(instance, component, value)` with components `0..3` for
/// translation and `3..6` for the rotation vector.
pub fn energy_gradient(
    ctx: &SpatialContext,
    config: &OptimizerConfig,
    mode: GradientMode,
) -> Result<Vec<(InstanceId, usize, f64)>, ErgonomicsError> {
    let model = EnergyModel::build(ctx, config)?;
    let poses = model.base_poses();
    let dofs = dofs_for(&model, config);
    let g = match mode {
        GradientMode::CentralDifference => central_difference_gradient(&model, &poses, &dofs, config.execution),
        GradientMode::Analytic => analytic_gradient(&model, &poses, &dofs),
    };
    Ok(dofs.iter().zip(g).map(|(d, v)| (model.instances[d.slot].id, d.component, v)).collect())
}

/// Minimum distance between the transformed contact samples of two
/// instances (both need meshes).
pub fn contact_distance(
    ctx: &SpatialContext,
    a: InstanceId,
    b: InstanceId,
    config: &OptimizerConfig,
) -> Result<f64, ErgonomicsError> {
    let mut probe = ctx.clone();
    probe.graph.edges = vec![crate::context::HyperEdge::new(Relation::Contact, vec![a, b])];
    let model = EnergyModel::build(&probe, config)?;
    let poses = model.base_poses();
    let (i, j) = (model.slot[&a], model.slot[&b]);
    Ok(min_pair_distance(&model.world_samples(&poses, i), &model.world_samples(&poses, j), Execution::Sequential)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub total_energy: f64,
    pub step_size: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    NothingToOptimize,
    GradientTolerance,
    MaxIterations,
    NoImprovement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    /// Row 0 is the initial state; later rows are descent iterations.
    pub rows: Vec<TraceRow>,
    pub iterations: usize,
    pub stop: StopReason,
}

impl OptimizationTrace {
    pub fn final_energy(&self) -> f64 {
        self.rows.iter().rev().find(|r| r.accepted).map(|r| r.total_energy).unwrap_or(0.0)
    }

    /// Energies of accepted states, in order.
    pub fn accepted_energies(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.accepted).map(|r| r.total_energy).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,total_energy,step_size,accepted\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:?},{:?},{}", r.iteration, r.total_energy, r.step_size, r.accepted);
        }
        out
    }
}

/// Jointly optimizes instance poses and writes them back into the context.
///
/// Cloud segments follow their instance by the pose increment; meshes stay
/// in their local frame.
pub fn optimize_poses(
    ctx: &SpatialContext,
    config: &OptimizerConfig,
) -> Result<(SpatialContext, OptimizationTrace), ErgonomicsError> {
    let model = EnergyModel::build(ctx, config)?;
    let dofs = dofs_for(&model, config);
    let mut poses = model.base_poses();
    let mut energy = model.total(&poses);
    if !energy.is_finite() {
        return Err(ErgonomicsError::NonFinite);
    }
    let mut rows = vec![TraceRow { iteration: 0, total_energy: energy, step_size: 0.0, accepted: true }];
    if dofs.is_empty() || model.edges.is_empty() {
        return Ok((ctx.clone(), OptimizationTrace { rows, iterations: 0, stop: StopReason::NothingToOptimize }));
    }

    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    for it in 1..=config.max_iterations {
        let grad = match config.gradient {
            GradientMode::CentralDifference => central_difference_gradient(&model, &poses, &dofs, config.execution),
            GradientMode::Analytic => analytic_gradient(&model, &poses, &dofs),
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(ErgonomicsError::NonFinite);
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= config.grad_tolerance {
            stop = StopReason::GradientTolerance;
            break;
        }
        iterations = it;
        let mut alpha = config.step_size;
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let step: Vec<f64> = grad.iter().map(|g| -alpha * g).collect();
            let trial = retract(&poses, &dofs, &step);
            let e = model.total(&trial);
            if e.is_finite() && e < energy {
                accepted = Some((trial, e));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, e)) => {
                poses = trial;
                energy = e;
                rows.push(TraceRow { iteration: it, total_energy: e, step_size: alpha, accepted: true });
            }
            None => {
                rows.push(TraceRow { iteration: it, total_energy: energy, step_size: alpha, accepted: false });
                stop = StopReason::NoImprovement;
                break;
            }
        }
    }

    let mut out = ctx.clone();
    for (inst, pose) in model.instances.iter().zip(&poses) {
        if *pose == inst.base {
            continue;
        }
        let delta = pose.to_similarity().compose(&inst.base.to_similarity().inverse());
        for p in out.cloud.points.iter_mut().filter(|p| p.label == inst.id) {
            p.position = delta.apply(&p.position);
        }
        out.poses.insert(inst.id, *pose);
    }
    Ok((out, OptimizationTrace { rows, iterations, stop }))
}

/// Yaw-only rotation helper.
pub fn yaw(angle: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vec3::y()), angle)
}
