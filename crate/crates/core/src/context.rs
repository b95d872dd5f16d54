//! The spatial context: portrait, labeled point cloud and scene hypergraph,
//! plus per-instance poses and meshes.
//!
//! Contexts are plain values. Every update returns a new context and leaves
//! the input untouched.

use crate::ergonomics::PoseSet;
use crate::geometry::{Aabb, MeshInstance, SimilarityTransform};
use crate::Vec3;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use thiserror::Error;

/// Instance label. `0` is reserved for background points.
pub type InstanceId = u32;

pub const BACKGROUND: InstanceId = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContextError {
    #[error("UnknownInstance: instance {0} is not in the hypergraph")]
    UnknownInstance(InstanceId),
    #[error("EmptyInstance: no cloud points carry label {0}")]
    EmptyInstance(InstanceId),
    #[error("LabelMismatch: replacement point labeled {found} while replacing {expected}")]
    LabelMismatch { expected: InstanceId, found: InstanceId },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub position: Vec3,
    /// RGB, each channel in `[0, 1]`.
    pub color: [f64; 3],
    pub label: InstanceId,
}

impl LabeledPoint {
    pub fn new(position: Vec3, color: [f64; 3], label: InstanceId) -> Self {
        Self { position, color, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    pub points: Vec<LabeledPoint>,
    /// Meters per scene unit.
    pub unit_scale: f64,
}

impl Default for LabeledPointCloud {
    fn default() -> Self {
        Self { points: Vec::new(), unit_scale: 1.0 }
    }
}

impl LabeledPointCloud {
    pub fn new(points: Vec<LabeledPoint>) -> Self {
        Self { points, unit_scale: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn aabb(&self) -> Option<Aabb> {
        Aabb::from_points(self.points.iter().map(|p| &p.position))
    }

    /// Points carrying `label`, in cloud order.
    pub fn with_label(&self, label: InstanceId) -> impl Iterator<Item = &LabeledPoint> + '_ {
        self.points.iter().filter(move |p| p.label == label)
    }

    /// Number of points per label (background included).
    pub fn label_counts(&self) -> BTreeMap<InstanceId, usize> {
        let mut counts = BTreeMap::new();
        for p in &self.points {
            *counts.entry(p.label).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenePortrait {
    pub description: String,
    pub image_refs: Vec<PathBuf>,
}

impl ScenePortrait {
    pub fn from_text(description: impl Into<String>) -> Self {
        Self { description: description.into(), image_refs: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Clearance,
    Contact,
    Alignment,
    Equidistance,
    Symmetry,
}

impl Relation {
    pub const ALL: [Relation; 5] =
        [Relation::Clearance, Relation::Contact, Relation::Alignment, Relation::Equidistance, Relation::Symmetry];

    pub fn arity(self) -> usize {
        match self {
            Relation::Clearance => 1,
            Relation::Contact | Relation::Alignment => 2,
            Relation::Equidistance | Relation::Symmetry => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::Clearance => "clearance",
            Relation::Contact => "contact",
            Relation::Alignment => "alignment",
            Relation::Equidistance => "equidistance",
            Relation::Symmetry => "symmetry",
        }
    }

    pub fn from_name(name: &str) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.name() == name)
    }

    /// Weight used when an edge does not state one.
    pub fn default_weight(self) -> f64 {
        match self {
            Relation::Clearance => 0.5,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Non-empty subset of the world axes `{x, y, z}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AxisSet(u8);

impl AxisSet {
    pub const X: AxisSet = AxisSet(1);
    pub const Y: AxisSet = AxisSet(2);
    pub const Z: AxisSet = AxisSet(4);
    pub const XZ: AxisSet = AxisSet(5);
    pub const XYZ: AxisSet = AxisSet(7);

    pub fn from_bits(bits: u8) -> Option<AxisSet> {
        (bits != 0 && bits < 8).then_some(AxisSet(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, axis: usize) -> bool {
        axis < 3 && self.0 & (1 << axis) != 0
    }

    /// Diagonal of the selector: 1 on selected axes, 0 elsewhere.
    pub fn mask(self) -> Vec3 {
        Vec3::new(
            if self.contains(0) { 1.0 } else { 0.0 },
            if self.contains(1) { 1.0 } else { 0.0 },
            if self.contains(2) { 1.0 } else { 0.0 },
        )
    }

    /// `‖A v‖²` for the selector `A`.
    pub fn project_norm_squared(self, v: &Vec3) -> f64 {
        (0..3).filter(|&k| self.contains(k)).map(|k| v[k] * v[k]).sum()
    }

    pub fn parse(s: &str) -> Option<AxisSet> {
        let mut bits = 0u8;
        for c in s.chars() {
            let b = match c {
                'x' | 'X' => 1,
                'y' | 'Y' => 2,
                'z' | 'Z' => 4,
                _ => return None,
            };
            if bits & b != 0 {
                return None;
            }
            bits |= b;
        }
        AxisSet::from_bits(bits)
    }
}

impl fmt::Display for AxisSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, c) in ['x', 'y', 'z'].iter().enumerate() {
            if self.contains(k) {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

/// Per-edge constraint details. Absent values fall back to documented
/// defaults at evaluation time.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RelationParams {
    /// Soft contact margin (contact).
    pub epsilon: Option<f64>,
    /// Minimum clearance radius (clearance).
    pub clearance_radius: Option<f64>,
    /// Axis selector (alignment, symmetry).
    pub axes: Option<AxisSet>,
    /// Unit comparison axis (equidistance).
    pub axis: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperEdge {
    pub relation: Relation,
    /// For symmetry and equidistance the third member is the reference.
    pub members: Vec<InstanceId>,
    pub weight: f64,
    pub params: RelationParams,
}

impl HyperEdge {
    pub fn new(relation: Relation, members: Vec<InstanceId>) -> Self {
        Self { relation, members, weight: relation.default_weight(), params: RelationParams::default() }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn with_params(mut self, params: RelationParams) -> Self {
        self.params = params;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: InstanceId,
    pub name: String,
    /// Planned instances have no observed points yet.
    pub planned: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneHypergraph {
    pub nodes: BTreeMap<InstanceId, Node>,
    pub edges: Vec<HyperEdge>,
}

impl SceneHypergraph {
    pub fn add_node(&mut self, id: InstanceId, name: impl Into<String>) -> &mut Self {
        self.nodes.insert(id, Node { id, name: name.into(), planned: false });
        self
    }

    pub fn add_edge(&mut self, edge: HyperEdge) -> &mut Self {
        self.edges.push(edge);
        self
    }

    pub fn contains(&self, id: InstanceId) -> bool {
        self.nodes.contains_key(&id)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpatialContext {
    pub portrait: ScenePortrait,
    pub cloud: LabeledPointCloud,
    pub graph: SceneHypergraph,
    pub poses: PoseSet,
    pub meshes: BTreeMap<InstanceId, MeshInstance>,
}

impl SpatialContext {
    pub fn new(portrait: ScenePortrait, cloud: LabeledPointCloud, graph: SceneHypergraph) -> Self {
        Self { portrait, cloud, graph, poses: PoseSet::new(), meshes: BTreeMap::new() }
    }

    fn require_node(&self, label: InstanceId) -> Result<(), ContextError> {
        if self.graph.contains(label) {
            Ok(())
        } else {
            Err(ContextError::UnknownInstance(label))
        }
    }

    /// The points labeled `label`, order-preserving.
    pub fn extract_instance(&self, label: InstanceId) -> Result<LabeledPointCloud, ContextError> {
        self.require_node(label)?;
        let points: Vec<LabeledPoint> = self.cloud.with_label(label).copied().collect();
        if points.is_empty() {
            return Err(ContextError::EmptyInstance(label));
        }
        Ok(LabeledPointCloud { points, unit_scale: self.cloud.unit_scale })
    }

    /// Removes every point labeled `label` and appends `replacement`.
    pub fn replace_instance(
        &self,
        label: InstanceId,
        replacement: &LabeledPointCloud,
    ) -> Result<SpatialContext, ContextError> {
        self.require_node(label)?;
        if let Some(bad) = replacement.points.iter().find(|p| p.label != label) {
            return Err(ContextError::LabelMismatch { expected: label, found: bad.label });
        }
        let mut out = self.clone();
        out.cloud.points.retain(|p| p.label != label);
        out.cloud.points.extend_from_slice(&replacement.points);
        Ok(out)
    }

    pub fn instance_aabb(&self, label: InstanceId) -> Result<Aabb, ContextError> {
        self.require_node(label)?;
        Aabb::from_points(self.cloud.with_label(label).map(|p| &p.position))
            .ok_or(ContextError::EmptyInstance(label))
    }

    /// Applies `t` to the instance's points and composes it onto the
    /// instance pose. A mesh without a pose gets `t` as its pose.
    pub fn transform_instance(
        &self,
        label: InstanceId,
        t: &SimilarityTransform,
    ) -> Result<SpatialContext, ContextError> {
        self.require_node(label)?;
        let mut out = self.clone();
        for p in out.cloud.points.iter_mut().filter(|p| p.label == label) {
            p.position = t.apply(&p.position);
        }
        if let Some(pose) = out.poses.get_mut(&label) {
            *pose = crate::ergonomics::Pose::from_similarity(&t.compose(&pose.to_similarity()));
        } else if out.meshes.contains_key(&label) {
            out.poses.insert(label, crate::ergonomics::Pose::from_similarity(t));
        }
        Ok(out)
    }

    /// Non-background labels in the cloud.
    pub fn labels(&self) -> BTreeSet<InstanceId> {
        self.cloud.points.iter().map(|p| p.label).filter(|&l| l != BACKGROUND).collect()
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }
}

/// One violated context invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Finding {
    EmptyPortrait,
    InvalidUnitScale(f64),
    NonFinitePoint { index: usize },
    ColorOutOfRange { index: usize },
    BackgroundNode,
    NodeIdMismatch { key: InstanceId, id: InstanceId },
    UnobservedNode { id: InstanceId },
    DanglingMember { edge: usize, member: InstanceId },
    ArityMismatch { edge: usize, relation: Relation, found: usize },
    DuplicateMembers { edge: usize },
    InvalidWeight { edge: usize, weight: f64 },
    InvalidParams { edge: usize, detail: String },
    OrphanPose { id: InstanceId },
    InvalidPose { id: InstanceId, detail: String },
    OrphanMesh { id: InstanceId },
    MeshLabelMismatch { key: InstanceId, label: InstanceId },
    MeshIndexOutOfRange { id: InstanceId },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::EmptyPortrait => write!(f, "EmptyPortrait: portrait has neither text nor images"),
            Finding::InvalidUnitScale(s) => write!(f, "InvalidUnitScale: {s}"),
            Finding::NonFinitePoint { index } => write!(f, "NonFinitePoint: point {index}"),
            Finding::ColorOutOfRange { index } => write!(f, "ColorOutOfRange: point {index}"),
            Finding::BackgroundNode => write!(f, "BackgroundNode: label 0 is reserved for background"),
            Finding::NodeIdMismatch { key, id } => write!(f, "NodeIdMismatch: node keyed {key} has id {id}"),
            Finding::UnobservedNode { id } => {
                write!(f, "UnobservedNode: node {id} has no points and is not planned")
            }
            Finding::DanglingMember { edge, member } => {
                write!(f, "DanglingMember: edge {edge} references missing node {member}")
            }
            Finding::ArityMismatch { edge, relation, found } => write!(
                f,
                "ArityMismatch: edge {edge} ({relation}) has {found} members, expected {}",
                relation.arity()
            ),
            Finding::DuplicateMembers { edge } => write!(f, "DuplicateMembers: edge {edge}"),
            Finding::InvalidWeight { edge, weight } => write!(f, "InvalidWeight: edge {edge} weight {weight}"),
            Finding::InvalidParams { edge, detail } => write!(f, "InvalidParams: edge {edge}: {detail}"),
            Finding::OrphanPose { id } => write!(f, "OrphanPose: pose for unknown node {id}"),
            Finding::InvalidPose { id, detail } => write!(f, "InvalidPose: node {id}: {detail}"),
            Finding::OrphanMesh { id } => write!(f, "OrphanMesh: mesh for unknown node {id}"),
            Finding::MeshLabelMismatch { key, label } => {
                write!(f, "MeshLabelMismatch: mesh keyed {key} is labeled {label}")
            }
            Finding::MeshIndexOutOfRange { id } => write!(f, "MeshIndexOutOfRange: mesh {id}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.findings.is_empty() {
            return write!(f, "OK");
        }
        for (i, finding) in self.findings.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{finding}")?;
        }
        Ok(())
    }
}

fn edge_param_findings(edge: &HyperEdge) -> Vec<String> {
    let p = &edge.params;
    let mut out = Vec::new();
    if let Some(eps) = p.epsilon {
        if edge.relation != Relation::Contact {
            out.push("eps is only valid on contact edges".to_string());
        } else if !(eps > 0.0 && eps.is_finite()) {
            out.push(format!("eps must be positive, got {eps}"));
        }
    }
    if let Some(d) = p.clearance_radius {
        if edge.relation != Relation::Clearance {
            out.push("dmin is only valid on clearance edges".to_string());
        } else if !(d > 0.0 && d.is_finite()) {
            out.push(format!("dmin must be positive, got {d}"));
        }
    }
    if p.axes.is_some() && !matches!(edge.relation, Relation::Alignment | Relation::Symmetry) {
        out.push("axes is only valid on alignment and symmetry edges".to_string());
    }
    if let Some(a) = p.axis {
        if edge.relation != Relation::Equidistance {
            out.push("axis is only valid on equidistance edges".to_string());
        } else if !((a.norm() - 1.0).abs() <= 1e-9) {
            out.push(format!("axis must have unit norm, got {}", a.norm()));
        }
    }
    out
}

/// Lists every violated invariant. Never fails.
pub fn validate(ctx: &SpatialContext) -> ValidationReport {
    let mut findings = Vec::new();
    if ctx.portrait.description.trim().is_empty() && ctx.portrait.image_refs.is_empty() {
        findings.push(Finding::EmptyPortrait);
    }
    if !(ctx.cloud.unit_scale > 0.0 && ctx.cloud.unit_scale.is_finite()) {
        findings.push(Finding::InvalidUnitScale(ctx.cloud.unit_scale));
    }
    let mut seen = BTreeSet::new();
    for (index, p) in ctx.cloud.points.iter().enumerate() {
        if !p.position.iter().all(|v| v.is_finite()) {
            findings.push(Finding::NonFinitePoint { index });
        }
        if !p.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            findings.push(Finding::ColorOutOfRange { index });
        }
        seen.insert(p.label);
    }
    for (&key, node) in &ctx.graph.nodes {
        if key == BACKGROUND {
            findings.push(Finding::BackgroundNode);
        }
        if node.id != key {
            findings.push(Finding::NodeIdMismatch { key, id: node.id });
        }
        if !node.planned && !seen.contains(&key) {
            findings.push(Finding::UnobservedNode { id: key });
        }
    }
    for (i, edge) in ctx.graph.edges.iter().enumerate() {
        if edge.members.len() != edge.relation.arity() {
            findings.push(Finding::ArityMismatch { edge: i, relation: edge.relation, found: edge.members.len() });
        }
        for &m in &edge.members {
            if !ctx.graph.contains(m) {
                findings.push(Finding::DanglingMember { edge: i, member: m });
            }
        }
        let distinct: BTreeSet<_> = edge.members.iter().collect();
        if distinct.len() != edge.members.len() {
            findings.push(Finding::DuplicateMembers { edge: i });
        }
        if !(edge.weight >= 0.0 && edge.weight.is_finite()) {
            findings.push(Finding::InvalidWeight { edge: i, weight: edge.weight });
        }
        for detail in edge_param_findings(edge) {
            findings.push(Finding::InvalidParams { edge: i, detail });
        }
    }
    for (&id, pose) in &ctx.poses {
        if !ctx.graph.contains(id) {
            findings.push(Finding::OrphanPose { id });
        }
        if let Err(detail) = pose.check() {
            findings.push(Finding::InvalidPose { id, detail });
        }
    }
    for (&id, mesh) in &ctx.meshes {
        if !ctx.graph.contains(id) {
            findings.push(Finding::OrphanMesh { id });
        }
        if mesh.label != id {
            findings.push(Finding::MeshLabelMismatch { key: id, label: mesh.label });
        }
        if mesh.vertices.is_empty() || mesh.triangles.iter().flatten().any(|&v| v >= mesh.vertices.len()) {
            findings.push(Finding::MeshIndexOutOfRange { id });
        }
    }
    ValidationReport { findings }
}

/// Merges a second labeling into the first.
///
/// A secondary instance is identified with a primary one when their AABBs
/// overlap with IoU > 0.5 and the category names are identical; otherwise
/// it receives a fresh id above every existing label. Background points are
/// carried over unchanged.
pub fn merge_labelings(
    primary: &LabeledPointCloud,
    primary_names: &BTreeMap<InstanceId, String>,
    secondary: &LabeledPointCloud,
    secondary_names: &BTreeMap<InstanceId, String>,
) -> (LabeledPointCloud, BTreeMap<InstanceId, String>) {
    let boxes = |cloud: &LabeledPointCloud| -> BTreeMap<InstanceId, Aabb> {
        let mut out = BTreeMap::new();
        for l in cloud.label_counts().keys().copied().filter(|&l| l != BACKGROUND) {
            if let Some(b) = Aabb::from_points(cloud.with_label(l).map(|p| &p.position)) {
                out.insert(l, b);
            }
        }
        out
    };
    let primary_boxes = boxes(primary);
    let secondary_boxes = boxes(secondary);
    let mut names = primary_names.clone();
    let mut next_id = primary
        .points
        .iter()
        .map(|p| p.label)
        .chain(primary_names.keys().copied())
        .max()
        .unwrap_or(0)
        + 1;
    let mut remap = BTreeMap::new();
    for (&sid, sbox) in &secondary_boxes {
        let sname = secondary_names.get(&sid);
        let best = primary_boxes
            .iter()
            .filter(|(pid, _)| sname.is_some() && primary_names.get(pid) == sname)
            .map(|(&pid, pbox)| (pid, pbox.iou(sbox)))
            .filter(|&(_, iou)| iou > 0.5)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let target = match best {
            Some((pid, _)) => pid,
            None => {
                let id = next_id;
                next_id += 1;
                if let Some(n) = sname {
                    names.insert(id, n.clone());
                }
                id
            }
        };
        remap.insert(sid, target);
    }
    let mut points = primary.points.clone();
    points.extend(secondary.points.iter().map(|p| LabeledPoint {
        label: if p.label == BACKGROUND { BACKGROUND } else { remap[&p.label] },
        ..*p
    }));
    (LabeledPointCloud { points, unit_scale: primary.unit_scale }, names)
}
