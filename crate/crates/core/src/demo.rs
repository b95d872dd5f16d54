//! Synthetic scenes shipped as demo bundles and used by tests and benches.

use crate::context::{
    HyperEdge, InstanceId, LabeledPoint, LabeledPointCloud, Relation, RelationParams, SceneHypergraph,
    ScenePortrait, SpatialContext, BACKGROUND,
};
use crate::ergonomics::Pose;
use crate::geometry::MeshInstance;
use crate::Vec3;

/// Rounds to the nearest `f32`, so the PLY round-trip is exact.
fn f32_exact(v: Vec3) -> Vec3 {
    v.map(|c| c as f32 as f64)
}

fn byte_color(rgb: [u8; 3]) -> [f64; 3] {
    rgb.map(|c| c as f64 / 255.0)
}

fn lattice(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round().max(1.0) as usize;
    (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect()
}

/// Lattice points on the six faces of the box `[min, max]`.
pub fn box_surface(min: Vec3, max: Vec3, step: f64, label: InstanceId, rgb: [u8; 3]) -> Vec<LabeledPoint> {
    let color = byte_color(rgb);
    let axes = [lattice(min.x, max.x, step), lattice(min.y, max.y, step), lattice(min.z, max.z, step)];
    let mut out = Vec::new();
    for fixed in 0..3 {
        let (a, b) = ((fixed + 1) % 3, (fixed + 2) % 3);
        for side in [min[fixed], max[fixed]] {
            for (i, &u) in axes[a].iter().enumerate() {
                for (j, &v) in axes[b].iter().enumerate() {
                    // Edges shared with an earlier face are emitted once.
                    let on_a = i == 0 || i + 1 == axes[a].len();
                    let on_b = j == 0 || j + 1 == axes[b].len();
                    if (on_a && a < fixed) || (on_b && b < fixed) {
                        continue;
                    }
                    let mut p = Vec3::zeros();
                    p[fixed] = side;
                    p[a] = u;
                    p[b] = v;
                    out.push(LabeledPoint::new(f32_exact(p), color, label));
                }
            }
        }
    }
    out
}

fn plane(origin: Vec3, du: Vec3, dv: Vec3, step: f64, rgb: [u8; 3]) -> Vec<LabeledPoint> {
    let color = byte_color(rgb);
    let mut out = Vec::new();
    for u in lattice(0.0, du.norm(), step) {
        for v in lattice(0.0, dv.norm(), step) {
            let p = origin + du.normalize() * u + dv.normalize() * v;
            out.push(LabeledPoint::new(f32_exact(p), color, BACKGROUND));
        }
    }
    out
}

struct Furniture {
    id: InstanceId,
    name: &'static str,
    min: Vec3,
    max: Vec3,
    rgb: [u8; 3],
}

const BEDROOM: [Furniture; 4] = [
    Furniture { id: 1, name: "bed", min: Vec3::new(0.2, 0.0, 0.2), max: Vec3::new(2.2, 0.6, 1.8), rgb: [180, 140, 100] },
    Furniture { id: 2, name: "desk", min: Vec3::new(4.5, 0.0, 0.2), max: Vec3::new(5.8, 0.75, 1.0), rgb: [120, 90, 60] },
    Furniture { id: 3, name: "wardrobe", min: Vec3::new(3.0, 0.0, 0.0), max: Vec3::new(3.4, 2.0, 3.0), rgb: [90, 60, 40] },
    Furniture { id: 4, name: "chair", min: Vec3::new(2.9, 0.0, 3.0), max: Vec3::new(3.5, 0.9, 4.0), rgb: [200, 60, 60] },
];

/// A 6 m × 4 m bedroom with walls. The wardrobe and chair together close
/// the room off between bed and desk; moving the chair by `-1.5` along x
/// opens a passage.
pub fn bedroom() -> SpatialContext {
    let mut points = Vec::new();
    let (w, d, h) = (6.0, 4.0, 2.5);
    let floor = [200, 200, 200];
    let wall = [235, 230, 220];
    points.extend(plane(Vec3::zeros(), Vec3::x() * w, Vec3::z() * d, 0.1, floor));
    points.extend(plane(Vec3::zeros(), Vec3::x() * w, Vec3::y() * h, 0.1, wall));
    points.extend(plane(Vec3::z() * d, Vec3::x() * w, Vec3::y() * h, 0.1, wall));
    points.extend(plane(Vec3::zeros(), Vec3::z() * d, Vec3::y() * h, 0.1, wall));
    points.extend(plane(Vec3::x() * w, Vec3::z() * d, Vec3::y() * h, 0.1, wall));

    let mut graph = SceneHypergraph::default();
    let mut ctx_meshes = Vec::new();
    for f in &BEDROOM {
        points.extend(box_surface(f.min, f.max, 0.05, f.id, f.rgb));
        graph.add_node(f.id, f.name);
        ctx_meshes.push((f.id, MeshInstance::box_mesh(f.min, f.max, f.id)));
    }
    graph
        .add_edge(HyperEdge::new(Relation::Clearance, vec![1]).with_params(RelationParams {
            clearance_radius: Some(0.3),
            ..Default::default()
        }))
        .add_edge(HyperEdge::new(Relation::Contact, vec![3, 4]).with_params(RelationParams {
            epsilon: Some(0.01),
            ..Default::default()
        }))
        .add_edge(HyperEdge::new(Relation::Alignment, vec![2, 3]).with_params(RelationParams {
            axes: Some(crate::context::AxisSet::Y),
            ..Default::default()
        }));

    let portrait = ScenePortrait::from_text(
        "A compact bedroom. A bed against the west wall, a desk in the south-east corner, \
         a tall wardrobe splitting the room and a chair pushed against the north wall.",
    );
    let mut ctx = SpatialContext::new(portrait, LabeledPointCloud::new(points), graph);
    for (id, mesh) in ctx_meshes {
        ctx.meshes.insert(id, mesh);
        ctx.poses.insert(id, Pose::identity());
    }
    ctx
}

/// Two unit cubes two units apart along x, joined by a contact edge.
pub fn two_cubes() -> SpatialContext {
    let mut points = Vec::new();
    let mut graph = SceneHypergraph::default();
    graph.add_node(1, "cube_a").add_node(2, "cube_b");
    graph.add_edge(HyperEdge::new(Relation::Contact, vec![1, 2]).with_params(RelationParams {
        epsilon: Some(0.01),
        ..Default::default()
    }));
    let mut ctx = SpatialContext::new(ScenePortrait::from_text("Two cubes on a floor."), LabeledPointCloud::default(), graph);
    for (id, x, rgb) in [(1, 0.0, [40, 120, 220]), (2, 2.0, [220, 120, 40])] {
        let offset = Vec3::new(x, 0.0, 0.0);
        points.extend(box_surface(offset, offset + Vec3::repeat(1.0), 0.1, id, rgb));
        ctx.meshes.insert(id, MeshInstance::unit_cube(id));
        ctx.poses.insert(id, Pose::rigid(nalgebra::UnitQuaternion::identity(), offset));
    }
    ctx.cloud = LabeledPointCloud::new(points);
    ctx
}
