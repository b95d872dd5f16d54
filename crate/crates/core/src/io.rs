//! Persistence: binary PLY clouds, layout JSON and context bundles.
//!
//! A bundle is a directory holding `manifest.json`, `cloud.ply`,
//! `graph.txt`, `portrait.txt` and optionally `layout.json` plus
//! `meshes/<id>.obj`.

use crate::context::{InstanceId, LabeledPoint, LabeledPointCloud, ScenePortrait, SpatialContext};
use crate::ergonomics::{Pose, PoseSet};
use crate::geometry::{read_obj, write_obj};
use crate::protocol::{parse_hypergraph, serialize_hypergraph};
use crate::Vec3;
use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const CLOUD: &str = "cloud.ply";
pub const GRAPH: &str = "graph.txt";
pub const PORTRAIT: &str = "portrait.txt";
pub const LAYOUT: &str = "layout.json";
pub const MESH_DIR: &str = "meshes";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("IoError: {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("ParseError: {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("VersionMismatch: bundle format_version {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Parse { path: path.to_path_buf(), message: message.into() }
}

// ---------------------------------------------------------------------------
// PLY

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

const REQUIRED: [&str; 7] = ["x", "y", "z", "red", "green", "blue", "instance"];

/// Parses a binary little-endian PLY with a vertex element carrying
/// `x y z red green blue instance`. Other vertex properties are skipped;
/// elements after the vertices are ignored.
pub fn parse_cloud(bytes: &[u8], path: &Path) -> Result<LabeledPointCloud, IoError> {
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    let read_line = |reader: &mut BufReader<&[u8]>, line: &mut String| -> Result<String, IoError> {
        line.clear();
        let n = reader.read_line(line).map_err(|e| parse_err(path, e.to_string()))?;
        if n == 0 {
            return Err(parse_err(path, "unexpected end of header"));
        }
        Ok(line.trim_end().to_string())
    };
    if read_line(&mut reader, &mut line)? != "ply" {
        return Err(parse_err(path, "missing `ply` magic"));
    }
    let mut format_ok = false;
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut seen_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        let l = read_line(&mut reader, &mut line)?;
        let tokens: Vec<&str> = l.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(parse_err(path, format!("unsupported format `{fmt}`")));
                }
                format_ok = true;
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex" && !seen_vertex;
                if *name == "vertex" {
                    if seen_vertex {
                        return Err(parse_err(path, "duplicate vertex element"));
                    }
                    seen_vertex = true;
                    vertex_count = Some(count.parse::<usize>().map_err(|_| parse_err(path, format!("bad vertex count `{count}`")))?);
                } else if !seen_vertex {
                    return Err(parse_err(path, format!("element `{name}` precedes the vertex element")));
                }
            }
            ["property", "list", ..] if in_vertex => return Err(parse_err(path, "list properties on vertices are not supported")),
            ["property", ty, name] if in_vertex => {
                let ty = Scalar::parse(ty).ok_or_else(|| parse_err(path, format!("unknown property type `{ty}`")))?;
                props.push((name.to_string(), ty));
            }
            ["property", ..] => {}
            _ => return Err(parse_err(path, format!("malformed header line `{l}`"))),
        }
    }
    if !format_ok {
        return Err(parse_err(path, "missing format line"));
    }
    let count = vertex_count.ok_or_else(|| parse_err(path, "missing vertex element"))?;
    let mut offsets = [0usize; 7];
    let mut types = [Scalar::U8; 7];
    for (k, name) in REQUIRED.iter().enumerate() {
        let mut off = 0;
        let mut found = false;
        for (pname, ty) in &props {
            if pname == name {
                offsets[k] = off;
                types[k] = *ty;
                found = true;
                break;
            }
            off += ty.size();
        }
        if !found {
            return Err(parse_err(path, format!("missing vertex property `{name}`")));
        }
    }
    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
    let mut body = Vec::new();
    reader.read_to_end(&mut body).map_err(|e| parse_err(path, e.to_string()))?;
    if body.len() < stride * count {
        return Err(parse_err(path, format!("truncated body: {} vertices need {} bytes, found {}", count, stride * count, body.len())));
    }
    let points = body
        .chunks_exact(stride)
        .take(count)
        .map(|rec| {
            let v = |k: usize| types[k].read(&rec[offsets[k]..]);
            let color = |k: usize| {
                let raw = v(k);
                if types[k] == Scalar::U8 { raw / 255.0 } else { raw }
            };
            LabeledPoint::new(Vec3::new(v(0), v(1), v(2)), [color(3), color(4), color(5)], v(6) as InstanceId)
        })
        .collect();
    Ok(LabeledPointCloud::new(points))
}

pub fn load_cloud(path: &Path) -> Result<LabeledPointCloud, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_cloud(&bytes, path)
}

/// Binary PLY bytes: positions as float32, colors quantized to 8 bits.
pub fn encode_cloud(cloud: &LabeledPointCloud) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nproperty uint instance\nend_header\n",
        cloud.len()
    )
    .into_bytes();
    out.reserve(cloud.len() * 19);
    for p in &cloud.points {
        for v in p.position.iter() {
            out.extend((*v as f32).to_le_bytes());
        }
        for c in p.color {
            out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.extend(p.label.to_le_bytes());
    }
    out
}

pub fn save_cloud(cloud: &LabeledPointCloud, path: &Path) -> Result<(), IoError> {
    fs::write(path, encode_cloud(cloud)).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Layout JSON

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub id: InstanceId,
    pub scale: f64,
    /// Unit quaternion `w, x, y, z`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

pub fn layout_entries(poses: &PoseSet) -> Vec<LayoutEntry> {
    poses
        .iter()
        .map(|(id, p)| {
            let q = p.rotation.quaternion();
            LayoutEntry {
                id: *id,
                scale: p.scale,
                rotation: [q.w, q.i, q.j, q.k],
                translation: [p.translation.x, p.translation.y, p.translation.z],
            }
        })
        .collect()
}

pub fn layout_to_json(poses: &PoseSet) -> String {
    let mut s = serde_json::to_string_pretty(&layout_entries(poses)).expect("layout serializes");
    s.push('\n');
    s
}

/// Parses layout JSON. Quaternions must be unit within 1e-9 and are kept
/// bit-exact.
pub fn layout_from_json(text: &str, path: &Path) -> Result<PoseSet, IoError> {
    let entries: Vec<LayoutEntry> = serde_json::from_str(text).map_err(|e| parse_err(path, e.to_string()))?;
    let mut poses = PoseSet::new();
    for e in entries {
        let [w, x, y, z] = e.rotation;
        let q = Quaternion::new(w, x, y, z);
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(parse_err(path, format!("rotation of instance {} is not a unit quaternion", e.id)));
        }
        let pose = Pose {
            rotation: UnitQuaternion::new_unchecked(q),
            translation: Vec3::from(e.translation),
            scale: e.scale,
        };
        pose.check().map_err(|m| parse_err(path, format!("instance {}: {m}", e.id)))?;
        if poses.insert(e.id, pose).is_some() {
            return Err(parse_err(path, format!("duplicate instance {}", e.id)));
        }
    }
    Ok(poses)
}

// ---------------------------------------------------------------------------
// Portrait and bundle

/// Portrait text: `@image <path>` lines are image references, everything
/// else is the description.
pub fn parse_portrait(text: &str) -> ScenePortrait {
    let mut lines = Vec::new();
    let mut image_refs = Vec::new();
    for l in text.lines() {
        match l.strip_prefix("@image ") {
            Some(p) => image_refs.push(PathBuf::from(p.trim())),
            None => lines.push(l),
        }
    }
    ScenePortrait { description: lines.join("\n").trim_end().to_string(), image_refs }
}

pub fn format_portrait(p: &ScenePortrait) -> String {
    let mut s = p.description.clone();
    if !s.is_empty() {
        s.push('\n');
    }
    for r in &p.image_refs {
        s.push_str(&format!("@image {}\n", r.display()));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub unit_scale: f64,
    pub created_by: String,
}

impl Manifest {
    pub fn current(unit_scale: f64) -> Self {
        Self { format_version: FORMAT_VERSION, unit_scale, created_by: format!("scenectx {}", env!("CARGO_PKG_VERSION")) }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn save_bundle(ctx: &SpatialContext, dir: &Path) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = serde_json::to_string_pretty(&Manifest::current(ctx.cloud.unit_scale)).expect("manifest serializes");
    write_file(&dir.join(MANIFEST), format!("{manifest}\n").as_bytes())?;
    write_file(&dir.join(CLOUD), &encode_cloud(&ctx.cloud))?;
    write_file(&dir.join(GRAPH), serialize_hypergraph(&ctx.graph).as_bytes())?;
    write_file(&dir.join(PORTRAIT), format_portrait(&ctx.portrait).as_bytes())?;
    let layout = dir.join(LAYOUT);
    if ctx.poses.is_empty() {
        if layout.exists() {
            fs::remove_file(&layout).map_err(io_err(&layout))?;
        }
    } else {
        write_file(&layout, layout_to_json(&ctx.poses).as_bytes())?;
    }
    let mesh_dir = dir.join(MESH_DIR);
    if mesh_dir.exists() {
        fs::remove_dir_all(&mesh_dir).map_err(io_err(&mesh_dir))?;
    }
    if !ctx.meshes.is_empty() {
        fs::create_dir_all(&mesh_dir).map_err(io_err(&mesh_dir))?;
        for (id, mesh) in &ctx.meshes {
            write_file(&mesh_dir.join(format!("{id}.obj")), write_obj(mesh).as_bytes())?;
        }
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, IoError> {
    let path = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_str(&read_text(&path)?).map_err(|e| parse_err(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(IoError::VersionMismatch { found: manifest.format_version, supported: FORMAT_VERSION });
    }
    Ok(manifest)
}

pub fn load_bundle(dir: &Path) -> Result<SpatialContext, IoError> {
    let manifest = load_manifest(dir)?;
    let mut cloud = load_cloud(&dir.join(CLOUD))?;
    cloud.unit_scale = manifest.unit_scale;
    let graph_path = dir.join(GRAPH);
    let graph = parse_hypergraph(&read_text(&graph_path)?).map_err(|e| parse_err(&graph_path, e.to_string()))?;
    let portrait = parse_portrait(&read_text(&dir.join(PORTRAIT))?);
    let mut ctx = SpatialContext::new(portrait, cloud, graph);
    let layout = dir.join(LAYOUT);
    if layout.exists() {
        ctx.poses = layout_from_json(&read_text(&layout)?, &layout)?;
    }
    let mesh_dir = dir.join(MESH_DIR);
    if mesh_dir.is_dir() {
        let mut meshes = BTreeMap::new();
        for entry in fs::read_dir(&mesh_dir).map_err(io_err(&mesh_dir))? {
            let path = entry.map_err(io_err(&mesh_dir))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("obj") {
                continue;
            }
            let id: InstanceId = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(&path, "mesh file name must be `<id>.obj`"))?;
            let mesh = read_obj(&path, id).map_err(|e| parse_err(&path, e.to_string()))?;
            meshes.insert(id, mesh);
        }
        ctx.meshes = meshes;
    }
    Ok(ctx)
}

/// Loads every `<id>.obj` in `dir`.
pub fn load_mesh_dir(dir: &Path) -> Result<BTreeMap<InstanceId, crate::geometry::MeshInstance>, IoError> {
    let mut meshes = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("obj") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<InstanceId>().ok()) else {
            continue;
        };
        meshes.insert(id, read_obj(&path, id).map_err(|e| parse_err(&path, e.to_string()))?);
    }
    Ok(meshes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{HyperEdge, Relation, RelationParams, SceneHypergraph};
    use crate::geometry::MeshInstance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn handcrafted() -> Vec<u8> {
        let mut b = b"ply\nformat binary_little_endian 1.0\ncomment test\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nproperty uint instance\nend_header\n".to_vec();
        for (k, label) in [(0u8, 0u32), (1, 5), (2, 7)] {
            for v in [k as f32, 0.5, -1.0] {
                b.extend(v.to_le_bytes());
            }
            b.extend([255, k * 100, 0]);
            b.extend(label.to_le_bytes());
        }
        b
    }

    #[test]
    fn parses_handcrafted_ply() {
        let c = parse_cloud(&handcrafted(), Path::new("t.ply")).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.points.iter().map(|p| p.label).collect::<Vec<_>>(), vec![0, 5, 7]);
        assert_eq!(c.points[2].position, Vec3::new(2.0, 0.5, -1.0));
        assert_eq!(c.points[1].color, [1.0, 100.0 / 255.0, 0.0]);
    }

    #[test]
    fn missing_property_is_named() {
        let text = String::from_utf8_lossy(&handcrafted()).replace("property uint instance\n", "");
        let err = parse_cloud(text.as_bytes(), Path::new("t.ply")).unwrap_err();
        assert!(err.to_string().contains("instance"), "{err}");
        assert!(parse_cloud(b"ply\nformat ascii 1.0\nend_header\n", Path::new("a")).is_err());
        assert!(parse_cloud(b"nope", Path::new("a")).is_err());
    }

    #[test]
    fn cloud_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points: Vec<LabeledPoint> = (0..10_000)
            .map(|_| {
                let f = |rng: &mut ChaCha8Rng| rng.random_range(-100.0f32..100.0) as f64;
                LabeledPoint::new(
                    Vec3::new(f(&mut rng), f(&mut rng), f(&mut rng)),
                    [rng.random::<u8>() as f64 / 255.0, rng.random::<u8>() as f64 / 255.0, rng.random::<u8>() as f64 / 255.0],
                    rng.random(),
                )
            })
            .collect();
        let cloud = LabeledPointCloud::new(points);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        save_cloud(&cloud, &path).unwrap();
        assert_eq!(load_cloud(&path).unwrap(), cloud);
    }

    fn sample_context() -> SpatialContext {
        let mut pts = Vec::new();
        for k in 0..20 {
            pts.push(LabeledPoint::new(Vec3::new(k as f64 * 0.25, 0.5, 1.0), [51.0 / 255.0, 102.0 / 255.0, 1.0], (k % 3) as InstanceId));
        }
        let mut g = SceneHypergraph::default();
        g.add_node(1, "bed").add_node(2, "night \"stand\"");
        g.add_edge(HyperEdge::new(Relation::Contact, vec![1, 2]).with_params(RelationParams { epsilon: Some(0.01), ..Default::default() }));
        g.add_edge(HyperEdge::new(Relation::Clearance, vec![1]));
        let mut ctx = SpatialContext::new(
            ScenePortrait { description: "A bedroom.\nTwo lines.".into(), image_refs: vec![PathBuf::from("views/a.png")] },
            LabeledPointCloud::new(pts),
            g,
        );
        ctx.poses.insert(1, Pose::rigid(crate::ergonomics::yaw(0.3), Vec3::new(0.1, 0.2, 0.3)));
        ctx.poses.insert(2, Pose { scale: 1.7, ..Pose::identity() });
        ctx.meshes.insert(2, MeshInstance::box_mesh(Vec3::zeros(), Vec3::new(0.3, 0.1, 0.7), 2));
        ctx
    }

    #[test]
    fn bundle_round_trip() {
        let ctx = sample_context();
        assert!(ctx.validate().is_ok(), "{}", ctx.validate());
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&ctx, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert!(back.validate().is_ok());
        assert_eq!(back, ctx);
        assert_eq!(serialize_hypergraph(&back.graph), serialize_hypergraph(&ctx.graph));
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&sample_context(), dir.path()).unwrap();
        let m = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&m).unwrap().replace("\"format_version\": 1", "\"format_version\": 999");
        fs::write(&m, text).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(IoError::VersionMismatch { found: 999, .. })));
    }

    #[test]
    fn layout_json_round_trip() {
        let poses = sample_context().poses;
        let text = layout_to_json(&poses);
        assert_eq!(layout_from_json(&text, Path::new("l")).unwrap(), poses);
        assert!(layout_from_json("[{\"id\":1,\"scale\":1.0,\"rotation\":[2,0,0,0],\"translation\":[0,0,0]}]", Path::new("l")).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut poses = PoseSet::new();
        for id in 1..=500 {
            let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let rotation = UnitQuaternion::from_scaled_axis(axis * rng.random_range(0.0..3.0));
            let translation = Vec3::new(rng.random_range(-10.0..10.0), rng.random(), rng.random_range(-1e-3..1e-3));
            poses.insert(id, Pose { rotation, translation, scale: rng.random_range(0.1..10.0) });
        }
        let text = layout_to_json(&poses);
        let back = layout_from_json(&text, Path::new("l")).unwrap();
        assert_eq!(back, poses);
        assert_eq!(layout_to_json(&back), text);
    }
}
