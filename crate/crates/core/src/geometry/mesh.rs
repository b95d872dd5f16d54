use super::{Aabb, GeometryError};
use crate::{InstanceId, Vec3};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Triangle mesh of one instance, in its own asset frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshInstance {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub label: InstanceId,
}

impl MeshInstance {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>, label: InstanceId) -> Result<Self, GeometryError> {
        if vertices.is_empty() {
            return Err(GeometryError::EmptyPointSet);
        }
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(GeometryError::DegenerateGeometry(format!(
                "triangle {t:?} indexes past {} vertices",
                vertices.len()
            )));
        }
        Ok(Self { vertices, triangles, label })
    }

    /// Axis-aligned unit cube `[0,1]³`, two triangles per face.
    pub fn unit_cube(label: InstanceId) -> Self {
        Self::box_mesh(Vec3::zeros(), Vec3::repeat(1.0), label)
    }

    /// Axis-aligned box between `min` and `max`.
    pub fn box_mesh(min: Vec3, max: Vec3, label: InstanceId) -> Self {
        let vertices = (0..8)
            .map(|i| {
                Vec3::new(
                    if i & 1 != 0 { max.x } else { min.x },
                    if i & 2 != 0 { max.y } else { min.y },
                    if i & 4 != 0 { max.z } else { min.z },
                )
            })
            .collect();
        let quads = [[0, 4, 6, 2], [1, 3, 7, 5], [0, 1, 5, 4], [2, 6, 7, 3], [0, 2, 3, 1], [4, 5, 7, 6]];
        let triangles = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
        Self { vertices, triangles, label }
    }

    pub fn triangle_vertices(&self, t: &[usize; 3]) -> [Vec3; 3] {
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::from_points(&self.vertices).expect("mesh has vertices")
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = self.triangle_vertices(t);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }
}

#[derive(Debug, Error)]
pub enum ObjError {
    #[error("ParseError: line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn parse_index(token: &str, n_vertices: usize, line: usize) -> Result<usize, ObjError> {
    let head = token.split('/').next().unwrap_or("");
    let raw: i64 = head.parse().map_err(|_| ObjError::Parse { line, message: format!("bad face index {token:?}") })?;
    let idx = if raw > 0 {
        raw - 1
    } else if raw < 0 {
        n_vertices as i64 + raw
    } else {
        -1
    };
    if idx < 0 || idx as usize >= n_vertices {
        return Err(ObjError::Parse { line, message: format!("face index {raw} out of range") });
    }
    Ok(idx as usize)
}

/// Parses the `v` / `f` subset of Wavefront OBJ. Polygons are fan
/// triangulated; every other directive is ignored.
pub fn parse_obj(text: &str, label: InstanceId) -> Result<MeshInstance, ObjError> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let mut tokens = raw.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| ObjError::Parse { line, message: format!("bad vertex: {e}") })?;
                if coords.len() != 3 || !coords.iter().all(|c| c.is_finite()) {
                    return Err(ObjError::Parse { line, message: "vertex needs 3 finite coordinates".into() });
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<usize> =
                    tokens.map(|t| parse_index(t, vertices.len(), line)).collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(ObjError::Parse { line, message: "face needs at least 3 vertices".into() });
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(MeshInstance::new(vertices, triangles, label)?)
}

pub fn read_obj(path: &Path, label: InstanceId) -> Result<MeshInstance, ObjError> {
    parse_obj(&std::fs::read_to_string(path)?, label)
}

/// Writes vertices with round-trip float formatting.
pub fn write_obj(mesh: &MeshInstance) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}
