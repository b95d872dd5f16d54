#![allow(dead_code)]

use scenectx::ergonomics::Pose;
use scenectx::navigation::OccupancyGrid;
use scenectx::{MeshInstance, Vec3};
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scenectx"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn demo_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo").join(name)
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Copies a bundle directory tree.
pub fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

// ---------------------------------------------------------------------------
// Exact distance between triangle meshes

fn closest_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

fn segment_segment(p1: Vec3, q1: Vec3, p2: Vec3, q2: Vec3) -> f64 {
    let (d1, d2, r) = (q1 - p1, q2 - p2, p1 - p2);
    let (a, e, f) = (d1.dot(&d1), d2.dot(&d2), d2.dot(&r));
    let (s, t);
    if a <= 1e-300 && e <= 1e-300 {
        return r.norm();
    }
    if a <= 1e-300 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= 1e-300 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let s0 = if denom > 0.0 { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            } else {
                t = t0;
                s = s0;
            }
        }
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

fn segment_crosses_triangle(p: Vec3, q: Vec3, [a, b, c]: [Vec3; 3]) -> bool {
    let n = (b - a).cross(&(c - a));
    let (dp, dq) = (n.dot(&(p - a)), n.dot(&(q - a)));
    if dp * dq > 0.0 || dp == dq {
        return false;
    }
    let x = p + (q - p) * (dp / (dp - dq));
    let inside = |u: Vec3, v: Vec3| n.dot(&(v - u).cross(&(x - u))) >= 0.0;
    inside(a, b) && inside(b, c) && inside(c, a)
}

fn segment_triangle(p: Vec3, q: Vec3, t: [Vec3; 3]) -> f64 {
    if segment_crosses_triangle(p, q, t) {
        return 0.0;
    }
    let mut d = (p - closest_on_triangle(p, t[0], t[1], t[2])).norm();
    d = d.min((q - closest_on_triangle(q, t[0], t[1], t[2])).norm());
    for k in 0..3 {
        d = d.min(segment_segment(p, q, t[k], t[(k + 1) % 3]));
    }
    d
}

fn world_triangles(mesh: &MeshInstance, pose: &Pose) -> Vec<[Vec3; 3]> {
    mesh.triangles.iter().map(|t| mesh.triangle_vertices(t).map(|v| pose.apply(&v))).collect()
}

/// Exact minimum distance between two posed triangle meshes (0 when they
/// intersect).
pub fn mesh_distance(a: &MeshInstance, pa: &Pose, b: &MeshInstance, pb: &Pose) -> f64 {
    let (ta, tb) = (world_triangles(a, pa), world_triangles(b, pb));
    let mut best = f64::INFINITY;
    for x in &ta {
        for y in &tb {
            for k in 0..3 {
                best = best.min(segment_triangle(x[k], x[(k + 1) % 3], *y));
                best = best.min(segment_triangle(y[k], y[(k + 1) % 3], *x));
            }
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Shortest paths

/// Dijkstra over the planner's move set, cost in cell units.
pub fn dijkstra(grid: &OccupancyGrid, s: (usize, usize), t: (usize, usize)) -> Option<f64> {
    let (w, h) = (grid.width as isize, grid.height as isize);
    let occ = |i: isize, j: isize| grid.cells[(j * w + i) as usize];
    let mut dist = vec![f64::INFINITY; grid.cells.len()];
    let idx = |i: isize, j: isize| (j * w + i) as usize;
    let mut heap = BinaryHeap::new();
    dist[idx(s.0 as isize, s.1 as isize)] = 0.0;
    // Non-negative floats order like their bit patterns.
    heap.push(Reverse((0f64.to_bits(), s.0 as isize, s.1 as isize)));
    while let Some(Reverse((bits, ci, cj))) = heap.pop() {
        let d = f64::from_bits(bits);
        if d > dist[idx(ci, cj)] {
            continue;
        }
        if (ci as usize, cj as usize) == t {
            return Some(d);
        }
        for di in -1..=1 {
            for dj in -1..=1 {
                let (i, j) = (ci + di, cj + dj);
                if (di == 0 && dj == 0) || i < 0 || j < 0 || i >= w || j >= h || occ(i, j) {
                    continue;
                }
                if di != 0 && dj != 0 && occ(ci + di, cj) && occ(ci, cj + dj) {
                    continue;
                }
                let nd = d + if di != 0 && dj != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
                if nd < dist[idx(i, j)] {
                    dist[idx(i, j)] = nd;
                    heap.push(Reverse((nd.to_bits(), i, j)));
                }
            }
        }
    }
    None
}
