//! Top-down occupancy and 8-connected A* planning between instances.
//!
//! The grid lies in the world x–z plane. Cell `(i, j)` spans
//! `[origin.x + i·res, origin.x + (i+1)·res) × [origin.z + j·res, ...)`.

use crate::context::{InstanceId, SpatialContext, BACKGROUND};
use serde::Serialize;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

pub const DEFAULT_RESOLUTION: f64 = 0.1;
pub const DEFAULT_INFLATE: f64 = 0.1;
/// Default height band as fractions of the scene's vertical extent.
pub const DEFAULT_BAND: (f64, f64) = (0.05, 0.60);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NavigationError {
    #[error("EmptyCloud: no points to build a grid from")]
    EmptyCloud,
    #[error("InvalidParams: {0}")]
    InvalidParams(String),
    #[error("OutOfBounds: ({0}, {1}) lies outside the grid")]
    OutOfBounds(f64, f64),
    #[error("StartOccupied: start cell is occupied")]
    StartOccupied,
    #[error("GoalOccupied: goal cell is occupied")]
    GoalOccupied,
    #[error("NoPath: goal is unreachable from start")]
    NoPath,
    #[error("UnknownInstance: {0}")]
    UnknownInstance(String),
    #[error("AmbiguousName: {0} names more than one instance")]
    AmbiguousName(String),
    #[error("EmptyInstance: instance {0} has no points")]
    EmptyInstance(InstanceId),
    #[error("NoFreeCell: the grid has no free cell")]
    NoFreeCell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    /// World (x, z) of the min corner of cell (0, 0).
    pub origin: [f64; 2],
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major over z; true is occupied.
    pub cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(origin: [f64; 2], resolution: f64, width: usize, height: usize) -> Result<Self, NavigationError> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(NavigationError::InvalidParams(format!("resolution {resolution}")));
        }
        if width == 0 || height == 0 {
            return Err(NavigationError::InvalidParams("grid must have at least one cell".into()));
        }
        Ok(Self { origin, resolution, width, height, cells: vec![false; width * height] })
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    pub fn occupied(&self, i: usize, j: usize) -> bool {
        self.cells[self.index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        let k = self.index(i, j);
        self.cells[k] = value;
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn cell_of(&self, x: f64, z: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.origin[0]) / self.resolution).floor();
        let fj = ((z - self.origin[1]) / self.resolution).floor();
        if fi >= 0.0 && fj >= 0.0 && (fi as usize) < self.width && (fj as usize) < self.height {
            Some((fi as usize, fj as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.resolution,
            self.origin[1] + (j as f64 + 0.5) * self.resolution,
        ]
    }

    /// Marks every cell within Chebyshev distance `radius` of an occupied
    /// cell.
    pub fn dilate(&self, radius: usize) -> OccupancyGrid {
        if radius == 0 {
            return self.clone();
        }
        let mut out = self.clone();
        let r = radius as isize;
        for j in 0..self.height {
            for i in 0..self.width {
                if !self.occupied(i, j) {
                    continue;
                }
                for dj in -r..=r {
                    for di in -r..=r {
                        let (a, b) = (i as isize + di, j as isize + dj);
                        if a >= 0 && b >= 0 && (a as usize) < self.width && (b as usize) < self.height {
                            out.set(a as usize, b as usize, true);
                        }
                    }
                }
            }
        }
        out
    }

    /// Binary PGM with occupied cells black and free cells white; the first
    /// image row is the lowest z.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.cells.iter().map(|&c| if c { 0u8 } else { 255u8 }));
        out
    }
}

/// The default height band of a context: fractions of the cloud's y-extent.
pub fn default_band(ctx: &SpatialContext) -> Result<(f64, f64), NavigationError> {
    let aabb = ctx.cloud.aabb().ok_or(NavigationError::EmptyCloud)?;
    let ext = aabb.max.y - aabb.min.y;
    Ok((aabb.min.y + DEFAULT_BAND.0 * ext, aabb.min.y + DEFAULT_BAND.1 * ext))
}

/// Occupancy over the cloud's x–z bounds: a cell is occupied when a
/// non-background point with `y` inside the band (inclusive) falls in it,
/// then dilated by `ceil(inflate / resolution)` cells.
pub fn build_occupancy(
    ctx: &SpatialContext,
    resolution: f64,
    band: (f64, f64),
    inflate: f64,
) -> Result<OccupancyGrid, NavigationError> {
    if !(band.0 < band.1) {
        return Err(NavigationError::InvalidParams(format!("height band [{}, {}] is empty", band.0, band.1)));
    }
    if !(inflate >= 0.0 && inflate.is_finite()) {
        return Err(NavigationError::InvalidParams(format!("inflate {inflate}")));
    }
    let aabb = ctx.cloud.aabb().ok_or(NavigationError::EmptyCloud)?;
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(NavigationError::InvalidParams(format!("resolution {resolution}")));
    }
    let width = ((aabb.max.x - aabb.min.x) / resolution).floor() as usize + 1;
    let height = ((aabb.max.z - aabb.min.z) / resolution).floor() as usize + 1;
    let mut grid = OccupancyGrid::new([aabb.min.x, aabb.min.z], resolution, width, height)?;
    for p in &ctx.cloud.points {
        let y = p.position.y;
        if p.label == BACKGROUND || y < band.0 || y > band.1 {
            continue;
        }
        if let Some((i, j)) = grid.cell_of(p.position.x, p.position.z) {
            grid.set(i, j, true);
        }
    }
    Ok(grid.dilate((inflate / resolution).ceil() as usize))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannedPath {
    /// World (x, z) cell centers.
    pub waypoints: Vec<[f64; 2]>,
    pub length: f64,
}

impl PlannedPath {
    fn from_waypoints(waypoints: Vec<[f64; 2]>) -> Self {
        let length = waypoints.windows(2).map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt()).sum();
        Self { waypoints, length }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("path serializes")
    }
}

/// 8-connected move cost in cells.
pub fn octile(di: usize, dj: usize) -> f64 {
    let (lo, hi) = if di < dj { (di, dj) } else { (dj, di) };
    (hi - lo) as f64 + lo as f64 * std::f64::consts::SQRT_2
}

const MOVES: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

/// Neighbors of cell `k` with step cost, honoring the corner rule: a
/// diagonal is forbidden when both orthogonal cells it passes are occupied.
pub fn neighbors(grid: &OccupancyGrid, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
    let (i, j) = ((k % grid.width) as isize, (k / grid.width) as isize);
    let inside = move |a: isize, b: isize| a >= 0 && b >= 0 && (a as usize) < grid.width && (b as usize) < grid.height;
    MOVES.iter().filter_map(move |&(di, dj)| {
        let (a, b) = (i + di, j + dj);
        if !inside(a, b) || grid.occupied(a as usize, b as usize) {
            return None;
        }
        if di != 0 && dj != 0 && grid.occupied(a as usize, j as usize) && grid.occupied(i as usize, b as usize) {
            return None;
        }
        let cost = if di != 0 && dj != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
        Some((grid.index(a as usize, b as usize), cost))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Open {
    f: f64,
    g: f64,
    cell: usize,
}

impl Eq for Open {}

impl Ord for Open {
    // Min-heap on f, then larger g (deeper first), then lower cell index.
    fn cmp(&self, other: &Self) -> Ordering {
        other.f.total_cmp(&self.f).then(self.g.total_cmp(&other.g)).then(other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* between grid cells; returns the cell sequence.
pub fn plan_cells(grid: &OccupancyGrid, start: (usize, usize), goal: (usize, usize)) -> Result<Vec<(usize, usize)>, NavigationError> {
    if grid.occupied(start.0, start.1) {
        return Err(NavigationError::StartOccupied);
    }
    if grid.occupied(goal.0, goal.1) {
        return Err(NavigationError::GoalOccupied);
    }
    let n = grid.cells.len();
    let s = grid.index(start.0, start.1);
    let t = grid.index(goal.0, goal.1);
    let h = |k: usize| octile((k % grid.width).abs_diff(goal.0), (k / grid.width).abs_diff(goal.1));
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    g[s] = 0.0;
    heap.push(Open { f: h(s), g: 0.0, cell: s });
    while let Some(Open { g: gk, cell, .. }) = heap.pop() {
        if closed[cell] || gk > g[cell] {
            continue;
        }
        if cell == t {
            let mut path = vec![cell];
            let mut k = cell;
            while k != s {
                k = parent[k];
                path.push(k);
            }
            path.reverse();
            return Ok(path.into_iter().map(|k| (k % grid.width, k / grid.width)).collect());
        }
        closed[cell] = true;
        for (next, cost) in neighbors(grid, cell) {
            let cand = gk + cost;
            if cand < g[next] {
                g[next] = cand;
                parent[next] = cell;
                heap.push(Open { f: cand + h(next), g: cand, cell: next });
            }
        }
    }
    Err(NavigationError::NoPath)
}

/// Optimal 8-connected path between the cells containing `start` and `goal`.
pub fn plan_path(grid: &OccupancyGrid, start: [f64; 2], goal: [f64; 2]) -> Result<PlannedPath, NavigationError> {
    let s = grid.cell_of(start[0], start[1]).ok_or(NavigationError::OutOfBounds(start[0], start[1]))?;
    let t = grid.cell_of(goal[0], goal[1]).ok_or(NavigationError::OutOfBounds(goal[0], goal[1]))?;
    let cells = plan_cells(grid, s, t)?;
    Ok(PlannedPath::from_waypoints(cells.into_iter().map(|(i, j)| grid.cell_center(i, j)).collect()))
}

/// Resolves an instance by numeric id or unique case-insensitive name.
pub fn resolve_instance(ctx: &SpatialContext, key: &str) -> Result<InstanceId, NavigationError> {
    if let Ok(id) = key.trim().parse::<InstanceId>() {
        if ctx.graph.contains(id) {
            return Ok(id);
        }
    }
    let wanted = key.trim().to_lowercase();
    let hits: Vec<InstanceId> = ctx.graph.nodes.values().filter(|n| n.name.to_lowercase() == wanted).map(|n| n.id).collect();
    match hits[..] {
        [id] => Ok(id),
        [] => Err(NavigationError::UnknownInstance(key.to_string())),
        _ => Err(NavigationError::AmbiguousName(key.to_string())),
    }
}

/// World (x, z) of the instance's AABB center.
pub fn instance_anchor(ctx: &SpatialContext, key: &str) -> Result<[f64; 2], NavigationError> {
    let id = resolve_instance(ctx, key)?;
    let aabb = ctx.instance_aabb(id).map_err(|_| NavigationError::EmptyInstance(id))?;
    let c = aabb.center();
    Ok([c.x, c.z])
}

/// The free cell whose center is nearest to `p` (ties: lowest index).
pub fn nearest_free_cell(grid: &OccupancyGrid, p: [f64; 2]) -> Result<(usize, usize), NavigationError> {
    let mut best: Option<(f64, usize)> = None;
    for j in 0..grid.height {
        for i in 0..grid.width {
            if grid.occupied(i, j) {
                continue;
            }
            let c = grid.cell_center(i, j);
            let d = (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, grid.index(i, j)));
            }
        }
    }
    let (_, k) = best.ok_or(NavigationError::NoFreeCell)?;
    Ok((k % grid.width, k / grid.width))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathQuery {
    pub resolution: f64,
    pub inflate: f64,
    /// `None` selects the default band.
    pub band: Option<(f64, f64)>,
}

impl Default for PathQuery {
    fn default() -> Self {
        Self { resolution: DEFAULT_RESOLUTION, inflate: DEFAULT_INFLATE, band: None }
    }
}

/// Path between two instances. Anchors inside an obstacle footprint are
/// moved to the nearest free cell first.
pub fn plan_between(ctx: &SpatialContext, from: &str, to: &str, query: &PathQuery) -> Result<(OccupancyGrid, PlannedPath), NavigationError> {
    let a = instance_anchor(ctx, from)?;
    let b = instance_anchor(ctx, to)?;
    let band = match query.band {
        Some(b) => b,
        None => default_band(ctx)?,
    };
    let grid = build_occupancy(ctx, query.resolution, band, query.inflate)?;
    let s = nearest_free_cell(&grid, a)?;
    let t = nearest_free_cell(&grid, b)?;
    let cells = plan_cells(&grid, s, t)?;
    let path = PlannedPath::from_waypoints(cells.into_iter().map(|(i, j)| grid.cell_center(i, j)).collect());
    Ok((grid, path))
}

/// Short human summary of a path.
pub fn describe(path: &PlannedPath) -> String {
    format!("path with {} waypoints, length {:.4}", path.waypoints.len(), path.length)
}
