use super::GeometryError;
use crate::{Execution, Vec3};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static kd-tree over a fixed point set.
///
/// Nearest-neighbor queries are exact: they return the same index and
/// distance as a linear scan, with ties broken by the lowest point index.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl SpatialIndex {
    pub fn build(points: &[Vec3]) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyPointSet);
        }
        let mut index = SpatialIndex { points: points.to_vec(), order: (0..points.len()).collect(), nodes: Vec::new() };
        let n = points.len();
        index.build_node(0, n);
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let ext = hi - lo;
        let axis = ext.imax();
        if ext[axis] <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }

    /// Index and Euclidean distance of the point closest to `q`.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let (i, d2) = self.nearest_squared(q);
        (i, d2.sqrt())
    }

    /// Like [`nearest`](Self::nearest) but returns the squared distance.
    pub fn nearest_squared(&self, q: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // Equal-distance candidates may hold a lower index, so only
                // strictly farther half-spaces are pruned.
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }

    /// Nearest neighbor for every query, in query order.
    pub fn nearest_batch(&self, queries: &[Vec3], exec: Execution) -> Vec<(usize, f64)> {
        exec.map(queries, |q| self.nearest(q))
    }
}

/// Nearest neighbor by exhaustive scan.
pub fn nearest_linear(points: &[Vec3], q: &Vec3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if best.map_or(true, |(_, b)| d2 < b) {
            best = Some((i, d2));
        }
    }
    best.map(|(i, d2)| (i, d2.sqrt()))
}
