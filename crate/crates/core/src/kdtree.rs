//! A static kd-tree over points in `D` dimensions.
//!
//! Built once by recursive median splits on the axis of largest extent.
//! Nearest-neighbor ties resolve to the lowest point index so results are
//! reproducible and agree with a linear scan.

use std::cmp::Ordering;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl<const D: usize> KdTree<D> {
    /// Returns `None` for an empty point set.
    pub fn build(points: Vec<[f64; D]>) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let mut tree = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        let n = tree.points.len();
        tree.build_node(0, n);
        Some(tree)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64; D] {
        &self.points[index]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for axis in 0..D {
            let (lo, hi) = self.order[start..end]
                .iter()
                .map(|&i| self.points[i][axis])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi - lo > best.1 {
                best = (axis, hi - lo);
            }
        }
        best.0
    }

    /// Closest point to `query` by Euclidean distance.
    pub fn nearest(&self, query: &[f64; D]) -> Neighbor {
        let mut best = Neighbor {
            index: usize::MAX,
            dist_sq: f64::INFINITY,
        };
        self.nearest_in(0, query, &mut best);
        best
    }

    fn nearest_in(&self, node: usize, query: &[f64; D], best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist_sq(&self.points[i], query);
                    if d < best.dist_sq || (d == best.dist_sq && i < best.index) {
                        *best = Neighbor { index: i, dist_sq: d };
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_in(near, query, best);
                // `<=` keeps equal-distance candidates on the far side reachable for tie-breaking.
                if diff * diff <= best.dist_sq {
                    self.nearest_in(far, query, best);
                }
            }
        }
    }

    /// All points within `radius` of `query` (inclusive), ordered by index.
    pub fn within_radius(&self, query: &[f64; D], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let r2 = radius * radius;
        self.radius_in(0, query, r2, &mut out);
        out.sort_unstable();
        out
    }

    fn radius_in(&self, node: usize, query: &[f64; D], r2: f64, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                out.extend(
                    self.order[start..end]
                        .iter()
                        .copied()
                        .filter(|&i| dist_sq(&self.points[i], query) <= r2),
                );
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.radius_in(near, query, r2, out);
                if diff * diff <= r2 {
                    self.radius_in(far, query, r2, out);
                }
            }
        }
    }
}

#[inline]
fn dist_sq<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
