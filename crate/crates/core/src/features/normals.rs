//! Surface normals of a point cloud by PCA over radius neighborhoods.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::kdtree::KdTree;

/// A neighborhood is degenerate unless its middle covariance eigenvalue
/// exceeds this multiple of the smallest one.
pub const DEGENERACY_RATIO: f64 = 2.0;

/// One optional unit normal per input point; `None` marks an invalid normal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormalSet {
    pub normals: Vec<Option<Vector3<f64>>>,
}

impl NormalSet {
    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<Vector3<f64>> {
        self.normals.get(index).copied().flatten()
    }

    pub fn valid_count(&self) -> usize {
        self.normals.iter().filter(|n| n.is_some()).count()
    }
}

/// Eigenvector of the smallest covariance eigenvalue of each point's
/// neighborhood (the point itself included), oriented toward `viewpoint`.
///
/// Neighborhoods with fewer than three points or a degenerate spectrum yield
/// `None`. Panics if `radius` is not positive.
pub fn estimate_normals(points: &[Vector3<f64>], radius: f64, viewpoint: &Vector3<f64>) -> NormalSet {
    assert!(radius > 0.0, "normal estimation radius must be positive");
    let Some(tree) = KdTree::build(points.iter().map(|p| [p.x, p.y, p.z]).collect()) else {
        return NormalSet::default();
    };
    let normals = points
        .iter()
        .map(|p| {
            let idx = tree.within_radius(&[p.x, p.y, p.z], radius);
            if idx.len() < 3 {
                return None;
            }
            let n = idx.len() as f64;
            let mean = idx.iter().map(|&i| points[i]).sum::<Vector3<f64>>() / n;
            let cov = idx.iter().fold(Matrix3::zeros(), |acc, &i| {
                let d = points[i] - mean;
                acc + d * d.transpose()
            }) / n;
            plane_normal(&cov).map(|normal| orient(normal, p, viewpoint))
        })
        .collect();
    NormalSet { normals }
}

fn plane_normal(cov: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let small = eig.eigenvalues[order[0]].max(0.0);
    let mid = eig.eigenvalues[order[1]];
    let large = eig.eigenvalues[order[2]];
    if !(large > 0.0) || mid <= 1e-12 * large || mid <= DEGENERACY_RATIO * small {
        return None;
    }
    Some(eig.eigenvectors.column(order[0]).normalize())
}

fn orient(normal: Vector3<f64>, point: &Vector3<f64>, viewpoint: &Vector3<f64>) -> Vector3<f64> {
    if normal.dot(&(viewpoint - point)) < 0.0 {
        -normal
    } else {
        normal
    }
}
