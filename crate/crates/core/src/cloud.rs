//! Point-cloud utilities: sampling spacing, farthest-point subsets, and
//! locally estimated normals.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::kdtree::KdTree;

/// Mean distance from each point to its nearest distinct neighbor.
///
/// Returns 0.0 for clouds with fewer than two points.
pub fn mean_nn_spacing(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let tree = KdTree::new(points);
    // Per-point distances in parallel, summed sequentially: float addition is
    // order-sensitive and this value seeds the whole fit.
    let dists: Vec<f64> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (_, d2) = tree
                .nearest_filtered(p, |j| j as usize != i)
                .expect("at least two points");
            d2.sqrt()
        })
        .collect();
    dists.iter().sum::<f64>() / points.len() as f64
}

/// Greedy farthest-point sampling: indices of `m` points where each pick
/// maximizes the distance to the set already chosen. Ties go to the lowest
/// index; `first` seeds the selection.
pub fn fps_indices(points: &[Vector3<f64>], m: usize, first: usize) -> Vec<u32> {
    assert!(first < points.len());
    let m = m.min(points.len());
    let mut chosen = Vec::with_capacity(m);
    if m == 0 {
        return chosen;
    }
    chosen.push(first as u32);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| (p - points[first]).norm_squared())
        .collect();
    while chosen.len() < m {
        let mut best = (f64::NEG_INFINITY, u32::MAX);
        for (i, &d) in d2.iter().enumerate() {
            if d > best.0 {
                best = (d, i as u32);
            }
        }
        let pick = best.1;
        chosen.push(pick);
        let pp = points[pick as usize];
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = (points[i] - pp).norm_squared();
            if nd < *d {
                *d = nd;
            }
        }
    }
    chosen
}

/// Unit normals estimated per point from the covariance of its `k` nearest
/// neighbors (the point itself included), oriented away from the local
/// neighborhood centroid. Signs are consistent only locally; global
/// orientation is resolved later from patch agreement.
pub fn estimate_normals(points: &[Vector3<f64>], k: usize) -> Vec<Vector3<f64>> {
    let tree = KdTree::new(points);
    let all: Vec<u32> = (0..points.len() as u32).collect();
    estimate_normals_at(points, &tree, &all, k)
}

/// [`estimate_normals`] restricted to the points at `indices`.
pub fn estimate_normals_at(
    points: &[Vector3<f64>],
    tree: &KdTree,
    indices: &[u32],
    k: usize,
) -> Vec<Vector3<f64>> {
    let k = k.clamp(1, points.len());
    indices
        .par_iter()
        .map(|&pi| {
            let p = &points[pi as usize];
            let nbrs = tree.k_nearest(p, k);
            let mut centroid = Vector3::zeros();
            for (i, _) in &nbrs {
                centroid += points[*i as usize];
            }
            centroid /= nbrs.len() as f64;
            let mut cov = Matrix3::zeros();
            for (i, _) in &nbrs {
                let d = points[*i as usize] - centroid;
                cov += d * d.transpose();
            }
            let mut n = smallest_eigenvector(&cov);
            // Deterministic sign before the centroid rule so the eigensolver's
            // internal sign choice never leaks into results.
            let lead = (0..3).max_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs())).unwrap();
            if n[lead] < 0.0 {
                n = -n;
            }
            if n.dot(&(p - centroid)) < 0.0 {
                n = -n;
            }
            n
        })
        .collect()
}

fn smallest_eigenvector(m: &Matrix3<f64>) -> Vector3<f64> {
    let eig = nalgebra::linalg::SymmetricEigen::new(*m);
    let mut best = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[best] {
            best = i;
        }
    }
    let v = eig.eigenvectors.column(best).into_owned();
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vector3::x()
    }
}
