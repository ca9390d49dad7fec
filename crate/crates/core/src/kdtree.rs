//! Exact nearest-neighbor queries over 3D point sets.
//!
//! Queries return exactly what a brute-force scan would: distances are
//! accumulated in the same coordinate order, equal distances resolve to the
//! lowest point index, and far-side subtrees are visited on boundary ties, so
//! results (including the floating-point squared distance) are bitwise equal
//! to the quadratic scan.

use nalgebra::Vector3;

pub struct KdTree {
    pts: Vec<[f64; 3]>,
    /// Point indices arranged so that each segment's midpoint is the node and
    /// the halves are its subtrees; split axis cycles with depth.
    order: Vec<u32>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let pts: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<u32> = (0..pts.len() as u32).collect();
        build(&mut order, &pts, 0);
        KdTree { pts, order }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(u32, f64)> {
        self.nearest_filtered(q, |_| true)
    }

    /// Nearest point among those the predicate accepts.
    pub fn nearest_filtered(
        &self,
        q: &Vector3<f64>,
        accept: impl Fn(u32) -> bool,
    ) -> Option<(u32, f64)> {
        if self.pts.is_empty() {
            return None;
        }
        let qa = [q.x, q.y, q.z];
        let mut best = (f64::INFINITY, u32::MAX);
        self.search(0, self.order.len(), 0, &qa, &mut best, &accept);
        if best.1 == u32::MAX {
            None
        } else {
            Some((best.1, best.0))
        }
    }

    /// The k nearest points, ascending by (squared distance, index).
    pub fn k_nearest(&self, q: &Vector3<f64>, k: usize) -> Vec<(u32, f64)> {
        let qa = [q.x, q.y, q.z];
        let mut heap: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search_k(0, self.order.len(), 0, &qa, k, &mut heap);
        }
        heap.into_iter().map(|(d2, i)| (i, d2)).collect()
    }

    fn search(
        &self,
        lo: usize,
        hi: usize,
        depth: usize,
        q: &[f64; 3],
        best: &mut (f64, u32),
        accept: &impl Fn(u32) -> bool,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        if accept(idx) {
            let d2 = dist2(&self.pts[idx as usize], q);
            if d2 < best.0 || (d2 == best.0 && idx < best.1) {
                *best = (d2, idx);
            }
        }
        let axis = depth % 3;
        let delta = q[axis] - self.pts[idx as usize][axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, depth + 1, q, best, accept);
        if delta * delta <= best.0 {
            self.search(far.0, far.1, depth + 1, q, best, accept);
        }
    }

    fn search_k(
        &self,
        lo: usize,
        hi: usize,
        depth: usize,
        q: &[f64; 3],
        k: usize,
        found: &mut Vec<(f64, u32)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let d2 = dist2(&self.pts[idx as usize], q);
        let cand = (d2, idx);
        if found.len() < k {
            let at = found.partition_point(|e| *e < cand);
            found.insert(at, cand);
        } else if cand < found[k - 1] {
            let at = found.partition_point(|e| *e < cand);
            found.insert(at, cand);
            found.pop();
        }
        let axis = depth % 3;
        let delta = q[axis] - self.pts[idx as usize][axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search_k(near.0, near.1, depth + 1, q, k, found);
        let bound = if found.len() < k {
            f64::INFINITY
        } else {
            found[k - 1].0
        };
        if delta * delta <= bound {
            self.search_k(far.0, far.1, depth + 1, q, k, found);
        }
    }
}

fn build(order: &mut [u32], pts: &[[f64; 3]], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        pts[a as usize][axis]
            .total_cmp(&pts[b as usize][axis])
            .then(a.cmp(&b))
    });
    let (left, rest) = order.split_at_mut(mid);
    build(left, pts, depth + 1);
    build(&mut rest[1..], pts, depth + 1);
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], q: &[f64; 3]) -> f64 {
    let dx = a[0] - q[0];
    let dy = a[1] - q[1];
    let dz = a[2] - q[2];
    dx * dx + dy * dy + dz * dz
}
