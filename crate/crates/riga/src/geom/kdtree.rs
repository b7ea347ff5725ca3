//! Small kd-tree over 3D points.
//!
//! Query results are sorted by (squared distance, point index) so they are
//! observationally identical to a brute-force scan with the same ordering
//! rule, regardless of tree layout.

use nalgebra::Vector3;

struct Node {
    /// Index into `points` for leaf entries, or split info for inner nodes.
    axis: usize,
    split: f64,
    left: Option<Box<Node>>,
    right: Option<Box<Node>>,
    /// Point indices stored at this node (leaves only).
    items: Vec<usize>,
}

pub struct KdTree {
    points: Vec<Vector3<f64>>,
    root: Option<Box<Node>>,
}

const LEAF_SIZE: usize = 16;

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let root = if idx.is_empty() {
            None
        } else {
            Some(Self::build_node(points, &mut idx))
        };
        KdTree {
            points: points.to_vec(),
            root,
        }
    }

    fn build_node(points: &[Vector3<f64>], idx: &mut [usize]) -> Box<Node> {
        if idx.len() <= LEAF_SIZE {
            return Box::new(Node {
                axis: 0,
                split: 0.0,
                left: None,
                right: None,
                items: idx.to_vec(),
            });
        }
        // Split on the widest axis at the median.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in idx.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(points[i][a]);
                hi[a] = hi[a].max(points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let split = points[idx[mid]][axis];
        let (left_idx, right_idx) = idx.split_at_mut(mid);
        if left_idx.is_empty() {
            // All coordinates equal on this axis; fall back to a leaf.
            return Box::new(Node {
                axis: 0,
                split: 0.0,
                left: None,
                right: None,
                items: right_idx.to_vec(),
            });
        }
        Box::new(Node {
            axis,
            split,
            left: Some(Self::build_node(points, left_idx)),
            right: Some(Self::build_node(points, right_idx)),
            items: Vec::new(),
        })
    }

    /// All indices with squared distance < `r2`, sorted by (distance², index).
    pub fn within_radius(&self, center: &Vector3<f64>, r2: f64) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        if let Some(root) = &self.root {
            self.radius_rec(root, center, r2, &mut out);
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    fn radius_rec(
        &self,
        node: &Node,
        center: &Vector3<f64>,
        r2: f64,
        out: &mut Vec<(f64, usize)>,
    ) {
        if node.left.is_none() {
            for &i in &node.items {
                let d2 = (self.points[i] - center).norm_squared();
                if d2 < r2 {
                    out.push((d2, i));
                }
            }
            return;
        }
        let delta = center[node.axis] - node.split;
        let (near, far) = if delta < 0.0 {
            (node.left.as_ref().unwrap(), node.right.as_ref().unwrap())
        } else {
            (node.right.as_ref().unwrap(), node.left.as_ref().unwrap())
        };
        self.radius_rec(near, center, r2, out);
        if delta * delta < r2 {
            self.radius_rec(far, center, r2, out);
        }
    }

    /// The k nearest indices to `center`, sorted by (distance², index).
    /// Ties at the acceptance boundary resolve to the smaller index.
    pub fn nearest_k(&self, center: &Vector3<f64>, k: usize) -> Vec<(f64, usize)> {
        if k == 0 {
            return Vec::new();
        }
        // Worst candidate kept at the end; (d², idx) lexicographic order.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if let Some(root) = &self.root {
            self.nearest_rec(root, center, k, &mut best);
        }
        best
    }

    fn nearest_rec(
        &self,
        node: &Node,
        center: &Vector3<f64>,
        k: usize,
        best: &mut Vec<(f64, usize)>,
    ) {
        if node.left.is_none() {
            for &i in &node.items {
                let d2 = (self.points[i] - center).norm_squared();
                let cand = (d2, i);
                if best.len() < k {
                    let pos = best.partition_point(|e| cmp_lt(*e, cand));
                    best.insert(pos, cand);
                } else if cmp_lt(cand, *best.last().unwrap()) {
                    let pos = best.partition_point(|e| cmp_lt(*e, cand));
                    best.insert(pos, cand);
                    best.pop();
                }
            }
            return;
        }
        let delta = center[node.axis] - node.split;
        let (near, far) = if delta < 0.0 {
            (node.left.as_ref().unwrap(), node.right.as_ref().unwrap())
        } else {
            (node.right.as_ref().unwrap(), node.left.as_ref().unwrap())
        };
        self.nearest_rec(near, center, k, best);
        // Visit the far side when it could still hold a strictly better or
        // equal-distance candidate (equal matters for index tie-breaks).
        if best.len() < k || delta * delta <= best.last().unwrap().0 {
            self.nearest_rec(far, center, k, best);
        }
    }
}

fn cmp_lt(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()))
            .collect()
    }

    fn brute_radius(points: &[Vector3<f64>], c: &Vector3<f64>, r2: f64) -> Vec<(f64, usize)> {
        let mut v: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - c).norm_squared(), i))
            .filter(|(d2, _)| *d2 < r2)
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        v
    }

    #[test]
    fn radius_matches_brute_force() {
        let pts = random_points(1000, 7);
        let tree = KdTree::build(&pts);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..50 {
            let c = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let r = 0.05 + 0.3 * rng.gen::<f64>();
            assert_eq!(tree.within_radius(&c, r * r), brute_radius(&pts, &c, r * r));
        }
    }

    #[test]
    fn knn_matches_brute_force() {
        let pts = random_points(500, 11);
        let tree = KdTree::build(&pts);
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..50 {
            let c = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let k = 1 + rng.gen_range(0..20);
            let mut brute: Vec<(f64, usize)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| ((p - &c).norm_squared(), i))
                .collect();
            brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            brute.truncate(k);
            assert_eq!(tree.nearest_k(&c, k), brute);
        }
    }

    #[test]
    fn knn_with_duplicate_points_prefers_lower_index() {
        let mut pts = random_points(40, 3);
        for i in 0..20 {
            pts.push(pts[i]); // exact duplicates
        }
        let tree = KdTree::build(&pts);
        for q in 0..20 {
            let res = tree.nearest_k(&pts[q], 2);
            assert_eq!(res[0], (0.0, q));
            assert_eq!(res[1], (0.0, q + 40));
        }
    }
}
