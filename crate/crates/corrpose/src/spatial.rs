//! Exact nearest-neighbor search over 3D point sets.
//!
//! A median-split k-d tree; results are exact (brute force is kept as the
//! oracle in tests). Build is O(n log n), queries are O(log n) for
//! well-spread clouds.

use crate::geometry::Pt3;

pub struct KdTree {
    nodes: Vec<Node>,
    points: Vec<Pt3>,
    /// Indices into the original point slice, permuted by construction.
    order: Vec<u32>,
    root: i32,
}

struct Node {
    // Leaf when left == right == -1; then [start, end) indexes `order`.
    axis: u8,
    split: f64,
    left: i32,
    right: i32,
    start: u32,
    end: u32,
}

const LEAF_SIZE: usize = 12;

impl KdTree {
    pub fn build(points: &[Pt3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree {
            nodes: Vec::new(),
            points: points.to_vec(),
            order: Vec::new(),
            root: -1,
        };
        if !points.is_empty() {
            let n = order.len();
            tree.root = tree.split(&mut order, 0, n);
        }
        tree.order = order;
        tree
    }

    fn split(&mut self, order: &mut [u32], start: usize, end: usize) -> i32 {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node {
                axis: 0,
                split: 0.0,
                left: -1,
                right: -1,
                start: start as u32,
                end: end as u32,
            });
            return (self.nodes.len() - 1) as i32;
        }
        // Widest-spread axis.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &order[start..end] {
            let p = self.points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        let mid = (start + end) / 2;
        let slice = &mut order[start..end];
        let k = mid - start;
        slice.select_nth_unstable_by(k, |&i, &j| {
            self.points[i as usize][axis].total_cmp(&self.points[j as usize][axis])
        });
        let split = self.points[slice[k] as usize][axis];
        let idx = self.nodes.len();
        self.nodes.push(Node {
            axis: axis as u8,
            split,
            left: -1,
            right: -1,
            start: 0,
            end: 0,
        });
        let left = self.split(order, start, mid);
        let right = self.split(order, mid, end);
        self.nodes[idx].left = left;
        self.nodes[idx].right = right;
        idx as i32
    }

    /// Index and squared distance of the nearest point to `q`.
    pub fn nearest(&self, q: &Pt3) -> Option<(usize, f64)> {
        if self.root < 0 {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root, q, &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    fn search(&self, node: i32, q: &Pt3, best: &mut (usize, f64)) {
        let n = &self.nodes[node as usize];
        if n.left < 0 {
            for &i in &self.order[n.start as usize..n.end as usize] {
                let d = (self.points[i as usize] - q).norm_squared();
                if d < best.1 {
                    *best = (i as usize, d);
                }
            }
            return;
        }
        let axis = n.axis as usize;
        let diff = q[axis] - n.split;
        let (near, far) = if diff <= 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, best);
        if diff * diff < best.1 {
            self.search(far, q, best);
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = crate::rng::stream(5, b"kd");
        let pts: Vec<Pt3> = (0..500)
            .map(|_| Pt3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let tree = KdTree::build(&pts);
        for _ in 0..200 {
            let q = Pt3::new(
                rng.random::<f64>() * 1.4 - 0.2,
                rng.random::<f64>() * 1.4 - 0.2,
                rng.random::<f64>() * 1.4 - 0.2,
            );
            let (_bi, bd) = tree.nearest(&q).unwrap();
            let brute = pts
                .iter()
                .map(|p| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(bd, brute);
        }
    }

    #[test]
    fn empty_and_single() {
        assert!(KdTree::build(&[]).nearest(&Pt3::origin()).is_none());
        let t = KdTree::build(&[Pt3::new(1.0, 2.0, 3.0)]);
        let (i, d) = t.nearest(&Pt3::origin()).unwrap();
        assert_eq!(i, 0);
        assert!((d - 14.0).abs() < 1e-12);
    }
}
