use ndarray::ArrayView2;

use crate::error::{FslmError, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

/// Static k-d tree over a point set with exact nearest-neighbour queries.
/// Ties in distance resolve to the lowest point index, so results match a
/// linear scan exactly.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    /// Point indices, permuted so every leaf owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Squared Euclidean distance, summed in coordinate order.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy)]
struct Best {
    d2: f64,
    idx: usize,
}

impl Best {
    fn offer(&mut self, d2: f64, idx: usize) {
        if d2 < self.d2 || (d2 == self.d2 && idx < self.idx) {
            *self = Best { d2, idx };
        }
    }
}

impl KdTree {
    pub fn build(points: ArrayView2<f64>) -> Result<Self> {
        let (n, dim) = points.dim();
        if n == 0 {
            return Err(FslmError::TooFewSamples { needed: 1, got: 0 });
        }
        if dim == 0 {
            return Err(FslmError::config("points must have at least one coordinate"));
        }
        let flat: Vec<f64> = points.iter().copied().collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(FslmError::config("k-d tree points must be finite"));
        }
        let mut tree = KdTree { dim, points: flat, order: (0..n).collect(), nodes: Vec::new() };
        tree.split(0, n);
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn split(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let d = self.dim;
        let mut dim = 0;
        let mut widest = -1.0;
        for k in 0..d {
            let (lo, hi) = self.order[start..end]
                .iter()
                .map(|&i| self.points[i * d + k])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi - lo > widest {
                widest = hi - lo;
                dim = k;
            }
        }
        if widest == 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| pts[a * d + dim].total_cmp(&pts[b * d + dim]));
        let value = self.points[self.order[mid] * d + dim];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.split(start, mid);
        let right = self.split(mid, end);
        self.nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    fn search(&self, node: usize, q: &[f64], skip: Option<usize>, best: &mut Best) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) != skip {
                        best.offer(squared_distance(q, self.point(i)), i);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, skip, best);
                if diff * diff <= best.d2 {
                    self.search(far, q, skip, best);
                }
            }
        }
    }

    /// Index of and Euclidean distance to the nearest point.
    pub fn nearest(&self, q: &[f64]) -> (usize, f64) {
        assert_eq!(q.len(), self.dim, "query dimension");
        let mut best = Best { d2: f64::INFINITY, idx: usize::MAX };
        self.search(0, q, None, &mut best);
        (best.idx, best.d2.sqrt())
    }

    /// Nearest neighbour of stored point `i` among the others; `None` when the
    /// tree holds a single point.
    pub fn nearest_excluding_self(&self, i: usize) -> Option<(usize, f64)> {
        if self.len() < 2 {
            return None;
        }
        let mut best = Best { d2: f64::INFINITY, idx: usize::MAX };
        self.search(0, self.point(i), Some(i), &mut best);
        Some((best.idx, best.d2.sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn brute(points: &Array2<f64>, q: &[f64], skip: Option<usize>) -> (usize, f64) {
        let mut best = Best { d2: f64::INFINITY, idx: usize::MAX };
        for (i, row) in points.rows().into_iter().enumerate() {
            if Some(i) != skip {
                best.offer(squared_distance(q, row.as_slice().unwrap()), i);
            }
        }
        (best.idx, best.d2.sqrt())
    }

    #[test]
    fn one_dimensional_example() {
        let pts = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 10.0]).unwrap();
        let t = KdTree::build(pts.view()).unwrap();
        assert_eq!(t.nearest(&[0.4]), (0, 0.4));
        assert_eq!(t.nearest_excluding_self(2), Some((1, 9.0)));
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = rng_from_seed(1);
        let pts = Array2::from_shape_simple_fn((1000, 3), || rng.random_range(-1.0..1.0));
        let t = KdTree::build(pts.view()).unwrap();
        for _ in 0..100 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.2..1.2)).collect();
            assert_eq!(t.nearest(&q), brute(&pts, &q, None));
        }
        for i in (0..1000).step_by(7) {
            let q = pts.row(i).to_vec();
            assert_eq!(t.nearest_excluding_self(i), Some(brute(&pts, &q, Some(i))));
        }
    }

    #[test]
    fn duplicates_have_zero_distance() {
        let pts = Array2::from_shape_vec((4, 2), vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 5.0, 5.0]).unwrap();
        let t = KdTree::build(pts.view()).unwrap();
        assert_eq!(t.nearest_excluding_self(1), Some((2, 0.0)));
        assert_eq!(t.nearest_excluding_self(2), Some((1, 0.0)));
        assert_eq!(t.nearest(&[1.0, 1.0]), (1, 0.0));
    }

    #[test]
    fn rejects_empty_and_single_point_self_query() {
        assert!(KdTree::build(Array2::<f64>::zeros((0, 2)).view()).is_err());
        let t = KdTree::build(Array2::<f64>::zeros((1, 2)).view()).unwrap();
        assert_eq!(t.nearest_excluding_self(0), None);
    }

    proptest! {
        #[test]
        fn equals_brute_force(
            n in 1usize..200,
            d in 1usize..5,
            seed in any::<u64>(),
            grid in any::<bool>(),
        ) {
            let mut rng = rng_from_seed(seed);
            // a coarse grid forces many exact distance ties
            let pts = Array2::from_shape_simple_fn((n, d), || {
                if grid { rng.random_range(0..4) as f64 } else { rng.random_range(-1.0..1.0) }
            });
            let t = KdTree::build(pts.view()).unwrap();
            for _ in 0..10 {
                let q: Vec<f64> = (0..d).map(|_| if grid { rng.random_range(0..4) as f64 } else { rng.random_range(-1.0..1.0) }).collect();
                prop_assert_eq!(t.nearest(&q), brute(&pts, &q, None));
            }
            if n > 1 {
                for i in 0..n.min(20) {
                    let q = pts.row(i).to_vec();
                    prop_assert_eq!(t.nearest_excluding_self(i), Some(brute(&pts, &q, Some(i))));
                }
            }
        }
    }
}
