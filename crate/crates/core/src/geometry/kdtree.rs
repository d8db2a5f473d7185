use std::cmp::Ordering;

use crate::geometry::PointCloud;
use crate::linalg::{dist2, Vec3};
use crate::Scalar;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: T,
        left: usize,
        right: usize,
    },
}

/// Balanced k-d tree over a snapshot of reference points.
///
/// Answers are identical to an exhaustive scan: the same squared-distance
/// expression is used, and ties go to the lowest reference index.
#[derive(Debug, Clone)]
pub struct NeighborIndex<T> {
    points: Vec<Vec3<T>>,
    order: Vec<usize>,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> NeighborIndex<T> {
    pub fn new(points: Vec<Vec3<T>>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            let n = points.len();
            build(&points, &mut order, 0, n, &mut nodes);
        }
        Self {
            points,
            order,
            nodes,
        }
    }

    pub fn from_cloud(pc: &PointCloud<T>) -> Self {
        Self::new(pc.points().to_vec())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    /// `(index, distance)` of the nearest reference point, or `None` on an empty index.
    pub fn nearest(&self, query: &Vec3<T>) -> Option<(usize, T)> {
        self.nearest_sq(query).map(|(i, d2)| (i, d2.sqrt()))
    }

    /// Like [`nearest`](Self::nearest) but returns the squared distance.
    pub fn nearest_sq(&self, query: &Vec3<T>) -> Option<(usize, T)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, T::infinity());
        self.search(0, query, &mut best);
        Some(best)
    }

    /// True when some reference point lies within `radius` (inclusive).
    pub fn has_neighbor_within(&self, query: &Vec3<T>, radius: T) -> bool {
        self.nearest(query).is_some_and(|(_, d)| d <= radius)
    }

    fn search(&self, node: usize, q: &Vec3<T>, best: &mut (usize, T)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = dist2(q, &self.points[i]);
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= T::zero() { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // Points across the plane are at least |diff| away on this axis;
                // equality must still be visited for the index tie-break.
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build<T: Scalar>(
    points: &[Vec3<T>],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node<T>>,
) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &mut order[start..end];
    let axis = widest_axis(points, slice);
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis]
            .partial_cmp(&points[b][axis])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let value = points[slice[mid]][axis];
    // Left holds coords <= value, right holds coords >= value.
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let left = build(points, order, start, start + mid, nodes);
    let right = build(points, order, start + mid, end, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

fn widest_axis<T: Scalar>(points: &[Vec3<T>], idx: &[usize]) -> usize {
    let mut lo = [T::infinity(); 3];
    let mut hi = [T::neg_infinity(); 3];
    for &i in idx {
        for k in 0..3 {
            lo[k] = lo[k].min(points[i][k]);
            hi[k] = hi[k].max(points[i][k]);
        }
    }
    (0..3)
        .max_by(|&a, &b| {
            (hi[a] - lo[a])
                .partial_cmp(&(hi[b] - lo[b]))
                .unwrap_or(Ordering::Equal)
                .then(b.cmp(&a))
        })
        .unwrap_or(0)
}

/// Exhaustive nearest-neighbor scan; the reference oracle for [`NeighborIndex`].
pub fn brute_force_nearest<T: Scalar>(pc: &PointCloud<T>, query: &Vec3<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (i, p) in pc.points().iter().enumerate() {
        let d2 = dist2(query, p);
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    (best.0, best.1.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_point_always_wins() {
        let idx = NeighborIndex::new(vec![[1.0, 1.0, 1.0]]);
        assert_eq!(idx.nearest(&[5.0, -3.0, 2.0]).unwrap().0, 0);
        assert!(NeighborIndex::<f64>::new(vec![]).nearest(&[0.0; 3]).is_none());
    }

    #[test]
    fn self_queries_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 3]> = (0..300).map(|_| rng.random()).collect();
        let idx = NeighborIndex::new(pts.clone());
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(idx.nearest(p), Some((i, 0.0)));
        }
    }

    #[test]
    fn equidistant_tie_goes_to_lower_index() {
        let mut pts = vec![[10.0, 10.0, 10.0]; 10];
        pts[3] = [1.0, 0.0, 0.0];
        pts[7] = [-1.0, 0.0, 0.0];
        let idx = NeighborIndex::new(pts.clone());
        assert_eq!(idx.nearest(&[0.0; 3]), Some((3, 1.0)));
        let pc = PointCloud::new(pts).unwrap();
        assert_eq!(brute_force_nearest(&pc, &[0.0; 3]), (3, 1.0));
    }

    #[test]
    fn duplicate_points_tie_break() {
        let pts = vec![[0.5, 0.5, 0.5]; 40];
        let idx = NeighborIndex::new(pts);
        assert_eq!(idx.nearest(&[0.0; 3]).unwrap().0, 0);
    }
}
