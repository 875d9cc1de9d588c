//! Static 3-D kd-tree for k-nearest-neighbor queries.

use crate::geometry::Vec3;

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

/// Built once over a point set; queries return indices into that set.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Permutation of point indices; leaves own contiguous runs.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Anything that can answer k-nearest-neighbor queries over a point set.
pub trait NeighborSearch {
    /// Up to `k` `(squared distance, index)` pairs sorted by distance, ties
    /// broken by index.
    fn nearest(&self, query: &Vec3, k: usize) -> Vec<(f64, usize)>;
    fn point(&self, index: usize) -> Vec3;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl KdTree {
    pub fn new(points: Vec<Vec3>) -> Self {
        let mut tree = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        tree
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        (hi - lo).imax()
    }

    fn search(&self, node: usize, query: &Vec3, k: usize, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = (self.points[i] - query).norm_squared();
                    insert_bounded(best, (d, i), k);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, query, k, best);
                // `<=` keeps equal-distance ties reachable on both sides.
                if best.len() < k || diff * diff <= best[best.len() - 1].0 {
                    self.search(far, query, k, best);
                }
            }
        }
    }
}

fn insert_bounded(best: &mut Vec<(f64, usize)>, item: (f64, usize), k: usize) {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if best.len() == k && cmp(&item, &best[k - 1]).is_ge() {
        return;
    }
    let pos = best.partition_point(|x| cmp(x, &item).is_lt());
    best.insert(pos, item);
    best.truncate(k);
}

impl NeighborSearch for KdTree {
    fn nearest(&self, query: &Vec3, k: usize) -> Vec<(f64, usize)> {
        let mut best = Vec::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, query, k, &mut best);
        }
        best
    }

    fn point(&self, index: usize) -> Vec3 {
        self.points[index]
    }

    fn len(&self) -> usize {
        self.points.len()
    }
}

/// Exhaustive search; the reference the kd-tree is checked against.
#[derive(Debug, Clone)]
pub struct BruteForce(pub Vec<Vec3>);

impl NeighborSearch for BruteForce {
    fn nearest(&self, query: &Vec3, k: usize) -> Vec<(f64, usize)> {
        let mut all: Vec<(f64, usize)> = self
            .0
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - query).norm_squared(), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        all
    }

    fn point(&self, index: usize) -> Vec3 {
        self.0[index]
    }

    fn len(&self) -> usize {
        self.0.len()
    }
}
