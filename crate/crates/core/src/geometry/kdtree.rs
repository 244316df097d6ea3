use super::{dist2, Point3};

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

/// Static 3-d tree over a borrowed point array.
///
/// Interior nodes split at the median of the axis with the widest spread;
/// leaves hold at most eight points. All queries are exact and break
/// distance ties toward the lower point index.
#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Point3],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    /// Returns `None` for an empty point set.
    pub fn build(points: &'a [Point3]) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1),
        };
        tree.build_node(0, points.len());
        Some(tree)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap_or(0);
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&i, &j| {
            pts[i][axis].total_cmp(&pts[j][axis]).then(i.cmp(&j))
        });
        let value = pts[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
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

    /// Exact nearest neighbour of `q` as `(index, squared distance)`.
    pub fn nearest(&self, q: &Point3) -> (usize, f64) {
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_in(0, q, &mut best);
        (best.1, best.0)
    }

    fn nearest_in(&self, node: usize, q: &Point3, best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, &self.points[i]);
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = (d, i);
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
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_in(near, q, best);
                if diff * diff <= best.0 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points to `q`, ordered by `(squared distance, index)`.
    pub fn k_nearest(&self, q: &Point3, k: usize) -> Vec<(usize, f64)> {
        let mut found: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.k_nearest_in(0, q, k, &mut found);
        }
        found.into_iter().map(|(d, i)| (i, d)).collect()
    }

    fn k_nearest_in(&self, node: usize, q: &Point3, k: usize, found: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = (dist2(q, &self.points[i]), i);
                    if found.len() == k {
                        let worst = found[k - 1];
                        if cand.0 > worst.0 || (cand.0 == worst.0 && cand.1 > worst.1) {
                            continue;
                        }
                        found.pop();
                    }
                    let pos = found.partition_point(|&(d, j)| d < cand.0 || (d == cand.0 && j < cand.1));
                    found.insert(pos, cand);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.k_nearest_in(near, q, k, found);
                if found.len() < k || diff * diff <= found[k - 1].0 {
                    self.k_nearest_in(far, q, k, found);
                }
            }
        }
    }
}
