//! Point-cloud preprocessing: unit-sphere normalization, farthest point
//! sampling and k-nearest-neighbour grouping.
//!
//! Every selection in this module breaks distance ties toward the lowest
//! point index, so results are reproducible bit for bit and can be checked
//! against brute-force enumeration.

mod kdtree;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use kdtree::KdTree;

pub type Point3 = [f64; 3];

/// Squared Euclidean distance. Every distance comparison in the crate goes
/// through this function so different search paths round identically.
#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    /// Fails on an empty list or non-finite coordinates.
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("empty cloud".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Contract(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }

    /// Largest distance between any two points (O(n²)).
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.max(dist2(a, b));
            }
        }
        best.sqrt()
    }
}

/// Similarity transform that maps a cloud into the unit ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub centroid: Point3,
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, p: &Point3) -> Point3 {
        [0, 1, 2].map(|a| (p[a] - self.centroid[a]) / self.scale)
    }

    pub fn invert(&self, p: &Point3) -> Point3 {
        [0, 1, 2].map(|a| p[a] * self.scale + self.centroid[a])
    }
}

/// Centers the cloud on its centroid and scales it so the farthest point has
/// norm one. A cloud whose points all coincide maps to the origin with
/// scale 1.
pub fn normalize_unit_sphere(pc: &PointCloud) -> Result<(PointCloud, Normalization)> {
    if pc.is_empty() {
        return Err(Error::Contract("cannot normalize an empty cloud".into()));
    }
    let centroid = pc.centroid();
    let max_norm = pc
        .points
        .iter()
        .map(|p| dist2(p, &centroid))
        .fold(0.0f64, f64::max)
        .sqrt();
    let scale = if max_norm > 0.0 { max_norm } else { 1.0 };
    let t = Normalization { centroid, scale };
    let points = pc.points.iter().map(|p| t.apply(p)).collect();
    Ok((PointCloud { points }, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpsStart {
    Index(usize),
    /// Start index drawn uniformly from a generator seeded with this value.
    Seeded(u64),
}

impl Default for FpsStart {
    fn default() -> Self {
        FpsStart::Index(0)
    }
}

/// Greedy farthest point sampling; returns `g` indices into `pc`.
pub fn fps(pc: &PointCloud, g: usize, start: FpsStart) -> Result<Vec<usize>> {
    Ok(fps_with_distances(pc, g, start)?.0)
}

/// Like [`fps`], also returning the squared selection distance of every
/// pick after the first (the min-distance that made it the argmax).
pub fn fps_with_distances(pc: &PointCloud, g: usize, start: FpsStart) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = pc.len();
    if g == 0 || g > n {
        return Err(Error::Contract(format!("fps needs 1 <= g <= {n}, got g = {g}")));
    }
    let first = match start {
        FpsStart::Index(i) if i < n => i,
        FpsStart::Index(i) => {
            return Err(Error::Contract(format!(
                "fps start index {i} out of range for {n} points"
            )));
        }
        FpsStart::Seeded(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..n),
    };
    let pts = &pc.points;
    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut picks = Vec::with_capacity(g);
    let mut sel_dist = Vec::with_capacity(g.saturating_sub(1));
    let mut current = first;
    loop {
        picks.push(current);
        chosen[current] = true;
        if picks.len() == g {
            break;
        }
        let c = pts[current];
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let d = dist2(&pts[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if best.is_none_or(|(_, bd)| min_d[i] > bd) {
                best = Some((i, min_d[i]));
            }
        }
        let (next, d) = best.expect("g <= n leaves an unchosen point");
        sel_dist.push(d);
        current = next;
    }
    Ok((picks, sel_dist))
}

/// Local neighbourhoods around sampled centers, `N ∈ R^{G×M×3}` for one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedPointCloud {
    /// Absolute center coordinates, one per group.
    pub centers: Vec<Point3>,
    /// Indices of the centers in the source cloud.
    pub center_indices: Vec<usize>,
    /// Center-relative neighbour coordinates, `G·M` entries, group-major.
    pub groups: Vec<Point3>,
    /// Source indices of the neighbours, same layout as `groups`.
    pub neighbors: Vec<usize>,
    pub group_size: usize,
}

impl GroupedPointCloud {
    pub fn num_groups(&self) -> usize {
        self.centers.len()
    }

    pub fn group(&self, g: usize) -> &[Point3] {
        &self.groups[g * self.group_size..(g + 1) * self.group_size]
    }

    /// Neighbour coordinates of group `g` with the center added back.
    pub fn absolute_group(&self, g: usize) -> impl Iterator<Item = Point3> + '_ {
        let c = self.centers[g];
        self.group(g)
            .iter()
            .map(move |p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
    }

    /// All `G·M` grouped points in absolute coordinates.
    pub fn absolute_points(&self) -> Vec<Point3> {
        (0..self.num_groups()).flat_map(|g| self.absolute_group(g)).collect()
    }
}

/// Collects the `m` nearest points of each center (the center itself
/// included) and stores them relative to the center. Groups may overlap.
pub fn knn_group(pc: &PointCloud, centers: &[usize], m: usize) -> Result<GroupedPointCloud> {
    let n = pc.len();
    if m == 0 || m > n {
        return Err(Error::Contract(format!("group size must be in 1..={n}, got {m}")));
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= n) {
        return Err(Error::Contract(format!(
            "center index {bad} out of range for {n} points"
        )));
    }
    let tree = KdTree::build(&pc.points).expect("cloud is nonempty");
    let mut groups = Vec::with_capacity(centers.len() * m);
    let mut neighbors = Vec::with_capacity(centers.len() * m);
    let mut abs_centers = Vec::with_capacity(centers.len());
    for &ci in centers {
        let c = pc.points[ci];
        abs_centers.push(c);
        for (j, _) in tree.k_nearest(&c, m) {
            let p = pc.points[j];
            groups.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            neighbors.push(j);
        }
    }
    Ok(GroupedPointCloud {
        centers: abs_centers,
        center_indices: centers.to_vec(),
        groups,
        neighbors,
        group_size: m,
    })
}

/// FPS followed by KNN grouping.
pub fn group_cloud(pc: &PointCloud, g: usize, m: usize, start: FpsStart) -> Result<GroupedPointCloud> {
    let centers = fps(pc, g, start)?;
    knn_group(pc, &centers, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[Point3]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn normalize_two_points() {
        let (out, t) = normalize_unit_sphere(&cloud(&[[2., 0., 0.], [0., 0., 0.]])).unwrap();
        assert_eq!(out.points(), &[[1., 0., 0.], [-1., 0., 0.]]);
        assert_eq!(t.centroid, [1., 0., 0.]);
        assert_eq!(t.scale, 1.0);
    }

    #[test]
    fn normalize_identity_on_unit_cloud() {
        let pc = cloud(&[[1., 0., 0.], [-1., 0., 0.], [0., 0.5, 0.], [0., -0.5, 0.]]);
        let (out, t) = normalize_unit_sphere(&pc).unwrap();
        assert_eq!(out, pc);
        assert_eq!(
            t,
            Normalization {
                centroid: [0.; 3],
                scale: 1.0
            }
        );
    }

    #[test]
    fn normalize_coincident_points() {
        let (out, t) = normalize_unit_sphere(&cloud(&[[3., 3., 3.]; 4])).unwrap();
        assert!(out.points().iter().all(|p| *p == [0., 0., 0.]));
        assert_eq!(t.scale, 1.0);
    }

    #[test]
    fn empty_cloud_rejected() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::Contract(_))));
        assert!(PointCloud::new(vec![[f64::NAN, 0., 0.]]).is_err());
    }

    #[test]
    fn fps_small_cases() {
        let pc = cloud(&[[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [10., 0., 0.]]);
        assert_eq!(fps(&pc, 2, FpsStart::Index(0)).unwrap(), vec![0, 3]);
        assert_eq!(fps(&pc, 1, FpsStart::Index(2)).unwrap(), vec![2]);
        let mut all = fps(&pc, 4, FpsStart::Index(0)).unwrap();
        assert_eq!(all, fps(&pc, 4, FpsStart::Index(0)).unwrap());
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(fps(&pc, 5, FpsStart::Index(0)).is_err());
    }

    #[test]
    fn fps_exhausts_duplicates_without_repeats() {
        let pc = cloud(&[[0., 0., 0.]; 5]);
        let mut idx = fps(&pc, 5, FpsStart::Index(2)).unwrap();
        assert_eq!(idx[0], 2);
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fps_seeded_start_is_deterministic() {
        let pc = cloud(&[[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [10., 0., 0.]]);
        let a = fps(&pc, 3, FpsStart::Seeded(9)).unwrap();
        assert_eq!(a, fps(&pc, 3, FpsStart::Seeded(9)).unwrap());
    }

    #[test]
    fn knn_collinear() {
        let pc = cloud(&[[0., 0., 0.], [1., 0., 0.], [2., 0., 0.], [3., 0., 0.]]);
        let g = knn_group(&pc, &[1], 3).unwrap();
        assert_eq!(g.neighbors, vec![1, 0, 2]);
        assert_eq!(g.group(0), &[[0., 0., 0.], [-1., 0., 0.], [1., 0., 0.]]);
    }

    #[test]
    fn knn_single_member_is_center() {
        let pc = cloud(&[[0., 0., 0.], [1., 2., 0.], [2., 0., 5.]]);
        let g = knn_group(&pc, &[2, 0, 1], 1).unwrap();
        assert!(g.groups.iter().all(|p| *p == [0., 0., 0.]));
        assert_eq!(g.neighbors, vec![2, 0, 1]);
        assert!(knn_group(&pc, &[0], 4).is_err());
    }
}
