use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_sphere, Point3, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    PlaneWithHole,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::PlaneWithHole,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::PlaneWithHole => "plane_with_hole",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown shape `{s}` (expected one of sphere, cube, torus, plane_with_hole)"
            ))
        })
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let v: Point3 = [0; 3].map(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|c| c / n);
        }
    }
}

fn cross(a: &Point3, b: &Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Antipodal pairs plus, for odd counts, an equilateral triangle on a great
/// circle: the sample mean is zero, so normalization keeps every point on
/// the unit sphere.
fn sample_sphere(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let mut pts = Vec::with_capacity(n);
    if n == 1 {
        pts.push(unit_vector(rng));
        return pts;
    }
    let triangle = n % 2 == 1;
    let pairs = if triangle { (n - 3) / 2 } else { n / 2 };
    for _ in 0..pairs {
        let u = unit_vector(rng);
        pts.push(u);
        pts.push(u.map(|c| -c));
    }
    if triangle {
        let u = unit_vector(rng);
        let w = loop {
            let c = cross(&u, &unit_vector(rng));
            let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            if n > 1e-6 {
                break c.map(|x| x / n);
            }
        };
        for k in 0..3 {
            let t = TAU * k as f64 / 3.0;
            pts.push([0, 1, 2].map(|a| t.cos() * u[a] + t.sin() * w[a]));
        }
    }
    pts
}

fn face_point(face: usize, u: f64, v: f64) -> Point3 {
    let axis = face % 3;
    let sign = if face < 3 { 1.0 } else { -1.0 };
    let mut p = [0.0; 3];
    p[axis] = sign;
    p[(axis + 1) % 3] = u;
    p[(axis + 2) % 3] = v;
    p
}

/// Stratified over the six faces: face `f` gets `n/6` points plus one if
/// `f < n % 6`. Opposite faces share mirrored samples where counts allow.
fn sample_cube(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let counts: Vec<usize> = (0..6).map(|f| n / 6 + usize::from(f < n % 6)).collect();
    let mut pts = Vec::with_capacity(n);
    for f in 0..3 {
        let paired = counts[f].min(counts[f + 3]);
        for _ in 0..paired {
            let (u, v) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let p = face_point(f, u, v);
            pts.push(p);
            pts.push(p.map(|c| -c));
        }
        for face in [f, f + 3] {
            for _ in paired..counts[face] {
                let (u, v) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                pts.push(face_point(face, u, v));
            }
        }
    }
    pts
}

fn sample_torus(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    const MAJOR: f64 = 1.0;
    const MINOR: f64 = 0.4;
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let theta = rng.random_range(0.0..TAU);
        // area element is proportional to (R + r cos θ)
        let accept: f64 = rng.random_range(0.0..1.0);
        if accept * (MAJOR + MINOR) > MAJOR + MINOR * theta.cos() {
            continue;
        }
        let phi = rng.random_range(0.0..TAU);
        let ring = MAJOR + MINOR * theta.cos();
        pts.push([ring * phi.cos(), ring * phi.sin(), MINOR * theta.sin()]);
    }
    pts
}

fn sample_plane_with_hole(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    const HOLE: f64 = 0.5;
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let (x, y) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if x * x + y * y >= HOLE * HOLE {
            pts.push([x, y, 0.0]);
        }
    }
    pts
}

/// Samples `n` surface points of `kind` and normalizes them into the unit
/// sphere. Deterministic per seed.
pub fn synth_shape(kind: ShapeKind, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::Config("shape needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = match kind {
        ShapeKind::Sphere => sample_sphere(n, &mut rng),
        ShapeKind::Cube => sample_cube(n, &mut rng),
        ShapeKind::Torus => sample_torus(n, &mut rng),
        ShapeKind::PlaneWithHole => sample_plane_with_hole(n, &mut rng),
    };
    debug_assert_eq!(pts.len(), n);
    Ok(normalize_unit_sphere(&PointCloud::new(pts)?)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(p: &Point3) -> f64 {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    }

    #[test]
    fn sphere_points_stay_on_unit_sphere() {
        for n in [2, 3, 7, 100, 501] {
            let pc = synth_shape(ShapeKind::Sphere, n, 11).unwrap();
            assert_eq!(pc.len(), n);
            for p in pc.points() {
                assert!((norm(p) - 1.0).abs() < 1e-6, "n={n}: {}", norm(p));
            }
        }
    }

    #[test]
    fn cube_faces_are_stratified() {
        let k = 25;
        let pc = synth_shape(ShapeKind::Cube, 6 * k, 3).unwrap();
        let mut counts = [0usize; 6];
        for p in pc.points() {
            let axis = (0..3).max_by(|&a, &b| p[a].abs().total_cmp(&p[b].abs())).unwrap();
            counts[axis + if p[axis] > 0.0 { 0 } else { 3 }] += 1;
        }
        assert_eq!(counts, [k; 6]);
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in ShapeKind::ALL {
            let a = synth_shape(kind, 300, 42).unwrap();
            let b = synth_shape(kind, 300, 42).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, synth_shape(kind, 300, 43).unwrap());
            assert!(a.points().iter().all(|p| norm(p) <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn unknown_kind_is_config_error() {
        assert!(matches!("pyramid".parse::<ShapeKind>(), Err(Error::Config(_))));
        assert_eq!(
            "plane_with_hole".parse::<ShapeKind>().unwrap(),
            ShapeKind::PlaneWithHole
        );
    }
}
