use std::fmt;
use std::str::FromStr;

use super::Image;
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

/// Axis-aligned camera direction. `PosZ` means the camera sits on the +z
/// axis looking toward the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum View {
    PosX,
    NegX,
    PosY,
    NegY,
    #[default]
    PosZ,
    NegZ,
}

impl View {
    pub const ALL: [View; 6] = [View::PosX, View::NegX, View::PosY, View::NegY, View::PosZ, View::NegZ];

    pub fn name(self) -> &'static str {
        match self {
            View::PosX => "+x",
            View::NegX => "-x",
            View::PosY => "+y",
            View::NegY => "-y",
            View::PosZ => "+z",
            View::NegZ => "-z",
        }
    }

    /// Unit vector from the origin toward the camera.
    pub fn direction(self) -> Point3 {
        match self {
            View::PosX => [1., 0., 0.],
            View::NegX => [-1., 0., 0.],
            View::PosY => [0., 1., 0.],
            View::NegY => [0., -1., 0.],
            View::PosZ => [0., 0., 1.],
            View::NegZ => [0., 0., -1.],
        }
    }

    /// Image-plane (right, up) axes.
    fn basis(self) -> (Point3, Point3) {
        let d = self.direction();
        let up = if d[1] != 0.0 { [0., 0., 1.] } else { [0., 1., 0.] };
        let right = [
            up[1] * d[2] - up[2] * d[1],
            up[2] * d[0] - up[0] * d[2],
            up[0] * d[1] - up[1] * d[0],
        ];
        (right, up)
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        View::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().trim_start_matches('+') == s)
            .ok_or_else(|| Error::Config(format!("unknown view `{s}` (expected +x, -x, +y, -y, +z or -z)")))
    }
}

fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn to_pixel(coord: f64, extent: usize) -> usize {
    let f = ((coord + 1.0) * 0.5 * extent as f64).floor();
    if f <= 0.0 {
        0
    } else {
        (f as usize).min(extent - 1)
    }
}

/// Orthographic depth render of a normalized cloud.
///
/// Plane coordinates in `[-1, 1]` map onto the raster; each pixel stores the
/// inverse depth `1 / (1 + t)` of the nearest point landing in it, where
/// `t = 1 - p·view` is the distance from the tangent plane facing the
/// camera. Empty pixels are zero.
pub fn render_projection(cloud: &PointCloud, h: usize, w: usize, view: View) -> Result<Image> {
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("image must be at least 8x8, got {h}x{w}")));
    }
    let d = view.direction();
    let (right, up) = view.basis();
    let mut img = Image::zeros(h, w);
    for p in cloud.points() {
        let col = to_pixel(dot(p, &right), w);
        let row = to_pixel(-dot(p, &up), h);
        let t = 1.0 - dot(p, &d);
        let value = (1.0 / (1.0 + t.max(0.0))).min(1.0);
        let px = &mut img.data[row * w + col];
        if value > *px {
            *px = value;
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_lands_in_center() {
        let pc = PointCloud::new(vec![[0., 0., 0.]]).unwrap();
        let img = render_projection(&pc, 16, 16, View::PosZ).unwrap();
        let lit: Vec<usize> = (0..img.data.len()).filter(|&i| img.data[i] > 0.0).collect();
        assert_eq!(lit, vec![8 * 16 + 8]);
        assert_eq!(img.data[8 * 16 + 8], 0.5);
    }

    #[test]
    fn nearer_point_wins() {
        let pc = PointCloud::new(vec![[0., 0., -0.5], [0., 0., 0.5]]).unwrap();
        let img = render_projection(&pc, 8, 8, View::PosZ).unwrap();
        assert_eq!(img.data[4 * 8 + 4], 1.0 / 1.5);
        let img = render_projection(&pc, 8, 8, View::NegZ).unwrap();
        assert_eq!(img.data[4 * 8 + 4], 1.0 / 1.5);
    }

    #[test]
    fn small_images_rejected() {
        let pc = PointCloud::new(vec![[0., 0., 0.]]).unwrap();
        assert!(matches!(
            render_projection(&pc, 7, 32, View::PosZ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn views_are_orthonormal() {
        for v in View::ALL {
            let d = v.direction();
            let (r, u) = v.basis();
            assert_eq!(dot(&d, &r), 0.0);
            assert_eq!(dot(&d, &u), 0.0);
            assert_eq!(dot(&r, &u), 0.0);
            assert_eq!(dot(&r, &r), 1.0);
            assert_eq!(v.name().parse::<View>().unwrap(), v);
        }
    }
}
