//! Paired (point cloud, depth image) samples and their on-disk formats.

pub mod io;
pub mod manifest;
pub mod mask;
pub mod render;
pub mod synth;

pub use io::{load_cloud, load_pgm, load_ply, load_xyz, save_pgm, save_ply, save_xyz};
pub use manifest::{
    read_dataset, read_manifest, synth_rows, verify_pairing, write_dataset, ManifestRow, MANIFEST_FILE,
};
pub use mask::{apply_mask, MaskPartition, MaskSpec, MaskedGroups};
pub use render::{render_projection, View};
pub use synth::{synth_shape, ShapeKind};

use crate::error::Result;
use crate::geometry::PointCloud;

/// Grayscale raster, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// 8-bit quantization used by the PGM writer.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        debug_assert_eq!(bytes.len(), height * width);
        Image {
            height,
            width,
            data: bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }

    /// Round trip through 8 bits, so the in-memory image equals what a PGM
    /// file stores.
    pub fn quantized(&self) -> Self {
        Image::from_bytes(self.height, self.width, &self.to_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub cloud: PointCloud,
    pub image: Image,
}

impl Sample {
    /// Renders `cloud` (already normalized) and stores the 8-bit image.
    pub fn from_cloud(id: impl Into<String>, cloud: PointCloud, image_size: usize, view: View) -> Result<Self> {
        let image = render_projection(&cloud, image_size, image_size, view)?.quantized();
        Ok(Sample {
            id: id.into(),
            cloud,
            image,
        })
    }

    pub fn synth(
        id: impl Into<String>,
        kind: ShapeKind,
        n: usize,
        seed: u64,
        image_size: usize,
        view: View,
    ) -> Result<Self> {
        Sample::from_cloud(id, synth_shape(kind, n, seed)?, image_size, view)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_quantization_is_idempotent() {
        let img = Image {
            height: 1,
            width: 4,
            data: vec![0.0, 0.3, 2.0 / 3.0, 1.0],
        };
        let q = img.quantized();
        assert_eq!(q.to_bytes(), vec![0, 77, 170, 255]);
        assert_eq!(q.quantized(), q);
    }

    #[test]
    fn stored_image_matches_rerender() {
        let s = Sample::synth("a", ShapeKind::Torus, 400, 9, 32, View::PosZ).unwrap();
        let again = render_projection(&s.cloud, 32, 32, View::PosZ).unwrap();
        assert_eq!(again.to_bytes(), s.image.to_bytes());
    }
}
