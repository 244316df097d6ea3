//! Dataset directory layout: `manifest.csv` plus `{id}.xyz` and `{id}.pgm`
//! per sample.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io, render_projection, Sample, ShapeKind, View};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub kind: String,
    pub seed: u64,
    pub points: usize,
    pub view: String,
    pub image_size: usize,
}

impl ManifestRow {
    pub fn shape_kind(&self) -> Result<ShapeKind> {
        self.kind.parse()
    }

    pub fn view(&self) -> Result<View> {
        self.view.parse()
    }

    /// Regenerates the sample this row describes.
    pub fn synthesize(&self) -> Result<Sample> {
        Sample::synth(
            &self.id,
            self.shape_kind()?,
            self.points,
            self.seed,
            self.image_size,
            self.view()?,
        )
    }
}

/// Rows for `count` synthetic samples cycling through `shapes`. Sample `i`
/// uses seed `seed + i`.
pub fn synth_rows(
    shapes: &[ShapeKind],
    count: usize,
    points: usize,
    seed: u64,
    image_size: usize,
    view: View,
) -> Vec<ManifestRow> {
    (0..count)
        .map(|i| {
            let kind = shapes[i % shapes.len()];
            ManifestRow {
                id: format!("{kind}_{i:04}"),
                kind: kind.name().to_string(),
                seed: seed.wrapping_add(i as u64),
                points,
                view: view.name().to_string(),
                image_size,
            }
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse {
            path: path.display().to_string(),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

/// Writes every sample plus the manifest into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, rows: &[ManifestRow], samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        io::save_xyz(dir.join(format!("{}.xyz", s.id)), s.cloud.points())?;
        io::save_pgm(dir.join(format!("{}.pgm", s.id)), &s.image)?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::Config(format!("dataset manifest not found: {}", path.display())));
    }
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(&path, e))).collect()
}

/// Loads all samples listed in the manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let rows = read_manifest(dir)?;
    rows.iter()
        .map(|row| {
            Ok(Sample {
                id: row.id.clone(),
                cloud: io::load_xyz(dir.join(format!("{}.xyz", row.id)))?,
                image: io::load_pgm(dir.join(format!("{}.pgm", row.id)))?,
            })
        })
        .collect()
}

/// True when re-rendering each stored cloud reproduces its stored image.
pub fn verify_pairing(dir: &Path) -> Result<bool> {
    let rows = read_manifest(dir)?;
    let samples = read_dataset(dir)?;
    for (row, s) in rows.iter().zip(&samples) {
        let img = render_projection(&s.cloud, row.image_size, row.image_size, row.view()?)?;
        if img.to_bytes() != s.image.to_bytes() {
            return Ok(false);
        }
    }
    Ok(true)
}
