use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::chamfer::{chamfer, ChamferVariant};
use crate::dataset::Sample;
use crate::error::Result;
use crate::model::{Model, PreparedSample};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub chamfer_l2sq: f64,
    pub chamfer_l1: f64,
    pub recon_points: usize,
    pub visible_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_l2sq(&self) -> f64 {
        self.rows.iter().map(|r| r.chamfer_l2sq).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_l1(&self) -> f64 {
        self.rows.iter().map(|r| r.chamfer_l1).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// True when every reconstruction has exactly three times as many
    /// points as its visible input.
    pub fn threefold_upsampling(&self) -> bool {
        self.rows.iter().all(|r| r.recon_points == 3 * r.visible_points)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,chamfer_l2sq,chamfer_l1\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.id, r.chamfer_l2sq, r.chamfer_l1);
        }
        s
    }
}

/// Mask seed for evaluation, a pure function of the sample id and model seed.
pub fn eval_mask_seed(id: &str, seed: u64) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b) ^ seed
}

/// Reconstructs every sample and scores it against its grouped ground truth.
/// `fuse` selects whether the image branch takes part.
pub fn evaluate(model: &Model, data: &[Sample], fuse: bool) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(data.len());
    for sample in data {
        let prepared = PreparedSample::new(sample, &model.cfg, eval_mask_seed(&sample.id, model.cfg.seed))?;
        let batch = std::slice::from_ref(&prepared);
        let (recon, _) = model.reconstruct(batch, fuse, false)?;
        let target = prepared.full_target();
        rows.push(EvalRow {
            id: sample.id.clone(),
            chamfer_l2sq: chamfer(&recon[0], &target, ChamferVariant::L2Sq)?.loss,
            chamfer_l1: chamfer(&recon[0], &target, ChamferVariant::L1)?.loss,
            recon_points: recon[0].len(),
            visible_points: prepared.partition.visible.len() * model.cfg.group_size,
        });
    }
    Ok(EvalReport { rows })
}
