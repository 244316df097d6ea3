use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{GroupedPointCloud, Point3};

/// Which groups to hide from the encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub mask_ratio: f64,
    pub seed: u64,
}

/// Visible and masked group indices, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPartition {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPartition {
    pub fn num_groups(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// Maps position in `visible ++ masked` back to group order: entry `g`
    /// is the position of group `g` in the concatenation.
    pub fn group_order(&self) -> Vec<usize> {
        let mut order = vec![0; self.num_groups()];
        for (pos, &g) in self.visible.iter().chain(&self.masked).enumerate() {
            order[g] = pos;
        }
        order
    }
}

impl MaskSpec {
    /// Rounded number of masked groups out of `g`.
    pub fn masked_count(&self, g: usize) -> usize {
        (self.mask_ratio * g as f64).round() as usize
    }

    pub fn validate(&self, g: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask ratio must be in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if self.masked_count(g) >= g {
            return Err(Error::Config(format!(
                "mask ratio {} hides all {g} groups",
                self.mask_ratio
            )));
        }
        Ok(())
    }

    /// Deterministic partition of `0..g`: shuffle with the seed and mask the
    /// first `masked_count(g)` entries.
    pub fn partition(&self, g: usize) -> Result<MaskPartition> {
        self.validate(g)?;
        let mut order: Vec<usize> = (0..g).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let k = self.masked_count(g);
        let mut masked = order[..k].to_vec();
        let mut visible = order[k..].to_vec();
        masked.sort_unstable();
        visible.sort_unstable();
        Ok(MaskPartition { visible, masked })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedGroups {
    pub partition: MaskPartition,
    /// Center-relative points of the visible groups, group-major.
    pub visible_groups: Vec<Point3>,
    pub visible_centers: Vec<Point3>,
    pub masked_centers: Vec<Point3>,
}

pub fn apply_mask(grouped: &GroupedPointCloud, spec: &MaskSpec) -> Result<MaskedGroups> {
    let partition = spec.partition(grouped.num_groups())?;
    let visible_groups = partition
        .visible
        .iter()
        .flat_map(|&g| grouped.group(g).iter().copied())
        .collect();
    let visible_centers = partition.visible.iter().map(|&g| grouped.centers[g]).collect();
    let masked_centers = partition.masked.iter().map(|&g| grouped.centers[g]).collect();
    Ok(MaskedGroups {
        partition,
        visible_groups,
        visible_centers,
        masked_centers,
    })
}
