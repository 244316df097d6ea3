//! Model and training hyperparameters, presets, and the `key = value` text
//! format used by config files and checkpoints.

use std::fmt::Write as _;

use crate::autograd::Precision;
use crate::chamfer::ChamferVariant;
use crate::error::{Error, Result};

/// Where cross-attention sits relative to the self-attention decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CaPlacement {
    /// One cross-attention block, then the decoder stack.
    #[default]
    Before,
    /// A cross-attention block in front of every decoder block.
    Interleaved,
}

impl CaPlacement {
    pub fn name(self) -> &'static str {
        match self {
            CaPlacement::Before => "before",
            CaPlacement::Interleaved => "interleaved",
        }
    }
}

/// Which points the Chamfer loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossTarget {
    /// Every predicted group against every ground-truth group.
    #[default]
    Full,
    /// Only the masked groups' predictions against their ground truth.
    Masked,
}

impl LossTarget {
    pub fn name(self) -> &'static str {
        match self {
            LossTarget::Full => "full",
            LossTarget::Masked => "masked",
        }
    }
}

pub const PRESETS: [&str; 5] = ["tiny", "base", "large", "vitmae", "base36"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub preset: String,
    /// Token width C.
    pub token_size: usize,
    /// Number of groups / image patches G.
    pub groups: usize,
    /// Points per group M.
    pub group_size: usize,
    pub mask_ratio: f64,
    pub pc_depth: usize,
    pub img_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    /// Square image side H.
    pub image_size: usize,
    /// Fraction of image patches blanked during training (0 disables).
    pub patch_dropout: f64,
    pub ca_placement: CaPlacement,
    pub chamfer: ChamferVariant,
    pub loss_target: LossTarget,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Debug mode: the reconstruction is the visible input itself.
    pub identity_bypass: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::preset("base").expect("base preset")
    }
}

fn parse_ratio(v: &str) -> Option<f64> {
    match v.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
            Some(a / b)
        }
        None => v.parse().ok(),
    }
}

fn is_square(g: usize) -> Option<usize> {
    let r = (g as f64).sqrt().round() as usize;
    (r * r == g).then_some(r)
}

/// Patches per image side when `g` tokens tile an `h`-pixel square image.
pub fn patch_grid_side(g: usize, h: usize) -> Result<usize> {
    let root = is_square(g).ok_or_else(|| {
        Error::Config(format!(
            "groups = {g} is not a perfect square; valid choices for image size {h} are {:?}",
            ModelConfig::valid_groups_for(h)
        ))
    })?;
    if !h.is_multiple_of(root) {
        return Err(Error::Config(format!(
            "image size {h} is not divisible by sqrt(groups) = {root}; valid groups for this size are {:?}",
            ModelConfig::valid_groups_for(h)
        )));
    }
    Ok(root)
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let tiny = ModelConfig {
            preset: "tiny".into(),
            token_size: 64,
            groups: 16,
            group_size: 8,
            mask_ratio: 2.0 / 3.0,
            pc_depth: 2,
            img_depth: 2,
            dec_depth: 2,
            heads: 4,
            image_size: 32,
            patch_dropout: 0.0,
            ca_placement: CaPlacement::Before,
            chamfer: ChamferVariant::L2Sq,
            loss_target: LossTarget::Full,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1,
            epochs: 200,
            checkpoint_every: 0,
            seed: 0,
            precision: Precision::Standard,
            identity_bypass: false,
        };
        let base = ModelConfig {
            preset: "base".into(),
            token_size: 128,
            groups: 64,
            group_size: 32,
            pc_depth: 6,
            img_depth: 4,
            dec_depth: 4,
            heads: 8,
            image_size: 64,
            batch_size: 4,
            ..tiny.clone()
        };
        Ok(match name {
            "tiny" => tiny,
            "base" => base,
            "large" => ModelConfig {
                preset: "large".into(),
                groups: 256,
                group_size: 8,
                dec_depth: 12,
                ..base
            },
            "vitmae" => ModelConfig {
                preset: "vitmae".into(),
                patch_dropout: 0.25,
                ..base
            },
            "base36" => ModelConfig {
                preset: "base36".into(),
                groups: 36,
                group_size: 16,
                image_size: 48,
                ..tiny
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset `{name}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        fn num<T: std::str::FromStr>(v: &str) -> Option<T> {
            v.parse().ok()
        }
        match key.trim() {
            "preset" => {
                let mut fresh = ModelConfig::preset(value)?;
                std::mem::swap(self, &mut fresh);
            }
            "token_size" => self.token_size = num(value).ok_or_else(bad)?,
            "groups" => self.groups = num(value).ok_or_else(bad)?,
            "group_size" => self.group_size = num(value).ok_or_else(bad)?,
            "mask_ratio" => self.mask_ratio = parse_ratio(value).ok_or_else(bad)?,
            "pc_depth" => self.pc_depth = num(value).ok_or_else(bad)?,
            "img_depth" => self.img_depth = num(value).ok_or_else(bad)?,
            "dec_depth" => self.dec_depth = num(value).ok_or_else(bad)?,
            "heads" => self.heads = num(value).ok_or_else(bad)?,
            "image_size" => self.image_size = num(value).ok_or_else(bad)?,
            "patch_dropout" => self.patch_dropout = num(value).ok_or_else(bad)?,
            "ca_placement" => {
                self.ca_placement = match value {
                    "before" => CaPlacement::Before,
                    "interleaved" => CaPlacement::Interleaved,
                    _ => return Err(bad()),
                }
            }
            "chamfer" => self.chamfer = ChamferVariant::parse(value).ok_or_else(bad)?,
            "loss_target" => {
                self.loss_target = match value {
                    "full" => LossTarget::Full,
                    "masked" => LossTarget::Masked,
                    _ => return Err(bad()),
                }
            }
            "lr" => self.lr = num(value).ok_or_else(bad)?,
            "beta1" => self.beta1 = num(value).ok_or_else(bad)?,
            "beta2" => self.beta2 = num(value).ok_or_else(bad)?,
            "eps" => self.eps = num(value).ok_or_else(bad)?,
            "batch_size" => self.batch_size = num(value).ok_or_else(bad)?,
            "epochs" => self.epochs = num(value).ok_or_else(bad)?,
            "checkpoint_every" => self.checkpoint_every = num(value).ok_or_else(bad)?,
            "seed" => self.seed = num(value).ok_or_else(bad)?,
            "precision" => self.precision = Precision::parse(value).ok_or_else(bad)?,
            "identity_bypass" => self.identity_bypass = num(value).ok_or_else(bad)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. A `preset` line resets every field, so
    /// it only makes sense first. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    msg,
                },
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        c.apply_text(text, source)?;
        Ok(c)
    }

    /// Canonical text form; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", &self.preset);
        kv("token_size", &self.token_size);
        kv("groups", &self.groups);
        kv("group_size", &self.group_size);
        kv("mask_ratio", &self.mask_ratio);
        kv("pc_depth", &self.pc_depth);
        kv("img_depth", &self.img_depth);
        kv("dec_depth", &self.dec_depth);
        kv("heads", &self.heads);
        kv("image_size", &self.image_size);
        kv("patch_dropout", &self.patch_dropout);
        kv("ca_placement", &self.ca_placement.name());
        kv("chamfer", &self.chamfer.name());
        kv("loss_target", &self.loss_target.name());
        kv("lr", &self.lr);
        kv("beta1", &self.beta1);
        kv("beta2", &self.beta2);
        kv("eps", &self.eps);
        kv("batch_size", &self.batch_size);
        kv("epochs", &self.epochs);
        kv("checkpoint_every", &self.checkpoint_every);
        kv("seed", &self.seed);
        kv("precision", &self.precision.name());
        kv("identity_bypass", &self.identity_bypass);
        s
    }

    /// Side of one image patch.
    pub fn patch_size(&self) -> usize {
        is_square(self.groups).map_or(0, |r| self.image_size / r)
    }

    /// Group counts that tile an `h`-pixel image.
    pub fn valid_groups_for(h: usize) -> Vec<usize> {
        (1..=h).filter(|r| h.is_multiple_of(*r)).map(|r| r * r).collect()
    }

    pub fn check_image_size(&self, h: usize) -> Result<()> {
        patch_grid_side(self.groups, h).map(|_| ())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.token_size == 0 || self.heads == 0 || !self.token_size.is_multiple_of(self.heads) {
            return fail(format!(
                "token_size {} must be a positive multiple of heads {}",
                self.token_size, self.heads
            ));
        }
        if self.groups == 0 || self.group_size == 0 {
            return fail("groups and group_size must be positive".into());
        }
        self.check_image_size(self.image_size)?;
        if self.image_size < 8 {
            return fail(format!("image_size must be at least 8, got {}", self.image_size));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail(format!("mask_ratio must be in [0, 1), got {}", self.mask_ratio));
        }
        if (self.mask_ratio * self.groups as f64).round() as usize >= self.groups {
            return fail(format!("mask_ratio {} leaves no visible group", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.patch_dropout) {
            return fail(format!("patch_dropout must be in [0, 1), got {}", self.patch_dropout));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return fail("betas must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let c = ModelConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(ModelConfig::from_text(&c.to_text(), "mem").unwrap(), c, "{name}");
        }
    }

    #[test]
    fn table_shapes() {
        let base = ModelConfig::preset("base").unwrap();
        assert_eq!((base.groups, base.dec_depth), (64, 4));
        let large = ModelConfig::preset("large").unwrap();
        assert_eq!((large.groups, large.dec_depth), (256, 12));
        assert_eq!(base.patch_size(), 8);
        assert_eq!(large.patch_size(), 4);
    }

    #[test]
    fn ratio_syntax_and_unknown_keys() {
        let mut c = ModelConfig::preset("tiny").unwrap();
        c.apply_text("# comment\nmask_ratio = 2/3\nlr = 0.01  # inline\n", "mem")
            .unwrap();
        assert_eq!(c.mask_ratio, 2.0 / 3.0);
        assert_eq!(c.lr, 0.01);
        match c.apply_text("\nbogus = 1\n", "f.cfg") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_errors() {
        let mut c = ModelConfig::preset("base").unwrap();
        c.groups = 60;
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("perfect square")));
        let mut c = ModelConfig::preset("base").unwrap();
        c.image_size = 60;
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("divisible")));
        let mut c = ModelConfig::preset("tiny").unwrap();
        c.heads = 5;
        assert!(c.validate().is_err());
        c.heads = 4;
        c.mask_ratio = 1.0;
        assert!(c.validate().is_err());
    }
}
