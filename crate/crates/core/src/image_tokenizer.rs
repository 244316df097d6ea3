//! Image branch: non-overlapping patches, a linear patch embedding with
//! learned per-position embeddings, and a pre-norm transformer encoder.
//! There is no class token; one token per patch.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tensor, Var};
use crate::config::{patch_grid_side, ModelConfig};
use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::nn::{build_stack, run_stack, Ctx, Init, Linear, ParamGroup, ParamId, TransformerBlock};

/// An image cut into `side × side` patches of `patch_size²` pixels each.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub side: usize,
    /// Row-major patches, each flattened row-major: `[G, p·p]`.
    pub patches: Vec<f64>,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.side * self.side
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let len = self.patch_size * self.patch_size;
        &self.patches[i * len..(i + 1) * len]
    }
}

pub fn patchify(image: &Image, g: usize) -> Result<PatchGrid> {
    let h = image.height;
    if image.width != h {
        return Err(Error::Config(format!(
            "image must be square, got {}x{}",
            h, image.width
        )));
    }
    let side = patch_grid_side(g, h)?;
    let p = h / side;
    let mut patches = Vec::with_capacity(h * h);
    for pr in 0..side {
        for pc in 0..side {
            for r in 0..p {
                let row = (pr * p + r) * h + pc * p;
                patches.extend_from_slice(&image.data[row..row + p]);
            }
        }
    }
    Ok(PatchGrid {
        patch_size: p,
        side,
        patches,
    })
}

#[derive(Debug, Clone)]
pub struct ImageTokenizer {
    pub embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub groups: usize,
    pub patch_size: usize,
    pub patch_dropout: f64,
}

impl ImageTokenizer {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Self {
        let g = ParamGroup::ImageTokenizer;
        let p = cfg.patch_size();
        ImageTokenizer {
            embed: Linear::new(init, "img.embed", g, p * p, cfg.token_size),
            pos: init.embedding("img.pos".into(), g, vec![cfg.groups, cfg.token_size]),
            blocks: build_stack(init, "img.block", g, cfg.img_depth, cfg.token_size, cfg.heads),
            groups: cfg.groups,
            patch_size: p,
            patch_dropout: cfg.patch_dropout,
        }
    }

    /// Stacks the patch grids of a batch into `[B, G, p·p]`.
    pub fn patch_tensor(&self, grids: &[PatchGrid]) -> Result<Tensor> {
        let len = self.patch_size * self.patch_size;
        let mut data = Vec::with_capacity(grids.len() * self.groups * len);
        for grid in grids {
            if grid.num_patches() != self.groups || grid.patch_size != self.patch_size {
                return Err(Error::Config(format!(
                    "patch grid {}x{} of size {} does not match tokenizer ({} patches of size {})",
                    grid.side, grid.side, grid.patch_size, self.groups, self.patch_size
                )));
            }
            data.extend_from_slice(&grid.patches);
        }
        Tensor::new(vec![grids.len(), self.groups, len], data)
    }

    /// Blanks a random subset of patches in each batch item.
    pub fn drop_patches(&self, patches: &mut Tensor, rng: &mut ChaCha8Rng) {
        let drop = (self.patch_dropout * self.groups as f64).round() as usize;
        if drop == 0 {
            return;
        }
        let len = self.patch_size * self.patch_size;
        let batch = patches.shape()[0];
        let data = patches.data_mut();
        for b in 0..batch {
            for i in sample(rng, self.groups, drop) {
                let off = (b * self.groups + i) * len;
                data[off..off + len].fill(0.0);
            }
        }
    }

    /// `patches · W + b + pos`: `[B, G, p·p]` → `[B, G, C]`.
    pub fn embed<'t>(&self, ctx: &Ctx<'t>, patches: Var<'t>) -> Result<Var<'t>> {
        self.embed.forward(ctx, patches)?.add_broadcast(ctx.p(self.pos))
    }

    pub fn encode<'t>(&self, ctx: &Ctx<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        run_stack(&self.blocks, ctx, tokens, None)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, patches: Var<'t>) -> Result<Var<'t>> {
        let t = self.embed(ctx, patches)?;
        self.encode(ctx, t)
    }
}
