//! Point branch: a mini-PointNet embeds each center-relative group, an MLP
//! embeds each group center, and a transformer encodes the visible tokens.
//! Masked groups become queries built from a shared learned mask token plus
//! their center embedding.

use crate::autograd::{Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{build_stack, run_stack, Ctx, Init, Linear, ParamGroup, ParamId, TransformerBlock};

pub const POINT_HIDDEN: usize = 64;
pub const POINT_FEATURES: usize = 128;

#[derive(Debug, Clone)]
pub struct PcEncoder {
    pub point1: Linear,
    pub point2: Linear,
    pub token1: Linear,
    pub token2: Linear,
    pub pos1: Linear,
    pub pos2: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub mask_token: ParamId,
    pub token_size: usize,
}

/// Encoder output for one batch.
pub struct PointTokens<'t> {
    /// `[B, G_vis, C]`
    pub visible: Var<'t>,
    /// `[B, G_mask, C]`, absent when nothing is masked.
    pub mask_queries: Option<Var<'t>>,
}

impl PcEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Self {
        let g = ParamGroup::PcEncoder;
        let c = cfg.token_size;
        PcEncoder {
            point1: Linear::new(init, "pc.point1", g, 3, POINT_HIDDEN),
            point2: Linear::new(init, "pc.point2", g, POINT_HIDDEN, POINT_FEATURES),
            token1: Linear::new(init, "pc.token1", g, POINT_FEATURES, c),
            token2: Linear::new(init, "pc.token2", g, c, c),
            pos1: Linear::new(init, "pc.pos1", g, 3, c),
            pos2: Linear::new(init, "pc.pos2", g, c, c),
            blocks: build_stack(init, "pc.block", g, cfg.pc_depth, c, cfg.heads),
            mask_token: init.embedding("pc.mask_token".into(), g, vec![c]),
            token_size: c,
        }
    }

    /// `[B, K, M, 3]` relative groups → `[B, K, C]`. Invariant to the order
    /// of points inside a group.
    pub fn embed_groups<'t>(&self, ctx: &Ctx<'t>, groups: Var<'t>) -> Result<Var<'t>> {
        let s = groups.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::dim("embed_groups", &s, &[0, 0, 0, 3]));
        }
        let h = self.point1.forward(ctx, groups)?.relu();
        let f = self.point2.forward(ctx, h)?.max_axis(2)?;
        let t = self.token1.forward(ctx, f)?.relu();
        self.token2.forward(ctx, t)
    }

    /// `[B, K, 3]` centers → `[B, K, C]`.
    pub fn pos_embed<'t>(&self, ctx: &Ctx<'t>, centers: Var<'t>) -> Result<Var<'t>> {
        let h = self.pos1.forward(ctx, centers)?.gelu();
        self.pos2.forward(ctx, h)
    }

    pub fn encode<'t>(&self, ctx: &Ctx<'t>, tokens: Var<'t>, record: Option<&mut Vec<Tensor>>) -> Result<Var<'t>> {
        run_stack(&self.blocks, ctx, tokens, record)
    }

    /// `mask_token + pos_embed(center)` for each masked center `[B, K, 3]`.
    pub fn mask_queries<'t>(&self, ctx: &Ctx<'t>, masked_centers: Var<'t>) -> Result<Var<'t>> {
        let s = masked_centers.shape();
        let token = ctx.p(self.mask_token).broadcast_to(&[s[0], s[1], self.token_size])?;
        token.add(self.pos_embed(ctx, masked_centers)?)
    }

    /// Encodes the visible groups; masked centers only produce queries and
    /// never enter the encoder.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        visible_groups: Var<'t>,
        visible_centers: Var<'t>,
        masked_centers: Option<Var<'t>>,
    ) -> Result<PointTokens<'t>> {
        let tokens = self
            .embed_groups(ctx, visible_groups)?
            .add(self.pos_embed(ctx, visible_centers)?)?;
        let visible = self.encode(ctx, tokens, None)?;
        let mask_queries = masked_centers.map(|c| self.mask_queries(ctx, c)).transpose()?;
        Ok(PointTokens { visible, mask_queries })
    }
}

impl<'t> PointTokens<'t> {
    /// Concatenates visible encodings and mask queries and restores group
    /// order: `order[b][g]` is the row of group `g` in `visible ++ masked`.
    pub fn in_group_order(&self, order: &[Vec<usize>]) -> Result<Var<'t>> {
        let all = match self.mask_queries {
            Some(m) => Var::concat(&[self.visible, m], 1)?,
            None => self.visible,
        };
        all.gather_rows(order)
    }
}
