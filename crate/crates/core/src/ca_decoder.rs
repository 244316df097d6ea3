//! Fusion and decoding: point tokens query image tokens through
//! cross-attention, self-attention blocks refine the fused tokens, and a
//! per-token head maps each token to `M` offsets around its group center.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autograd::{Tensor, Var};
use crate::config::{CaPlacement, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{
    build_stack, run_stack, Attention, Ctx, FeedForward, Init, LayerNorm, Linear, ParamGroup, TransformerBlock,
};

/// `x + attn(ln_q(x), ln_kv(img))`, then `x + ffn(ln2(x))`.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossAttentionBlock {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize, heads: usize) -> Self {
        let g = ParamGroup::CrossAttention;
        CrossAttentionBlock {
            ln_q: LayerNorm::new(init, &format!("{name}.ln_q"), g, c),
            ln_kv: LayerNorm::new(init, &format!("{name}.ln_kv"), g, c),
            attn: Attention::new(init, &format!("{name}.attn"), g, c, heads),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), g, c),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), g, c),
        }
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        x: Var<'t>,
        image: Var<'t>,
        record: Option<&mut Vec<Tensor>>,
    ) -> Result<Var<'t>> {
        if x.shape() != image.shape() {
            return Err(Error::dim("cross_attention", &x.shape(), &image.shape()));
        }
        let q = self.ln_q.forward(ctx, x)?;
        let kv = self.ln_kv.forward(ctx, image)?;
        let x = x.add(self.attn.forward(ctx, q, kv, record)?)?;
        let h = self.ln2.forward(ctx, x)?;
        x.add(self.ffn.forward(ctx, h)?)
    }
}

/// Two kernel-size-1 convolutions with a ReLU between them, i.e. a
/// token-wise `C → 2C → M·3` MLP.
#[derive(Debug, Clone)]
pub struct ReconstructionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub group_size: usize,
}

impl ReconstructionHead {
    pub fn new(init: &mut Init<'_>, c: usize, m: usize) -> Self {
        let g = ParamGroup::Decoder;
        ReconstructionHead {
            fc1: Linear::new(init, "head.fc1", g, c, 2 * c),
            fc2: Linear::new(init, "head.fc2", g, 2 * c, 3 * m),
            group_size: m,
        }
    }

    /// `[B, G, C]` tokens → `[B, G, M, 3]` center-relative offsets.
    pub fn offsets<'t>(&self, ctx: &Ctx<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let s = tokens.shape();
        let h = self.fc1.forward(ctx, tokens)?.relu();
        self.fc2.forward(ctx, h)?.reshape(&[s[0], s[1], self.group_size, 3])
    }

    /// Absolute points: offsets plus each group's center, repeated `M` times
    /// in `centers_rep: [B, G, M, 3]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, tokens: Var<'t>, centers_rep: Var<'t>) -> Result<Var<'t>> {
        self.offsets(ctx, tokens)?.add(centers_rep)
    }
}

#[derive(Debug, Clone)]
pub struct CaDecoder {
    pub cross: Vec<CrossAttentionBlock>,
    pub blocks: Vec<TransformerBlock>,
    pub head: ReconstructionHead,
    pub placement: CaPlacement,
}

impl CaDecoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Self {
        let c = cfg.token_size;
        let n_cross = match cfg.ca_placement {
            CaPlacement::Before => 1,
            CaPlacement::Interleaved => cfg.dec_depth,
        };
        let cross = (0..n_cross)
            .map(|i| CrossAttentionBlock::new(init, &format!("ca.{i}"), c, cfg.heads))
            .collect();
        CaDecoder {
            cross,
            blocks: build_stack(init, "dec.block", ParamGroup::Decoder, cfg.dec_depth, c, cfg.heads),
            head: ReconstructionHead::new(init, c, cfg.group_size),
            placement: cfg.ca_placement,
        }
    }

    /// Runs fusion (when `image` is given) and the self-attention stack on
    /// `[B, G, C]` tokens in group order. Cross-attention weights are pushed
    /// onto `record`, one tensor per cross-attention layer.
    pub fn decode<'t>(
        &self,
        ctx: &Ctx<'t>,
        mut x: Var<'t>,
        image: Option<Var<'t>>,
        mut record: Option<&mut Vec<Tensor>>,
    ) -> Result<Var<'t>> {
        let Some(image) = image else {
            return run_stack(&self.blocks, ctx, x, None);
        };
        match self.placement {
            CaPlacement::Before => {
                for ca in &self.cross {
                    x = ca.forward(ctx, x, image, record.as_deref_mut())?;
                }
                run_stack(&self.blocks, ctx, x, None)
            }
            CaPlacement::Interleaved => {
                for (ca, block) in self.cross.iter().zip(&self.blocks) {
                    x = ca.forward(ctx, x, image, record.as_deref_mut())?;
                    x = block.forward(ctx, x, None)?;
                }
                Ok(x)
            }
        }
    }
}

/// Cross-attention weights of one sample: `layers × heads` row-stochastic
/// `G × G` matrices, layer-major then head-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub layers: usize,
    pub heads: usize,
    pub g: usize,
    pub data: Vec<f64>,
}

impl AttentionMaps {
    /// Takes batch item `item` from per-layer `[B, heads, G, G]` weights.
    pub fn from_recorded(recorded: &[Tensor], item: usize) -> Result<Self> {
        let first = recorded
            .first()
            .ok_or_else(|| Error::Contract("attention export requested but no cross-attention ran".into()))?;
        let s = first.shape().to_vec();
        if s.len() != 4 || s[2] != s[3] || item >= s[0] {
            return Err(Error::dim("attention export", &s, &[item]));
        }
        let (heads, g) = (s[1], s[2]);
        let per_item = heads * g * g;
        let mut data = Vec::with_capacity(recorded.len() * per_item);
        for t in recorded {
            if t.shape() != s.as_slice() {
                return Err(Error::dim("attention export", &s, t.shape()));
            }
            data.extend_from_slice(&t.data()[item * per_item..(item + 1) * per_item]);
        }
        Ok(AttentionMaps {
            layers: recorded.len(),
            heads,
            g,
            data,
        })
    }

    pub fn matrix(&self, layer: usize, head: usize) -> &[f64] {
        let n = self.g * self.g;
        let off = (layer * self.heads + head) * n;
        &self.data[off..off + n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.g.max(1))
    }

    /// Largest `|row sum - 1|` over all rows.
    pub fn max_row_deviation(&self) -> f64 {
        self.rows()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean over layers and heads, as one `G × G` matrix.
    pub fn averaged(&self) -> Vec<f64> {
        let n = self.g * self.g;
        let k = (self.layers * self.heads) as f64;
        let mut out = vec![0.0; n];
        for m in self.data.chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += v / k;
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("ATTN v1 layers={} heads={} G={}\n", self.layers, self.heads, self.g);
        for row in self.rows() {
            let mut first = true;
            for v in row {
                if !first {
                    s.push(' ');
                }
                first = false;
                let _ = write!(s, "{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty attention file".into()))?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() != 5 || toks[0] != "ATTN" || toks[1] != "v1" {
            return Err(err(
                1,
                format!("expected `ATTN v1 layers=L heads=H G=N`, found `{header}`"),
            ));
        }
        let field = |tok: &str, key: &str| -> Result<usize> {
            tok.strip_prefix(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(1, format!("bad header field `{tok}`")))
        };
        let layers = field(toks[2], "layers=")?;
        let heads = field(toks[3], "heads=")?;
        let g = field(toks[4], "G=")?;
        let rows = layers * heads * g;
        let mut data = Vec::with_capacity(rows * g);
        for (i, line) in lines {
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|_| err(i + 1, format!("invalid number `{tok}`")))?,
                );
            }
            if data.len() - before != g {
                return Err(err(
                    i + 1,
                    format!("expected {g} values, found {}", data.len() - before),
                ));
            }
        }
        if data.len() != rows * g {
            return Err(err(0, format!("expected {rows} rows, found {}", data.len() / g.max(1))));
        }
        Ok(AttentionMaps { layers, heads, g, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AttentionMaps::parse(&text, &path.display().to_string())
    }
}
