//! Named parameter storage and the transformer building blocks shared by the
//! tokenizers and the decoder.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Precision, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Submodule that owns a parameter; the unit of freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    PcEncoder,
    ImageTokenizer,
    CrossAttention,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::PcEncoder,
        ParamGroup::ImageTokenizer,
        ParamGroup::CrossAttention,
        ParamGroup::Decoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::PcEncoder => "pc_encoder",
            ParamGroup::ImageTokenizer => "image_tokenizer",
            ParamGroup::CrossAttention => "cross_attention",
            ParamGroup::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// All learnable tensors of a model in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.tensor)
    }

    /// Detached copies of every tensor, in store order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Marks each parameter trainable iff `pred(group)`.
    pub fn set_trainable(&mut self, pred: impl Fn(ParamGroup) -> bool) {
        for p in &mut self.params {
            p.tensor.requires_grad = pred(p.group);
            p.tensor.zero_grad();
        }
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    /// Replaces the value of `name`, which must already exist with the same shape.
    pub fn load_value(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        let p = &mut self.params[i];
        if p.tensor.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: model expects shape {:?}, checkpoint has {:?}",
                p.tensor.shape(),
                shape
            )));
        }
        p.tensor.data_mut().copy_from_slice(&data);
        Ok(())
    }
}

/// Parameter initialization with a shared RNG.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub precision: Precision,
}

impl Init<'_> {
    fn finish(&mut self, name: String, group: ParamGroup, shape: Vec<usize>, mut data: Vec<f64>) -> ParamId {
        self.precision.round_all(&mut data);
        let t = Tensor::new(shape, data).expect("init shape");
        self.store.add(name, group, t)
    }

    /// uniform(±1/√fan_in).
    pub fn uniform(&mut self, name: String, group: ParamGroup, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.finish(name, group, shape, data)
    }

    /// normal(0, 0.02), used for embeddings.
    pub fn embedding(&mut self, name: String, group: ParamGroup, shape: Vec<usize>) -> ParamId {
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(self.rng)).collect();
        self.finish(name, group, shape, data)
    }

    pub fn constant(&mut self, name: String, group: ParamGroup, shape: Vec<usize>, value: f64) -> ParamId {
        let n = shape.iter().product();
        self.finish(name, group, shape, vec![value; n])
    }
}

/// Parameters bound to one tape for one forward pass.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Ctx<'t> {
    /// Records every parameter as a leaf; gradients are tracked for the
    /// trainable ones only.
    pub fn bind(tape: &'t Tape, store: &ParamStore) -> Self {
        let vars = store
            .params
            .iter()
            .map(|p| tape.leaf_labeled(&p.tensor, Some(p.name.clone())))
            .collect();
        Ctx { tape, vars }
    }

    /// Uses leaves the caller already recorded, one per parameter in store order.
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var<'t>>) -> Self {
        Ctx { tape, vars }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Copies gradients of the bound parameters into the store's tensors.
    pub fn write_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (v, p) in self.vars.iter().zip(store.params.iter_mut()) {
            p.tensor.grad = if p.tensor.requires_grad {
                Some(grads.get(*v).map_or_else(|| vec![0.0; p.tensor.len()], <[f64]>::to_vec))
            } else {
                None
            };
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Self {
        let w = init.uniform(format!("{name}.weight"), group, vec![fan_in, fan_out], fan_in);
        let b = init.uniform(format!("{name}.bias"), group, vec![fan_out], fan_in);
        Linear { w, b, fan_in, fan_out }
    }

    /// `x[.., fan_in] · W + b`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(ctx.p(self.w))?.add_broadcast(ctx.p(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, group: ParamGroup, c: usize) -> Self {
        LayerNorm {
            gamma: init.constant(format!("{name}.gamma"), group, vec![c], 1.0),
            beta: init.constant(format!("{name}.beta"), group, vec![c], 0.0),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layernorm(ctx.p(self.gamma), ctx.p(self.beta), LN_EPS)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(init: &mut Init<'_>, name: &str, group: ParamGroup, c: usize, heads: usize) -> Self {
        Attention {
            q: Linear::new(init, &format!("{name}.q"), group, c, c),
            k: Linear::new(init, &format!("{name}.k"), group, c, c),
            v: Linear::new(init, &format!("{name}.v"), group, c, c),
            out: Linear::new(init, &format!("{name}.out"), group, c, c),
            heads,
        }
    }

    fn split_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (b, n, c) = (s[0], s[1], s[2]);
        x.reshape(&[b, n, self.heads, c / self.heads])?.permute(&[0, 2, 1, 3])
    }

    /// `queries: [B, Nq, C]`, `context: [B, Nk, C]` → `[B, Nq, C]`. The
    /// `[B, heads, Nq, Nk]` weights are pushed onto `record` when given.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        queries: Var<'t>,
        context: Var<'t>,
        record: Option<&mut Vec<Tensor>>,
    ) -> Result<Var<'t>> {
        let (qs, ks) = (queries.shape(), context.shape());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(Error::dim("attention", &qs, &ks));
        }
        let c = qs[2];
        if c % self.heads != 0 {
            return Err(Error::Config(format!(
                "token size {c} not divisible by {} heads",
                self.heads
            )));
        }
        let d = c / self.heads;
        let q = self.split_heads(self.q.forward(ctx, queries)?)?;
        let k = self.split_heads(self.k.forward(ctx, context)?)?;
        let v = self.split_heads(self.v.forward(ctx, context)?)?;
        let logits = q.matmul(k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
        let weights = logits.softmax(3)?;
        if let Some(r) = record {
            r.push(weights.to_tensor());
        }
        let mixed = weights.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[qs[0], qs[1], c])?;
        self.out.forward(ctx, mixed)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, group: ParamGroup, c: usize) -> Self {
        FeedForward {
            fc1: Linear::new(init, &format!("{name}.fc1"), group, c, 4 * c),
            fc2: Linear::new(init, &format!("{name}.fc2"), group, 4 * c, c),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.fc2.forward(ctx, self.fc1.forward(ctx, x)?.gelu())
    }
}

/// Pre-norm self-attention block:
/// `x + attn(ln1(x))`, then `x + ffn(ln2(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(init: &mut Init<'_>, name: &str, group: ParamGroup, c: usize, heads: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), group, c),
            attn: Attention::new(init, &format!("{name}.attn"), group, c, heads),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), group, c),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), group, c),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, record: Option<&mut Vec<Tensor>>) -> Result<Var<'t>> {
        let h = self.ln1.forward(ctx, x)?;
        let x = x.add(self.attn.forward(ctx, h, h, record)?)?;
        let h = self.ln2.forward(ctx, x)?;
        x.add(self.ffn.forward(ctx, h)?)
    }
}

pub fn build_stack(
    init: &mut Init<'_>,
    name: &str,
    group: ParamGroup,
    depth: usize,
    c: usize,
    heads: usize,
) -> Vec<TransformerBlock> {
    (0..depth)
        .map(|i| TransformerBlock::new(init, &format!("{name}.{i}"), group, c, heads))
        .collect()
}

pub fn run_stack<'t>(
    blocks: &[TransformerBlock],
    ctx: &Ctx<'t>,
    mut x: Var<'t>,
    mut record: Option<&mut Vec<Tensor>>,
) -> Result<Var<'t>> {
    for b in blocks {
        x = b.forward(ctx, x, record.as_deref_mut())?;
    }
    Ok(x)
}
