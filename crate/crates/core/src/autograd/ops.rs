use super::{Fault, Node, Op, Tensor, Var};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn is_scalar(shape: &[usize]) -> bool {
    numel(shape) == 1 && shape.iter().all(|&d| d == 1)
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Batch broadcasting plan for `a[.., m, k] x b[.., k, n]`.
struct MatmulPlan {
    out_shape: Vec<usize>,
    a_index: Vec<usize>,
    b_index: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::dim("matmul", a, b));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let rank = ab.len().max(bb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(ab), pad(bb));
    let mut batch = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            batch.push(x);
        } else if x == 1 {
            batch.push(y);
        } else {
            return Err(Error::dim("matmul", a, b));
        }
    }
    let total = numel(&batch);
    let (sa, sb) = (strides(&pa), strides(&pb));
    let mut a_index = Vec::with_capacity(total);
    let mut b_index = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank {
            if pa[d] != 1 {
                ia += idx[d] * sa[d];
            }
            if pb[d] != 1 {
                ib += idx[d] * sb[d];
            }
        }
        a_index.push(ia);
        b_index.push(ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        out_shape,
        a_index,
        b_index,
        m,
        k,
        n,
    })
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'t> Var<'t> {
    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.any_requires_grad(&[self.id]);
        self.tape.push_op(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.any_requires_grad(&[self.id, other.id]);
        self.tape.push_op(value, op, rg)
    }

    fn elementwise(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let a = self.value();
        let b = other.value();
        if a.shape == b.shape {
            let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            Ok((Tensor::new(a.shape.clone(), data)?, true))
        } else if is_scalar(&b.shape) {
            let y = b.data[0];
            let data = a.data.iter().map(|&x| f(x, y)).collect();
            Ok((Tensor::new(a.shape.clone(), data)?, true))
        } else if is_scalar(&a.shape) {
            let x = a.data[0];
            let data = b.data.iter().map(|&y| f(x, y)).collect();
            Ok((Tensor::new(b.shape.clone(), data)?, true))
        } else {
            Err(Error::dim(name, &a.shape, &b.shape))
        }
    }

    /// Elementwise sum; shapes must match or one side must be a scalar.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, _) = self.elementwise(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, _) = self.elementwise(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, _) = self.elementwise(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let v = {
            let a = self.value();
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().map(|x| x * factor).collect(),
                requires_grad: false,
                grad: None,
            }
        };
        self.unary(v, Op::Scale(self.id, factor))
    }

    /// Repeats `self` over new leading dimensions; its shape must be a
    /// suffix of `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            if a.shape.len() > shape.len() || shape[shape.len() - a.shape.len()..] != a.shape[..] {
                return Err(Error::dim("broadcast_to", &a.shape, shape));
            }
            let reps = numel(shape) / a.data.len().max(1);
            let mut data = Vec::with_capacity(numel(shape));
            for _ in 0..reps {
                data.extend_from_slice(&a.data);
            }
            Tensor::new(shape.to_vec(), data)?
        };
        Ok(self.unary(v, Op::BroadcastTo(self.id)))
    }

    /// Adds `bias` (whose shape is a suffix of `self`'s) to every leading slice.
    pub fn add_broadcast(self, bias: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        if bias.shape() == shape {
            return self.add(bias);
        }
        self.add(bias.broadcast_to(&shape)?)
    }

    /// Batched matrix product with leading-batch broadcasting.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            let b = other.value();
            let plan = matmul_plan(&a.shape, &b.shape)?;
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut out = vec![0.0; numel(&plan.out_shape)];
            for (i, (&ia, &ib)) in plan.a_index.iter().zip(&plan.b_index).enumerate() {
                gemm_acc(
                    &a.data[ia * m * k..(ia + 1) * m * k],
                    &b.data[ib * k * n..(ib + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor::new(plan.out_shape, out)?
        };
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            let nd = a.shape.len();
            let mut seen = vec![false; nd];
            if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::dim("permute", &a.shape, perm));
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape[p]).collect();
            Tensor::new(out_shape, permute_data(&a.data, &a.shape, perm))?
        };
        Ok(self.unary(v, Op::Permute(self.id, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(Error::dim("transpose", &self.shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().value_only().reshaped(shape.to_vec())?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            if axis >= a.shape.len() {
                return Err(Error::dim("softmax", &a.shape, &[axis]));
            }
            let (outer, len, inner) = axis_extents(&a.shape, axis);
            let mut out = vec![0.0; a.data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let max = (0..len).map(|j| a.data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for j in 0..len {
                        let e = (a.data[at(j)] - max).exp();
                        out[at(j)] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        out[at(j)] /= sum;
                    }
                }
            }
            Tensor::new(a.shape.clone(), out)?
        };
        Ok(self.unary(v, Op::Softmax(self.id, axis)))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layernorm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (v, xhat, rstd) = {
            let x = self.value();
            let g = gamma.value();
            let b = beta.value();
            let c = *x
                .shape
                .last()
                .ok_or_else(|| Error::dim("layernorm", &x.shape, &g.shape))?;
            if g.shape != [c] || b.shape != [c] {
                return Err(Error::dim("layernorm", &x.shape, &g.shape));
            }
            let rows = x.data.len() / c;
            let mut out = vec![0.0; x.data.len()];
            let mut xhat = vec![0.0; x.data.len()];
            let mut rstd = vec![0.0; rows];
            for r in 0..rows {
                let row = &x.data[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..c {
                    let h = (row[j] - mean) * rs;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * g.data[j] + b.data[j];
                }
            }
            (Tensor::new(x.shape.clone(), out)?, xhat, rstd)
        };
        let ids = [self.id, gamma.id, beta.id];
        let rg = self.tape.any_requires_grad(&ids);
        Ok(self.tape.push_op(
            v,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn relu(self) -> Var<'t> {
        // NaN passes through so the non-finite check still sees it.
        let v = self.map_values(|x| if x > 0.0 || x.is_nan() { x } else { 0.0 });
        self.unary(v, Op::Relu(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let v = self.map_values(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    fn map_values(self, f: impl Fn(f64) -> f64) -> Tensor {
        let a = self.value();
        Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Maximum along `axis` (removed from the shape). Ties resolve to the
    /// lowest index, which is also where the gradient goes.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        let (v, argmax) = {
            let a = self.value();
            if axis >= a.shape.len() || a.shape[axis] == 0 {
                return Err(Error::dim("max", &a.shape, &[axis]));
            }
            let (outer, len, inner) = axis_extents(&a.shape, axis);
            let mut out = Vec::with_capacity(outer * inner);
            let mut arg = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = 0;
                    let mut bv = a.data[o * len * inner + i];
                    for j in 1..len {
                        let v = a.data[o * len * inner + j * inner + i];
                        if v > bv || (v.is_nan() && !bv.is_nan()) {
                            bv = v;
                            best = j;
                        }
                    }
                    out.push(bv);
                    arg.push(best);
                }
            }
            let mut shape = a.shape.clone();
            shape.remove(axis);
            (Tensor::new(shape, out)?, arg)
        };
        Ok(self.unary(
            v,
            Op::MaxAxis {
                x: self.id,
                axis,
                argmax,
            },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data.iter().sum::<f64>();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let s = {
            let a = self.value();
            a.data.iter().sum::<f64>() / a.data.len() as f64
        };
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Selects rows along axis 1 of a `[B, N, C]` tensor with a separate
    /// index list per batch item, giving `[B, K, C]`.
    pub fn gather_rows(self, index: &[Vec<usize>]) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            if a.shape.len() != 3 || a.shape[0] != index.len() {
                return Err(Error::dim("gather_rows", &a.shape, &[index.len()]));
            }
            let (n, c) = (a.shape[1], a.shape[2]);
            let k = index.first().map_or(0, Vec::len);
            let mut out = Vec::with_capacity(index.len() * k * c);
            for (b, rows) in index.iter().enumerate() {
                if rows.len() != k || rows.iter().any(|&r| r >= n) {
                    return Err(Error::Contract(format!(
                        "gather_rows: bad index list for batch item {b} (rows {n})"
                    )));
                }
                for &r in rows {
                    let off = (b * n + r) * c;
                    out.extend_from_slice(&a.data[off..off + c]);
                }
            }
            Tensor::new(vec![index.len(), k, c], out)?
        };
        Ok(self.unary(
            v,
            Op::Gather {
                x: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let v = {
            let base = first.shape();
            if axis >= base.len() {
                return Err(Error::dim("concat", &base, &[axis]));
            }
            let mut total = 0;
            for p in parts {
                let s = p.shape();
                let compatible =
                    s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
                if !compatible {
                    return Err(Error::dim("concat", &base, &s));
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_extents(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let pv = p.value();
                    let chunk = pv.shape[axis] * inner;
                    data.extend_from_slice(&pv.data[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.any_requires_grad(&ids);
        Ok(tape.push_op(v, Op::Concat { parts: ids, axis }, rg))
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        let mut off = 0;
        for d in 0..nd {
            off += idx[d] * in_strides[perm[d]];
        }
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Reduces `g` (shaped like the op output) back onto an operand that was
/// broadcast as a scalar.
fn reduce_if_scalar(g: &[f64], target_len: usize) -> Vec<f64> {
    if target_len == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}

/// Computes `(parent, gradient)` contributions of node `id`.
pub(super) fn backward_rule(nodes: &[Node], id: usize, g: &[f64], fault: Option<Fault>) -> Vec<(usize, Vec<f64>)> {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![
            (*a, reduce_if_scalar(g, val(*a).len())),
            (*b, reduce_if_scalar(g, val(*b).len())),
        ],
        Op::Sub(a, b) => {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            vec![
                (*a, reduce_if_scalar(g, val(*a).len())),
                (*b, reduce_if_scalar(&neg, val(*b).len())),
            ]
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let pick = |t: &Tensor, i: usize| if t.data.len() == 1 { t.data[0] } else { t.data[i] };
            let ga: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * pick(bv, i)).collect();
            let gb: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * pick(av, i)).collect();
            vec![
                (*a, reduce_if_scalar(&ga, av.len())),
                (*b, reduce_if_scalar(&gb, bv.len())),
            ]
        }
        Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
        Op::BroadcastTo(a) => {
            let n = val(*a).len();
            let mut acc = vec![0.0; n];
            for chunk in g.chunks(n) {
                acc.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
            }
            vec![(*a, acc)]
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let plan = matmul_plan(&av.shape, &bv.shape).expect("validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for (i, (&ia, &ib)) in plan.a_index.iter().zip(&plan.b_index).enumerate() {
                let gc = &g[i * m * n..(i + 1) * m * n];
                let am = &av.data[ia * m * k..(ia + 1) * m * k];
                let bm = &bv.data[ib * k * n..(ib + 1) * k * n];
                let gam = &mut ga[ia * m * k..(ia + 1) * m * k];
                // dA = dC · Bᵀ
                for r in 0..m {
                    for p in 0..k {
                        let brow = &bm[p * n..(p + 1) * n];
                        let grow = &gc[r * n..(r + 1) * n];
                        gam[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                // dB = Aᵀ · dC
                let gbm = &mut gb[ib * k * n..(ib + 1) * k * n];
                for r in 0..m {
                    let grow = &gc[r * n..(r + 1) * n];
                    for p in 0..k {
                        let av = am[r * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let dst = &mut gbm[p * n..(p + 1) * n];
                        dst.iter_mut().zip(grow).for_each(|(d, x)| *d += av * x);
                    }
                }
            }
            if fault == Some(Fault::FlipMatmulGrad) {
                ga.iter_mut().for_each(|v| *v = -*v);
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![(*a, permute_data(g, &node.value.shape, &inv))]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Softmax(a, axis) => {
            let y = &node.value;
            let (outer, len, inner) = axis_extents(&y.shape, *axis);
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * y.data[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = y.data[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![(*a, gx)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma);
            let c = gv.len();
            let rows = xhat.len() / c;
            let mut gx = vec![0.0; xhat.len()];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let hr = &xhat[r * c..(r + 1) * c];
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for j in 0..c {
                    gg[j] += gr[j] * hr[j];
                    gb[j] += gr[j];
                    let dh = gr[j] * gv.data[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[j];
                }
                mean_dh /= c as f64;
                mean_dh_h /= c as f64;
                for j in 0..c {
                    let dh = gr[j] * gv.data[j];
                    gx[r * c + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                }
            }
            vec![(*x, gx), (*gamma, gg), (*beta, gb)]
        }
        Op::Relu(a) => {
            let x = val(*a);
            let gx = g
                .iter()
                .zip(&x.data)
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                .collect();
            vec![(*a, gx)]
        }
        Op::Gelu(a) => {
            let x = val(*a);
            let gx = g.iter().zip(&x.data).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
            vec![(*a, gx)]
        }
        Op::MaxAxis { x, axis, argmax } => {
            let xv = val(*x);
            let (_, len, inner) = axis_extents(&xv.shape, *axis);
            let mut gx = vec![0.0; xv.len()];
            for (flat, (&j, gv)) in argmax.iter().zip(g).enumerate() {
                let (o, i) = (flat / inner, flat % inner);
                gx[o * len * inner + j * inner + i] += gv;
            }
            vec![(*x, gx)]
        }
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
        Op::Mean(a) => {
            let n = val(*a).len();
            vec![(*a, vec![g[0] / n as f64; n])]
        }
        Op::Gather { x, index } => {
            let xv = val(*x);
            let (n, c) = (xv.shape[1], xv.shape[2]);
            let k = index.first().map_or(0, Vec::len);
            let mut gx = vec![0.0; xv.len()];
            for (b, rows) in index.iter().enumerate() {
                for (slot, &r) in rows.iter().enumerate() {
                    let src = &g[(b * k + slot) * c..(b * k + slot + 1) * c];
                    let dst = &mut gx[(b * n + r) * c..(b * n + r + 1) * c];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            vec![(*x, gx)]
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_extents(&node.value.shape, *axis);
            let mut out = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape[*axis];
                let mut gp = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let start = o * total * inner + offset * inner;
                    gp.extend_from_slice(&g[start..start + len * inner]);
                }
                offset += len;
                out.push((p, gp));
            }
            out
        }
        Op::Custom { inputs, rule } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            inputs
                .iter()
                .copied()
                .zip(rule.backward(&ins, &node.value, g))
                .collect()
        }
    }
}
