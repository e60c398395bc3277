use std::collections::HashMap;

use crate::error::{Error, Result};

use super::params::{Gradients, ParamId, ParamStore};
use super::real::{gemm, Real, View};
use super::tensor::Tensor;

/// Label value excluded from the loss.
pub const IGNORE_INDEX: i64 = -100;

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean attention mask of shape `[batch, queries, keys]`; `true` may attend.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: [usize; 3],
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(shape: [usize; 3], allow: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != allow.len() {
            return Err(Error::shape(
                "mask",
                format!("shape {shape:?} vs {} entries", allow.len()),
            ));
        }
        Ok(Mask { shape, allow })
    }

    /// Key-padding mask: every query may attend to the valid keys of its row.
    /// `key_valid` has `batch * keys` entries.
    pub fn keys(batch: usize, queries: usize, key_valid: &[bool]) -> Self {
        let keys = key_valid.len() / batch.max(1);
        let mut allow = Vec::with_capacity(batch * queries * keys);
        for b in 0..batch {
            let row = &key_valid[b * keys..(b + 1) * keys];
            for _ in 0..queries {
                allow.extend_from_slice(row);
            }
        }
        Mask {
            shape: [batch, queries, keys],
            allow,
        }
    }

    /// Causal self-attention mask, optionally combined with key padding.
    pub fn causal(batch: usize, len: usize, key_valid: Option<&[bool]>) -> Self {
        let mut allow = Vec::with_capacity(batch * len * len);
        for b in 0..batch {
            for i in 0..len {
                for j in 0..len {
                    let valid = key_valid.is_none_or(|kv| kv[b * len + j]);
                    allow.push(j <= i && valid);
                }
            }
        }
        Mask {
            shape: [batch, len, len],
            allow,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn allows(&self, b: usize, q: usize, k: usize) -> bool {
        let [_, lq, lk] = self.shape;
        self.allow[(b * lq + q) * lk + k]
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    MeanPool {
        x: Var,
        weights: Vec<T>,
    },
    RepeatBatch(Var),
    Transpose(Var),
    Reshape(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<i64>,
        probs: Vec<T>,
        denom: T,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// A graph is built fresh for each forward pass and is single-threaded.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; frozen parameters behave as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            needs_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `a[.., K] · b[K, N]`, or `a · bᵀ` with `b[N, K]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if bsh.len() != 2 || ash.is_empty() {
            return Err(Error::shape("matmul", format!("{ash:?} x {bsh:?}")));
        }
        let (k, n) = if trans_b { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
        if *ash.last().unwrap() != k {
            return Err(Error::shape("matmul", format!("{ash:?} x {bsh:?} (trans_b={trans_b})")));
        }
        let m = self.value(a).rows();
        let mut out_shape = ash[..ash.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = Tensor::zeros(out_shape);
        let bv = if trans_b {
            View::transposed(0, k)
        } else {
            View::row_major(0, n)
        };
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            View::row_major(0, k),
            self.value(b).data(),
            bv,
            T::zero(),
            out.data_mut(),
            View::row_major(0, n),
        );
        self.push("matmul", out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
            return Err(Error::shape("add_broadcast", format!("{ash:?} + {bsh:?}")));
        }
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for chunk in out.data_mut().chunks_mut(bd.len()) {
            for (x, &y) in chunk.iter_mut().zip(bd) {
                *x += y;
            }
        }
        self.push("add_broadcast", out, Op::AddBroadcast(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = self.value(a).clone();
        for (x, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(
                "mul_scalar",
                format!("scalar has shape {:?}", self.shape(s)),
            ));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        self.push("mul_scalar", out, Op::MulScalar(x, s), &[x, s])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        self.push("exp", out, Op::Exp(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Layer normalisation over the last dimension followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let dt = T::from_usize(d).unwrap();
        let eps = T::from_f64_lossy(LN_EPS);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(xv.shape().to_vec());
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let o = &mut out.data_mut()[r * d..(r + 1) * d];
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Row lookup: output shape is `out_shape ++ [D]` for a `[V, D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "embedding",
                format!("table {tsh:?}, {} ids for shape {out_shape:?}", ids.len()),
            ));
        }
        let (v, d) = (tsh[0], tsh[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TargetOutOfRange {
                target: bad as i64,
                vocab: v,
            });
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(shape, data)?;
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let d = xv.last_dim();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", format!("{first:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if axis >= sh.len() || start + len > sh[axis] {
            return Err(Error::shape(
                "narrow",
                format!("{sh:?} axis {axis} [{start}, {})", start + len),
            ));
        }
        let (outer, inner) = outer_inner(&sh, axis);
        let mut shape = sh.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        let xd = self.value(x).data();
        for o in 0..outer {
            let base = o * sh[axis] * inner + start * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let out = Tensor::new(shape, data)?;
        self.push("narrow", out, Op::Narrow { x, axis, start }, &[x])
    }

    /// Mean over axis 1 of `[B, L, D]`, restricted to positions where `valid`
    /// (`B * L` entries) is true. Rows with no valid position pool to zero.
    pub fn mean_pool(&mut self, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 || valid.is_some_and(|m| m.len() != sh[0] * sh[1]) {
            return Err(Error::shape("mean_pool", format!("{sh:?}")));
        }
        let (b, l, d) = (sh[0], sh[1], sh[2]);
        let mut weights = vec![T::zero(); b * l];
        for bi in 0..b {
            let count = (0..l).filter(|&j| valid.is_none_or(|m| m[bi * l + j])).count();
            if count == 0 {
                continue;
            }
            let w = T::one() / T::from_usize(count).unwrap();
            for j in 0..l {
                if valid.is_none_or(|m| m[bi * l + j]) {
                    weights[bi * l + j] = w;
                }
            }
        }
        let xd = self.value(x).data();
        let mut out = Tensor::zeros([b, d]);
        for bi in 0..b {
            for j in 0..l {
                let w = weights[bi * l + j];
                if w == T::zero() {
                    continue;
                }
                let src = &xd[(bi * l + j) * d..(bi * l + j + 1) * d];
                for (o, &s) in out.data_mut()[bi * d..(bi + 1) * d].iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        self.push("mean_pool", out, Op::MeanPool { x, weights }, &[x])
    }

    /// Stack `times` copies of `x` along a new leading axis.
    pub fn repeat_batch(&mut self, x: Var, times: usize) -> Result<Var> {
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(times * xd.len());
        for _ in 0..times {
            data.extend_from_slice(xd);
        }
        let out = Tensor::new(shape, data)?;
        self.push("repeat_batch", out, Op::RepeatBatch(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 2 {
            return Err(Error::shape("transpose", format!("{sh:?}")));
        }
        let out = transpose2(self.value(x).data(), sh[0], sh[1]);
        let out = Tensor::new([sh[1], sh[0]], out)?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Scale each row (last dimension) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(d) {
            let n = row
                .iter()
                .map(|&v| v * v)
                .sum::<T>()
                .sqrt()
                .max(T::from_f64_lossy(NORM_EPS));
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push("l2_normalize", out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Multi-head scaled dot-product attention over `[B, L, D]` inputs whose
    /// last dimension is split into `heads` chunks. Masked scores are set to
    /// −∞ before the softmax; a query with no permitted key outputs zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Mask>) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(Error::shape("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
        }
        let (bsz, lq, d) = (qs[0], qs[1], qs[2]);
        let lk = ks[1];
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("{heads} heads do not divide d={d}")));
        }
        if let Some(m) = mask {
            if m.shape() != [bsz, lq, lk] {
                return Err(Error::shape(
                    "attention",
                    format!("mask {:?} vs scores {:?}", m.shape(), [bsz, lq, lk]),
                ));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); bsz * heads * lq * lk];
        let mut out = Tensor::zeros([bsz, lq, d]);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..bsz {
            for h in 0..heads {
                let p_off = (b * heads + h) * lq * lk;
                let p = &mut probs[p_off..p_off + lq * lk];
                gemm(
                    lq,
                    dh,
                    lk,
                    scale,
                    qd,
                    View {
                        offset: b * lq * d + h * dh,
                        rs: d,
                        cs: 1,
                    },
                    kd,
                    View {
                        offset: b * lk * d + h * dh,
                        rs: 1,
                        cs: d,
                    },
                    T::zero(),
                    p,
                    View::row_major(0, lk),
                );
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    if let Some(m) = mask {
                        for (j, s) in row.iter_mut().enumerate() {
                            if !m.allows(b, i, j) {
                                *s = T::neg_infinity();
                            }
                        }
                    }
                    softmax_in_place(row);
                }
                gemm(
                    lq,
                    lk,
                    dh,
                    T::one(),
                    p,
                    View::row_major(0, lk),
                    vd,
                    View {
                        offset: b * lk * d + h * dh,
                        rs: d,
                        cs: 1,
                    },
                    T::zero(),
                    out.data_mut(),
                    View {
                        offset: b * lq * d + h * dh,
                        rs: d,
                        cs: 1,
                    },
                );
            }
        }
        self.push("attention", out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Mean negative log-likelihood over rows whose target is not
    /// [`IGNORE_INDEX`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64]) -> Result<Var> {
        let count = targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
        if count == 0 {
            return Err(Error::AllTargetsIgnored);
        }
        self.cross_entropy_sum(logits, targets, T::from_usize(count).unwrap())
    }

    /// Summed negative log-likelihood divided by an external `denom`, for
    /// losses split across accumulation micro-batches.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[i64], denom: T) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        if lv.rows() != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} logit rows vs {} targets", lv.rows(), targets.len()),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            if t < 0 || t as usize >= vocab {
                return Err(Error::TargetOutOfRange { target: t, vocab });
            }
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += lse - row[t as usize];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let out = Tensor::scalar(total / denom);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                denom,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Back-propagate from a scalar `loss`; returns gradients of every
    /// trainable parameter the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        let mut out = Gradients::empty(self.params.keys().map(|p| p.0 + 1).max().unwrap_or(0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>], params: &mut Gradients<T>) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.insert(*id, g),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bsh = bv.shape();
                let (k, n) = if *trans_b { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
                let m = av.rows();
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(av.shape().to_vec());
                    let bt = if *trans_b {
                        View::row_major(0, k)
                    } else {
                        View::transposed(0, n)
                    };
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        View::row_major(0, n),
                        bv.data(),
                        bt,
                        T::zero(),
                        ga.data_mut(),
                        View::row_major(0, k),
                    );
                    acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(bsh.to_vec());
                    if *trans_b {
                        gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            g.data(),
                            View::transposed(0, n),
                            av.data(),
                            View::row_major(0, k),
                            T::zero(),
                            gb.data_mut(),
                            View::row_major(0, k),
                        );
                    } else {
                        gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            av.data(),
                            View::transposed(0, k),
                            g.data(),
                            View::row_major(0, n),
                            T::zero(),
                            gb.data_mut(),
                            View::row_major(0, n),
                        );
                    }
                    acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g);
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(self.shape(*b).to_vec());
                    let n = gb.numel();
                    for chunk in g.data().chunks(n) {
                        for (o, &x) in gb.data_mut().iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    acc(grads, *b, gb);
                }
                if self.wants(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for (x, &y) in ga.data_mut().iter_mut().zip(bv.data()) {
                        *x *= y;
                    }
                    acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = g;
                    for (x, &y) in gb.data_mut().iter_mut().zip(av.data()) {
                        *x *= y;
                    }
                    acc(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => acc(grads, *x, g.map(|v| v * *c)),
            Op::MulScalar(x, s) => {
                let c = self.value(*s).item();
                if self.wants(*s) {
                    let ds = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| a * b)
                        .sum::<T>();
                    acc(grads, *s, Tensor::new(self.shape(*s).to_vec(), vec![ds]).unwrap());
                }
                if self.wants(*x) {
                    acc(grads, *x, g.map(|v| v * c));
                }
            }
            Op::Exp(x) => {
                let mut gx = g;
                for (o, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    *o *= y;
                }
                acc(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let mut gx = g;
                for (o, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *o *= gelu_parts(xv).1;
                }
                acc(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gd = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut gg = Tensor::zeros([d]);
                    let mut gbias = Tensor::zeros([d]);
                    for (r, grow) in g.data().chunks(d).enumerate() {
                        for j in 0..d {
                            gg.data_mut()[j] += grow[j] * xhat[r * d + j];
                            gbias.data_mut()[j] += grow[j];
                        }
                    }
                    if self.wants(*gain) {
                        acc(grads, *gain, gg);
                    }
                    if self.wants(*bias) {
                        acc(grads, *bias, gbias);
                    }
                }
                if self.wants(*x) {
                    let dt = T::from_usize(d).unwrap();
                    let mut gx = Tensor::zeros(node.value.shape().to_vec());
                    for (r, grow) in g.data().chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dhx = T::zero();
                        for j in 0..d {
                            let dh = grow[j] * gd[j];
                            mean_dh += dh;
                            mean_dhx += dh * xh[j];
                        }
                        mean_dh /= dt;
                        mean_dhx /= dt;
                        let o = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            o[j] = rstd[r] * (grow[j] * gd[j] - mean_dh - xh[j] * mean_dhx);
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Embedding { table, ids } => {
                let tsh = self.shape(*table);
                let d = tsh[1];
                let mut gt = Tensor::zeros(tsh.to_vec());
                for (r, &i) in ids.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (o, &s) in gt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *o += s;
                    }
                }
                acc(grads, *table, gt);
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let mut gx = g;
                for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(node.value.data().chunks(d)) {
                    let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                    for (o, &y) in grow.iter_mut().zip(yrow) {
                        *o = y * (*o - dot);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = outer_inner(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        acc(grads, v, Tensor::new(self.shape(v).to_vec(), gv).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let sh = self.shape(*x);
                let (outer, inner) = outer_inner(sh, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = Tensor::zeros(sh.to_vec());
                for o in 0..outer {
                    let dst = (o * sh[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc(grads, *x, gx);
            }
            Op::MeanPool { x, weights } => {
                let sh = self.shape(*x);
                let (b, l, d) = (sh[0], sh[1], sh[2]);
                let mut gx = Tensor::zeros(sh.to_vec());
                for bi in 0..b {
                    for j in 0..l {
                        let w = weights[bi * l + j];
                        let dst = &mut gx.data_mut()[(bi * l + j) * d..(bi * l + j + 1) * d];
                        for (o, &s) in dst.iter_mut().zip(&g.data()[bi * d..(bi + 1) * d]) {
                            *o = w * s;
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::RepeatBatch(x) => {
                let mut gx = Tensor::zeros(self.shape(*x).to_vec());
                let n = gx.numel();
                for chunk in g.data().chunks(n) {
                    for (o, &s) in gx.data_mut().iter_mut().zip(chunk) {
                        *o += s;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Transpose(x) => {
                let sh = node.value.shape();
                let gx = transpose2(g.data(), sh[0], sh[1]);
                acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).unwrap());
            }
            Op::Reshape(x) => {
                acc(grads, *x, g.reshape(self.shape(*x).to_vec()).unwrap());
            }
            Op::L2Normalize { x, norms } => {
                let d = node.value.last_dim();
                let mut gx = g;
                for ((grow, yrow), &n) in gx.data_mut().chunks_mut(d).zip(node.value.data().chunks(d)).zip(norms) {
                    let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                    for (o, &y) in grow.iter_mut().zip(yrow) {
                        *o = (*o - y * dot) / n;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, &g, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                denom,
            } => {
                let lv = self.value(*logits);
                let vocab = lv.last_dim();
                let scale = g.item() / *denom;
                let mut gl = Tensor::zeros(lv.shape().to_vec());
                for (r, &t) in targets.iter().enumerate() {
                    if t == IGNORE_INDEX {
                        continue;
                    }
                    let o = &mut gl.data_mut()[r * vocab..(r + 1) * vocab];
                    for (x, &p) in o.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *x = p * scale;
                    }
                    o[t as usize] -= scale;
                }
                acc(grads, *logits, gl);
            }
            Op::Sum(x) => {
                let c = g.item();
                acc(grads, *x, Tensor::full(self.shape(*x).to_vec(), c));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (bsz, lq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let lk = kv.shape()[1];
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut gq = Tensor::zeros(qv.shape().to_vec());
        let mut gk = Tensor::zeros(kv.shape().to_vec());
        let mut gv = Tensor::zeros(vv.shape().to_vec());
        let mut dp = vec![T::zero(); lq * lk];
        for b in 0..bsz {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
                let qo = View {
                    offset: b * lq * d + h * dh,
                    rs: d,
                    cs: 1,
                };
                let ko = View {
                    offset: b * lk * d + h * dh,
                    rs: d,
                    cs: 1,
                };
                // dV = Pᵀ dO
                gemm(
                    lk,
                    lq,
                    dh,
                    T::one(),
                    p,
                    View::transposed(0, lk),
                    g.data(),
                    qo,
                    T::one(),
                    gv.data_mut(),
                    ko,
                );
                // dP = dO Vᵀ
                gemm(
                    lq,
                    dh,
                    lk,
                    T::one(),
                    g.data(),
                    qo,
                    vv.data(),
                    View {
                        offset: ko.offset,
                        rs: 1,
                        cs: d,
                    },
                    T::zero(),
                    &mut dp,
                    View::row_major(0, lk),
                );
                for i in 0..lq {
                    let prow = &p[i * lk..(i + 1) * lk];
                    let drow = &mut dp[i * lk..(i + 1) * lk];
                    let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    for (x, &pp) in drow.iter_mut().zip(prow) {
                        *x = pp * (*x - dot);
                    }
                }
                // dQ = scale · dS K ; dK = scale · dSᵀ Q
                gemm(
                    lq,
                    lk,
                    dh,
                    scale,
                    &dp,
                    View::row_major(0, lk),
                    kv.data(),
                    ko,
                    T::one(),
                    gq.data_mut(),
                    qo,
                );
                gemm(
                    lk,
                    lq,
                    dh,
                    scale,
                    &dp,
                    View::transposed(0, lk),
                    qv.data(),
                    qo,
                    T::one(),
                    gk.data_mut(),
                    ko,
                );
            }
        }
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };
        if self.wants(q) {
            acc(grads, q, gq);
        }
        if self.wants(k) {
            acc(grads, k, gk);
        }
        if self.wants(v) {
            acc(grads, v, gv);
        }
    }
}

fn transpose2<T: Copy>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(data[i * cols + j]);
        }
    }
    out
}

/// Numerically stable softmax; a row of all −∞ becomes all zeros.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
