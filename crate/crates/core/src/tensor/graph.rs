use super::{kernels, Tensor};
use crate::error::{Error, Result};
use crate::loss::{self, LossKind};
use crate::par;
use crate::rng::CountingRng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Gelu(Var),
    /// Masked (causal) entries are exactly zero, so they need no separate
    /// treatment in the backward pass.
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SelectLast {
        x: Var,
        idx: Vec<usize>,
        k: usize,
    },
    GroupedDot {
        h: Var,
        emb: Var,
        groups: Vec<usize>,
        n: usize,
    },
    Loss {
        pos: Var,
        neg: Var,
        kind: LossKind,
        mask: Option<Vec<bool>>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Softmax { x, .. }
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SelectLast { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::Concat(parts) => parts.clone(),
            Op::GroupedDot { h, emb, .. } => vec![*h, *emb],
            Op::Loss { pos, neg, .. } => vec![*pos, *neg],
        }
    }
}

struct Node<'p> {
    value: Value<'p>,
    requires_grad: bool,
    op: Op,
}

/// A tape of tensor operations supporting one reverse pass.
///
/// Parameters can be bound by reference ([`Graph::param`]) so that building a
/// graph never copies model weights; the graph then borrows the model for `'p`.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Tensor>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Value<'p>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Value::Owned(t), false)
    }

    /// An owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(Value::Owned(t), true)
    }

    /// A borrowed leaf; `trainable` controls whether it receives a gradient.
    pub fn param(&mut self, t: &'p Tensor, trainable: bool) -> Var {
        self.leaf(Value::Borrowed(t), trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- forward ops ----

    /// `[m×k]·[k×n]`, or batched `[B×m×k]·[B×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false)
    }

    /// `[m×k]·[n×k]ᵀ`, or batched `[B×m×k]·[B×n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, true)
    }

    fn mm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || {
            Error::Shape(format!(
                "matmul{} of {sa:?} and {sb:?}",
                if trans_b { "_nt" } else { "" }
            ))
        };
        let (batch, m, k, kb, n) = match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[r, c]) => {
                let (kb, n) = if trans_b { (c, r) } else { (r, c) };
                (1, m, k, kb, n)
            }
            (&[ba, m, k], &[bb, r, c]) if ba == bb => {
                let (kb, n) = if trans_b { (c, r) } else { (r, c) };
                (ba, m, k, kb, n)
            }
            _ => return Err(mismatch()),
        };
        if k != kb {
            return Err(mismatch());
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let blocks = par::map(batch, m * n * k, |bi| {
            let ab = &av[bi * m * k..(bi + 1) * m * k];
            let bb = &bv[bi * k * n..(bi + 1) * k * n];
            if trans_b {
                kernels::gemm_nt(ab, bb, m, k, n)
            } else {
                kernels::gemm_nn(ab, bb, m, k, n)
            }
        });
        let data = blocks.concat();
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::from_fn(x.shape(), |i| x.data()[i] * c);
        self.push(t, Op::Scale(a, c))
    }

    /// Adds a `[d]` bias to every row of `[.., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let (xv, bv) = (self.value(x), self.value(bias).data());
        let t = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + bv[i % d]);
        Ok(self.push(t, Op::AddBias { x, bias }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::from_fn(x.shape(), |i| {
            let v = x.data()[i];
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        });
        self.push(t, Op::Gelu(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Softmax over `[.., T, T]` score matrices where row `i` only sees
    /// columns `j ≤ i`; masked entries come out as exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::Shape(format!(
                "causal softmax needs square trailing axes, got {s:?}"
            )));
        }
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let n = x.last_dim();
        let mut out = x.data().to_vec();
        par::for_each_row(&mut out, n, |r, row| {
            if causal {
                let i = r % n;
                kernels::softmax_row(&mut row[..=i]);
                row[i + 1..].fill(0.0);
            } else {
                kernels::softmax_row(row);
            }
        });
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x: a }))
    }

    /// Normalizes each row of `[.., d]` to zero mean and unit variance
    /// (population variance plus `eps`), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm input {:?} with gain {:?} and bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = xv.data().to_vec();
        let mut rstd = vec![0.0; rows];
        for (r, row) in xhat.chunks_mut(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rs;
            }
            rstd[r] = rs;
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out = Tensor::from_fn(xv.shape(), |i| xhat[i] * g[i % d] + b[i % d]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row lookup: `table[V×d]`, `ids` → `[ids.len()×d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(Error::Shape(format!(
                "gather_rows needs a 2-d table, got {:?}",
                tv.shape()
            )));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index { index: bad, len: v });
        }
        let mut out = vec![0.0; ids.len() * d];
        par::for_each_row(&mut out, d, |r, row| row.copy_from_slice(tv.row(ids[r])));
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// `out[i] = x[map[i]]`, with the given output shape.
    pub fn permute(&mut self, x: Var, map: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if map.iter().any(|&i| i >= xv.len()) {
            return Err(Error::Shape("permutation index out of range".into()));
        }
        let t = Tensor::new(shape.to_vec(), map.iter().map(|&i| xv[i]).collect())?;
        Ok(self.push(t, Op::Permute { x, map }))
    }

    /// `[B·T, h·dh]` → `[B·h, T, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, t: usize, heads: usize) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(x).len() != batch * t * d || !d.is_multiple_of(heads) {
            return Err(Error::Shape(format!(
                "split_heads of {:?} into {batch}×{t}×{heads}",
                self.shape(x)
            )));
        }
        let dh = d / heads;
        let mut map = Vec::with_capacity(batch * t * d);
        for b in 0..batch {
            for h in 0..heads {
                for tt in 0..t {
                    for c in 0..dh {
                        map.push((b * t + tt) * d + h * dh + c);
                    }
                }
            }
        }
        self.permute(x, map, &[batch * heads, t, dh])
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, t: usize, heads: usize) -> Result<Var> {
        let dh = self.value(x).last_dim();
        let d = dh * heads;
        if self.value(x).len() != batch * t * d {
            return Err(Error::Shape(format!(
                "merge_heads of {:?} into {batch}×{t}×{heads}",
                self.shape(x)
            )));
        }
        let mut map = Vec::with_capacity(batch * t * d);
        for b in 0..batch {
            for tt in 0..t {
                for h in 0..heads {
                    for c in 0..dh {
                        map.push(((b * heads + h) * t + tt) * dh + c);
                    }
                }
            }
        }
        self.permute(x, map, &[batch * t, d])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Concatenates `[R×wᵢ]` inputs along the last axis into `[R×Σwᵢ]`.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Shape(format!(
                    "concat of {:?} and {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let vals: Vec<&[f64]> = parts.iter().map(|&p| self.value(p).data()).collect();
        par::for_each_row(&mut out, total, |r, row| {
            let mut off = 0;
            for (v, &w) in vals.iter().zip(&widths) {
                row[off..off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
                off += w;
            }
        });
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    /// Picks `k` entries per row of `[R×N]`; `idx` holds `R·k` column indices.
    pub fn select_last(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, n) = (xv.rows(), xv.last_dim());
        if idx.len() != rows * k {
            return Err(Error::Shape(format!(
                "select of {k} per row from {:?} with {} indices",
                xv.shape(),
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let data = (0..rows * k)
            .map(|i| xv.data()[(i / k.max(1)) * n + idx[i]])
            .collect();
        let t = Tensor::new(vec![rows, k], data)?;
        Ok(self.push(
            t,
            Op::SelectLast {
                x,
                idx: idx.to_vec(),
                k,
            },
        ))
    }

    /// `out[r, j] = ⟨h[r], emb[groups[r]·n + j]⟩` for `h[R×d]`, `emb[G·n×d]`.
    ///
    /// With `G = 1` every row is scored against the same `n` rows, with
    /// `groups[r] = r` each row has its own, and anything in between shares
    /// candidate rows within a group.
    pub fn grouped_dot(&mut self, h: Var, emb: Var, groups: &[usize], n: usize) -> Result<Var> {
        let (hv, ev) = (self.value(h), self.value(emb));
        let d = hv.last_dim();
        if hv.ndim() != 2 || ev.ndim() != 2 || ev.last_dim() != d || groups.len() != hv.rows() {
            return Err(Error::Shape(format!(
                "grouped_dot of {:?} against {:?} with {} group ids",
                hv.shape(),
                ev.shape(),
                groups.len()
            )));
        }
        let n_groups = ev.rows().checked_div(n).unwrap_or(0);
        if n > 0 && ev.rows() != n_groups * n {
            return Err(Error::Shape(format!(
                "{} candidate rows are not a multiple of {n}",
                ev.rows()
            )));
        }
        if let Some(&bad) = groups.iter().find(|&&g| g >= n_groups && n > 0) {
            return Err(Error::Index {
                index: bad,
                len: n_groups,
            });
        }
        let mut out = vec![0.0; groups.len() * n];
        par::for_each_row(&mut out, n, |r, row| {
            let hr = hv.row(r);
            let base = groups[r] * n;
            for (j, o) in row.iter_mut().enumerate() {
                *o = kernels::dot(hr, ev.row(base + j));
            }
        });
        let t = Tensor::new(vec![groups.len(), n], out)?;
        Ok(self.push(
            t,
            Op::GroupedDot {
                h,
                emb,
                groups: groups.to_vec(),
                n,
            },
        ))
    }

    /// Mean ranking loss over rows of positive scores `pos[R]` (or `[R×1]`)
    /// and negative scores `neg[R×K]`, restricted to `mask` when given.
    pub fn ranking_loss(
        &mut self,
        pos: Var,
        neg: Var,
        kind: LossKind,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (pv, nv) = (self.value(pos), self.value(neg));
        let rows = pv.len();
        if nv.rows() != rows || nv.last_dim() == 0 {
            return Err(Error::Shape(format!(
                "loss with positives {:?} and negatives {:?}",
                pv.shape(),
                nv.shape()
            )));
        }
        if let Some(m) = mask {
            if m.len() != rows {
                return Err(Error::Shape(format!(
                    "loss mask of length {} for {rows} rows",
                    m.len()
                )));
            }
        }
        let valid = |r: usize| mask.is_none_or(|m| m[r]);
        let count = (0..rows).filter(|&r| valid(r)).count();
        let total: f64 = (0..rows)
            .filter(|&r| valid(r))
            .map(|r| loss::row_loss(kind, pv.data()[r], nv.row(r)))
            .sum();
        let value = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::Loss {
                pos,
                neg,
                kind,
                mask: mask.map(|m| m.to_vec()),
            },
        ))
    }

    /// Inverted dropout: keeps each entry with probability `1 - rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut CountingRng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.unit() < rate { 0.0 } else { keep });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    // ---- reverse pass ----

    /// Accumulates d`loss`/d`v` into every node `v` that requires a gradient
    /// and feeds into `loss`. Each node is visited once, in reverse tape order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contribs = self.local_grads(i, &g)?;
            self.grads[i] = Some(g);
            for (parent, contrib) in contribs {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut self.grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: Var| self.value(v);
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (val(a).data(), val(b).data());
                if needs(a) {
                    let blocks = par::map(batch, m * n * k, |bi| {
                        let gb = &gd[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            kernels::gemm_nn(gb, bb, m, n, k)
                        } else {
                            kernels::gemm_nt(gb, bb, m, n, k)
                        }
                    });
                    out.push((a, Tensor::new(val(a).shape().to_vec(), blocks.concat())?));
                }
                if needs(b) {
                    let blocks = par::map(batch, m * n * k, |bi| {
                        let gb = &gd[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            kernels::gemm_tn(gb, ab, m, n, k)
                        } else {
                            kernels::gemm_tn(ab, gb, m, k, n)
                        }
                    });
                    out.push((b, Tensor::new(val(b).shape().to_vec(), blocks.concat())?));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if needs(a) {
                    out.push((a, Tensor::from_fn(g.shape(), |i| gd[i] * bv.data()[i])));
                }
                if needs(b) {
                    out.push((b, Tensor::from_fn(g.shape(), |i| gd[i] * av.data()[i])));
                }
            }
            &Op::Scale(a, c) => out.push((a, Tensor::from_fn(g.shape(), |i| gd[i] * c))),
            &Op::AddBias { x, bias } => {
                out.push((x, g.clone()));
                if needs(bias) {
                    let d = val(bias).len();
                    let mut gb = vec![0.0; d];
                    for row in gd.chunks(d) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((bias, Tensor::new(vec![d], gb)?));
                }
            }
            &Op::Relu(a) => {
                let av = val(a).data();
                out.push((
                    a,
                    Tensor::from_fn(g.shape(), |i| if av[i] > 0.0 { gd[i] } else { 0.0 }),
                ));
            }
            &Op::Gelu(a) => {
                let av = val(a).data();
                out.push((
                    a,
                    Tensor::from_fn(g.shape(), |i| {
                        let x = av[i];
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gd[i] * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    }),
                ));
            }
            &Op::Softmax { x, .. } => {
                let y = node.value.get();
                let n = y.last_dim();
                let yd = y.data();
                let mut dx = vec![0.0; yd.len()];
                par::for_each_row(&mut dx, n, |r, row| {
                    let (yr, gr) = (&yd[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        row[j] = yr[j] * (gr[j] - s);
                    }
                });
                out.push((x, Tensor::new(y.shape().to_vec(), dx)?));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*gain).len();
                let gv = val(*gain).data();
                if needs(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    par::for_each_row(&mut dx, d, |r, row| {
                        let (gr, xr) = (&gd[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            row[j] = rstd[r] * (gr[j] * gv[j] - m1 - xr[j] * m2);
                        }
                    });
                    out.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
                }
                if needs(*gain) || needs(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, xr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    out.push((*gain, Tensor::new(vec![d], dg)?));
                    out.push((*bias, Tensor::new(vec![d], db)?));
                }
            }
            Op::Gather { table, ids } => {
                let shape = val(*table).shape().to_vec();
                let d = shape[1];
                let mut dt = Tensor::zeros(&shape);
                let tdata = dt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    let src = &gd[r * d..(r + 1) * d];
                    for (acc, v) in tdata[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
                out.push((*table, dt));
            }
            &Op::Reshape(x) => {
                out.push((x, g.clone().reshape(val(x).shape())?));
            }
            Op::Permute { x, map } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let dd = dx.data_mut();
                for (i, &src) in map.iter().enumerate() {
                    dd[src] += gd[i];
                }
                out.push((*x, dx));
            }
            &Op::Sum(x) => out.push((x, Tensor::filled(val(x).shape(), gd[0]))),
            &Op::Mean(x) => {
                let n = val(x).len().max(1) as f64;
                out.push((x, Tensor::filled(val(x).shape(), gd[0] / n)));
            }
            Op::Concat(parts) => {
                let total = g.last_dim();
                let rows = g.rows();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).last_dim();
                    if needs(p) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&gd[r * total + off..r * total + off + w]);
                        }
                        out.push((p, Tensor::new(val(p).shape().to_vec(), dp)?));
                    }
                    off += w;
                }
            }
            Op::SelectLast { x, idx, k } => {
                let n = val(*x).last_dim();
                let mut dx = Tensor::zeros(val(*x).shape());
                let dd = dx.data_mut();
                for (i, &j) in idx.iter().enumerate() {
                    dd[(i / k) * n + j] += gd[i];
                }
                out.push((*x, dx));
            }
            Op::GroupedDot { h, emb, groups, n } => {
                let (hv, ev) = (val(*h), val(*emb));
                let n = *n;
                let d = hv.last_dim();
                if needs(*h) {
                    let mut dh = vec![0.0; hv.len()];
                    par::for_each_row(&mut dh, d, |r, row| {
                        let base = groups[r] * n;
                        for j in 0..n {
                            let c = gd[r * n + j];
                            if c == 0.0 {
                                continue;
                            }
                            for (acc, e) in row.iter_mut().zip(ev.row(base + j)) {
                                *acc += c * e;
                            }
                        }
                    });
                    out.push((*h, Tensor::new(hv.shape().to_vec(), dh)?));
                }
                if needs(*emb) {
                    let n_groups = ev.rows().checked_div(n).unwrap_or(0);
                    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
                    for (r, &gid) in groups.iter().enumerate() {
                        rows_of[gid].push(r);
                    }
                    let mut de = vec![0.0; ev.len()];
                    par::for_each_row(&mut de, d, |e, row| {
                        let (gid, j) = (e / n, e % n);
                        for &r in &rows_of[gid] {
                            let c = gd[r * n + j];
                            if c == 0.0 {
                                continue;
                            }
                            for (acc, hval) in row.iter_mut().zip(hv.row(r)) {
                                *acc += c * hval;
                            }
                        }
                    });
                    out.push((*emb, Tensor::new(ev.shape().to_vec(), de)?));
                }
            }
            Op::Loss {
                pos,
                neg,
                kind,
                mask,
            } => {
                let (pv, nv) = (val(*pos), val(*neg));
                let rows = pv.len();
                let valid = |r: usize| mask.as_ref().is_none_or(|m| m[r]);
                let count = (0..rows).filter(|&r| valid(r)).count();
                let scale = if count == 0 {
                    0.0
                } else {
                    gd[0] / count as f64
                };
                let k = nv.last_dim();
                let mut dp = vec![0.0; rows];
                let mut dn = vec![0.0; rows * k];
                for r in (0..rows).filter(|&r| valid(r)) {
                    let (gp, gn) = loss::row_grad(*kind, pv.data()[r], nv.row(r));
                    dp[r] = gp * scale;
                    for (acc, v) in dn[r * k..(r + 1) * k].iter_mut().zip(gn) {
                        *acc = v * scale;
                    }
                }
                out.push((*pos, Tensor::new(pv.shape().to_vec(), dp)?));
                out.push((*neg, Tensor::new(nv.shape().to_vec(), dn)?));
            }
        }
        Ok(out)
    }
}
