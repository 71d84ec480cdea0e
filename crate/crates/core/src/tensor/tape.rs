use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::gemm;
use super::{axis_extents, shape_err, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        alpha: f64,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    AddKeyBias(Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        axis: usize,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose {
        x: Var,
        a1: usize,
        a2: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mse(Var, Var),
    WeightedSse {
        pred: Var,
        target: Arc<Vec<f64>>,
        weights: Arc<Vec<f64>>,
    },
    MaskedMean {
        x: Var,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is confined to one thread. Nodes are appended in execution order,
/// so index order is a valid topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

/// Gradients of a scalar loss with respect to the tape's trainable leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros when `v` was not on the loss path.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Swaps two axes of a tensor decomposed as `[pre, a, mid, b, post]`.
fn swap_axes(src: &[f64], pre: usize, a: usize, mid: usize, b: usize, post: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for p in 0..pre {
        for i in 0..a {
            for m in 0..mid {
                for j in 0..b {
                    let s = (((p * a + i) * mid + m) * b + j) * post;
                    let d = (((p * b + j) * mid + m) * a + i) * post;
                    out[d..d + post].copy_from_slice(&src[s..s + post]);
                }
            }
        }
    }
    out
}

fn swap_extents(shape: &[usize], a1: usize, a2: usize) -> (usize, usize, usize, usize, usize) {
    let pre = shape[..a1].iter().product();
    let mid = shape[a1 + 1..a2].iter().product();
    let post = shape[a2 + 1..].iter().product();
    (pre, shape[a1], mid, shape[a2], post)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Turns on inverted dropout with rate `p` for every later
    /// [`Tape::dropout`] call. Tapes start with dropout off.
    pub fn enable_dropout(&mut self, p: f64, seed: u64, stream: u64) {
        if p > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            self.dropout = Some((p.min(0.99), rng));
        }
    }

    /// Zeroes entries with the enabled rate and rescales the rest by
    /// `1 / (1 - p)`. The identity (no node recorded) when dropout is off.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - *p);
        let p = *p;
        let mask: Vec<f64> = (0..self.nodes[x.0].value.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = Tensor::new(self.shape(x).to_vec(), mask)?;
        let m = self.constant(m);
        self.mul(x, m)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFiniteValue { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Matrix product. With a 2-D `b`, every leading index of `a` is a row
    /// (`[.., k] x [k, n] -> [.., n]`); with a 3-D `b`, both operands are
    /// batched (`[g, m, k] x [g, k, n] -> [g, m, n]`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, 1.0, false)
    }

    /// `alpha * a * b^T` for batched or flat operands, `b` stored `[.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, alpha: f64) -> Result<Var> {
        self.matmul_ext(a, b, alpha, true)
    }

    fn matmul_ext(&mut self, a: Var, b: Var, alpha: f64, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() {
            return shape_err("matmul", "left operand must have rank >= 1");
        }
        let k = *sa.last().unwrap();
        let out = match sb.len() {
            2 => {
                let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if kb != k {
                    return shape_err("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
                }
                let rows = self.value(a).numel() / k.max(1);
                let mut c = vec![0.0; rows * n];
                gemm(rows, k, n, alpha, self.value(a).data(), false, self.value(b).data(), trans_b, 0.0, &mut c);
                let mut shape = sa[..sa.len() - 1].to_vec();
                shape.push(n);
                Tensor::new(shape, c)?
            }
            3 => {
                let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                if sa.len() != 3 || sa[0] != sb[0] || kb != k {
                    return shape_err("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
                }
                let (g, m) = (sa[0], sa[1]);
                let mut c = vec![0.0; g * m * n];
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                for i in 0..g {
                    gemm(
                        m,
                        k,
                        n,
                        alpha,
                        &ad[i * m * k..(i + 1) * m * k],
                        false,
                        &bd[i * k * n..(i + 1) * k * n],
                        trans_b,
                        0.0,
                        &mut c[i * m * n..(i + 1) * m * n],
                    );
                }
                Tensor::new(vec![g, m, n], c)?
            }
            _ => return shape_err("matmul", format!("right operand must be 2-D or 3-D, got {sb:?}")),
        };
        self.push("matmul", out, Op::MatMul { a, b, alpha, trans_b }, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a 1-D `bias` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return shape_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % d])
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_bias", out, Op::AddBias { x, bias }, &[x, bias])
    }

    /// Adds a constant per-key bias to attention logits.
    ///
    /// `x` is `[batch * heads, n_q, n_k]` and `bias` is `[batch, n_k]`; the
    /// same bias row is shared by every head and query of a batch item.
    pub fn add_key_bias(&mut self, x: Var, bias: &Tensor, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = bias.shape();
        if sx.len() != 3 || sb.len() != 2 || sb[0] * heads != sx[0] || sb[1] != sx[2] {
            return shape_err("add_key_bias", format!("{sx:?} with bias {sb:?} and {heads} heads"));
        }
        let (nq, nk) = (sx[1], sx[2]);
        let xd = self.value(x).data();
        let bd = bias.data();
        let mut data = xd.to_vec();
        for (g, chunk) in data.chunks_mut(nq * nk).enumerate() {
            let row = &bd[(g / heads) * nk..(g / heads + 1) * nk];
            for q in chunk.chunks_mut(nk) {
                for (v, b) in q.iter_mut().zip(row) {
                    *v += b;
                }
            }
        }
        let out = Tensor::new(sx, data)?;
        self.push("add_key_bias", out, Op::AddKeyBias(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err("softmax", format!("axis {axis} for shape {shape:?}"));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// Layer normalization along `axis` with optional affine parameters of
    /// length `shape[axis]`. Variance uses the population convention.
    pub fn layer_norm(
        &mut self,
        x: Var,
        axis: usize,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err("layer_norm", format!("axis {axis} for shape {shape:?}"));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [len] {
                return shape_err("layer_norm", format!("affine {:?} for axis length {len}", self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let g = gamma.map(|v| self.value(v).data());
        let b = beta.map(|v| self.value(v).data());
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| src[at(l)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|l| (src[at(l)] - mean).powi(2)).sum::<f64>() / len as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for l in 0..len {
                    let h = (src[at(l)] - mean) * is;
                    xhat[at(l)] = h;
                    let scaled = g.map_or(h, |g| h * g[l]);
                    out[at(l)] = b.map_or(scaled, |b| scaled + b[l]);
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let parents: Vec<Var> = [Some(x), gamma, beta].into_iter().flatten().collect();
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                axis,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &parents,
        )
    }

    /// Gathers rows of a `[vocab, d]` table: output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return shape_err("embedding", format!("table must be 2-D, got {st:?}"));
        }
        let (v, d) = (st[0], st[1]);
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
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

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat", "no inputs");
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} for shape {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return shape_err("concat", format!("{first:?} vs {s:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let s = o * len * inner;
                let d = (o * total + offset) * inner;
                out[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
            }
            offset += len;
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let out = Tensor::new(oshape, out)?;
        self.push("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (a1, a2) = (a1.min(a2), a1.max(a2));
        if a2 >= shape.len() {
            return shape_err("transpose", format!("axes ({a1}, {a2}) for shape {shape:?}"));
        }
        if a1 == a2 {
            return self.reshape(x, &shape);
        }
        let (pre, a, mid, b, post) = swap_extents(&shape, a1, a2);
        let out = swap_axes(self.value(x).data(), pre, a, mid, b, post);
        let mut oshape = shape;
        oshape.swap(a1, a2);
        let out = Tensor::new(oshape, out)?;
        self.push("transpose", out, Op::Transpose { x, a1, a2 }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let needs_grad = self.nodes[x.0].needs_grad;
        self.nodes.push(Node {
            value: out,
            op: Op::Reshape(x),
            requires_grad: false,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean squared error, averaged over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel().max(1) as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        self.push("mse", Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    /// `sum(weights * (pred - target)^2)` with constant target and weights.
    pub fn weighted_sse(&mut self, pred: Var, target: &Tensor, weights: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() || target.shape() != weights.shape() {
            return shape_err(
                "weighted_sse",
                format!("{:?} / {:?} / {:?}", self.shape(pred), target.shape(), weights.shape()),
            );
        }
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .zip(weights.data())
            .map(|((p, t), w)| w * (p - t).powi(2))
            .sum();
        self.push(
            "weighted_sse",
            Tensor::scalar(s),
            Op::WeightedSse {
                pred,
                target: Arc::clone(target.arc()),
                weights: Arc::clone(weights.arc()),
            },
            &[pred],
        )
    }

    /// Mean over the sequence axis of `[batch, n, d]`, restricted to
    /// positions where `mask` (`[batch * n]`) is set.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return shape_err("masked_mean", format!("{s:?} with mask of {}", mask.len()));
        }
        let (bs, n, d) = (s[0], s[1], s[2]);
        let mut weights = vec![0.0; bs * n];
        for b in 0..bs {
            let count = mask[b * n..(b + 1) * n].iter().filter(|m| **m).count();
            if count == 0 {
                return shape_err("masked_mean", format!("batch item {b} has no unmasked positions"));
            }
            for t in 0..n {
                if mask[b * n + t] {
                    weights[b * n + t] = 1.0 / count as f64;
                }
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; bs * d];
        for b in 0..bs {
            for t in 0..n {
                let w = weights[b * n + t];
                if w != 0.0 {
                    let row = &src[(b * n + t) * d..(b * n + t + 1) * d];
                    for (o, v) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                        *o += w * v;
                    }
                }
            }
        }
        let out = Tensor::new(vec![bs, d], out)?;
        self.push("masked_mean", out, Op::MaskedMean { x, weights }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.numel() != 1 {
            return Err(TensorError::NotScalar(ln.value.shape().to_vec()));
        }
        if !ln.needs_grad {
            return Err(TensorError::DisconnectedGraph);
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(n);
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            out.push(match (node.requires_grad, g) {
                (true, Some(g)) => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                _ => None,
            });
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads: out, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, alpha, trans_b } => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let k = *sa.last().unwrap();
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if sb.len() == 2 {
                    let n = if trans_b { sb[0] } else { sb[1] };
                    let rows = ad.len() / k.max(1);
                    if self.wants(a) {
                        let ga = self.buf(grads, a);
                        // dA = dC * op(B)^T
                        gemm(rows, n, k, alpha, g, false, bd, !trans_b, 1.0, ga);
                    }
                    if self.wants(b) {
                        let gb = self.buf(grads, b);
                        if trans_b {
                            gemm(n, rows, k, alpha, g, true, ad, false, 1.0, gb);
                        } else {
                            gemm(k, rows, n, alpha, ad, true, g, false, 1.0, gb);
                        }
                    }
                } else {
                    let (bs, m) = (sa[0], sa[1]);
                    let n = if trans_b { sb[1] } else { sb[2] };
                    if self.wants(a) {
                        let ga = self.buf(grads, a);
                        for i in 0..bs {
                            gemm(
                                m,
                                n,
                                k,
                                alpha,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &bd[i * k * n..(i + 1) * k * n],
                                !trans_b,
                                1.0,
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                    if self.wants(b) {
                        let gb = self.buf(grads, b);
                        for i in 0..bs {
                            let gs = &g[i * m * n..(i + 1) * m * n];
                            let as_ = &ad[i * m * k..(i + 1) * m * k];
                            let out = &mut gb[i * k * n..(i + 1) * k * n];
                            if trans_b {
                                gemm(n, m, k, alpha, gs, true, as_, false, 1.0, out);
                            } else {
                                gemm(k, m, n, alpha, as_, true, gs, false, 1.0, out);
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        for (o, x) in self.buf(grads, v).iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    for ((o, x), y) in self.buf(grads, a).iter_mut().zip(g).zip(bd) {
                        *o += x * y;
                    }
                }
                if self.wants(b) {
                    for ((o, x), y) in self.buf(grads, b).iter_mut().zip(g).zip(ad) {
                        *o += x * y;
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if self.wants(x) {
                    for (o, v) in self.buf(grads, x).iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if self.wants(bias) {
                    let gb = self.buf(grads, bias);
                    let d = gb.len();
                    for row in g.chunks(d) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::AddKeyBias(x) | &Op::Reshape(x) => {
                if self.wants(x) {
                    for (o, v) in self.buf(grads, x).iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            &Op::Scale(x, s) => {
                if self.wants(x) {
                    for (o, v) in self.buf(grads, x).iter_mut().zip(g) {
                        *o += s * v;
                    }
                }
            }
            &Op::Relu(x) => {
                if self.wants(x) {
                    let xd = self.value(x).data();
                    for ((o, v), xi) in self.buf(grads, x).iter_mut().zip(g).zip(xd) {
                        if *xi > 0.0 {
                            *o += v;
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if self.wants(x) {
                    let xd = self.value(x).data();
                    for ((o, v), &xi) in self.buf(grads, x).iter_mut().zip(g).zip(xd) {
                        *o += v * gelu_grad(xi);
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                if self.wants(x) {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_extents(node.value.shape(), axis);
                    let gx = self.buf(grads, x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                axis,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                if let Some(gm) = *gamma {
                    if self.wants(gm) {
                        let gg = self.buf(grads, gm);
                        for (idx, (gv, h)) in g.iter().zip(xhat).enumerate() {
                            gg[(idx / inner) % len] += gv * h;
                        }
                    }
                }
                if let Some(bt) = *beta {
                    if self.wants(bt) {
                        let gb = self.buf(grads, bt);
                        for (idx, gv) in g.iter().enumerate() {
                            gb[(idx / inner) % len] += gv;
                        }
                    }
                }
                if self.wants(*x) {
                    let gamma_v = gamma.map(|v| self.value(v).data());
                    let gx = self.buf(grads, *x);
                    let mut dh = vec![0.0; len];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for (l, d) in dh.iter_mut().enumerate() {
                                *d = g[at(l)] * gamma_v.map_or(1.0, |gm| gm[l]);
                                mean_dh += *d;
                                mean_dh_h += *d * xhat[at(l)];
                            }
                            mean_dh /= len as f64;
                            mean_dh_h /= len as f64;
                            let is = inv_std[o * inner + i];
                            for (l, d) in dh.iter().enumerate() {
                                gx[at(l)] += is * (d - mean_dh - xhat[at(l)] * mean_dh_h);
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let d = self.shape(*table)[1];
                    let gt = self.buf(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.wants(p) {
                        let gp = self.buf(grads, p);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            let d = o * len * inner;
                            for (a, b) in gp[d..d + len * inner].iter_mut().zip(&g[s..s + len * inner]) {
                                *a += b;
                            }
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                if self.wants(x) {
                    let (outer, full, inner) = axis_extents(self.shape(x), axis);
                    let len = node.value.shape()[axis];
                    let gx = self.buf(grads, x);
                    for o in 0..outer {
                        let d = (o * full + start) * inner;
                        let s = o * len * inner;
                        for (a, b) in gx[d..d + len * inner].iter_mut().zip(&g[s..s + len * inner]) {
                            *a += b;
                        }
                    }
                }
            }
            &Op::Transpose { x, a1, a2 } => {
                if self.wants(x) {
                    let (pre, a, mid, b, post) = swap_extents(node.value.shape(), a1, a2);
                    let back = swap_axes(g, pre, a, mid, b, post);
                    for (o, v) in self.buf(grads, x).iter_mut().zip(&back) {
                        *o += v;
                    }
                }
            }
            &Op::Sum(x) => {
                if self.wants(x) {
                    for o in self.buf(grads, x).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            &Op::Mse(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let scale = 2.0 * g[0] / ad.len().max(1) as f64;
                if self.wants(a) {
                    for ((o, x), y) in self.buf(grads, a).iter_mut().zip(ad).zip(bd) {
                        *o += scale * (x - y);
                    }
                }
                if self.wants(b) {
                    for ((o, x), y) in self.buf(grads, b).iter_mut().zip(ad).zip(bd) {
                        *o -= scale * (x - y);
                    }
                }
            }
            Op::WeightedSse { pred, target, weights } => {
                if self.wants(*pred) {
                    let pd = self.value(*pred).data();
                    let gp = self.buf(grads, *pred);
                    for (i, o) in gp.iter_mut().enumerate() {
                        // masked entries carry weight 0 and contribute exactly 0
                        *o += 2.0 * g[0] * weights[i] * (pd[i] - target[i]);
                    }
                }
            }
            Op::MaskedMean { x, weights } => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let (n, d) = (s[1], s[2]);
                    let gx = self.buf(grads, *x);
                    for (bt, &w) in weights.iter().enumerate() {
                        if w != 0.0 {
                            let b = bt / n;
                            for (o, v) in gx[bt * d..(bt + 1) * d].iter_mut().zip(&g[b * d..(b + 1) * d]) {
                                *o += w * v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn dropout_is_identity_until_enabled() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1000], |i| i as f64));
        assert_eq!(tape.dropout(x).unwrap(), x);
        tape.enable_dropout(0.25, 3, 0);
        let y = tape.dropout(x).unwrap();
        let (xs, ys) = (tape.value(x).data(), tape.value(y).data());
        let zeros = ys.iter().filter(|v| **v == 0.0).count();
        assert!((200..300).contains(&zeros), "{zeros}");
        for (a, b) in xs.iter().zip(ys) {
            assert!(*b == 0.0 || (b - a / 0.75).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = Tensor::from_fn(&[3, 3], |i| i as f64 - 4.0);
        let i3 = tape.constant(Tensor::identity(3));
        let av = tape.constant(a.clone());
        let out = tape.matmul(i3, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[5.0; 4]));
        let y = tape.layer_norm(x, 0, None, None, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn mse_uses_mean_reduction() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 3.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 5.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn off_path_gradient_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn disconnected_loss_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).err(), Some(TensorError::DisconnectedGraph));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert_eq!(
            tape.scale(x, 10.0).err(),
            Some(TensorError::NonFiniteValue { op: "scale" })
        );
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(tape.add(a, b).is_ok());
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, c), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn transpose_swaps_middle_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = tape.transpose(x, 0, 2).unwrap();
        assert_eq!(tape.shape(y), &[4, 3, 2]);
        // y[k, j, i] == x[i, j, k]
        let yd = tape.value(y).data();
        assert_eq!(yd[(1 * 3 + 2) * 2 + 1], ((1 * 3 + 2) * 4 + 1) as f64);
    }

    #[test]
    fn embedding_rejects_bad_id() {
        let mut tape = Tape::new();
        let table = tape.param(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            tape.embedding(table, &[0, 3]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }
}
