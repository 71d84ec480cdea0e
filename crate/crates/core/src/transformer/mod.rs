//! Encoder blocks: multi-head attention, the standard post-norm encoder
//! block, the hybrid self/cross attention block and its mixing-weight
//! decomposition.
//!
//! Parameter structs are generic over the handle type: `ParamId` while a
//! layout lives in a [`ParamStore`], `Var` once bound onto a tape.

mod decomposition;

use rand::Rng;
use thiserror::Error;

use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub use decomposition::{verify_decomposition, DecompositionReport};

/// Additive logit bias applied to masked keys.
pub const MASK_BIAS: f64 = -1e9;
pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("every key is masked for batch item {batch_item}")]
    FullMask { batch_item: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TransformerError>;

/// Validity of each key position, `[batch, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyMask {
    batch: usize,
    len: usize,
    valid: Vec<bool>,
}

impl KeyMask {
    pub fn new(batch: usize, len: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * len {
            return Err(TransformerError::Config(format!(
                "mask of {} entries for {batch}x{len}",
                valid.len()
            )));
        }
        Ok(Self { batch, len, valid })
    }

    pub fn all_valid(batch: usize, len: usize) -> Self {
        Self {
            batch,
            len,
            valid: vec![true; batch * len],
        }
    }

    pub fn all_masked(batch: usize, len: usize) -> Self {
        Self {
            batch,
            len,
            valid: vec![false; batch * len],
        }
    }

    /// The first `lengths[b]` positions of row `b` are valid.
    pub fn from_lengths(len: usize, lengths: &[usize]) -> Self {
        let mut valid = Vec::with_capacity(lengths.len() * len);
        for &l in lengths {
            valid.extend((0..len).map(|i| i < l));
        }
        Self {
            batch: lengths.len(),
            len,
            valid,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_valid(&self, b: usize, i: usize) -> bool {
        self.valid[b * self.len + i]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Keys of `self` followed by keys of `other`, per batch row.
    pub fn concat(&self, other: &KeyMask) -> Result<KeyMask> {
        if self.batch != other.batch {
            return Err(TransformerError::Config(format!(
                "cannot join masks with batch {} and {}",
                self.batch, other.batch
            )));
        }
        let len = self.len + other.len;
        let mut valid = Vec::with_capacity(self.batch * len);
        for b in 0..self.batch {
            valid.extend_from_slice(&self.valid[b * self.len..(b + 1) * self.len]);
            valid.extend_from_slice(&other.valid[b * other.len..(b + 1) * other.len]);
        }
        Ok(KeyMask {
            batch: self.batch,
            len,
            valid,
        })
    }

    pub fn ensure_some_valid(&self) -> Result<()> {
        for b in 0..self.batch {
            if !self.valid[b * self.len..(b + 1) * self.len].iter().any(|v| *v) {
                return Err(TransformerError::FullMask { batch_item: b });
            }
        }
        Ok(())
    }

    pub fn bias(&self) -> Tensor {
        let data = self
            .valid
            .iter()
            .map(|&v| if v { 0.0 } else { MASK_BIAS })
            .collect();
        Tensor::new(vec![self.batch, self.len], data).expect("mask dims")
    }
}

/// Self-attention projections. `wo` is the optional output projection.
#[derive(Clone, Debug)]
pub struct AttentionParams<H = ParamId> {
    pub wq: H,
    pub wk: H,
    pub wv: H,
    pub wo: Option<H>,
    pub heads: usize,
}

/// Projections of the hybrid block: queries from text only, keys and values
/// from both streams, molecule projections mapping `d_m` into `d_t`.
#[derive(Clone, Debug)]
pub struct HybridAttentionParams<H = ParamId> {
    pub wq_t: H,
    pub wk_t: H,
    pub wv_t: H,
    pub wk_m: H,
    pub wv_m: H,
    pub wo: Option<H>,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct FfnParams<H = ParamId> {
    pub w1: H,
    pub b1: H,
    pub w2: H,
    pub b2: H,
}

#[derive(Clone, Debug)]
pub struct NormParams<H = ParamId> {
    pub gamma: H,
    pub beta: H,
}

#[derive(Clone, Debug)]
pub struct BlockParams<A, H = ParamId> {
    pub attn: A,
    pub ffn: FfnParams<H>,
    pub norm1: NormParams<H>,
    pub norm2: NormParams<H>,
}

pub type EncoderBlock<H = ParamId> = BlockParams<AttentionParams<H>, H>;
pub type HybridBlock<H = ParamId> = BlockParams<HybridAttentionParams<H>, H>;

/// How a block composes attention, FFN, residuals and normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// `h = LN(x + Attn(x)); out = LN(h + FFN(h))`.
    #[default]
    PostNorm,
    /// `out = LN(x + FFN(Attn(x)))`, a single residual around both sublayers.
    Literal,
}

fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TransformerError::Config(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

impl AttentionParams<ParamId> {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        with_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(Self {
            wq: store.normal(format!("{prefix}.wq"), &[d, d], INIT_STD, rng),
            wk: store.normal(format!("{prefix}.wk"), &[d, d], INIT_STD, rng),
            wv: store.normal(format!("{prefix}.wv"), &[d, d], INIT_STD, rng),
            wo: with_output.then(|| store.normal(format!("{prefix}.wo"), &[d, d], INIT_STD, rng)),
            heads,
        })
    }

    pub fn bind(&self, b: &Binding) -> AttentionParams<Var> {
        AttentionParams {
            wq: b.var(self.wq),
            wk: b.var(self.wk),
            wv: b.var(self.wv),
            wo: self.wo.map(|w| b.var(w)),
            heads: self.heads,
        }
    }
}

impl HybridAttentionParams<ParamId> {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_t: usize,
        d_m: usize,
        heads: usize,
        with_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(d_t, heads)?;
        Ok(Self {
            wq_t: store.normal(format!("{prefix}.wq_t"), &[d_t, d_t], INIT_STD, rng),
            wk_t: store.normal(format!("{prefix}.wk_t"), &[d_t, d_t], INIT_STD, rng),
            wv_t: store.normal(format!("{prefix}.wv_t"), &[d_t, d_t], INIT_STD, rng),
            wk_m: store.normal(format!("{prefix}.wk_m"), &[d_m, d_t], INIT_STD, rng),
            wv_m: store.normal(format!("{prefix}.wv_m"), &[d_m, d_t], INIT_STD, rng),
            wo: with_output.then(|| store.normal(format!("{prefix}.wo"), &[d_t, d_t], INIT_STD, rng)),
            heads,
        })
    }

    pub fn bind(&self, b: &Binding) -> HybridAttentionParams<Var> {
        HybridAttentionParams {
            wq_t: b.var(self.wq_t),
            wk_t: b.var(self.wk_t),
            wv_t: b.var(self.wv_t),
            wk_m: b.var(self.wk_m),
            wv_m: b.var(self.wv_m),
            wo: self.wo.map(|w| b.var(w)),
            heads: self.heads,
        }
    }
}

impl FfnParams<ParamId> {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: store.normal(format!("{prefix}.w1"), &[d, hidden], INIT_STD, rng),
            b1: store.zeros(format!("{prefix}.b1"), &[hidden]),
            w2: store.normal(format!("{prefix}.w2"), &[hidden, d], INIT_STD, rng),
            b2: store.zeros(format!("{prefix}.b2"), &[d]),
        }
    }

    pub fn bind(&self, b: &Binding) -> FfnParams<Var> {
        FfnParams {
            w1: b.var(self.w1),
            b1: b.var(self.b1),
            w2: b.var(self.w2),
            b2: b.var(self.b2),
        }
    }
}

impl NormParams<ParamId> {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gamma: store.ones(format!("{prefix}.gamma"), &[d]),
            beta: store.zeros(format!("{prefix}.beta"), &[d]),
        }
    }

    pub fn bind(&self, b: &Binding) -> NormParams<Var> {
        NormParams {
            gamma: b.var(self.gamma),
            beta: b.var(self.beta),
        }
    }
}

impl EncoderBlock<ParamId> {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        ffn_mult: usize,
        with_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: AttentionParams::init(store, &format!("{prefix}.attn"), d, heads, with_output, rng)?,
            ffn: FfnParams::init(store, &format!("{prefix}.ffn"), d, d * ffn_mult, rng),
            norm1: NormParams::init(store, &format!("{prefix}.norm1"), d),
            norm2: NormParams::init(store, &format!("{prefix}.norm2"), d),
        })
    }

    pub fn bind(&self, b: &Binding) -> EncoderBlock<Var> {
        BlockParams {
            attn: self.attn.bind(b),
            ffn: self.ffn.bind(b),
            norm1: self.norm1.bind(b),
            norm2: self.norm2.bind(b),
        }
    }
}

impl HybridBlock<ParamId> {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_t: usize,
        d_m: usize,
        heads: usize,
        ffn_mult: usize,
        with_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: HybridAttentionParams::init(store, &format!("{prefix}.attn"), d_t, d_m, heads, with_output, rng)?,
            ffn: FfnParams::init(store, &format!("{prefix}.ffn"), d_t, d_t * ffn_mult, rng),
            norm1: NormParams::init(store, &format!("{prefix}.norm1"), d_t),
            norm2: NormParams::init(store, &format!("{prefix}.norm2"), d_t),
        })
    }

    pub fn bind(&self, b: &Binding) -> HybridBlock<Var> {
        BlockParams {
            attn: self.attn.bind(b),
            ffn: self.ffn.bind(b),
            norm1: self.norm1.bind(b),
            norm2: self.norm2.bind(b),
        }
    }
}

/// Result of an attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[bs, n_q, d]` after head merge and the optional output projection.
    pub out: Var,
    /// Merged head contexts before the output projection, `[bs, n_q, d]`.
    pub context: Var,
    /// Attention probabilities, `[bs * h, n_q, n_k]`.
    pub probs: Var,
}

fn dims3(tape: &Tape, x: Var, what: &str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [b, n, d] => Ok((b, n, d)),
        ref s => Err(TransformerError::Tensor(TensorError::ShapeMismatch {
            op: "transformer",
            detail: format!("{what} must be [bs, n, d], got {s:?}"),
        })),
    }
}

/// `[bs, n, d] -> [bs * h, n, d / h]`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let (b, n, d) = dims3(tape, x, "split_heads input")?;
    let dh = check_heads(d, heads)?;
    let r = tape.reshape(x, &[b, n, heads, dh])?;
    let t = tape.transpose(r, 1, 2)?;
    Ok(tape.reshape(t, &[b * heads, n, dh])?)
}

/// `[bs * h, n, d / h] -> [bs, n, d]`.
fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let (_, n, dh) = dims3(tape, x, "merge_heads input")?;
    let r = tape.reshape(x, &[batch, heads, n, dh])?;
    let t = tape.transpose(r, 1, 2)?;
    Ok(tape.reshape(t, &[batch, n, heads * dh])?)
}

/// Scaled dot-product attention on head-split operands `[g, n, d_k]` with
/// `g = bs * heads`. Returns `(context [g, n_q, d_k], probs [g, n_q, n_k])`.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &KeyMask, heads: usize) -> Result<(Var, Var)> {
    mask.ensure_some_valid()?;
    let dk = tape.shape(q)[2];
    let scores = tape.matmul_nt(q, k, 1.0 / (dk as f64).sqrt())?;
    let biased = tape.add_key_bias(scores, &mask.bias(), heads)?;
    let probs = tape.softmax(biased, 2)?;
    let dropped = tape.dropout(probs)?;
    let ctx = tape.matmul(dropped, v)?;
    Ok((ctx, probs))
}

/// `softmax(Q K^T / sqrt(d_k) + mask_bias) V` for `Q: [bs, h, n_q, d_k]`,
/// `K, V: [bs, h, n_k, d_k]`. Returns the `[bs, h, n_q, d_k]` context and
/// the `[bs * h, n_q, n_k]` probabilities.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &KeyMask) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let ok = sq.len() == 4
        && sk.len() == 4
        && sk == sv
        && sq[0] == sk[0]
        && sq[1] == sk[1]
        && sq[3] == sk[3]
        && mask.batch() == sq[0]
        && mask.len() == sk[2];
    if !ok {
        return Err(TransformerError::Tensor(TensorError::ShapeMismatch {
            op: "attention",
            detail: format!("q {sq:?}, k {sk:?}, v {sv:?}, mask {}x{}", mask.batch(), mask.len()),
        }));
    }
    let (b, h, nq, dk) = (sq[0], sq[1], sq[2], sq[3]);
    let nk = sk[2];
    let q3 = tape.reshape(q, &[b * h, nq, dk])?;
    let k3 = tape.reshape(k, &[b * h, nk, dk])?;
    let v3 = tape.reshape(v, &[b * h, nk, dk])?;
    let (ctx, probs) = attend(tape, q3, k3, v3, mask, h)?;
    let ctx4 = tape.reshape(ctx, &[b, h, nq, dk])?;
    Ok((ctx4, probs))
}

fn project_out(tape: &mut Tape, context: Var, wo: Option<Var>) -> Result<Var> {
    Ok(match wo {
        Some(w) => tape.matmul(context, w)?,
        None => context,
    })
}

/// Multi-head self-attention over `x: [bs, n, d]`.
pub fn mha(tape: &mut Tape, x: Var, p: &AttentionParams<Var>, mask: &KeyMask) -> Result<AttentionOutput> {
    let (b, n, _) = dims3(tape, x, "mha input")?;
    if mask.batch() != b || mask.len() != n {
        return Err(TransformerError::Config(format!(
            "mask {}x{} for input {b}x{n}",
            mask.batch(),
            mask.len()
        )));
    }
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    let q = split_heads(tape, q, p.heads)?;
    let k = split_heads(tape, k, p.heads)?;
    let v = split_heads(tape, v, p.heads)?;
    let (ctx, probs) = attend(tape, q, k, v, mask, p.heads)?;
    let context = merge_heads(tape, ctx, b, p.heads)?;
    let out = project_out(tape, context, p.wo)?;
    Ok(AttentionOutput { out, context, probs })
}

/// Hybrid attention: text queries attend jointly over the sequence-axis
/// concatenation of projected text keys/values and projected molecule
/// keys/values. The output has the text length.
pub fn mha_star(
    tape: &mut Tape,
    x_t: Var,
    x_m: Var,
    p: &HybridAttentionParams<Var>,
    text_mask: &KeyMask,
    mol_mask: &KeyMask,
) -> Result<AttentionOutput> {
    let (b, n_t, _) = dims3(tape, x_t, "text input")?;
    let (bm, n_m, _) = dims3(tape, x_m, "molecule input")?;
    if bm != b || text_mask.batch() != b || mol_mask.batch() != b || text_mask.len() != n_t || mol_mask.len() != n_m {
        return Err(TransformerError::Config(format!(
            "text {b}x{n_t} / molecule {bm}x{n_m} vs masks {}x{} / {}x{}",
            text_mask.batch(),
            text_mask.len(),
            mol_mask.batch(),
            mol_mask.len()
        )));
    }
    let q = tape.matmul(x_t, p.wq_t)?;
    let kt = tape.matmul(x_t, p.wk_t)?;
    let vt = tape.matmul(x_t, p.wv_t)?;
    let km = tape.matmul(x_m, p.wk_m)?;
    let vm = tape.matmul(x_m, p.wv_m)?;
    let k = tape.concat(&[kt, km], 1)?;
    let v = tape.concat(&[vt, vm], 1)?;
    let q = split_heads(tape, q, p.heads)?;
    let k = split_heads(tape, k, p.heads)?;
    let v = split_heads(tape, v, p.heads)?;
    let joint = text_mask.concat(mol_mask)?;
    let (ctx, probs) = attend(tape, q, k, v, &joint, p.heads)?;
    let context = merge_heads(tape, ctx, b, p.heads)?;
    let out = project_out(tape, context, p.wo)?;
    Ok(AttentionOutput { out, context, probs })
}

/// `ReLU(x W1 + b1) W2 + b2`.
pub fn ffn(tape: &mut Tape, x: Var, p: &FfnParams<Var>) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_bias(h, p.b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, p.w2)?;
    Ok(tape.add_bias(o, p.b2)?)
}

fn norm(tape: &mut Tape, x: Var, p: &NormParams<Var>) -> Result<Var> {
    let axis = tape.shape(x).len() - 1;
    Ok(tape.layer_norm(x, axis, Some(p.gamma), Some(p.beta), LN_EPS)?)
}

/// Output of a block together with its attention probabilities.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub probs: Var,
}

fn finish_block<A>(
    tape: &mut Tape,
    x: Var,
    attn_out: Var,
    p: &BlockParams<A, Var>,
    wiring: Wiring,
) -> Result<Var> {
    match wiring {
        Wiring::PostNorm => {
            let attn_out = tape.dropout(attn_out)?;
            let r1 = tape.add(x, attn_out)?;
            let h = norm(tape, r1, &p.norm1)?;
            let f = ffn(tape, h, &p.ffn)?;
            let f = tape.dropout(f)?;
            let r2 = tape.add(h, f)?;
            norm(tape, r2, &p.norm2)
        }
        Wiring::Literal => {
            let f = ffn(tape, attn_out, &p.ffn)?;
            let f = tape.dropout(f)?;
            let r = tape.add(x, f)?;
            norm(tape, r, &p.norm1)
        }
    }
}

/// Transformer encoder block over `x: [bs, n, d]`.
pub fn teb(tape: &mut Tape, x: Var, p: &EncoderBlock<Var>, mask: &KeyMask, wiring: Wiring) -> Result<BlockOutput> {
    let a = mha(tape, x, &p.attn, mask)?;
    let out = finish_block(tape, x, a.out, p, wiring)?;
    Ok(BlockOutput { out, probs: a.probs })
}

/// Multimodal text block: [`teb`] with [`mha_star`] in place of [`mha`].
/// The molecule states are read-only context.
pub fn mt_block(
    tape: &mut Tape,
    x_t: Var,
    x_m: Var,
    p: &HybridBlock<Var>,
    text_mask: &KeyMask,
    mol_mask: &KeyMask,
    wiring: Wiring,
) -> Result<BlockOutput> {
    let a = mha_star(tape, x_t, x_m, &p.attn, text_mask, mol_mask)?;
    let out = finish_block(tape, x_t, a.out, p, wiring)?;
    Ok(BlockOutput { out, probs: a.probs })
}
