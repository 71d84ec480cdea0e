//! Hybrid attention as a convex mix of self- and cross-attention.
//!
//! For one head and one text query, softmax over the joint key set splits
//! into the text-key mass `1 - lambda` and the molecule-key mass `lambda`.
//! Renormalizing within each subset gives pure self-attention and pure
//! cross-attention, so `hybrid = (1 - lambda) * self + lambda * cross`
//! holds exactly, with `lambda` read off the joint softmax.

use super::{mha_star, HybridAttentionParams, KeyMask, Result, TransformerError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct DecompositionReport {
    /// Molecule-key probability mass, `[bs, h, n_t]`.
    pub lambda: Tensor,
    /// Pure text-key attention context, `[bs, h, n_t, d_k]`.
    pub self_out: Tensor,
    /// Pure molecule-key attention context (zeros where every molecule key
    /// is masked), `[bs, h, n_t, d_k]`.
    pub cross_out: Tensor,
    /// Context produced by the hybrid block itself, `[bs, h, n_t, d_k]`.
    pub hybrid_out: Tensor,
    /// `max |hybrid - ((1 - lambda) * self + lambda * cross)|`.
    pub max_residual: f64,
}

fn project(x: &Tensor, w: &Tensor) -> Vec<f64> {
    let (rows, k) = (x.numel() / w.shape()[0], w.shape()[0]);
    let n = w.shape()[1];
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for p in 0..k {
            let a = xd[r * k + p];
            for c in 0..n {
                out[r * n + c] += a * wd[p * n + c];
            }
        }
    }
    out
}

/// Softmax over the valid entries of `logits`; masked entries get 0.
fn masked_softmax(logits: &[f64], valid: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .zip(valid)
        .map(|(l, v)| if *v { (l - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Joint-softmax mass on keys from `split` on, as `S_m / (S_t + S_m)` over
/// unnormalized exponentials. Rounding is monotone, so the ratio never
/// leaves [0, 1]; summing normalized probabilities can overshoot 1 by an
/// ulp.
fn molecule_mass(logits: &[f64], valid: &[bool], split: usize) -> f64 {
    let max = logits
        .iter()
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let e = |r: std::ops::Range<usize>| -> f64 {
        // Folding from +0 keeps an all-masked side at +0 (an empty float
        // sum is -0).
        r.filter(|&j| valid[j]).map(|j| (logits[j] - max).exp()).fold(0.0, |a, x| a + x)
    };
    let (s_t, s_m) = (e(0..split), e(split..logits.len()));
    s_m / (s_t + s_m)
}

/// Runs the hybrid block and measures the residual of the mixing identity.
///
/// The block's own context output is compared against self- and
/// cross-attention recomputed directly from the projections.
pub fn verify_decomposition(
    x_t: &Tensor,
    x_m: &Tensor,
    store: &ParamStore,
    params: &HybridAttentionParams<ParamId>,
    text_mask: &KeyMask,
    mol_mask: &KeyMask,
) -> Result<DecompositionReport> {
    text_mask.ensure_some_valid()?;

    let mut tape = Tape::new();
    let binding = store.bind(&mut tape, |_| false);
    let p = params.bind(&binding);
    let xt = tape.constant(x_t.clone());
    let xm = tape.constant(x_m.clone());
    let hybrid = mha_star(&mut tape, xt, xm, &p, text_mask, mol_mask)?;
    let merged = tape.value(hybrid.context).clone();

    let (b, n_t, d) = (x_t.shape()[0], x_t.shape()[1], x_t.shape()[2]);
    let n_m = x_m.shape()[1];
    let h = params.heads;
    let dk = d / h;
    let q = project(x_t, store.get(params.wq_t));
    let kt = project(x_t, store.get(params.wk_t));
    let vt = project(x_t, store.get(params.wv_t));
    let km = project(x_m, store.get(params.wk_m));
    let vm = project(x_m, store.get(params.wv_m));
    let scale = 1.0 / (dk as f64).sqrt();

    let mut lambda = vec![0.0; b * h * n_t];
    let mut self_out = vec![0.0; b * h * n_t * dk];
    let mut cross_out = vec![0.0; b * h * n_t * dk];
    let mut hybrid_out = vec![0.0; b * h * n_t * dk];
    let mut max_residual: f64 = 0.0;

    for bi in 0..b {
        let tv: Vec<bool> = (0..n_t).map(|j| text_mask.is_valid(bi, j)).collect();
        let mv: Vec<bool> = (0..n_m).map(|j| mol_mask.is_valid(bi, j)).collect();
        let any_mol = mv.iter().any(|v| *v);
        let joint_valid: Vec<bool> = tv.iter().chain(&mv).copied().collect();
        for hi in 0..h {
            let col = hi * dk;
            for i in 0..n_t {
                let qi = &q[(bi * n_t + i) * d + col..(bi * n_t + i) * d + col + dk];
                let dot = |keys: &[f64], row: usize| -> f64 {
                    qi.iter().zip(&keys[row * d + col..row * d + col + dk]).map(|(a, b)| a * b).sum::<f64>() * scale
                };
                let lt: Vec<f64> = (0..n_t).map(|j| dot(&kt, bi * n_t + j)).collect();
                let lm: Vec<f64> = (0..n_m).map(|j| dot(&km, bi * n_m + j)).collect();
                let joint_logits: Vec<f64> = lt.iter().chain(&lm).copied().collect();
                let ps = masked_softmax(&lt, &tv);
                let lam = molecule_mass(&joint_logits, &joint_valid, n_t);
                let pc = if any_mol { masked_softmax(&lm, &mv) } else { vec![0.0; n_m] };

                let at = ((bi * h + hi) * n_t + i) * dk;
                lambda[(bi * h + hi) * n_t + i] = lam;
                for c in 0..dk {
                    let s: f64 = (0..n_t).map(|j| ps[j] * vt[(bi * n_t + j) * d + col + c]).sum();
                    let x: f64 = (0..n_m).map(|j| pc[j] * vm[(bi * n_m + j) * d + col + c]).sum();
                    let hyb = merged.data()[(bi * n_t + i) * d + col + c];
                    self_out[at + c] = s;
                    cross_out[at + c] = x;
                    hybrid_out[at + c] = hyb;
                    max_residual = max_residual.max((hyb - ((1.0 - lam) * s + lam * x)).abs());
                }
            }
        }
    }

    let shape4 = vec![b, h, n_t, dk];
    let mk = |v: Vec<f64>, s: Vec<usize>| Tensor::new(s, v).map_err(TransformerError::from);
    Ok(DecompositionReport {
        lambda: mk(lambda, vec![b, h, n_t])?,
        self_out: mk(self_out, shape4.clone())?,
        cross_out: mk(cross_out, shape4.clone())?,
        hybrid_out: mk(hybrid_out, shape4)?,
        max_residual,
    })
}
