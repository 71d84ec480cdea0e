//! Exhaustive numeric checks shared by the `selfcheck` command and the
//! acceptance tests: the hybrid-attention mixing identity, gradient
//! checks, metric oracles, the masked loss and canonicalization under
//! atom renumbering.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::chem::{canonicalize, parse_smiles};
use crate::descriptors::compute_all;
use crate::eval::{average_precision, delta_ap, normalized_rmse, roc_auc, EvalError};
use crate::model::{mtr_loss, toy_gradient_check};
use crate::params::{Binding, ParamStore};
use crate::tensor::{grad_check_report, GradCheckReport, Tape, Tensor, TensorError, Var};
use crate::transformer::{
    mha_star, mt_block, teb, verify_decomposition, EncoderBlock, HybridAttentionParams, HybridBlock, KeyMask, Wiring,
};

/// Relative-error bound of every gradient check.
pub const GRAD_TOL: f64 = 1e-4;
/// Finite-difference step.
pub const GRAD_EPS: f64 = 1e-5;
/// Bound on the mixing-identity residual.
pub const DECOMPOSITION_TOL: f64 = 1e-10;

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Redraws every parameter: gains around 1, everything else N(0, std^2).
fn randomize(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let gain = store.name(id).ends_with("gamma");
        for v in store.get_mut(id).data_mut() {
            *v = if gain { 1.0 } else { 0.0 } + std * gaussian(rng);
        }
    }
}

/// Random key mask with at least `min_valid` valid keys per row.
fn random_mask(batch: usize, len: usize, min_valid: usize, rng: &mut ChaCha8Rng) -> KeyMask {
    let lens: Vec<usize> = (0..batch).map(|_| rng.gen_range(min_valid..=len)).collect();
    KeyMask::from_lengths(len, &lens)
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct DecompositionSweep {
    pub configs: usize,
    pub max_residual: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Largest lambda seen with every molecule key masked.
    pub masked_lambda_max: f64,
}

/// Random hybrid-attention configurations (sizes, parameters, inputs and
/// masks), each also rerun with the molecule fully masked.
pub fn decomposition_sweep(configs: usize, seed: u64) -> Result<DecompositionSweep, crate::transformer::TransformerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DecompositionSweep {
        configs,
        lambda_min: f64::INFINITY,
        lambda_max: f64::NEG_INFINITY,
        ..Default::default()
    };
    for _ in 0..configs {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d_t = heads * rng.gen_range(1..=4);
        let d_m = rng.gen_range(2..=9);
        let (bs, n_t, n_m) = (rng.gen_range(1..=3), rng.gen_range(1..=7), rng.gen_range(1..=7));
        let mut store = ParamStore::new();
        let with_output = rng.gen_bool(0.5);
        let params = HybridAttentionParams::init(&mut store, "h", d_t, d_m, heads, with_output, &mut rng)?;
        let std = rng.gen_range(0.1..1.5);
        randomize(&mut store, std, &mut rng);
        let x_t = normal(&[bs, n_t, d_t], 1.0, &mut rng);
        let x_m = normal(&[bs, n_m, d_m], 1.0, &mut rng);
        let text_mask = random_mask(bs, n_t, 1, &mut rng);
        let mol_mask = random_mask(bs, n_m, 0, &mut rng);
        let r = verify_decomposition(&x_t, &x_m, &store, &params, &text_mask, &mol_mask)?;
        out.max_residual = out.max_residual.max(r.max_residual);
        for &l in r.lambda.data() {
            out.lambda_min = out.lambda_min.min(l);
            out.lambda_max = out.lambda_max.max(l);
        }
        let hidden = KeyMask::all_masked(bs, n_m);
        let r = verify_decomposition(&x_t, &x_m, &store, &params, &text_mask, &hidden)?;
        out.max_residual = out.max_residual.max(r.max_residual);
        for &l in r.lambda.data() {
            out.masked_lambda_max = out.masked_lambda_max.max(l);
        }
    }
    Ok(out)
}

impl DecompositionSweep {
    pub fn passed(&self) -> bool {
        self.max_residual < DECOMPOSITION_TOL
            && self.lambda_min >= 0.0
            && self.lambda_max <= 1.0
            && self.masked_lambda_max == 0.0
    }
}

/// `sum(op(inputs) * R)` with a fixed random `R`, so every output element
/// carries a distinct weight into the scalar being differentiated.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> crate::tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let r = tape.constant(normal(tape.shape(y), 1.0, &mut rng));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

/// Entries pushed at least `gap` away from zero, so kinks (ReLU) are not
/// straddled by the difference quotient.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = gaussian(rng);
        v.signum() * (v.abs() + gap)
    })
}

type PrimitiveCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> crate::tensor::Result<Var>>);

fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = |shape: &[usize]| normal(shape, 1.0, &mut rng);
    let key_bias = Tensor::from_fn(&[2, 5], |i| [0.0, -0.7, 1.3, 0.0, -1e9][i % 5]);
    let ids = vec![0, 3, 5, 3, 1, 0];
    let mask = vec![true, true, false, true, false, false];
    let target = n(&[3, 4]);
    let weights = Tensor::from_fn(&[3, 4], |i| [0.0, 0.5, 1.0, 2.0][i % 4]);
    let gamma_beta = (n(&[4]), n(&[4]));
    let mut cases: Vec<PrimitiveCase> = vec![
        ("matmul", vec![n(&[3, 4]), n(&[4, 5])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_batched", vec![n(&[2, 3, 4]), n(&[2, 4, 3])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", vec![n(&[2, 3, 4]), n(&[2, 5, 4])], Box::new(|t, v| t.matmul_nt(v[0], v[1], 0.7))),
        ("add", vec![n(&[3, 4]), n(&[3, 4])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![n(&[3, 4]), n(&[3, 4])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_bias", vec![n(&[2, 3, 4]), n(&[4])], Box::new(|t, v| t.add_bias(v[0], v[1]))),
        (
            "add_key_bias",
            vec![n(&[4, 3, 5])],
            Box::new(move |t, v| {
                let x = t.add_key_bias(v[0], &key_bias, 2)?;
                t.softmax(x, 2)
            }),
        ),
        ("scale", vec![n(&[3, 4])], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("gelu", vec![n(&[3, 4])], Box::new(|t, v| t.gelu(v[0]))),
        ("softmax_last", vec![n(&[2, 3, 4])], Box::new(|t, v| t.softmax(v[0], 2))),
        ("softmax_middle", vec![n(&[2, 3, 4])], Box::new(|t, v| t.softmax(v[0], 1))),
        (
            "layer_norm",
            vec![n(&[2, 3, 4]), gamma_beta.0, gamma_beta.1],
            Box::new(|t, v| t.layer_norm(v[0], 2, Some(v[1]), Some(v[2]), 1e-12)),
        ),
        ("layer_norm_plain", vec![n(&[3, 5])], Box::new(|t, v| t.layer_norm(v[0], 1, None, None, 1e-12))),
        ("embedding", vec![n(&[6, 4])], Box::new(move |t, v| t.embedding(v[0], &ids))),
        ("concat", vec![n(&[2, 3, 4]), n(&[2, 2, 4])], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("slice", vec![n(&[2, 5, 3])], Box::new(|t, v| t.slice(v[0], 1, 1, 3))),
        ("transpose", vec![n(&[2, 3, 4, 2])], Box::new(|t, v| t.transpose(v[0], 1, 2))),
        ("reshape", vec![n(&[2, 3, 4])], Box::new(|t, v| t.reshape(v[0], &[6, 4]))),
        ("mse", vec![n(&[3, 4]), n(&[3, 4])], Box::new(|t, v| t.mse(v[0], v[1]))),
        (
            "weighted_sse",
            vec![n(&[3, 4])],
            Box::new(move |t, v| t.weighted_sse(v[0], &target, &weights)),
        ),
        ("masked_mean", vec![n(&[2, 3, 4])], Box::new(move |t, v| t.masked_mean(v[0], &mask))),
    ];
    cases.push(("relu", vec![away_from_zero(&[3, 4], 0.05, &mut rng)], Box::new(|t, v| t.relu(v[0]))));
    cases.push(("sum", vec![normal(&[3, 4], 1.0, &mut rng)], Box::new(|t, v| t.sum(v[0]))));
    cases
}

/// Gradient check of every tape primitive at one seed.
pub fn primitive_gradient_checks(seed: u64) -> crate::tensor::Result<Vec<(&'static str, GradCheckReport)>> {
    primitive_cases(seed)
        .into_iter()
        .map(|(name, inputs, op)| {
            let r = grad_check_report(
                |tape, vars| {
                    let y = op(tape, vars)?;
                    if tape.shape(y).is_empty() {
                        Ok(y)
                    } else {
                        weighted_sum(tape, y, seed)
                    }
                },
                &inputs,
                GRAD_EPS,
            )?;
            Ok((name, r))
        })
        .collect()
}

/// Gradient check of a transformer encoder block with respect to its
/// input and every parameter, with padded keys.
pub fn teb_gradient_check(seed: u64) -> Result<GradCheckReport, crate::transformer::TransformerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = EncoderBlock::init(&mut store, "teb", 4, 2, 2, true, &mut rng)?;
    randomize(&mut store, 0.4, &mut rng);
    let x = normal(&[2, 3, 4], 1.0, &mut rng);
    let mask = KeyMask::from_lengths(3, &[3, 2]);
    let mut inputs = vec![x];
    inputs.extend(store.ids().map(|id| store.get(id).clone()));
    let r = grad_check_report(
        |tape, vars| {
            let b = Binding::from_vars(vars[1..].to_vec());
            let o = teb(tape, vars[0], &block.bind(&b), &mask, Wiring::PostNorm).map_err(to_tensor_err)?;
            weighted_sum(tape, o.out, seed)
        },
        &inputs,
        GRAD_EPS,
    )?;
    Ok(r)
}

/// Gradient check of the hybrid attention layer and of the full
/// multimodal block, with respect to both streams and every parameter.
pub fn mha_star_gradient_check(seed: u64) -> Result<GradCheckReport, crate::transformer::TransformerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = HybridBlock::init(&mut store, "mt", 4, 3, 2, 2, true, &mut rng)?;
    randomize(&mut store, 0.4, &mut rng);
    let x_t = normal(&[2, 3, 4], 1.0, &mut rng);
    let x_m = normal(&[2, 4, 3], 1.0, &mut rng);
    let text_mask = KeyMask::from_lengths(3, &[3, 2]);
    let mol_mask = KeyMask::from_lengths(4, &[2, 4]);
    let mut inputs = vec![x_t, x_m];
    inputs.extend(store.ids().map(|id| store.get(id).clone()));
    let attn = grad_check_report(
        |tape, vars| {
            let b = Binding::from_vars(vars[2..].to_vec());
            let p = block.bind(&b);
            let o = mha_star(tape, vars[0], vars[1], &p.attn, &text_mask, &mol_mask).map_err(to_tensor_err)?;
            weighted_sum(tape, o.out, seed)
        },
        &inputs,
        GRAD_EPS,
    )?;
    let full = grad_check_report(
        |tape, vars| {
            let b = Binding::from_vars(vars[2..].to_vec());
            let o = mt_block(tape, vars[0], vars[1], &block.bind(&b), &text_mask, &mol_mask, Wiring::PostNorm)
                .map_err(to_tensor_err)?;
            weighted_sum(tape, o.out, seed)
        },
        &inputs,
        GRAD_EPS,
    )?;
    Ok(if attn.max_rel >= full.max_rel { attn } else { full })
}

fn to_tensor_err(e: crate::transformer::TransformerError) -> TensorError {
    match e {
        crate::transformer::TransformerError::Tensor(t) => t,
        other => TensorError::ShapeMismatch {
            op: "transformer",
            detail: other.to_string(),
        },
    }
}

/// Largest relative error of every gradient check over `seeds`, by check
/// name (primitives individually, then TEB, MHA* and the toy model).
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<(String, f64)>, String> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, v: f64| match worst.iter_mut().find(|(n, _)| n == name) {
        Some(e) => e.1 = e.1.max(v),
        None => worst.push((name.to_string(), v)),
    };
    for &seed in seeds {
        for (name, r) in primitive_gradient_checks(seed).map_err(|e| e.to_string())? {
            record(name, r.max_rel);
        }
        record("teb", teb_gradient_check(seed).map_err(|e| e.to_string())?.max_rel);
        record("mha_star", mha_star_gradient_check(seed).map_err(|e| e.to_string())?.max_rel);
        record("toy_model", toy_gradient_check(seed, GRAD_EPS).map_err(|e| e.to_string())?.max_rel);
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct LossCheck {
    pub hand_example: f64,
    pub batches: usize,
    /// Largest |gradient| at a masked-out position.
    pub max_masked_grad: f64,
    /// Smallest |gradient| at a masked-in position with nonzero error.
    pub min_unmasked_grad: f64,
}

/// The masked loss on the hand example, then `batches` random batches
/// checking that masked positions receive exactly zero gradient.
pub fn loss_check(batches: usize, seed: u64) -> Result<LossCheck, crate::model::ModelError> {
    let mut tape = Tape::new();
    let pred = tape.param(Tensor::new(vec![1, 2], vec![0.0, 0.0])?);
    let y = Tensor::new(vec![1, 2], vec![1.0, 3.0])?;
    let m = Tensor::new(vec![1, 2], vec![1.0, 0.0])?;
    let (loss, _) = mtr_loss(&mut tape, pred, &y, &m)?;
    let mut out = LossCheck {
        hand_example: tape.value(loss).item(),
        batches,
        max_masked_grad: 0.0,
        min_unmasked_grad: f64::INFINITY,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..batches {
        let (bs, n) = (rng.gen_range(1..=8), rng.gen_range(1..=24));
        let mut mask = Tensor::from_fn(&[bs, n], |_| f64::from(u8::from(rng.gen_bool(0.4))));
        for r in 0..bs {
            // Every record keeps at least one label.
            let c = rng.gen_range(0..n);
            mask.data_mut()[r * n + c] = 1.0;
        }
        let mut tape = Tape::new();
        let pred = tape.param(normal(&[bs, n], 1.0, &mut rng));
        let y = normal(&[bs, n], 2.0, &mut rng);
        let (loss, _) = mtr_loss(&mut tape, pred, &y, &mask)?;
        let g = tape.backward(loss)?.wrt(pred);
        for (gv, mv) in g.data().iter().zip(mask.data()) {
            if *mv == 0.0 {
                out.max_masked_grad = out.max_masked_grad.max(gv.abs());
            } else {
                out.min_unmasked_grad = out.min_unmasked_grad.min(gv.abs());
            }
        }
    }
    Ok(out)
}

/// Probability that a positive outscores a negative, by counting pairs.
pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Sum over thresholds t (each distinct score, descending) of
/// `precision(s >= t) * (recall(s >= t) - previous recall)`.
pub fn brute_force_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let total = labels.iter().filter(|l| **l).count();
    if total == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let predicted: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = predicted.iter().filter(|&&i| labels[i]).count();
        let precision = tp as f64 / predicted.len() as f64;
        let recall = tp as f64 / total as f64;
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    Some(ap)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricOracleCheck {
    pub cases: usize,
    pub max_auc_error: f64,
    pub max_ap_error: f64,
    /// Cases where one side errored and the other did not.
    pub disagreements: usize,
    /// `delta_ap(perfect scorer) - (1 - mean base rate)` over random
    /// multi-class problems, largest absolute value.
    pub max_delta_ap_error: f64,
    pub normalized: Vec<f64>,
}

/// Random score/label configurations of size 1 to 12 with heavy ties,
/// compared against the brute-force definitions.
pub fn metric_oracle_check(cases: usize, seed: u64) -> MetricOracleCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MetricOracleCheck {
        cases,
        ..Default::default()
    };
    for _ in 0..cases {
        let n = rng.gen_range(1..=12);
        let levels = rng.gen_range(1..=n + 1);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let lf: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
        let mask = vec![true; n];
        match (roc_auc(&scores, &lf, &mask), brute_force_auc(&scores, &labels)) {
            (Ok(a), Some(b)) => out.max_auc_error = out.max_auc_error.max((a - b).abs()),
            (Err(EvalError::DegenerateLabels), None) => {}
            _ => out.disagreements += 1,
        }
        match (average_precision(&scores, &lf, &mask), brute_force_ap(&scores, &labels)) {
            (Ok(a), Some(b)) => out.max_ap_error = out.max_ap_error.max((a - b).abs()),
            (Err(EvalError::NoPositives), None) => {}
            _ => out.disagreements += 1,
        }
    }
    for _ in 0..200 {
        let classes = rng.gen_range(1..=5);
        let n = rng.gen_range(2..=30);
        let mut labels = Vec::new();
        let mut masks = Vec::new();
        let mut rates = Vec::new();
        for _ in 0..classes {
            let mut l: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.3)))).collect();
            l[rng.gen_range(0..n)] = 1.0;
            let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
            let first_pos = l.iter().position(|v| *v == 1.0).expect("one positive");
            m[first_pos] = true;
            let (pos, cnt) = l.iter().zip(&m).filter(|(_, m)| **m).fold((0.0, 0.0), |a, (v, _)| (a.0 + v, a.1 + 1.0));
            rates.push(pos / cnt);
            labels.push(l);
            masks.push(m);
        }
        let got = delta_ap(&labels, &labels, &masks).expect("every class has a positive");
        let want = 1.0 - rates.iter().sum::<f64>() / rates.len() as f64;
        out.max_delta_ap_error = out.max_delta_ap_error.max((got - want).abs());
    }
    out.normalized = normalized_rmse(&[1.0, 2.0, 3.0]).expect("three values");
    out
}

impl MetricOracleCheck {
    pub fn passed(&self) -> bool {
        let expected = [-1.2247, 0.0, 1.2247];
        self.max_auc_error < 1e-12
            && self.max_ap_error < 1e-12
            && self.disagreements == 0
            && self.max_delta_ap_error < 1e-12
            && self.normalized.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-4)
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CanonicalCheck {
    pub molecules: usize,
    pub permutations: usize,
    pub failures: Vec<String>,
}

/// Renumbers each molecule's atoms `permutations` times and requires the
/// same canonical string and bit-identical descriptor vector.
pub fn canonicalization_check(molecules: &[String], permutations: usize, seed: u64) -> CanonicalCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CanonicalCheck {
        molecules: molecules.len(),
        permutations,
        failures: Vec::new(),
    };
    for s in molecules {
        let g = match parse_smiles(s) {
            Ok(g) => g,
            Err(e) => {
                out.failures.push(format!("{s}: {e}"));
                continue;
            }
        };
        let want = canonicalize(&g);
        let want_d = compute_all(&g);
        let mut perm: Vec<usize> = (0..g.num_atoms()).collect();
        for _ in 0..permutations {
            perm.shuffle(&mut rng);
            let p = g.permuted(&perm);
            let got = canonicalize(&p);
            if got != want {
                out.failures.push(format!("{s}: {got} != {want}"));
                break;
            }
            let got_d = compute_all(&p);
            if got_d.as_ref().map(|d| &d.values) != want_d.as_ref().map(|d| &d.values) {
                out.failures.push(format!("{s}: descriptors differ under renumbering"));
                break;
            }
        }
    }
    out
}

/// One row of the self-check table.
#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> (bool, String)) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f();
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// The bundled canonicalization test set.
pub fn bundled_test_molecules() -> Vec<String> {
    include_str!("../data/canon_test_set.smi")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// Every check at its full size: 100 decomposition configurations, 10
/// gradient seeds, 10,000 metric cases, 50 loss batches and 50
/// renumberings of the bundled molecules.
pub fn run_all() -> Vec<CheckOutcome> {
    let mut rows = vec![timed("hybrid attention mixing identity", || match decomposition_sweep(100, 0) {
        Ok(s) => (
            s.passed(),
            format!(
                "max residual {:.2e}, lambda in [{:.3}, {:.3}], masked lambda max {}",
                s.max_residual, s.lambda_min, s.lambda_max, s.masked_lambda_max
            ),
        ),
        Err(e) => (false, e.to_string()),
    })];
    let seeds: Vec<u64> = (0..10).collect();
    rows.push(timed("gradient checks", || match gradient_suite(&seeds) {
        Ok(v) => {
            let (name, worst) = v.iter().fold(("", 0.0), |a, (n, e)| if *e > a.1 { (n.as_str(), *e) } else { a });
            (worst < GRAD_TOL, format!("{} checks, worst {worst:.2e} ({name})", v.len()))
        }
        Err(e) => (false, e),
    }));
    rows.push(timed("masked loss", || match loss_check(50, 0) {
        Ok(l) => (
            l.hand_example == 1.0 && l.max_masked_grad == 0.0,
            format!("hand example {}, max masked gradient {}", l.hand_example, l.max_masked_grad),
        ),
        Err(e) => (false, e.to_string()),
    }));
    rows.push(timed("metric oracles", || {
        let m = metric_oracle_check(10_000, 0);
        (
            m.passed(),
            format!(
                "auc err {:.1e}, ap err {:.1e}, delta ap err {:.1e}, disagreements {}",
                m.max_auc_error, m.max_ap_error, m.max_delta_ap_error, m.disagreements
            ),
        )
    }));
    rows.push(timed("canonicalization under renumbering", || {
        let c = canonicalization_check(&bundled_test_molecules(), 50, 0);
        (
            c.failures.is_empty(),
            format!("{} molecules x {} permutations, {} failures", c.molecules, c.permutations, c.failures.len()),
        )
    }));
    rows
}
