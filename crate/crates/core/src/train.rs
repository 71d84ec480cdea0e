//! MT-MTR pretraining: linear warmup/decay schedule, AdamW with decoupled
//! weight decay, global-norm clipping, per-epoch validation and early
//! stopping on the best validation loss.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_description, MtmtrRecord, Split};
use crate::model::{label_tensors, mtr_loss, Batch, Example, Model, ModelError};
use crate::params::{Binding, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    /// Validate every this many epochs.
    pub eval_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Re-render each training description every epoch with fresh phrasing
    /// for the same property names. Validation keeps the stored text.
    pub rephrase: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 5.5e-5,
            warmup_ratio: 0.1,
            epochs: 50,
            batch_size: 64,
            patience: 3,
            seed: 0,
            eval_interval: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            rephrase: false,
        }
    }
}

impl TrainConfig {
    /// Settings for desk-scale runs from random initialization: 20 epochs,
    /// batch 32, peak LR 1e-3, rephrased descriptions.
    pub fn desk() -> Self {
        TrainConfig {
            lr_peak: 1e-3,
            epochs: 20,
            batch_size: 32,
            rephrase: true,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(TrainError::Config(format!("warmup_ratio {} outside [0, 1]", self.warmup_ratio)));
        }
        if self.patience == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(TrainError::Config("patience, batch_size and eval_interval must be positive".into()));
        }
        if !(self.lr_peak >= 0.0 && self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return Err(TrainError::Config("lr, weight decay and clip norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `lr_peak` over the first `warmup_ratio` of the
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = config.warmup_ratio * total;
    if step < warm {
        config.lr_peak * step / warm
    } else if total > warm {
        config.lr_peak * (total - step) / (total - warm)
    } else {
        config.lr_peak
    }
}

/// AdamW moment buffers, one pair per parameter.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: &TrainConfig) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect::<Vec<_>>();
        OptimState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One AdamW update. `grads[i]` belongs to the i-th parameter of `store`;
/// parameters without a gradient (frozen) are left untouched.
pub fn optim_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut OptimState, lr: f64) -> Result<()> {
    for (id, g) in store.ids().zip(grads) {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(store.name(id).to_string()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let Some(g) = &grads[k] else { continue };
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g.data()[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g.data()[i] * g.data()[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * (mhat / (vhat.sqrt() + state.eps) + state.weight_decay * p[i]);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub struct PretrainOutcome {
    /// Model holding the parameters of the best validation epoch.
    pub model: Model,
    pub history: Vec<HistoryEntry>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

fn encode_all(model: &Model, records: &[MtmtrRecord]) -> Vec<Example> {
    records.iter().map(|r| model.encode(&r.smiles, &r.description)).collect()
}

/// Copy of `examples` with the records in `ids` re-encoded under newly
/// rendered descriptions. Records without a description stay as they are.
/// Streams from 2^33 up are reserved for this.
fn rephrase(model: &Model, examples: &[Example], records: &[MtmtrRecord], ids: &[usize], seed: u64, epoch: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 33) + epoch as u64);
    let mut out = examples.to_vec();
    for &i in ids {
        let r = &records[i];
        if r.description.is_empty() {
            continue;
        }
        out[i] = model.encode(&r.smiles, &render_description(&r.meta.properties, &mut rng));
    }
    out
}

struct BatchLoss {
    tape: Tape,
    binding: Binding,
    loss: Option<Var>,
    valid: usize,
    total: f64,
}

fn batch_loss(
    model: &Model,
    examples: &[Example],
    records: &[MtmtrRecord],
    ids: &[usize],
    train: Option<(u64, u64)>,
) -> std::result::Result<BatchLoss, ModelError> {
    let ex: Vec<&Example> = ids.iter().map(|&i| &examples[i]).collect();
    let rs: Vec<&MtmtrRecord> = ids.iter().map(|&i| &records[i]).collect();
    let batch = Batch::collate(&ex);
    let (y, m) = label_tensors(&rs)?;
    let mut tape = Tape::new();
    // Dropout masks come from (seed, stream) so reruns repeat them. Streams
    // above 2^32 stay clear of the per-epoch shuffle streams.
    if let Some((seed, step)) = train {
        tape.enable_dropout(model.config.dropout, seed, step);
    }
    let binding = model.bind(&mut tape, train.is_some());
    let f = model.forward(&mut tape, &binding, &batch)?;
    let (loss, valid, total) = match mtr_loss(&mut tape, f.pred, &y, &m) {
        Ok((loss, report)) => (Some(loss), report.counts.len() - report.skipped, report.total),
        Err(ModelError::AllRecordsSkipped) => (None, 0, 0.0),
        Err(e) => return Err(e),
    };
    Ok(BatchLoss {
        tape,
        binding,
        loss,
        valid,
        total,
    })
}

/// Masked regression loss over `ids` as one mean across every record with a label,
/// evaluated in mini-batches without gradients.
pub fn evaluate_loss(model: &Model, records: &[MtmtrRecord], ids: &[usize], batch_size: usize) -> Result<f64> {
    let examples = encode_all(model, records);
    evaluate_encoded(model, &examples, records, ids, batch_size)
}

fn evaluate_encoded(model: &Model, examples: &[Example], records: &[MtmtrRecord], ids: &[usize], batch_size: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for chunk in ids.chunks(batch_size.max(1)) {
        let bl = batch_loss(model, examples, records, chunk, None)?;
        sum += bl.total * bl.valid as f64;
        n += bl.valid;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

fn diverged(epoch: usize, step: usize, e: ModelError) -> TrainError {
    match e {
        ModelError::Tensor(TensorError::NonFiniteValue { op }) => TrainError::Diverged {
            epoch,
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other.into(),
    }
}

/// Trains `model` on the train split of `records`, validating on the val
/// split. The returned model holds the best validation-epoch parameters.
pub fn pretrain(mut model: Model, records: &[MtmtrRecord], split: &Split, config: &TrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::Config("empty train split".into()));
    }
    let examples = encode_all(&model, records);
    let steps_per_epoch = split.train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut state = OptimState::new(&model.store, config);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    let mut step = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let mut order = split.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let rephrased = config.rephrase.then(|| rephrase(&model, &examples, records, &split.train, config.seed, epoch));
        let epoch_examples = rephrased.as_ref().unwrap_or(&examples);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(config.batch_size) {
            let bl = batch_loss(&model, epoch_examples, records, chunk, Some((config.seed, (1 << 32) + step as u64))).map_err(|e| diverged(epoch, step, e))?;
            let lr = lr_schedule(step, total_steps, config);
            step += 1;
            let Some(loss) = bl.loss else { continue };
            let g = bl.tape.backward(loss).map_err(|e| diverged(epoch, step, e.into()))?;
            let mut grads: Vec<Option<Tensor>> =
                model.store.ids().map(|id| g.get(bl.binding.var(id)).cloned()).collect();
            clip_global_norm(&mut grads, config.clip_norm);
            optim_step(&mut model.store, &grads, &mut state, lr)?;
            sum += bl.total * bl.valid as f64;
            count += bl.valid;
        }
        let train_loss = if count == 0 { 0.0 } else { sum / count as f64 };
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                step,
                detail: "non-finite training loss".into(),
            });
        }
        if epoch % config.eval_interval != 0 && epoch != config.epochs {
            continue;
        }
        let val_loss = evaluate_encoded(&model, &examples, records, &split.val, config.batch_size)?;
        let lr = lr_schedule(step, total_steps, config);
        info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.2e}");
        history.push(HistoryEntry {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        match &best {
            Some((b, _, _)) if val_loss >= *b => {
                stale += 1;
                if stale >= config.patience {
                    stopped_early = epoch < config.epochs;
                    break;
                }
            }
            _ => {
                best = Some((val_loss, epoch, model.store.clone()));
                stale = 0;
            }
        }
    }
    let (best_val_loss, best_epoch, store) = best.expect("at least one validation pass");
    model.store = store;
    Ok(PretrainOutcome {
        model,
        history,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}

pub fn write_history(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for h in history {
        serde_json::to_writer(&mut w, h)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_mtmtr, prepare_corpus, synth_molecules};
    use crate::model::{build_vocabs, toy_config, ModelConfig};

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, 100, &c), 0.0);
        assert_eq!(lr_schedule(10, 100, &c), 5.5e-5);
        assert_eq!(lr_schedule(100, 100, &c), 0.0);
        assert!((lr_schedule(5, 100, &c) - 2.75e-5).abs() < 1e-18);
        assert!((lr_schedule(55, 100, &c) - 2.75e-5).abs() < 1e-18);
        let flat = TrainConfig {
            warmup_ratio: 0.0,
            ..c
        };
        assert_eq!(lr_schedule(0, 10, &flat), 5.5e-5);
    }

    fn scalar_store(v: f64) -> (ParamStore, OptimState) {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![1], vec![v]).unwrap());
        let st = OptimState::new(&s, &TrainConfig::default());
        (s, st)
    }

    #[test]
    fn adamw_single_step_by_hand() {
        let (mut s, mut st) = scalar_store(0.5);
        let g = 0.2;
        optim_step(&mut s, &[Some(Tensor::new(vec![1], vec![g]).unwrap())], &mut st, 0.1).unwrap();
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let mhat = m / 0.1;
        let vhat = v / 0.001;
        let expect = 0.5 - 0.1 * (mhat / (vhat.sqrt() + 1e-8) + 0.01 * 0.5);
        let got = s.get(s.id("p").unwrap()).data()[0];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn zero_gradient_and_decay_cases() {
        let (mut s, mut st) = scalar_store(0.5);
        st.weight_decay = 0.0;
        optim_step(&mut s, &[Some(Tensor::zeros(&[1]))], &mut st, 0.1).unwrap();
        assert_eq!(s.get(s.id("p").unwrap()).data()[0], 0.5);

        let (mut s, mut st) = scalar_store(0.5);
        optim_step(&mut s, &[Some(Tensor::zeros(&[1]))], &mut st, 0.1).unwrap();
        assert!((s.get(s.id("p").unwrap()).data()[0] - 0.5 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);

        let (mut s, mut st) = scalar_store(0.5);
        optim_step(&mut s, &[None], &mut st, 0.1).unwrap();
        assert_eq!(s.get(s.id("p").unwrap()).data()[0], 0.5);

        let (mut s, mut st) = scalar_store(0.5);
        let bad = [Some(Tensor::new(vec![1], vec![f64::NAN]).unwrap())];
        assert!(matches!(optim_step(&mut s, &bad, &mut st, 0.1), Err(TrainError::NonFiniteGradient(_))));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Some(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()), None];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![Some(Tensor::new(vec![1], vec![0.5]).unwrap())];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data()[0], 0.5);
    }

    fn tiny_setup(n: usize) -> (Model, Vec<MtmtrRecord>, Split) {
        let mols = synth_molecules(n, 3);
        let (mut records, mut manifest) = build_mtmtr(&mols, 3).unwrap();
        prepare_corpus(&mut records, &mut manifest, 3).unwrap();
        let config = ModelConfig {
            n_outputs: 24,
            d_t: 16,
            d_m: 16,
            max_text_len: 80,
            max_smiles_len: 64,
            ..toy_config()
        };
        let (t, m) = build_vocabs(&records, &config);
        (Model::new(config, t, m, 3).unwrap(), records, manifest.split)
    }

    #[test]
    fn smoke_and_determinism() {
        let (model, records, split) = tiny_setup(64);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::desk()
        };
        let a = pretrain(model.clone(), &records, &split, &config).unwrap();
        assert_eq!(a.history.len(), 2);
        assert!(a.history.iter().all(|h| h.train_loss.is_finite() && h.val_loss.is_finite()));
        let b = pretrain(model, &records, &split, &config).unwrap();
        assert_eq!(a.history, b.history);
        assert!(a.history.iter().all(|h| a.best_val_loss <= h.val_loss));
    }

    #[test]
    fn early_stop_after_patience() {
        let (model, records, split) = tiny_setup(64);
        // A zero learning rate never improves, so training stops after
        // exactly `patience` stale epochs following the first.
        let config = TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr_peak: 0.0,
            patience: 2,
            ..TrainConfig::desk()
        };
        let out = pretrain(model, &records, &split, &config).unwrap();
        assert_eq!(out.history.len(), 3);
        assert!(out.stopped_early);
        assert_eq!(out.best_epoch, 1);
    }
}
