use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{mean_std, roc_auc_multi};
use super::{EvalError, Result};
use crate::corpus::Split;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// A downstream task: molecules, a label matrix with validity mask, a
/// split and the prompt fed to the description tower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub name: String,
    pub kind: TaskKind,
    pub smiles: Vec<String>,
    /// `labels[row][column]`.
    pub labels: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    pub split: Split,
    pub description: String,
}

impl ProbeTask {
    pub fn columns(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.smiles.len();
        let c = self.columns();
        if n == 0 || c == 0 {
            return Err(EvalError::Task(format!("{}: no rows or no label columns", self.name)));
        }
        if self.labels.len() != n || self.mask.len() != n {
            return Err(EvalError::Task(format!("{}: label rows do not match molecules", self.name)));
        }
        for (row, (l, m)) in self.labels.iter().zip(&self.mask).enumerate() {
            if l.len() != c || m.len() != c {
                return Err(EvalError::Task(format!("{}: ragged label row {row}", self.name)));
            }
            for (&v, &ok) in l.iter().zip(m) {
                if !ok {
                    continue;
                }
                if !v.is_finite() {
                    return Err(EvalError::Task(format!("{}: non-finite label in row {row}", self.name)));
                }
                if self.kind == TaskKind::Classification && v != 0.0 && v != 1.0 {
                    return Err(EvalError::Task(format!("{}: classification label {v} in row {row}", self.name)));
                }
            }
        }
        let mut seen = vec![false; n];
        for &i in self.split.train.iter().chain(&self.split.val).chain(&self.split.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(EvalError::Task(format!("{}: split ids overlap or exceed {n}", self.name)));
            }
        }
        if self.split.train.is_empty() || self.split.val.is_empty() || self.split.test.is_empty() {
            return Err(EvalError::Task(format!("{}: empty split", self.name)));
        }
        Ok(())
    }
}

/// Reads a task CSV: a `smiles` column, label columns, and optional
/// `mask_<label>` columns. An empty label cell is treated as missing.
pub fn read_task_csv(path: &Path, kind: TaskKind, description: &str, seed: u64) -> Result<ProbeTask> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let smiles_col = headers
        .iter()
        .position(|h| h == "smiles")
        .ok_or_else(|| EvalError::Task("task CSV has no smiles column".into()))?;
    let label_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != smiles_col && !headers[i].starts_with("mask_"))
        .collect();
    let mask_cols: Vec<Option<usize>> = label_cols
        .iter()
        .map(|&i| headers.iter().position(|h| *h == format!("mask_{}", headers[i])))
        .collect();
    let (mut smiles, mut labels, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        smiles.push(rec[smiles_col].to_string());
        let mut l = Vec::with_capacity(label_cols.len());
        let mut m = Vec::with_capacity(label_cols.len());
        for (&c, mc) in label_cols.iter().zip(&mask_cols) {
            let cell = rec[c].trim();
            let value = if cell.is_empty() {
                None
            } else {
                Some(cell.parse::<f64>().map_err(|_| EvalError::Task(format!("bad label {cell:?}")))?)
            };
            let explicit = mc.map(|i| matches!(rec[i].trim(), "1" | "true"));
            l.push(value.unwrap_or(0.0));
            m.push(value.is_some() && explicit.unwrap_or(true));
        }
        labels.push(l);
        mask.push(m);
    }
    let split = crate::corpus::split_dataset(smiles.len(), [0.8, 0.1, 0.1], seed)?;
    let name = path.file_stem().map_or("task".into(), |s| s.to_string_lossy().into_owned());
    let task = ProbeTask {
        name,
        kind,
        smiles,
        labels,
        mask,
        split,
        description: description.to_string(),
    };
    task.validate()?;
    Ok(task)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub n_lrs: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_lrs: 10,
            lr_min: 1e-5,
            lr_max: 1e-2,
            max_epochs: 200,
            batch_size: 32,
            patience: 20,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_lrs > 0
            && self.lr_min > 0.0
            && self.lr_max >= self.lr_min
            && self.max_epochs > 0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(EvalError::Config(format!("{self:?}")))
        }
    }
}

/// Outcome of probing one task over several seeds. Regression values are
/// RMSE in train-standardized label units (so tasks are comparable);
/// classification values are ROC-AUC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub val_per_seed: Vec<f64>,
    pub chosen_lr: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Log-uniform learning rates drawn from `seed`.
pub fn lr_grid(config: &ProbeConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (config.lr_min.ln(), config.lr_max.ln());
    (0..config.n_lrs).map(|_| rng.gen_range(lo..=hi).exp()).collect()
}

struct Prepared {
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    m: Vec<Vec<bool>>,
    d: usize,
    c: usize,
}

/// Centers features by the train mean and divides by one global scale,
/// which keeps the problem equivariant under rotations of the features.
/// Regression targets are standardized per column on train.
fn prepare(task: &ProbeTask, features: &[Vec<f64>]) -> Result<Prepared> {
    let n = task.smiles.len();
    if features.len() != n {
        return Err(EvalError::Shape(format!("{} feature rows for {n} molecules", features.len())));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(EvalError::Shape("feature rows must share one non-zero width".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let train = &task.split.train;
    let mut mean = vec![0.0; d];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(&features[i]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let ss: f64 = train
        .iter()
        .map(|&i| features[i].iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
        .sum();
    let scale = (ss / (train.len() * d) as f64).sqrt();
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let x = features
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(v, m)| (v - m) / scale).collect())
        .collect();

    let c = task.columns();
    let mut y = task.labels.clone();
    if task.kind == TaskKind::Regression {
        for col in 0..c {
            let vals: Vec<f64> = train.iter().filter(|&&i| task.mask[i][col]).map(|&i| task.labels[i][col]).collect();
            let (mu, sd) = if vals.is_empty() { (0.0, 1.0) } else { mean_std(&vals) };
            let sd = if sd > 0.0 { sd } else { 1.0 };
            for row in y.iter_mut() {
                row[col] = (row[col] - mu) / sd;
            }
        }
    }
    Ok(Prepared {
        x,
        y,
        m: task.mask.clone(),
        d,
        c,
    })
}

struct Linear {
    w: Vec<f64>, // d x c, row-major
    b: Vec<f64>,
}

impl Linear {
    fn forward(&self, x: &[f64], c: usize) -> Vec<f64> {
        let mut out = self.b.clone();
        for (k, &xv) in x.iter().enumerate() {
            let row = &self.w[k * c..(k + 1) * c];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xv * w;
            }
        }
        out
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Lower is better for regression (RMSE), higher for classification
/// (ROC-AUC); this returns a value where lower is always better.
fn score(kind: TaskKind, value: f64) -> f64 {
    match kind {
        TaskKind::Regression => value,
        TaskKind::Classification => -value,
    }
}

fn metric(task: &ProbeTask, p: &Prepared, model: &Linear, ids: &[usize]) -> Result<f64> {
    let preds: Vec<Vec<f64>> = ids.iter().map(|&i| model.forward(&p.x[i], p.c)).collect();
    match task.kind {
        TaskKind::Regression => {
            let mut per_col = Vec::new();
            for col in 0..p.c {
                let (mut ss, mut n) = (0.0, 0usize);
                for (r, &i) in ids.iter().enumerate() {
                    if p.m[i][col] {
                        ss += (preds[r][col] - p.y[i][col]).powi(2);
                        n += 1;
                    }
                }
                if n > 0 {
                    per_col.push((ss / n as f64).sqrt());
                }
            }
            if per_col.is_empty() {
                return Err(EvalError::Task(format!("{}: no labelled rows in evaluation split", task.name)));
            }
            Ok(per_col.iter().sum::<f64>() / per_col.len() as f64)
        }
        TaskKind::Classification => {
            let scores: Vec<Vec<f64>> = (0..p.c).map(|c| preds.iter().map(|r| r[c]).collect()).collect();
            let labels: Vec<Vec<f64>> = (0..p.c).map(|c| ids.iter().map(|&i| p.y[i][c]).collect()).collect();
            let masks: Vec<Vec<bool>> = (0..p.c).map(|c| ids.iter().map(|&i| p.m[i][c]).collect()).collect();
            roc_auc_multi(&scores, &labels, &masks)
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Trains one linear layer from zero at one learning rate and returns
/// `(best validation metric, test metric at that epoch)`.
///
/// Adam keeps a single second-moment scalar over all weights so the
/// update commutes with rotations of the input features. The learning
/// rate decays linearly to zero over `max_epochs`.
fn fit(task: &ProbeTask, p: &Prepared, lr: f64, config: &ProbeConfig, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let (d, c) = (p.d, p.c);
    let mut model = Linear {
        w: vec![0.0; d * c],
        b: vec![0.0; c],
    };
    let n_params = (d + 1) * c;
    let (mut mw, mut mb, mut v) = (vec![0.0; d * c], vec![0.0; c], 0.0);
    let mut order = task.split.train.clone();
    let steps_per_epoch = order.len().div_ceil(config.batch_size);
    let total = (steps_per_epoch * config.max_epochs) as f64;
    let mut step = 0usize;

    let mut best = (f64::INFINITY, f64::NAN, f64::NAN);
    let mut stale = 0;
    let (mut gw, mut gb) = (vec![0.0; d * c], vec![0.0; c]);
    for _ in 0..config.max_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            let count = chunk.iter().map(|&i| p.m[i].iter().filter(|&&m| m).count()).sum::<usize>();
            if count == 0 {
                continue;
            }
            for &i in chunk {
                let out = model.forward(&p.x[i], c);
                for col in 0..c {
                    if !p.m[i][col] {
                        continue;
                    }
                    let g = match task.kind {
                        TaskKind::Regression => 2.0 * (out[col] - p.y[i][col]),
                        TaskKind::Classification => sigmoid(out[col]) - p.y[i][col],
                    } / count as f64;
                    gb[col] += g;
                    for (k, &xv) in p.x[i].iter().enumerate() {
                        gw[k * c + col] += g * xv;
                    }
                }
            }
            step += 1;
            let sq = gw.iter().chain(&gb).map(|g| g * g).sum::<f64>() / n_params as f64;
            v = BETA2 * v + (1.0 - BETA2) * sq;
            let vhat = v / (1.0 - BETA2.powi(step as i32));
            let bc1 = 1.0 - BETA1.powi(step as i32);
            let rate = lr * (1.0 - (step - 1) as f64 / total);
            let denom = vhat.sqrt() + ADAM_EPS;
            for ((w, m), g) in model.w.iter_mut().zip(mw.iter_mut()).zip(&gw) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *w -= rate * (*m / bc1) / denom;
            }
            for ((w, m), g) in model.b.iter_mut().zip(mb.iter_mut()).zip(&gb) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *w -= rate * (*m / bc1) / denom;
            }
        }
        let val = metric(task, p, &model, &task.split.val)?;
        if !val.is_finite() {
            return Err(EvalError::NonFinite);
        }
        if score(task.kind, val) < best.0 {
            best = (score(task.kind, val), val, metric(task, p, &model, &task.split.test)?);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok((best.1, best.2))
}

/// Linear probe over frozen `features` (one row per task molecule). For
/// each seed, every learning rate of that seed's grid is tried; the one
/// with the best validation metric supplies the seed's test metric.
pub fn linear_probe(task: &ProbeTask, features: &[Vec<f64>], seeds: &[u64], config: &ProbeConfig) -> Result<MetricReport> {
    task.validate()?;
    config.validate()?;
    if seeds.len() < 2 {
        return Err(EvalError::Config("a probe needs at least two seeds".into()));
    }
    let p = prepare(task, features)?;
    let (mut per_seed, mut val_per_seed, mut chosen_lr) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in seeds {
        let mut best: Option<(f64, f64, f64)> = None;
        for (k, lr) in lr_grid(config, seed).into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let (val, test) = fit(task, &p, lr, config, &mut rng)?;
            if best.is_none_or(|b| score(task.kind, val) < score(task.kind, b.0)) {
                best = Some((val, test, lr));
            }
        }
        let (val, test, lr) = best.expect("at least one learning rate");
        log::debug!("probe {} seed {seed}: lr {lr:.3e} val {val:.4} test {test:.4}", task.name);
        per_seed.push(test);
        val_per_seed.push(val);
        chosen_lr.push(lr);
    }
    let (mean, std) = mean_std(&per_seed);
    Ok(MetricReport {
        task: task.name.clone(),
        metric: match task.kind {
            TaskKind::Regression => "rmse".into(),
            TaskKind::Classification => "roc_auc".into(),
        },
        seeds: seeds.to_vec(),
        per_seed,
        val_per_seed,
        chosen_lr,
        mean,
        std,
    })
}

/// Markdown table with one row per report.
pub fn render_markdown(reports: &[MetricReport]) -> String {
    let mut s = String::from("| task | metric | mean | std | per seed |\n|---|---|---|---|---|\n");
    for r in reports {
        let seeds: Vec<String> = r.per_seed.iter().map(|v| format!("{v:.4}")).collect();
        s.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {} |\n",
            r.task,
            r.metric,
            r.mean,
            r.std,
            seeds.join(", ")
        ));
    }
    s
}
