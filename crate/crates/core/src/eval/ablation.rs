use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::normalized_rmse;
use super::probe::{linear_probe, MetricReport, ProbeConfig, ProbeTask, TaskKind};
use super::{EvalError, Result};
use crate::chem::parse_smiles;
use crate::corpus::{render_description, split_dataset, MtmtrRecord, Split};
use crate::descriptors::{compute_all, descriptor_index};
use crate::model::{build_vocabs, Architecture, Example, Model, ModelConfig};
use crate::train::{pretrain, TrainConfig};

/// The irrelevant prompt of the noise arm.
pub const NOISE_PROMPT: &str = "to be or not to be, this is the question.";

/// Descriptors named in the property-probe prompt.
pub const Q5_PROMPTED: [&str; 2] = ["MolWt", "FractionCSP3"];
/// Tied to the prompted ones (it grows with size) but never named.
pub const Q5_UNPROMPTED: &str = "NumValenceElectrons";
/// Largely independent of the prompted ones.
pub const Q5_UNRELATED: &str = "LongestCarbonChain";

const PROMPT_SEED: u64 = 0x5eed;

fn prompt_for(names: &[&str]) -> String {
    let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    render_description(&names, &mut ChaCha8Rng::seed_from_u64(PROMPT_SEED))
}

/// The property-probe prompt, rendered like a pretraining description.
pub fn q5_prompt() -> String {
    prompt_for(&Q5_PROMPTED)
}

/// A pretraining-style description naming only `descriptor`.
pub fn single_prompt(descriptor: &str) -> String {
    prompt_for(&[descriptor])
}

/// One single-column regression task per descriptor over `molecules`,
/// all sharing one 8:1:1 split drawn from `seed`.
pub fn descriptor_tasks(
    molecules: &[String],
    descriptors: &[&str],
    prompt: impl Fn(&str) -> String,
    seed: u64,
) -> Result<Vec<ProbeTask>> {
    let mut values = Vec::with_capacity(molecules.len());
    for s in molecules {
        values.push(compute_all(&parse_smiles(s)?)?);
    }
    let split = split_dataset(molecules.len(), [0.8, 0.1, 0.1], seed)?;
    descriptors
        .iter()
        .map(|&name| {
            let col = descriptor_index(name).ok_or_else(|| EvalError::Task(format!("unknown descriptor {name}")))?;
            let task = ProbeTask {
                name: name.to_string(),
                kind: TaskKind::Regression,
                smiles: molecules.to_vec(),
                labels: values.iter().map(|v| vec![v.values[col]]).collect(),
                mask: vec![vec![true]; molecules.len()],
                split: split.clone(),
                description: prompt(name),
            };
            task.validate()?;
            Ok(task)
        })
        .collect()
}

/// Probes `model` on each task. The task's own description is used unless
/// `prompt` overrides it; representations are computed once per distinct
/// (molecule set, description).
pub fn probe_model(
    model: &Model,
    tasks: &[ProbeTask],
    prompt: Option<&str>,
    seeds: &[u64],
    config: &ProbeConfig,
) -> Result<Vec<MetricReport>> {
    let mut cache: BTreeMap<(Vec<String>, String), Vec<Vec<f64>>> = BTreeMap::new();
    let mut out = Vec::with_capacity(tasks.len());
    for task in tasks {
        let desc = prompt.unwrap_or(&task.description).to_string();
        let key = (task.smiles.clone(), desc);
        if !cache.contains_key(&key) {
            let examples: Vec<Example> = task.smiles.iter().map(|s| model.encode(s, &key.1)).collect();
            let refs: Vec<&Example> = examples.iter().collect();
            let feats = model.represent(&refs)?;
            cache.insert(key.clone(), feats);
        }
        out.push(linear_probe(task, &cache[&key], seeds, config)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    /// Full model probed with the task prompt.
    MolTailor,
    /// Molecule encoder pretrained without descriptions.
    MtmtrStar,
    /// One tower over SMILES followed by the description.
    Concat,
    /// Full model probed with [`NOISE_PROMPT`].
    NoisePrompt,
    /// Untrained molecule encoder.
    RandomInit,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::MolTailor, Arm::MtmtrStar, Arm::Concat, Arm::NoisePrompt, Arm::RandomInit];

    pub fn label(self) -> &'static str {
        match self {
            Arm::MolTailor => "MolTailor",
            Arm::MtmtrStar => "MT-MTR*",
            Arm::Concat => "Concat",
            Arm::NoisePrompt => "Noise prompt",
            Arm::RandomInit => "Random init",
        }
    }

    fn architecture(self) -> Architecture {
        match self {
            Arm::MolTailor | Arm::NoisePrompt => Architecture::MolTailor,
            Arm::MtmtrStar | Arm::RandomInit => Architecture::MolOnly,
            Arm::Concat => Architecture::Concat,
        }
    }
}

/// Builds and (except for [`Arm::RandomInit`]) pretrains the model behind
/// `arm`. The description-free arm sees records with empty descriptions.
pub fn train_arm(
    arm: Arm,
    records: &[MtmtrRecord],
    split: &Split,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<Model> {
    let config = ModelConfig {
        architecture: arm.architecture(),
        ..model_config.clone()
    };
    let stripped;
    let records = if arm == Arm::MtmtrStar {
        stripped = records
            .iter()
            .map(|r| MtmtrRecord {
                description: String::new(),
                ..r.clone()
            })
            .collect::<Vec<_>>();
        &stripped[..]
    } else {
        records
    };
    let (tv, mv) = build_vocabs(records, &config);
    let model = Model::new(config, tv, mv, train_config.seed)?;
    if arm == Arm::RandomInit {
        return Ok(model);
    }
    log::info!("pretraining arm {}", arm.label());
    Ok(pretrain(model, records, split, train_config)?.model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub prompt: String,
    pub reports: Vec<MetricReport>,
}

/// Per-arm probe reports over a shared task list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub tasks: Vec<String>,
    pub arms: Vec<ArmResult>,
}

impl AblationReport {
    pub fn mean(&self, arm: Arm, task: &str) -> Option<f64> {
        let a = self.arms.iter().find(|a| a.arm == arm)?;
        a.reports.iter().find(|r| r.task == task).map(|r| r.mean)
    }

    /// Rows are tasks, columns arms; each cell is `mean ± std` followed by
    /// the RMSE normalized across arms for that task.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| task |");
        for a in &self.arms {
            s.push_str(&format!(" {} |", a.arm.label()));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.arms.len()));
        s.push('\n');
        for (t, task) in self.tasks.iter().enumerate() {
            let means: Vec<f64> = self.arms.iter().map(|a| a.reports[t].mean).collect();
            let norm = normalized_rmse(&means).unwrap_or_else(|_| vec![0.0; means.len()]);
            s.push_str(&format!("| {task} |"));
            for (a, z) in self.arms.iter().zip(norm) {
                let r = &a.reports[t];
                s.push_str(&format!(" {:.4} ± {:.4} ({z:+.2}) |", r.mean, r.std));
            }
            s.push('\n');
        }
        s
    }
}

/// Trains every arm on `records`, then probes each on descriptor tasks
/// built from `probe_molecules` (the prompted, unprompted-relevant and
/// unrelated descriptors). Prompt-conditioned arms read the shared
/// property prompt.
pub fn ablation_suite(
    records: &[MtmtrRecord],
    split: &Split,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    probe_molecules: &[String],
    probe_config: &ProbeConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    let names: Vec<&str> = Q5_PROMPTED.iter().copied().chain([Q5_UNPROMPTED, Q5_UNRELATED]).collect();
    let prompt = q5_prompt();
    let tasks = descriptor_tasks(probe_molecules, &names, |_| prompt.clone(), train_config.seed)?;
    let mut arms = Vec::new();
    let mut full: Option<Model> = None;
    for arm in Arm::ALL {
        let probe_prompt = if arm == Arm::NoisePrompt { NOISE_PROMPT } else { prompt.as_str() };
        let reports = if arm == Arm::NoisePrompt {
            let m = full.as_ref().expect("full model trained before the noise arm");
            probe_model(m, &tasks, Some(probe_prompt), seeds, probe_config)?
        } else {
            let m = train_arm(arm, records, split, model_config, train_config)?;
            let r = probe_model(&m, &tasks, Some(probe_prompt), seeds, probe_config)?;
            if arm == Arm::MolTailor {
                full = Some(m);
            }
            r
        };
        arms.push(ArmResult {
            arm,
            prompt: probe_prompt.to_string(),
            reports,
        });
    }
    Ok(AblationReport {
        tasks: names.iter().map(|s| s.to_string()).collect(),
        arms,
    })
}
