mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use moltailor::chem::{canonicalize, parse_smiles};
use moltailor::corpus::{build_mtmtr, prepare_corpus, read_corpus, synth_molecules, write_corpus, ingest_molecules};
use moltailor::descriptors::{compute_all, descriptor_names};
use moltailor::eval::{
    ablation_suite, descriptor_tasks, extract_cls_attention, probe_model, read_task_csv, render_markdown, render_svg,
    single_prompt, TaskKind,
};
use moltailor::model::{build_vocabs, Model};
use moltailor::train::{pretrain, write_history, TrainConfig};

use config::{usage, RunConfig, UsageError};
use run::RunDir;

#[derive(Parser)]
#[command(name = "moltailor", version, about = "Prompt-conditioned molecular representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that resolve a run configuration.
#[derive(Args)]
struct ConfigArgs {
    /// File of `key = value` lines (seed, model.*, train.*, probe.*).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.d_t=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed; wins over MOLTAILOR_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Regression,
    Classification,
}

#[derive(Subcommand)]
enum Command {
    /// Build an MT-MTR corpus from a SMILES file or synthetic molecules.
    BuildCorpus {
        /// A SMILES file (one per line) or `synthetic:N`.
        #[arg(long)]
        source: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain a model on a corpus directory.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit linear probes on frozen representations.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task CSV with a `smiles` column and one column per label.
        #[arg(long, conflicts_with = "descriptors")]
        task_csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "regression")]
        kind: Kind,
        /// Comma-separated descriptor names to use as regression tasks.
        #[arg(long, value_delimiter = ',', requires = "molecules")]
        descriptors: Vec<String>,
        /// Molecules for descriptor tasks: a SMILES file or `synthetic:N`.
        #[arg(long)]
        molecules: Option<String>,
        /// Prompt for every task; descriptor tasks default to naming the descriptor.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and probe every ablation arm on one corpus.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        /// Probe molecules: a SMILES file or `synthetic:N`.
        #[arg(long)]
        molecules: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Export [CLS] attention over words and atoms.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        smiles: String,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Descriptor utilities.
    Descriptors {
        #[command(subcommand)]
        action: DescriptorAction,
    },
    /// Run the built-in numerical and invariance checks.
    Selfcheck,
}

#[derive(Subcommand)]
enum DescriptorAction {
    /// Print canonical SMILES and all descriptors as CSV.
    Compute { file: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out_dir = match &cli.command {
        Command::BuildCorpus { out, .. }
        | Command::Pretrain { out, .. }
        | Command::Probe { out, .. }
        | Command::Ablate { out, .. }
        | Command::Attn { out, .. } => Some(out.clone()),
        _ => None,
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let is_usage = e.downcast_ref::<UsageError>().is_some();
            run::report_error(&e, is_usage, out_dir.as_deref());
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn molecules_from(spec: &str, seed: u64) -> Result<Vec<String>> {
    if let Some(n) = spec.strip_prefix("synthetic:") {
        let n: usize = n.parse().map_err(|_| usage(format!("{spec}: expected synthetic:N")))?;
        return Ok(synth_molecules(n, seed));
    }
    let (mols, rejected) = ingest_molecules(&[std::path::Path::new(spec)]).with_context(|| format!("reading {spec}"))?;
    if rejected > 0 {
        log::warn!("{rejected} lines of {spec} were not valid molecules and were skipped");
    }
    Ok(mols)
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::BuildCorpus { source, out, cfg } => {
            let mut rc = resolve("build-corpus", &cfg, TrainConfig::default())?;
            rc.inputs.insert("source".into(), source.clone());
            let dir = RunDir::create(&out, &["corpus.jsonl", "manifest.json"])?;
            let mols = molecules_from(&source, rc.seed)?;
            let (mut records, mut manifest) = build_mtmtr(&mols, rc.seed)?;
            prepare_corpus(&mut records, &mut manifest, rc.seed)?;
            write_corpus(dir.path(), &records, &manifest)?;
            rc.write(dir.path())?;
            log::info!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Pretrain { corpus, out, cfg } => {
            let mut rc = resolve("pretrain", &cfg, TrainConfig::desk())?;
            rc.inputs.insert("corpus".into(), corpus.display().to_string());
            let (records, manifest) = read_corpus(&corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
            rc.model.n_outputs = manifest.descriptor_names.len();
            let dir = RunDir::create(&out, &["checkpoint", "history.jsonl"])?;
            let (tv, mv) = build_vocabs(&records, &rc.model);
            let model = Model::new(rc.model.clone(), tv, mv, rc.seed)?;
            let outcome = pretrain(model, &records, &manifest.split, &rc.train)?;
            outcome.model.save(&dir.path().join("checkpoint"))?;
            write_history(&dir.path().join("history.jsonl"), &outcome.history)?;
            rc.write(dir.path())?;
            log::info!("best epoch {} with validation loss {:.5}", outcome.best_epoch, outcome.best_val_loss);
        }
        Command::Probe {
            checkpoint,
            task_csv,
            kind,
            descriptors,
            molecules,
            prompt,
            seeds,
            out,
            cfg,
        } => {
            let mut rc = resolve("probe", &cfg, TrainConfig::default())?;
            if seeds.len() < 2 {
                return Err(usage("--seeds needs at least two seeds"));
            }
            let model = Model::load(&checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            rc.inputs.insert("checkpoint".into(), checkpoint.display().to_string());
            rc.inputs.insert("checkpoint_config_hash".into(), model.config_hash());
            rc.inputs.insert("seeds".into(), format!("{seeds:?}"));
            let tasks = if let Some(path) = task_csv {
                let kind = match kind {
                    Kind::Regression => TaskKind::Regression,
                    Kind::Classification => TaskKind::Classification,
                };
                rc.inputs.insert("task_csv".into(), path.display().to_string());
                vec![read_task_csv(&path, kind, prompt.as_deref().unwrap_or(""), rc.seed)?]
            } else if !descriptors.is_empty() {
                let spec = molecules.expect("clap requires --molecules with --descriptors");
                rc.inputs.insert("molecules".into(), spec.clone());
                let mols = molecules_from(&spec, rc.seed)?;
                let names: Vec<&str> = descriptors.iter().map(String::as_str).collect();
                descriptor_tasks(&mols, &names, |d| prompt.clone().unwrap_or_else(|| single_prompt(d)), rc.seed)?
            } else {
                return Err(usage("probe needs --task-csv or --descriptors"));
            };
            if let Some(p) = &prompt {
                rc.inputs.insert("prompt".into(), p.clone());
            }
            let dir = RunDir::create(&out, &["report.json", "report.md"])?;
            let reports = probe_model(&model, &tasks, None, &seeds, &rc.probe)?;
            dir.write("report.json", &(serde_json::to_string_pretty(&reports)? + "\n"))?;
            dir.write("report.md", &render_markdown(&reports))?;
            rc.write(dir.path())?;
            print!("{}", render_markdown(&reports));
        }
        Command::Ablate {
            corpus,
            molecules,
            seeds,
            out,
            cfg,
        } => {
            let mut rc = resolve("ablate", &cfg, TrainConfig::desk())?;
            if seeds.len() < 2 {
                return Err(usage("--seeds needs at least two seeds"));
            }
            rc.inputs.insert("corpus".into(), corpus.display().to_string());
            rc.inputs.insert("molecules".into(), molecules.clone());
            rc.inputs.insert("seeds".into(), format!("{seeds:?}"));
            let (records, manifest) = read_corpus(&corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
            rc.model.n_outputs = manifest.descriptor_names.len();
            let probe_mols = molecules_from(&molecules, rc.seed)?;
            let corpus_mols: Vec<String> = records.iter().map(|r| r.smiles.clone()).collect();
            let probe_mols = moltailor::corpus::dedup_against(&probe_mols, &corpus_mols);
            let dir = RunDir::create(&out, &["report.json", "report.md"])?;
            let report = ablation_suite(&records, &manifest.split, &rc.model, &rc.train, &probe_mols, &rc.probe, &seeds)?;
            dir.write("report.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
            dir.write("report.md", &report.to_markdown())?;
            rc.write(dir.path())?;
            print!("{}", report.to_markdown());
        }
        Command::Attn {
            checkpoint,
            smiles,
            prompt,
            out,
        } => {
            let model = Model::load(&checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let dir = RunDir::create(&out, &["trace.json", "trace.svg"])?;
            let trace = extract_cls_attention(&model, &smiles, &prompt)?;
            dir.write("trace.json", &(serde_json::to_string_pretty(&trace)? + "\n"))?;
            dir.write("trace.svg", &render_svg(&trace)?)?;
            log::info!("molecule mass {:.4}", trace.molecule_mass);
        }
        Command::Descriptors {
            action: DescriptorAction::Compute { file },
        } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let mut csv = format!("smiles,canonical,{}\n", descriptor_names().join(","));
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
                let smiles = line.split_whitespace().next().unwrap_or(line);
                let g = parse_smiles(smiles).with_context(|| format!("parsing {smiles}"))?;
                let values = compute_all(&g)?.values;
                let cells: Vec<String> = values.iter().map(|v| v.to_string()).collect();
                csv.push_str(&format!("{smiles},{},{}\n", canonicalize(&g), cells.join(",")));
            }
            print!("{csv}");
        }
        Command::Selfcheck => {
            let rows = moltailor::selfcheck::run_all();
            println!("{:<36} {:<6} {:>8}  detail", "check", "result", "seconds");
            for r in &rows {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("{:<36} {:<6} {:>8.2}  {}", r.name, status, r.seconds, r.detail);
            }
            if rows.iter().any(|r| !r.passed) {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn resolve(command: &str, cfg: &ConfigArgs, defaults: TrainConfig) -> Result<RunConfig> {
    RunConfig::resolve(command, cfg.config.as_deref(), &cfg.sets, cfg.seed, defaults)
}
