//! Flat `section.key = value` configuration merged from a file, `--set`
//! flags and the seed override.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use moltailor::eval::ProbeConfig;
use moltailor::model::{config_hash, ModelConfig};
use moltailor::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "MOLTAILOR_SEED";

/// Error in what the user asked for; reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    /// Where the seed came from: flag, environment, file or default.
    pub seed_source: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// Inputs as given on the command line.
    pub inputs: BTreeMap<String, String>,
}

/// Lines of `key = value`; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(usage(format!("config line {}: expected key = value", n + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn set_field(section: &mut Value, key: &str, raw: &str, full: &str) -> Result<()> {
    let obj = section.as_object_mut().expect("config sections serialize to objects");
    let Some(slot) = obj.get_mut(key) else {
        return Err(usage(format!("unknown config key {full}")));
    };
    *slot = match slot {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| usage(format!("{full}: expected true or false")))?),
        Value::Number(n) if n.is_f64() => {
            let v: f64 = raw.parse().map_err(|_| usage(format!("{full}: expected a number")))?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(|| usage(format!("{full}: not finite")))?
        }
        Value::Number(_) => Value::Number(raw.parse::<u64>().map_err(|_| usage(format!("{full}: expected an integer")))?.into()),
        _ => Value::String(raw.to_string()),
    };
    Ok(())
}

fn apply<T: Serialize + for<'de> Deserialize<'de>>(value: &T, pairs: &[(&str, &str, &str)]) -> Result<T> {
    let mut v = serde_json::to_value(value)?;
    for (key, raw, full) in pairs {
        set_field(&mut v, key, raw, full)?;
    }
    serde_json::from_value(v).map_err(|e| usage(format!("invalid configuration: {e}")))
}

impl RunConfig {
    /// Defaults, then the config file, then `--set` pairs; the seed is
    /// taken from the flag, else the environment, else the file.
    pub fn resolve(
        command: &str,
        file: Option<&Path>,
        sets: &[String],
        seed_flag: Option<u64>,
        train_defaults: TrainConfig,
    ) -> Result<RunConfig> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            pairs.extend(parse_pairs(&text)?);
        }
        for s in sets {
            let Some((k, v)) = s.split_once('=') else {
                return Err(usage(format!("--set {s}: expected key=value")));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut file_seed = None;
        let (mut model, mut train, mut probe) = (Vec::new(), Vec::new(), Vec::new());
        for (k, v) in &pairs {
            if k == "seed" {
                file_seed = Some(v.parse::<u64>().map_err(|_| usage(format!("seed: expected an integer, got {v}")))?);
                continue;
            }
            match k.split_once('.') {
                Some(("model", key)) => model.push((key, v.as_str(), k.as_str())),
                Some(("train", "seed")) => return Err(usage("set the seed with the top-level `seed` key")),
                Some(("train", key)) => train.push((key, v.as_str(), k.as_str())),
                Some(("probe", key)) => probe.push((key, v.as_str(), k.as_str())),
                _ => return Err(usage(format!("unknown config key {k}; keys are seed, model.*, train.*, probe.*"))),
            }
        }
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.parse::<u64>().map_err(|_| usage(format!("{SEED_ENV}={v} is not an integer")))?),
            Err(_) => None,
        };
        let (seed, seed_source) = match (seed_flag, env_seed, file_seed) {
            (Some(s), _, _) => (s, "flag"),
            (None, Some(s), _) => (s, "environment"),
            (None, None, Some(s)) => (s, "config"),
            _ => (train_defaults.seed, "default"),
        };
        log::info!("seed {seed} (from {seed_source})");
        let mut train = apply(&train_defaults, &train)?;
        train.seed = seed;
        train.validate().map_err(|e| usage(e.to_string()))?;
        let model = apply(&ModelConfig::default(), &model)?;
        let probe = apply(&ProbeConfig::default(), &probe)?;
        probe.validate().map_err(|e| usage(e.to_string()))?;
        Ok(RunConfig {
            command: command.to_string(),
            seed,
            seed_source: seed_source.to_string(),
            model,
            train,
            probe,
            inputs: BTreeMap::new(),
        })
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Writes `run_config.json` with the resolved config and its hash.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let body = serde_json::json!({ "hash": self.hash(), "config": self });
        let path = dir.join("run_config.json");
        if path.exists() {
            bail!("{} already exists; run directories are append-only", path.display());
        }
        std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
        Ok(())
    }
}
