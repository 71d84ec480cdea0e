//! MT-MTR corpus construction: molecule ingestion, property sampling,
//! templated task descriptions, label masks, splits and standardization.
//!
//! All randomness for record `i` comes from a ChaCha stream keyed by
//! `(seed, i)`, so corpus contents do not depend on processing order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::{canonicalize, parse_smiles};
use crate::descriptors::{compute_all, registry, DescriptorError, DescriptorSpec};

pub const MIN_PROPERTIES: usize = 5;
pub const MAX_PROPERTIES: usize = 10;
pub const DEGENERATE_STD: f64 = 1e-9;
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Opening sentences of a task description. None names a descriptor.
pub const FRAMES: &[&str] = &[
    "Assess this molecule for the task.",
    "Predict the following molecular properties.",
    "Consider these properties of the compound.",
    "Screen this candidate carefully.",
    "Evaluate this structure for drug design.",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no valid molecules in the input")]
    EmptyCorpus,
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    Ratio(Vec<f64>),
    #[error("descriptor failure on {smiles}: {source}")]
    Descriptor {
        smiles: String,
        #[source]
        source: DescriptorError,
    },
    #[error("malformed corpus: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub properties: Vec<String>,
    pub seed: u64,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtmtrRecord {
    pub smiles: String,
    pub description: String,
    pub y: Vec<f64>,
    pub m: Vec<u8>,
    pub meta: RecordMeta,
}

impl MtmtrRecord {
    pub fn count(&self) -> usize {
        self.m.iter().filter(|&&v| v == 1).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub mean: f64,
    pub std: f64,
    pub observations: usize,
    pub degenerate: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub record_count: usize,
    pub descriptor_names: Vec<String>,
    pub occurrences: BTreeMap<String, usize>,
    /// Per-descriptor standardization statistics from the train split, in
    /// registry order. Empty until labels are standardized.
    pub label_stats: Vec<LabelStats>,
    pub split: Split,
    pub seed: u64,
}

/// Record-level random stream for `(seed, index)`.
pub fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Parses, canonicalizes and deduplicates SMILES lines. Blank lines and
/// `#` comments are skipped. Returns the sorted unique canonical strings
/// and the number of rejected lines.
pub fn ingest_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<(Vec<String>, usize)> {
    let mut out = BTreeSet::new();
    let mut rejected = 0;
    for line in lines {
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        match parse_smiles(text) {
            Ok(g) => {
                out.insert(canonicalize(&g));
            }
            Err(e) => {
                log::warn!("rejected {text:?}: {e}");
                rejected += 1;
            }
        }
    }
    if rejected > 0 {
        info!("rejected {rejected} unparseable lines");
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok((out.into_iter().collect(), rejected))
}

pub fn ingest_molecules(paths: &[&Path]) -> Result<(Vec<String>, usize)> {
    let mut text = Vec::new();
    for p in paths {
        for line in BufReader::new(File::open(p)?).lines() {
            text.push(line?);
        }
    }
    ingest_lines(text.iter().map(String::as_str))
}

/// Drops molecules whose canonical form appears in `reference`.
pub fn dedup_against(molecules: &[String], reference: &[String]) -> Vec<String> {
    let seen: BTreeSet<&String> = reference.iter().collect();
    molecules.iter().filter(|m| !seen.contains(m)).cloned().collect()
}

/// Draws 5 to 10 distinct descriptor names, each draw proportional to
/// `sampling_weight` among the names not yet drawn.
pub fn sample_properties<R: Rng + ?Sized>(rng: &mut R, registry: &[DescriptorSpec]) -> Vec<String> {
    let k = rng.gen_range(MIN_PROPERTIES..=MAX_PROPERTIES).min(registry.len());
    let mut left: Vec<&DescriptorSpec> = registry.iter().collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = left.iter().map(|d| d.sampling_weight).sum();
        let mut x = rng.gen::<f64>() * total;
        let mut pick = left.len() - 1;
        for (i, d) in left.iter().enumerate() {
            if x < d.sampling_weight {
                pick = i;
                break;
            }
            x -= d.sampling_weight;
        }
        out.push(left.remove(pick).name.clone());
    }
    out
}

/// A framing sentence followed by one phrase per named property.
pub fn render_description<R: Rng + ?Sized>(names: &[String], rng: &mut R) -> String {
    let mut parts = vec![*FRAMES.choose(rng).expect("frames")];
    for name in names {
        let spec = registry()
            .iter()
            .find(|d| &d.name == name)
            .unwrap_or_else(|| panic!("{name} is not in the registry"));
        parts.push(spec.phrase_bank.choose(rng).expect("phrase bank"));
    }
    parts.join(" ")
}

/// One record per molecule with raw descriptor labels.
pub fn build_mtmtr(molecules: &[String], seed: u64) -> Result<(Vec<MtmtrRecord>, CorpusManifest)> {
    if molecules.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let reg = registry();
    let mut records = Vec::with_capacity(molecules.len());
    for (index, smiles) in molecules.iter().enumerate() {
        let g = parse_smiles(smiles).map_err(|e| CorpusError::Malformed(format!("{smiles}: {e}")))?;
        let values = compute_all(&g).map_err(|source| CorpusError::Descriptor {
            smiles: smiles.clone(),
            source,
        })?;
        let mut rng = record_rng(seed, index);
        let properties = sample_properties(&mut rng, reg);
        let description = render_description(&properties, &mut rng);
        let mut y = vec![0.0; reg.len()];
        let mut m = vec![0u8; reg.len()];
        for p in &properties {
            let i = reg.iter().position(|d| &d.name == p).expect("sampled from registry");
            y[i] = values.values[i];
            m[i] = 1;
        }
        records.push(MtmtrRecord {
            smiles: smiles.clone(),
            description,
            y,
            m,
            meta: RecordMeta { properties, seed, index },
        });
    }
    let mut occurrences: BTreeMap<String, usize> = reg.iter().map(|d| (d.name.clone(), 0)).collect();
    for r in &records {
        for p in &r.meta.properties {
            *occurrences.get_mut(p).expect("registry name") += 1;
        }
    }
    let manifest = CorpusManifest {
        record_count: records.len(),
        descriptor_names: reg.iter().map(|d| d.name.clone()).collect(),
        occurrences,
        label_stats: Vec::new(),
        split: Split::default(),
        seed,
    };
    Ok((records, manifest))
}

/// Seeded uniform partition of `0..n` into train/val/test.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::Ratio(ratios.to_vec()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

/// Masked mean and population standard deviation per label column over
/// the `train` rows; masked entries in every row are rescaled with them.
/// Columns with fewer than two observations or a standard deviation below
/// [`DEGENERATE_STD`] are flagged and their masked labels set to 0.
pub fn standardize_labels(records: &mut [MtmtrRecord], train: &[usize]) -> Vec<LabelStats> {
    let width = records.first().map_or(0, |r| r.y.len());
    let mut stats = Vec::with_capacity(width);
    for col in 0..width {
        let obs: Vec<f64> = train
            .iter()
            .map(|&i| &records[i])
            .filter(|r| r.m[col] == 1)
            .map(|r| r.y[col])
            .collect();
        let n = obs.len();
        let (mean, std) = if n == 0 {
            (0.0, 0.0)
        } else {
            let mean = obs.iter().sum::<f64>() / n as f64;
            let var = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var.sqrt())
        };
        let degenerate = n < 2 || std < DEGENERATE_STD;
        for r in records.iter_mut().filter(|r| r.m[col] == 1) {
            r.y[col] = if degenerate { 0.0 } else { (r.y[col] - mean) / std };
        }
        stats.push(LabelStats {
            mean,
            std,
            observations: n,
            degenerate,
        });
    }
    stats
}

/// Splits 8:1:1 and standardizes on the train split, filling the manifest.
pub fn prepare_corpus(records: &mut [MtmtrRecord], manifest: &mut CorpusManifest, seed: u64) -> Result<()> {
    let split = split_dataset(records.len(), [0.8, 0.1, 0.1], seed)?;
    manifest.label_stats = standardize_labels(records, &split.train);
    manifest.split = split;
    Ok(())
}

pub fn write_corpus(dir: &Path, records: &[MtmtrRecord], manifest: &CorpusManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(CORPUS_FILE))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<(Vec<MtmtrRecord>, CorpusManifest)> {
    let mut records = Vec::new();
    for line in BufReader::new(File::open(dir.join(CORPUS_FILE))?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    let manifest: CorpusManifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    if manifest.record_count != records.len() {
        return Err(CorpusError::Malformed(format!(
            "manifest lists {} records, file holds {}",
            manifest.record_count,
            records.len()
        )));
    }
    Ok((records, manifest))
}

const SUBSTITUENTS: &[&str] = &[
    "F", "Cl", "Br", "I", "O", "N", "C", "CC", "C(C)C", "C(F)(F)F", "C(=O)O", "C(=O)OC", "C(=O)OCC", "OC", "OCC", "C#N",
    "[N+](=O)[O-]", "S(=O)(=O)N", "C(=O)N", "C=O", "C(=O)C", "NC", "N(C)C", "C(=O)[O-]", "[NH3+]", "SC",
];

/// Ring templates: `{d}` and `{e}` are closure digits, `{x}` is the
/// continuation (possibly empty).
const RINGS: &[(&str, &str)] = &[
    ("c{d}ccc({x})cc{d}", "c{d}ccccc{d}"),
    ("c{d}ccccc{d}{x}", "c{d}ccccc{d}"),
    ("c{d}ccc({x})nc{d}", "c{d}ccncc{d}"),
    ("c{d}ccc({x})o{d}", "c{d}ccoc{d}"),
    ("c{d}ccc({x})s{d}", "c{d}ccsc{d}"),
    ("c{d}cc({x})[nH]c{d}", "c{d}cc[nH]c{d}"),
    ("C{d}CCC({x})CC{d}", "C{d}CCCCC{d}"),
    ("C{d}CCC({x})C{d}", "C{d}CCCC{d}"),
    ("C{d}CC{d}{x}", "C{d}CC{d}"),
    ("C{d}CCN(CC{d}){x}", "C{d}CCNCC{d}"),
    ("C{d}CCOC{d}{x}", "C{d}CCOC{d}"),
    ("C{d}COCCN{d}{x}", "C{d}COCCN{d}"),
    ("C{d}CCCCCC{d}{x}", "C{d}CCCCCC{d}"),
    ("c{d}ccc{e}ccccc{e}c{d}{x}", "c{d}ccc{e}ccccc{e}c{d}"),
];

fn synth_chain<R: Rng + ?Sized>(rng: &mut R, depth: usize) -> String {
    let units = rng.gen_range(1..=4);
    let mut s = String::new();
    let mut ring_last = false;
    for u in 0..units {
        let roll: f64 = rng.gen();
        if roll < 0.2 && depth < 3 {
            let (with, without) = RINGS[rng.gen_range(0..RINGS.len())];
            let d = (2 * depth + 1).to_string();
            let e = (2 * depth + 2).to_string();
            let x = if rng.gen_bool(0.5) { synth_chain(rng, depth + 1) } else { String::new() };
            let t = if x.is_empty() { without } else { with };
            s.push_str(&t.replace("{d}", &d).replace("{e}", &e).replace("{x}", &x));
            ring_last = x.is_empty();
            break;
        } else if roll < 0.32 && u > 0 && u + 1 < units {
            s.push_str(["O", "N", "S", "C(=O)", "C(=O)N", "C(=O)O", "C=C"][rng.gen_range(0..7)]);
        } else if roll < 0.55 {
            s.push_str("C(");
            s.push_str(SUBSTITUENTS[rng.gen_range(0..SUBSTITUENTS.len())]);
            s.push(')');
        } else {
            s.push('C');
        }
    }
    if !ring_last && rng.gen_bool(0.4) {
        s.push_str(SUBSTITUENTS[rng.gen_range(0..SUBSTITUENTS.len())]);
    }
    s
}

/// Seeded generator of distinct, valid, canonical small molecules built
/// from chains, rings, heteroatom linkers and functional groups.
pub fn synth_molecules(count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let text = synth_chain(&mut rng, 0);
        let Ok(g) = parse_smiles(&text) else {
            continue;
        };
        let heavy = g.atoms.iter().filter(|a| !a.element.is_hydrogen()).count();
        if !(3..=32).contains(&heavy) {
            continue;
        }
        let c = canonicalize(&g);
        if seen.insert(c.clone()) {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::descriptor_index;

    #[test]
    fn ingest_dedups_and_rejects() {
        let (mols, rejected) = ingest_lines(["CCO", "OCC", "CCO", "# comment", "", "C(", "c1ccccc1"]).unwrap();
        assert_eq!(mols, vec!["CCO".to_string(), "c1ccccc1".to_string()]);
        assert_eq!(rejected, 1);
        assert!(matches!(ingest_lines(["# nothing"]), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn ingest_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mols.smi");
        std::fs::write(&p, "CCO\nOCC\nnot_a_smiles\n").unwrap();
        let (mols, rejected) = ingest_molecules(&[p.as_path()]).unwrap();
        assert_eq!((mols.len(), rejected), (1, 1));
        let empty = dir.path().join("empty.smi");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(ingest_molecules(&[empty.as_path()]), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn sampled_properties_are_bounded_and_distinct() {
        for seed in 0..200 {
            let names = sample_properties(&mut record_rng(seed, 0), registry());
            assert!((MIN_PROPERTIES..=MAX_PROPERTIES).contains(&names.len()));
            let set: BTreeSet<_> = names.iter().collect();
            assert_eq!(set.len(), names.len());
        }
        let a = sample_properties(&mut record_rng(5, 3), registry());
        let b = sample_properties(&mut record_rng(5, 3), registry());
        assert_eq!(a, b);
    }

    #[test]
    fn description_names_each_property() {
        let names: Vec<String> = vec!["MolWt".into()];
        let d = render_description(&names, &mut record_rng(0, 0));
        assert!(FRAMES.iter().any(|f| d.starts_with(f)));
        assert!(d.contains("MolWt"));
        let texts: BTreeSet<String> = (0..20).map(|s| render_description(&names, &mut record_rng(s, 0))).collect();
        assert!(texts.len() > 1);
    }

    #[test]
    fn split_sizes_and_coverage() {
        let s = split_dataset(1000, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (800, 100, 100));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(s, split_dataset(1000, [0.8, 0.1, 0.1], 3).unwrap());
        assert!(split_dataset(10, [0.5, 0.5, 0.5], 0).is_err());
        assert!(split_dataset(10, [1.2, -0.1, -0.1], 0).is_err());
    }

    fn record(y: f64, masked: bool) -> MtmtrRecord {
        MtmtrRecord {
            smiles: "C".into(),
            description: String::new(),
            y: vec![y, 7.0],
            m: vec![u8::from(masked), 1],
            meta: RecordMeta {
                properties: vec![],
                seed: 0,
                index: 0,
            },
        }
    }

    #[test]
    fn standardization_population_convention() {
        let mut rs = vec![record(2.0, true), record(4.0, true), record(9.0, false)];
        let stats = standardize_labels(&mut rs, &[0, 1, 2]);
        assert_eq!((stats[0].mean, stats[0].std), (3.0, 1.0));
        assert_eq!((rs[0].y[0], rs[1].y[0]), (-1.0, 1.0));
        assert_eq!(rs[2].y[0], 9.0, "masked-out entry unchanged");
        assert!(stats[1].degenerate);
        assert!(rs.iter().all(|r| r.y[1] == 0.0));
    }

    #[test]
    fn build_records_contract() {
        let mols = synth_molecules(10, 1);
        let (records, manifest) = build_mtmtr(&mols, 4).unwrap();
        assert_eq!(records.len(), 10);
        let total: usize = records.iter().map(MtmtrRecord::count).sum();
        assert_eq!(manifest.occurrences.values().sum::<usize>(), total);
        for r in &records {
            assert!((MIN_PROPERTIES..=MAX_PROPERTIES).contains(&r.count()));
            for p in &r.meta.properties {
                let i = descriptor_index(p).unwrap();
                assert_eq!(r.m[i], 1);
                assert!(r.description.contains(p.as_str()));
            }
        }
        assert!(matches!(build_mtmtr(&[], 0), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn corpus_files_roundtrip() {
        let mols = synth_molecules(20, 2);
        let (mut records, mut manifest) = build_mtmtr(&mols, 4).unwrap();
        prepare_corpus(&mut records, &mut manifest, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &records, &manifest).unwrap();
        let (r2, m2) = read_corpus(dir.path()).unwrap();
        assert_eq!(r2, records);
        assert_eq!(m2, manifest);
    }

    #[test]
    fn synthetic_molecules_are_valid_and_distinct() {
        let mols = synth_molecules(200, 7);
        assert_eq!(mols.len(), 200);
        let set: BTreeSet<_> = mols.iter().collect();
        assert_eq!(set.len(), 200);
        for m in &mols {
            assert_eq!(&canonicalize(&parse_smiles(m).unwrap()), m);
        }
        assert_eq!(mols, synth_molecules(200, 7));
    }
}
