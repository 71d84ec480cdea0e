//! MolTailor: a molecule encoder, unimodal text layers and multimodal text
//! layers whose hybrid attention reads the molecule states, pooled at the
//! text `[CLS]` and followed by a linear regression head. The two baseline
//! architectures used in ablations (molecule encoder alone, one tower over
//! concatenated SMILES and text) share the same code paths.

mod vocab;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::MtmtrRecord;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{grad_check_report, read_container, GradCheckReport, write_container, ContainerError, DType, Tape, Tensor, TensorError, Var};
use crate::transformer::{
    mt_block, teb, EncoderBlock, HybridBlock, KeyMask, NormParams, TransformerError, Wiring, INIT_STD, LN_EPS,
};

pub use vocab::{
    count_mentions, smiles_pieces, text_pieces, tokenize_smiles, tokenize_text, TokenizedSmiles, Vocab, CLS, CLS_ID,
    MASK, MASK_ID, PAD, PAD_ID, SEP, SEP_ID, SPECIALS, UNK, UNK_ID,
};

pub const WEIGHTS_FILE: &str = "model.mtl";
pub const TEXT_VOCAB_FILE: &str = "text_vocab.json";
pub const MOL_VOCAB_FILE: &str = "mol_vocab.json";
const INFER_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("every record in the batch has an empty label mask")]
    AllRecordsSkipped,
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Molecule encoder, unimodal text layers, multimodal text layers.
    #[default]
    MolTailor,
    /// Molecule encoder alone, pooled at its own `[CLS]`.
    MolOnly,
    /// One text-style tower over SMILES tokens followed by description tokens.
    Concat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub d_t: usize,
    pub d_m: usize,
    pub h_t: usize,
    pub h_m: usize,
    /// Text layers in total; the first `l_uni` are unimodal.
    pub l_text: usize,
    pub l_uni: usize,
    pub l_mol: usize,
    pub ffn_mult: usize,
    pub max_text_len: usize,
    pub max_smiles_len: usize,
    pub n_outputs: usize,
    pub freeze_m_encoder: bool,
    /// Single residual around attention and FFN instead of post-norm blocks.
    pub literal_eq4: bool,
    pub output_projection: bool,
    pub pooling: Pooling,
    /// Dropout rate used while pretraining.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::MolTailor,
            d_t: 128,
            d_m: 128,
            h_t: 4,
            h_m: 4,
            l_text: 8,
            l_uni: 6,
            l_mol: 4,
            ffn_mult: 4,
            max_text_len: 80,
            max_smiles_len: 64,
            n_outputs: 24,
            freeze_m_encoder: false,
            literal_eq4: false,
            output_projection: true,
            pooling: Pooling::Cls,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_t == 0 || self.h_t == 0 || !self.d_t.is_multiple_of(self.h_t) {
            return bad(format!("d_t {} must be a positive multiple of h_t {}", self.d_t, self.h_t));
        }
        if self.d_m == 0 || self.h_m == 0 || !self.d_m.is_multiple_of(self.h_m) {
            return bad(format!("d_m {} must be a positive multiple of h_m {}", self.d_m, self.h_m));
        }
        if self.architecture == Architecture::MolTailor && !(0 < self.l_uni && self.l_uni < self.l_text) {
            return bad(format!("need 0 < l_uni ({}) < l_text ({})", self.l_uni, self.l_text));
        }
        if self.architecture == Architecture::Concat && self.d_m != self.d_t {
            return bad("the concatenated tower needs d_m == d_t".into());
        }
        if self.l_mol == 0 && self.architecture != Architecture::Concat {
            return bad("l_mol must be positive".into());
        }
        if self.max_text_len < 2 || self.max_smiles_len < 1 || self.n_outputs == 0 || self.ffn_mult == 0 {
            return bad("lengths, outputs and ffn_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn wiring(&self) -> Wiring {
        if self.literal_eq4 {
            Wiring::Literal
        } else {
            Wiring::PostNorm
        }
    }

    /// Width of the pooled representation.
    pub fn z_dim(&self) -> usize {
        match self.architecture {
            Architecture::MolOnly => self.d_m,
            _ => self.d_t,
        }
    }
}

/// Hex SHA-256 of the JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
struct Embeddings {
    tok: ParamId,
    pos: ParamId,
    norm: NormParams,
}

impl Embeddings {
    fn init(store: &mut ParamStore, prefix: &str, vocab: usize, positions: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Embeddings {
            tok: store.normal(format!("{prefix}.tok"), &[vocab, d], INIT_STD, rng),
            pos: store.normal(format!("{prefix}.pos"), &[positions, d], INIT_STD, rng),
            norm: NormParams::init(store, &format!("{prefix}.emb_norm"), d),
        }
    }
}

#[derive(Clone, Debug)]
struct Tower {
    emb: Embeddings,
    blocks: Vec<EncoderBlock>,
}

/// One tokenized (molecule, description) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub text: Vec<usize>,
    pub mol: TokenizedSmiles,
}

/// Padded token ids and key masks for a batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub bs: usize,
    pub n_t: usize,
    pub n_m: usize,
    pub text_ids: Vec<usize>,
    pub mol_ids: Vec<usize>,
    pub text_mask: KeyMask,
    pub mol_mask: KeyMask,
    /// Molecule keys visible to the multimodal layers.
    pub cross_mask: KeyMask,
}

fn pad(rows: &[&[usize]]) -> (usize, Vec<usize>, KeyMask) {
    let n = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(rows.len() * n);
    for r in rows {
        ids.extend_from_slice(r);
        ids.extend(std::iter::repeat_n(PAD_ID, n - r.len()));
    }
    let lens: Vec<usize> = rows.iter().map(|r| r.len()).collect();
    (n, ids, KeyMask::from_lengths(n, &lens))
}

impl Batch {
    pub fn collate(examples: &[&Example]) -> Batch {
        let text: Vec<&[usize]> = examples.iter().map(|e| e.text.as_slice()).collect();
        let mol: Vec<&[usize]> = examples.iter().map(|e| e.mol.ids.as_slice()).collect();
        let (n_t, text_ids, text_mask) = pad(&text);
        let (n_m, mol_ids, mol_mask) = pad(&mol);
        Batch {
            bs: examples.len(),
            n_t,
            n_m,
            text_ids,
            mol_ids,
            text_mask,
            cross_mask: mol_mask.clone(),
            mol_mask,
        }
    }

    /// Hides every molecule key from the multimodal layers.
    pub fn hide_molecule(&mut self) {
        self.cross_mask = KeyMask::all_masked(self.bs, self.n_m);
    }
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[bs, n_outputs]`.
    pub pred: Var,
    /// Pooled representation `[bs, z_dim]`.
    pub z: Var,
    pub x_m: Option<Var>,
    pub x_t: Option<Var>,
    /// Attention probabilities `[bs * h, n_q, n_k]` per layer.
    pub mol_probs: Vec<Var>,
    pub text_probs: Vec<Var>,
    pub mt_probs: Vec<Var>,
}

/// Value of the masked multi-task loss and its bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Valid labels per record.
    pub counts: Vec<usize>,
    /// Records with no valid label, excluded from the mean.
    pub skipped: usize,
}

/// `(1/N) * sum_j (1/count_j) * sum_i m_ij (y_ij - pred_ij)^2` over the
/// records with `count_j > 0`.
pub fn mtr_loss(tape: &mut Tape, pred: Var, y: &Tensor, m: &Tensor) -> Result<(Var, LossReport)> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 2 || y.shape() != shape || m.shape() != shape {
        return Err(ModelError::Config(format!(
            "loss shapes pred {shape:?} y {:?} m {:?}",
            y.shape(),
            m.shape()
        )));
    }
    let width = shape[1];
    let counts: Vec<usize> = m.data().chunks(width).map(|r| r.iter().filter(|v| **v != 0.0).count()).collect();
    let n = counts.iter().filter(|c| **c > 0).count();
    if n == 0 {
        return Err(ModelError::AllRecordsSkipped);
    }
    let mut w = m.data().to_vec();
    for (row, &c) in w.chunks_mut(width).zip(&counts) {
        for v in row.iter_mut() {
            *v = if c == 0 { 0.0 } else { *v / (c as f64 * n as f64) };
        }
    }
    let weights = Tensor::new(shape, w)?;
    let loss = tape.weighted_sse(pred, y, &weights)?;
    let report = LossReport {
        total: tape.value(loss).item(),
        skipped: counts.len() - n,
        counts,
    };
    Ok((loss, report))
}

/// Label and mask tensors `[bs, M]` for a slice of records.
pub fn label_tensors(records: &[&MtmtrRecord]) -> Result<(Tensor, Tensor)> {
    let width = records.first().map_or(0, |r| r.y.len());
    let mut y = Vec::with_capacity(records.len() * width);
    let mut m = Vec::with_capacity(records.len() * width);
    for r in records {
        y.extend_from_slice(&r.y);
        m.extend(r.m.iter().map(|&v| f64::from(v)));
    }
    Ok((Tensor::new(vec![records.len(), width], y)?, Tensor::new(vec![records.len(), width], m)?))
}

/// Text and SMILES vocabularies over a corpus.
pub fn build_vocabs(records: &[MtmtrRecord], config: &ModelConfig) -> (Vocab, Vocab) {
    let text = Vocab::build(records.iter().flat_map(|r| text_pieces(&r.description)), 1, config.max_text_len);
    let mol = Vocab::build(
        records.iter().flat_map(|r| smiles_pieces(&r.smiles).into_iter().map(|(p, _)| p)),
        1,
        config.max_smiles_len,
    );
    (text, mol)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub text_vocab: Vocab,
    pub mol_vocab: Vocab,
    pub store: ParamStore,
    mol: Option<Tower>,
    text: Option<Tower>,
    /// SMILES token table of the concatenated tower.
    concat_mol_tok: Option<ParamId>,
    mt: Vec<HybridBlock>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Model {
    pub fn new(config: ModelConfig, mut text_vocab: Vocab, mut mol_vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        text_vocab.max_len = config.max_text_len;
        mol_vocab.max_len = config.max_smiles_len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let blocks = |store: &mut ParamStore, prefix: &str, n: usize, d: usize, h: usize, rng: &mut ChaCha8Rng| {
            (0..n)
                .map(|i| EncoderBlock::init(store, &format!("{prefix}.{i}"), d, h, c.ffn_mult, c.output_projection, rng))
                .collect::<std::result::Result<Vec<_>, _>>()
        };
        let mut mol = None;
        let mut text = None;
        let mut concat_mol_tok = None;
        let mut mt = Vec::new();
        match c.architecture {
            Architecture::MolTailor | Architecture::MolOnly => {
                let emb = Embeddings::init(&mut store, "mol", mol_vocab.len(), c.max_smiles_len, c.d_m, &mut rng);
                let b = blocks(&mut store, "mol.blocks", c.l_mol, c.d_m, c.h_m, &mut rng)?;
                mol = Some(Tower { emb, blocks: b });
                if c.architecture == Architecture::MolTailor {
                    let emb = Embeddings::init(&mut store, "text", text_vocab.len(), c.max_text_len, c.d_t, &mut rng);
                    let b = blocks(&mut store, "text.blocks", c.l_uni, c.d_t, c.h_t, &mut rng)?;
                    text = Some(Tower { emb, blocks: b });
                    for i in 0..c.l_text - c.l_uni {
                        mt.push(HybridBlock::init(
                            &mut store,
                            &format!("mt.{i}"),
                            c.d_t,
                            c.d_m,
                            c.h_t,
                            c.ffn_mult,
                            c.output_projection,
                            &mut rng,
                        )?);
                    }
                }
            }
            Architecture::Concat => {
                concat_mol_tok = Some(store.normal("mol.tok", &[mol_vocab.len(), c.d_t], INIT_STD, &mut rng));
                let positions = c.max_text_len + c.max_smiles_len;
                let emb = Embeddings::init(&mut store, "text", text_vocab.len(), positions, c.d_t, &mut rng);
                let b = blocks(&mut store, "text.blocks", c.l_text, c.d_t, c.h_t, &mut rng)?;
                text = Some(Tower { emb, blocks: b });
            }
        }
        let head_w = store.normal("head.w", &[c.z_dim(), c.n_outputs], INIT_STD, &mut rng);
        let head_b = store.zeros("head.b", &[c.n_outputs]);
        Ok(Model {
            config,
            text_vocab,
            mol_vocab,
            store,
            mol,
            text,
            concat_mol_tok,
            mt,
            head_w,
            head_b,
        })
    }

    pub fn encode(&self, smiles: &str, description: &str) -> Example {
        Example {
            text: tokenize_text(&self.text_vocab, description),
            mol: tokenize_smiles(&self.mol_vocab, smiles),
        }
    }

    /// Puts every parameter on `tape`. With `train`, all but frozen
    /// molecule-encoder parameters receive gradients.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Binding {
        let freeze = self.config.freeze_m_encoder && self.config.architecture == Architecture::MolTailor;
        self.store.bind(tape, |name| train && !(freeze && name.starts_with("mol.")))
    }

    fn embed(&self, tape: &mut Tape, b: &Binding, emb: &Embeddings, tok: Var, ids: &[usize], bs: usize, n: usize) -> Result<Var> {
        let e = tape.embedding(tok, ids)?;
        let d = tape.shape(e)[1];
        let e = tape.reshape(e, &[bs, n, d])?;
        let positions: Vec<usize> = (0..bs).flat_map(|_| 0..n).collect();
        self.position_norm(tape, b, emb, e, &positions)
    }

    fn position_norm(&self, tape: &mut Tape, b: &Binding, emb: &Embeddings, e: Var, positions: &[usize]) -> Result<Var> {
        let (bs, n, d) = match *tape.shape(e) {
            [bs, n, d] => (bs, n, d),
            _ => unreachable!("embeddings are rank 3"),
        };
        let p = tape.embedding(b.var(emb.pos), positions)?;
        let p = tape.reshape(p, &[bs, n, d])?;
        let x = tape.add(e, p)?;
        let x = tape.layer_norm(x, 2, Some(b.var(emb.norm.gamma)), Some(b.var(emb.norm.beta)), LN_EPS)?;
        Ok(tape.dropout(x)?)
    }

    fn run_tower(&self, tape: &mut Tape, b: &Binding, tower: &Tower, x: Var, mask: &KeyMask) -> Result<(Var, Vec<Var>)> {
        let mut x = x;
        let mut probs = Vec::with_capacity(tower.blocks.len());
        for blk in &tower.blocks {
            let o = teb(tape, x, &blk.bind(b), mask, self.config.wiring())?;
            x = o.out;
            probs.push(o.probs);
        }
        Ok((x, probs))
    }

    fn tower<'a>(&self, which: &'a Option<Tower>, what: &str) -> Result<&'a Tower> {
        which
            .as_ref()
            .ok_or_else(|| ModelError::Config(format!("{:?} has no {what} tower", self.config.architecture)))
    }

    /// Molecule encoder: last-layer states `[bs, n_m, d_m]` and per-layer
    /// attention probabilities.
    pub fn encode_molecule(&self, tape: &mut Tape, b: &Binding, batch: &Batch) -> Result<(Var, Vec<Var>)> {
        let tower = self.tower(&self.mol, "molecule")?;
        let x = self.embed(tape, b, &tower.emb, b.var(tower.emb.tok), &batch.mol_ids, batch.bs, batch.n_m)?;
        self.run_tower(tape, b, tower, x, &batch.mol_mask)
    }

    /// Unimodal text layers: `[bs, n_t, d_t]`.
    pub fn encode_text_unimodal(&self, tape: &mut Tape, b: &Binding, batch: &Batch) -> Result<(Var, Vec<Var>)> {
        if self.config.architecture != Architecture::MolTailor {
            return Err(ModelError::Config("unimodal text layers exist only in MolTailor".into()));
        }
        let tower = self.tower(&self.text, "text")?;
        let x = self.embed(tape, b, &tower.emb, b.var(tower.emb.tok), &batch.text_ids, batch.bs, batch.n_t)?;
        self.run_tower(tape, b, tower, x, &batch.text_mask)
    }

    /// Multimodal text layers over `x_t` with `x_m` as read-only context,
    /// then pooling. Returns `(z, last states, per-layer probabilities)`.
    pub fn fuse(&self, tape: &mut Tape, b: &Binding, x_t: Var, x_m: Var, batch: &Batch) -> Result<(Var, Var, Vec<Var>)> {
        let mut x = x_t;
        let mut probs = Vec::with_capacity(self.mt.len());
        for blk in &self.mt {
            let o = mt_block(
                tape,
                x,
                x_m,
                &blk.bind(b),
                &batch.text_mask,
                &batch.cross_mask,
                self.config.wiring(),
            )?;
            x = o.out;
            probs.push(o.probs);
        }
        let z = self.pool(tape, x, &batch.text_mask)?;
        Ok((z, x, probs))
    }

    fn pool(&self, tape: &mut Tape, x: Var, mask: &KeyMask) -> Result<Var> {
        let (bs, d) = (tape.shape(x)[0], tape.shape(x)[2]);
        Ok(match self.config.pooling {
            Pooling::Cls => {
                let s = tape.slice(x, 1, 0, 1)?;
                tape.reshape(s, &[bs, d])?
            }
            Pooling::Mean => tape.masked_mean(x, mask.valid())?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, batch: &Batch) -> Result<Forward> {
        let (mut x_m, mut x_t) = (None, None);
        let (mut mol_probs, mut text_probs, mut mt_probs) = (Vec::new(), Vec::new(), Vec::new());
        let z = match self.config.architecture {
            Architecture::MolTailor => {
                let (m, mp) = self.encode_molecule(tape, b, batch)?;
                let (t, tp) = self.encode_text_unimodal(tape, b, batch)?;
                let (z, _, fp) = self.fuse(tape, b, t, m, batch)?;
                (x_m, x_t) = (Some(m), Some(t));
                (mol_probs, text_probs, mt_probs) = (mp, tp, fp);
                z
            }
            Architecture::MolOnly => {
                let (m, mp) = self.encode_molecule(tape, b, batch)?;
                x_m = Some(m);
                mol_probs = mp;
                self.pool(tape, m, &batch.mol_mask)?
            }
            Architecture::Concat => {
                let tower = self.tower(&self.text, "text")?;
                let mol_tok = self.concat_mol_tok.expect("concat layout");
                let d = self.config.d_t;
                let em = tape.embedding(b.var(mol_tok), &batch.mol_ids)?;
                let em = tape.reshape(em, &[batch.bs, batch.n_m, d])?;
                let et = tape.embedding(b.var(tower.emb.tok), &batch.text_ids)?;
                let et = tape.reshape(et, &[batch.bs, batch.n_t, d])?;
                let e = tape.concat(&[em, et], 1)?;
                // Text positions continue right after each molecule's own
                // tokens so padding does not shift them.
                let mut positions = Vec::with_capacity(batch.bs * (batch.n_m + batch.n_t));
                for r in 0..batch.bs {
                    let lm = (0..batch.n_m).filter(|&i| batch.mol_mask.is_valid(r, i)).count();
                    positions.extend((0..batch.n_m).map(|i| if i < lm { i } else { lm + batch.n_t + i - lm }));
                    positions.extend((0..batch.n_t).map(|i| lm + i));
                }
                let x = self.position_norm(tape, b, &tower.emb, e, &positions)?;
                let mask = batch.mol_mask.concat(&batch.text_mask)?;
                let (x, tp) = self.run_tower(tape, b, tower, x, &mask)?;
                x_t = Some(x);
                text_probs = tp;
                self.pool(tape, x, &mask)?
            }
        };
        let h = tape.matmul(z, b.var(self.head_w))?;
        let pred = tape.add_bias(h, b.var(self.head_b))?;
        Ok(Forward {
            pred,
            z,
            x_m,
            x_t,
            mol_probs,
            text_probs,
            mt_probs,
        })
    }

    fn infer<T>(&self, examples: &[&Example], mut take: impl FnMut(&Tape, &Forward) -> T) -> Result<Vec<T>> {
        let mut out = Vec::new();
        for chunk in examples.chunks(INFER_BATCH) {
            let batch = Batch::collate(chunk);
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, false);
            let f = self.forward(&mut tape, &b, &batch)?;
            out.push(take(&tape, &f));
        }
        Ok(out)
    }

    /// Pooled representations, one row per example, without gradients.
    pub fn represent(&self, examples: &[&Example]) -> Result<Vec<Vec<f64>>> {
        let d = self.config.z_dim();
        let parts = self.infer(examples, |tape, f| {
            tape.value(f.z).data().chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>()
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Head outputs, one row per example.
    pub fn predict(&self, examples: &[&Example]) -> Result<Vec<Vec<f64>>> {
        let m = self.config.n_outputs;
        let parts = self.infer(examples, |tape, f| {
            tape.value(f.pred).data().chunks(m).map(<[f64]>::to_vec).collect::<Vec<_>>()
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let metadata = serde_json::json!({ "config": self.config });
        let c = self.store.to_container(self.config_hash(), metadata);
        let mut w = BufWriter::new(File::create(dir.join(WEIGHTS_FILE))?);
        write_container(&mut w, &c, DType::F64)?;
        std::io::Write::flush(&mut w)?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(TEXT_VOCAB_FILE))?), &self.text_vocab)?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(MOL_VOCAB_FILE))?), &self.mol_vocab)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = read_container(&mut BufReader::new(File::open(dir.join(WEIGHTS_FILE))?))?;
        let config: ModelConfig = serde_json::from_value(
            c.metadata
                .get("config")
                .cloned()
                .ok_or_else(|| ModelError::Checkpoint("metadata lacks a config".into()))?,
        )?;
        if config_hash(&config) != c.config_hash {
            return Err(ModelError::Checkpoint("config hash does not match the embedded config".into()));
        }
        let text: Vocab = serde_json::from_reader(BufReader::new(File::open(dir.join(TEXT_VOCAB_FILE))?))?;
        let mol: Vocab = serde_json::from_reader(BufReader::new(File::open(dir.join(MOL_VOCAB_FILE))?))?;
        let mut model = Model::new(config, text, mol, 0)?;
        model.store.load_container(&c).map_err(ModelError::Checkpoint)?;
        Ok(model)
    }
}

/// Two text layers (one unimodal, one multimodal) and one molecule layer
/// at width 8, for exhaustive gradient checks.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        d_t: 8,
        d_m: 8,
        h_t: 2,
        h_m: 2,
        l_text: 2,
        l_uni: 1,
        l_mol: 1,
        ffn_mult: 2,
        max_text_len: 16,
        max_smiles_len: 16,
        n_outputs: 3,
        ..ModelConfig::default()
    }
}

/// Largest relative error between tape and central-difference gradients
/// of the masked loss with respect to every parameter of the toy model.
///
/// Parameters are redrawn from N(0, 0.3^2) (layer-norm gains around 1).
/// At the 0.02 initialization scale most gradients sit near 1e-9, below
/// what a difference quotient can resolve; much larger weights saturate
/// the softmax and let truncation error dominate.
pub fn toy_gradient_check(seed: u64, eps: f64) -> Result<GradCheckReport> {
    let text = Vocab::build(text_pieces("assess molwt ringcount matters for the task ."), 1, 16);
    let mol = Vocab::build(smiles_pieces("CCOc1ccccc1Cl(=O)N[NH4+]").into_iter().map(|p| p.0), 1, 16);
    let model = Model::new(toy_config(), text, mol, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let batch = Batch::collate(&[
        &model.encode("CCO", "assess molwt"),
        &model.encode("c1ccccc1Cl", "ringcount matters for the task ."),
    ]);
    let y = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let m = Tensor::from_fn(&[2, 3], |i| if i % 3 == 0 { 1.0 } else { f64::from(rng.gen_bool(0.6)) });
    let inputs: Vec<Tensor> = model
        .store
        .ids()
        .map(|id| {
            let mut t = Tensor::randn(model.store.get(id).shape(), 0.3, &mut rng);
            if model.store.name(id).ends_with("gamma") {
                t.data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
            t
        })
        .collect();
    let report = grad_check_report(
        |tape, vars| {
            let b = Binding::from_vars(vars.to_vec());
            let f = model.forward(tape, &b, &batch).expect("toy forward");
            Ok(mtr_loss(tape, f.pred, &y, &m).expect("toy loss").0)
        },
        &inputs,
        eps,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests;
