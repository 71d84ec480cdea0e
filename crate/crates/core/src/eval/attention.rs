use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::layout::layout_2d;
use super::{EvalError, Result};
use crate::chem::parse_smiles;
use crate::model::text_pieces;
use crate::model::{Architecture, Batch, Model};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordWeight {
    pub word: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomWeight {
    pub atom: usize,
    pub symbol: String,
    /// Share of the [CLS] row's molecule mass landing on this atom.
    pub weight: f64,
    /// Joint-softmax probability before renormalization.
    pub raw: f64,
}

/// Head-averaged [CLS] attention rows of the last unimodal and last
/// multimodal text layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnTrace {
    pub smiles: String,
    pub description: String,
    pub ut_words: Vec<WordWeight>,
    pub mt_words: Vec<WordWeight>,
    pub mt_atoms: Vec<AtomWeight>,
    /// Total [CLS] mass on molecule keys in the last multimodal layer.
    pub molecule_mass: f64,
}

pub fn extract_cls_attention(model: &Model, smiles: &str, description: &str) -> Result<AttnTrace> {
    extract_cls_attention_with(model, smiles, description, false)
}

/// Head-averaged row 0 of `probs` (`[heads, n_q, n_k]` for one example).
fn cls_row(tape: &Tape, probs: crate::tensor::Var) -> Vec<f64> {
    let t = tape.value(probs);
    let (h, n_q, n_k) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut row = vec![0.0; n_k];
    for head in 0..h {
        let base = head * n_q * n_k;
        for (r, v) in row.iter_mut().zip(&t.data()[base..base + n_k]) {
            *r += v / h as f64;
        }
    }
    row
}

/// Weights of the word tokens (between `[CLS]` and `[SEP]`) renormalized
/// to sum to 1. Each text token is already one word or punctuation mark.
fn words(row: &[f64], pieces: &[String]) -> Vec<WordWeight> {
    let k = row.len().saturating_sub(2).min(pieces.len());
    let total: f64 = row[1..1 + k].iter().sum();
    pieces[..k]
        .iter()
        .zip(&row[1..1 + k])
        .map(|(w, &p)| WordWeight {
            word: w.clone(),
            weight: if total > 0.0 { p / total } else { 0.0 },
        })
        .collect()
}

/// As [`extract_cls_attention`]; `hide_molecule` masks every molecule key
/// from the multimodal layers.
pub fn extract_cls_attention_with(model: &Model, smiles: &str, description: &str, hide_molecule: bool) -> Result<AttnTrace> {
    if model.config.architecture != Architecture::MolTailor {
        return Err(EvalError::Config("attention export needs the dual-tower model".into()));
    }
    let graph = parse_smiles(smiles)?;
    let example = model.encode(smiles, description);
    let mut batch = Batch::collate(&[&example]);
    if hide_molecule {
        batch.hide_molecule();
    }
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false);
    let f = model.forward(&mut tape, &binding, &batch)?;
    let ut = cls_row(&tape, *f.text_probs.last().expect("at least one unimodal layer"));
    let mt = cls_row(&tape, *f.mt_probs.last().expect("at least one multimodal layer"));

    let pieces = text_pieces(description);
    let n_t = batch.n_t;
    let mol_part = &mt[n_t..];
    let molecule_mass: f64 = mol_part.iter().sum();
    let mut raw = vec![0.0; graph.num_atoms()];
    for (p, atom) in mol_part.iter().zip(&example.mol.atoms) {
        if let Some(a) = atom {
            raw[*a] += p;
        }
    }
    let atom_total: f64 = raw.iter().sum();
    let mt_atoms = raw
        .iter()
        .enumerate()
        .map(|(i, &r)| AtomWeight {
            atom: i,
            symbol: graph.atoms[i].element.symbol().to_string(),
            weight: if atom_total > 0.0 { r / atom_total } else { 0.0 },
            raw: r,
        })
        .collect();
    Ok(AttnTrace {
        smiles: smiles.to_string(),
        description: description.to_string(),
        ut_words: words(&ut, &pieces),
        mt_words: words(&mt[..n_t], &pieces),
        mt_atoms,
        molecule_mass,
    })
}

fn heat(w: f64) -> String {
    let w = w.clamp(0.0, 1.0);
    let c = (255.0 * (1.0 - w)).round() as u8;
    format!("rgb(255,{c},{c})")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Self-contained SVG: two word heatmap rows (unimodal and multimodal
/// layers) above an atom-colored skeleton of the molecule.
pub fn render_svg(trace: &AttnTrace) -> Result<String> {
    let graph = parse_smiles(&trace.smiles)?;
    let pos = layout_2d(&graph);
    let (mut minx, mut miny, mut maxx, mut maxy) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in &pos {
        minx = minx.min(x);
        miny = miny.min(y);
        maxx = maxx.max(x);
        maxy = maxy.max(y);
    }
    let unit = 40.0;
    let word_w = 90.0;
    let width = (trace.ut_words.len() as f64 * word_w + 120.0).max((maxx - minx) * unit + 80.0);
    let mol_top = 110.0;
    let height = mol_top + (maxy - miny) * unit + 80.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let max_ut = trace.ut_words.iter().map(|w| w.weight).fold(0.0, f64::max);
    let max_mt = trace.mt_words.iter().map(|w| w.weight).fold(0.0, f64::max);
    for (row, (label, ws, max)) in [("UT", &trace.ut_words, max_ut), ("MT", &trace.mt_words, max_mt)]
        .into_iter()
        .enumerate()
    {
        let y = 10.0 + row as f64 * 40.0;
        let _ = writeln!(s, r#"<text x="5" y="{:.1}">{label}</text>"#, y + 20.0);
        for (i, w) in ws.iter().enumerate() {
            let x = 40.0 + i as f64 * word_w;
            let norm = if max > 0.0 { w.weight / max } else { 0.0 };
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="30" fill="{}"><title>{:.4}</title></rect><text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                word_w - 4.0,
                heat(norm),
                w.weight,
                x + word_w / 2.0 - 2.0,
                y + 20.0,
                escape(&w.word)
            );
        }
    }
    let at = |i: usize| {
        (
            40.0 + (pos[i].0 - minx) * unit,
            mol_top + 20.0 + (pos[i].1 - miny) * unit,
        )
    };
    for b in &graph.bonds {
        let (x1, y1) = at(b.a);
        let (x2, y2) = at(b.b);
        let dash = if b.order == crate::chem::BondOrder::Aromatic { r#" stroke-dasharray="4 2""# } else { "" };
        let _ = writeln!(
            s,
            r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="black" stroke-width="{}"{dash}/>"#,
            b.order.valence_units()
        );
    }
    let max_atom = trace.mt_atoms.iter().map(|a| a.weight).fold(0.0, f64::max);
    for a in &trace.mt_atoms {
        let (x, y) = at(a.atom);
        let norm = if max_atom > 0.0 { a.weight / max_atom } else { 0.0 };
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.1}" cy="{y:.1}" r="11" fill="{}" stroke="gray"><title>{:.4}</title></circle><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            heat(norm),
            a.weight,
            y + 4.0,
            escape(&a.symbol)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
