//! Word-level text vocabulary and SMILES tokenization.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [CLS, SEP, PAD, UNK, MASK];

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const MASK_ID: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub max_len: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    max_len: usize,
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        Vocab::from_tokens(f.tokens, f.max_len)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            max_len: v.max_len,
            tokens: v.tokens,
        }
    }
}

impl Vocab {
    /// Specials first, then `tokens` in the given order (duplicates of a
    /// special are dropped).
    pub fn from_tokens(tokens: Vec<String>, max_len: usize) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())));
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab {
            tokens: all,
            index,
            max_len,
        }
    }

    /// Tokens with at least `min_freq` occurrences, sorted lexically after
    /// the specials so the result does not depend on input order.
    pub fn build<I, S>(tokens: I, min_freq: usize, max_len: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t.as_ref().to_string()).or_default() += 1;
        }
        let kept = counts.into_iter().filter(|(_, c)| *c >= min_freq).map(|(t, _)| t).collect();
        Self::from_tokens(kept, max_len)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn is_atom_token(t: &str) -> bool {
    t.starts_with('[') || matches!(t, "B" | "C" | "N" | "O" | "P" | "S" | "F" | "Cl" | "Br" | "I" | "b" | "c" | "n" | "o" | "p" | "s")
}

/// SMILES pieces: bracket atoms whole, `Cl`/`Br`, `%nn` closures, any other
/// character on its own. Each piece carries the index of the atom it
/// writes, counting atoms in text order.
pub fn smiles_pieces(smiles: &str) -> Vec<(String, Option<usize>)> {
    let chars: Vec<char> = smiles.chars().collect();
    let mut out = Vec::new();
    let mut atom = 0;
    let mut i = 0;
    while i < chars.len() {
        let len = match chars[i] {
            '[' => chars[i..].iter().position(|&c| c == ']').map_or(chars.len() - i, |p| p + 1),
            'C' if chars.get(i + 1) == Some(&'l') => 2,
            'B' if chars.get(i + 1) == Some(&'r') => 2,
            '%' if i + 2 < chars.len() && chars[i + 1].is_ascii_digit() && chars[i + 2].is_ascii_digit() => 3,
            _ => 1,
        };
        let piece: String = chars[i..i + len].iter().collect();
        let idx = is_atom_token(&piece).then(|| {
            atom += 1;
            atom - 1
        });
        out.push((piece, idx));
        i += len;
    }
    out
}

/// Lowercased words (alphanumerics and `_`) and single punctuation marks.
pub fn text_pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token ids with the atom each one writes (specials map to `None`).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedSmiles {
    pub ids: Vec<usize>,
    pub atoms: Vec<Option<usize>>,
}

/// `[CLS]` followed by the SMILES pieces, cut to `vocab.max_len`.
pub fn tokenize_smiles(vocab: &Vocab, smiles: &str) -> TokenizedSmiles {
    let mut ids = vec![CLS_ID];
    let mut atoms = vec![None];
    let pieces = smiles_pieces(smiles);
    if pieces.len() + 1 > vocab.max_len {
        log::warn!("{smiles} truncated to {} tokens", vocab.max_len);
    }
    for (p, a) in pieces.into_iter().take(vocab.max_len.saturating_sub(1)) {
        ids.push(vocab.id(&p));
        atoms.push(a);
    }
    TokenizedSmiles { ids, atoms }
}

/// `[CLS] words [SEP]`, with words cut so the total fits `vocab.max_len`.
pub fn tokenize_text(vocab: &Vocab, text: &str) -> Vec<usize> {
    let pieces = text_pieces(text);
    let room = vocab.max_len.saturating_sub(2);
    if pieces.len() > room {
        log::warn!("description truncated to {} tokens", vocab.max_len);
    }
    let mut ids = vec![CLS_ID];
    ids.extend(pieces.iter().take(room).map(|p| vocab.id(p)));
    ids.push(SEP_ID);
    ids
}

/// Whole-word occurrences of `name` in `text` under the text tokenizer.
pub fn count_mentions(text: &str, name: &str) -> usize {
    let name = name.to_lowercase();
    text_pieces(text).iter().filter(|w| **w == name).count()
}
