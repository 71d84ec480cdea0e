use std::collections::BTreeSet;
use std::sync::OnceLock;

use super::elements::{element_by_symbol, Element};
use super::{BondOrder, ChemError, MolGraph, Result};

const BUNDLED: &str = include_str!("../../data/patterns.txt");

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AtomConstraint {
    pub element: Option<Element>,
    pub aromatic: Option<bool>,
    pub h_count: Option<u32>,
    pub heavy_degree: Option<usize>,
    pub charge: Option<i8>,
    pub saturated: bool,
    pub neighbors_saturated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BondConstraint {
    pub a: usize,
    pub b: usize,
    /// `None` matches any order.
    pub order: Option<BondOrder>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    pub name: String,
    pub atoms: Vec<AtomConstraint>,
    pub bonds: Vec<BondConstraint>,
    /// Atom visiting order in which every atom after the first is bonded to
    /// an earlier one.
    order: Vec<usize>,
}

fn perr<T>(msg: impl Into<String>) -> Result<T> {
    Err(ChemError::Pattern(msg.into()))
}

fn parse_atom(tok: &str) -> Result<AtomConstraint> {
    let (sym, flags) = match tok.find('{') {
        Some(i) if tok.ends_with('}') => (&tok[..i], &tok[i + 1..tok.len() - 1]),
        Some(_) => return perr(format!("unterminated constraint list in {tok:?}")),
        None => (tok, ""),
    };
    let mut c = AtomConstraint {
        element: Some(element_by_symbol(sym).ok_or_else(|| ChemError::Pattern(format!("unknown element {sym:?}")))?),
        ..Default::default()
    };
    for f in flags.split(',').map(str::trim).filter(|f| !f.is_empty()) {
        let num = |p: &str| f[p.len()..].parse::<i64>().map_err(|_| ChemError::Pattern(format!("bad number in {f:?}")));
        match f {
            "arom" => c.aromatic = Some(true),
            "aliph" => c.aromatic = Some(false),
            "sat" => c.saturated = true,
            "nbrsat" => c.neighbors_saturated = true,
            _ if f.starts_with("deg") => c.heavy_degree = Some(num("deg")? as usize),
            _ if f.starts_with("chg") => c.charge = Some(num("chg")? as i8),
            _ if f.starts_with('h') => c.h_count = Some(num("h")? as u32),
            _ => return perr(format!("unknown constraint {f:?}")),
        }
    }
    Ok(c)
}

fn parse_bond(tok: &str, n: usize) -> Result<BondConstraint> {
    let Some(at) = tok.find(['-', '=', '#', ':', '~']) else {
        return perr(format!("bond {tok:?} lacks an order symbol"));
    };
    let idx = |s: &str| -> Result<usize> {
        match s.parse::<usize>() {
            Ok(i) if i < n => Ok(i),
            _ => perr(format!("bad atom index in bond {tok:?}")),
        }
    };
    let (a, b) = (idx(&tok[..at])?, idx(&tok[at + 1..])?);
    if a == b {
        return perr(format!("bond {tok:?} joins an atom to itself"));
    }
    let order = match &tok[at..at + 1] {
        "-" => Some(BondOrder::Single),
        "=" => Some(BondOrder::Double),
        "#" => Some(BondOrder::Triple),
        ":" => Some(BondOrder::Aromatic),
        _ => None,
    };
    Ok(BondConstraint { a, b, order })
}

impl Pattern {
    pub fn new(name: impl Into<String>, atoms: Vec<AtomConstraint>, bonds: Vec<BondConstraint>) -> Result<Self> {
        let name = name.into();
        if atoms.is_empty() || atoms.len() > 8 {
            return perr(format!("{name}: patterns hold 1 to 8 atoms"));
        }
        let mut order = vec![0];
        let mut seen = vec![false; atoms.len()];
        seen[0] = true;
        let mut k = 0;
        while k < order.len() {
            let u = order[k];
            for b in &bonds {
                for (x, y) in [(b.a, b.b), (b.b, b.a)] {
                    if x == u && !seen[y] {
                        seen[y] = true;
                        order.push(y);
                    }
                }
            }
            k += 1;
        }
        if order.len() != atoms.len() {
            return perr(format!("{name}: pattern graph is not connected"));
        }
        Ok(Pattern { name, atoms, bonds, order })
    }
}

/// Parses pattern definitions in the bundled table format.
pub fn parse_patterns(text: &str) -> Result<Vec<Pattern>> {
    let mut out: Vec<Pattern> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let cols: Vec<&str> = line.split('|').map(str::trim).collect();
        if cols.len() != 3 {
            return perr(format!("expected 3 columns: {line:?}"));
        }
        let atoms = cols[1].split_whitespace().map(parse_atom).collect::<Result<Vec<_>>>()?;
        let bonds = cols[2]
            .split_whitespace()
            .map(|t| parse_bond(t, atoms.len()))
            .collect::<Result<Vec<_>>>()?;
        if out.iter().any(|p| p.name == cols[0]) {
            return perr(format!("duplicate pattern {}", cols[0]));
        }
        out.push(Pattern::new(cols[0], atoms, bonds)?);
    }
    Ok(out)
}

pub fn bundled_patterns() -> &'static [Pattern] {
    static CELL: OnceLock<Vec<Pattern>> = OnceLock::new();
    CELL.get_or_init(|| parse_patterns(BUNDLED).expect("bundled pattern table is valid"))
}

/// Looks up a bundled pattern by name.
pub fn pattern(name: &str) -> Option<&'static Pattern> {
    bundled_patterns().iter().find(|p| p.name == name)
}

fn atom_saturated(g: &MolGraph, i: usize) -> bool {
    g.neighbors(i)
        .iter()
        .all(|&(_, bi)| !matches!(g.bonds[bi].order, BondOrder::Double | BondOrder::Triple))
}

fn atom_ok(g: &MolGraph, i: usize, c: &AtomConstraint) -> bool {
    let a = &g.atoms[i];
    c.element.is_none_or(|e| e == a.element)
        && c.aromatic.is_none_or(|x| x == a.aromatic)
        && c.h_count.is_none_or(|h| h == a.total_h())
        && c.heavy_degree.is_none_or(|d| d == g.heavy_degree(i))
        && c.charge.is_none_or(|q| q == a.formal_charge)
        && (!c.saturated || atom_saturated(g, i))
        && (!c.neighbors_saturated || g.neighbors(i).iter().all(|&(n, _)| atom_saturated(g, n)))
}

fn extend(g: &MolGraph, p: &Pattern, k: usize, map: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
    if k == p.order.len() {
        let mut full = vec![0; p.atoms.len()];
        for (slot, &pi) in p.order.iter().enumerate() {
            full[pi] = map[slot];
        }
        out.push(full);
        return;
    }
    let pi = p.order[k];
    'cand: for gi in 0..g.num_atoms() {
        if used[gi] || !atom_ok(g, gi, &p.atoms[pi]) {
            continue;
        }
        for b in &p.bonds {
            let other = if b.a == pi {
                b.b
            } else if b.b == pi {
                b.a
            } else {
                continue;
            };
            if let Some(go) = p.order[..k].iter().position(|&x| x == other).map(|s| map[s]) {
                match g.bond_between(gi, go) {
                    Some(bond) if b.order.is_none_or(|o| o == bond.order) => {}
                    _ => continue 'cand,
                }
            }
        }
        used[gi] = true;
        map.push(gi);
        extend(g, p, k + 1, map, used, out);
        map.pop();
        used[gi] = false;
    }
}

/// All matches of `p` in `g`, one per distinct matched atom set. Each
/// match maps pattern atom `j` to graph atom `m[j]`.
pub fn match_pattern(g: &MolGraph, p: &Pattern) -> Vec<Vec<usize>> {
    let mut raw = Vec::new();
    extend(g, p, 0, &mut Vec::new(), &mut vec![false; g.num_atoms()], &mut raw);
    let mut seen = BTreeSet::new();
    raw.into_iter()
        .filter(|m| {
            let mut key = m.clone();
            key.sort_unstable();
            seen.insert(key)
        })
        .collect()
}
