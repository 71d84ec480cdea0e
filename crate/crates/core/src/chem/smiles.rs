use log::warn;

use super::elements::{element_by_symbol, Element};
use super::{rings, Atom, Bond, BondOrder, ChemError, MolGraph, Result};

fn syntax<T>(pos: usize, msg: impl Into<String>) -> Result<T> {
    Err(ChemError::Syntax { pos, msg: msg.into() })
}

struct Pending {
    atom: usize,
    bond: Option<BondOrder>,
    pos: usize,
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    /// Bonds written without a symbol.
    implicit_bond: Vec<bool>,
    stereo_dropped: bool,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn add_atom(&mut self, element: Element, aromatic: bool, charge: i8, isotope: Option<u16>, h: Option<u8>) -> usize {
        let index = self.atoms.len();
        self.atoms.push(Atom {
            element,
            aromatic,
            formal_charge: charge,
            isotope,
            explicit_h: h,
            implicit_h: 0,
            index,
            in_ring: false,
        });
        index
    }

    fn add_bond(&mut self, a: usize, b: usize, order: Option<BondOrder>, pos: usize) -> Result<()> {
        if a == b {
            return syntax(pos, "atom bonded to itself");
        }
        if self.bonds.iter().any(|x| (x.a == a && x.b == b) || (x.a == b && x.b == a)) {
            return syntax(pos, "duplicate bond between the same atoms");
        }
        self.implicit_bond.push(order.is_none());
        let order = order.unwrap_or(if self.atoms[a].aromatic && self.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        });
        self.bonds.push(Bond { a, b, order });
        Ok(())
    }

    fn organic(&mut self) -> Option<usize> {
        let c = self.peek()?;
        let next = self.s.get(self.pos + 1).copied();
        let (sym, aromatic, len) = match (c, next) {
            (b'C', Some(b'l')) => ("Cl", false, 2),
            (b'B', Some(b'r')) => ("Br", false, 2),
            (b'B', _) => ("B", false, 1),
            (b'C', _) => ("C", false, 1),
            (b'N', _) => ("N", false, 1),
            (b'O', _) => ("O", false, 1),
            (b'P', _) => ("P", false, 1),
            (b'S', _) => ("S", false, 1),
            (b'F', _) => ("F", false, 1),
            (b'I', _) => ("I", false, 1),
            (b'b', _) => ("B", true, 1),
            (b'c', _) => ("C", true, 1),
            (b'n', _) => ("N", true, 1),
            (b'o', _) => ("O", true, 1),
            (b'p', _) => ("P", true, 1),
            (b's', _) => ("S", true, 1),
            _ => return None,
        };
        self.pos += len;
        let el = element_by_symbol(sym).expect("organic subset is in the element table");
        Some(self.add_atom(el, aromatic, 0, None, None))
    }

    fn number(&mut self) -> Option<u32> {
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if start == self.pos {
            return None;
        }
        std::str::from_utf8(&self.s[start..self.pos]).ok()?.parse().ok()
    }

    fn bracket(&mut self) -> Result<usize> {
        let open = self.pos;
        self.pos += 1;
        let isotope = match self.number() {
            Some(n) if n == 0 || n > u16::MAX as u32 => return syntax(open, "isotope out of range"),
            Some(n) => Some(n as u16),
            None => None,
        };
        let start = self.pos;
        let (element, aromatic) = match self.peek() {
            Some(c) if c.is_ascii_uppercase() => {
                let two = self
                    .s
                    .get(self.pos + 1)
                    .filter(|c| c.is_ascii_lowercase())
                    .and_then(|&l| element_by_symbol(&format!("{}{}", c as char, l as char)));
                match two {
                    Some(e) => {
                        self.pos += 2;
                        (e, false)
                    }
                    None => {
                        self.pos += 1;
                        match element_by_symbol(&(c as char).to_string()) {
                            Some(e) => (e, false),
                            None => return syntax(start, "unknown element symbol"),
                        }
                    }
                }
            }
            Some(c) if c.is_ascii_lowercase() => {
                let rest = &self.s[self.pos..];
                let (sym, len) = if rest.starts_with(b"se") {
                    ("Se", 2)
                } else if rest.starts_with(b"as") {
                    ("As", 2)
                } else {
                    match c {
                        b'b' => ("B", 1),
                        b'c' => ("C", 1),
                        b'n' => ("N", 1),
                        b'o' => ("O", 1),
                        b'p' => ("P", 1),
                        b's' => ("S", 1),
                        _ => return syntax(start, "unknown aromatic symbol"),
                    }
                };
                self.pos += len;
                (element_by_symbol(sym).expect("table entry"), true)
            }
            Some(b'*') => return syntax(start, "wildcard atoms are not supported"),
            _ => return syntax(start, "expected element symbol in bracket atom"),
        };
        while self.peek() == Some(b'@') {
            self.pos += 1;
            self.stereo_dropped = true;
        }
        let mut h = 0u8;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            h = match self.number() {
                Some(n) if n > 9 => return syntax(self.pos, "hydrogen count out of range"),
                Some(n) => n as u8,
                None => 1,
            };
        }
        let mut charge = 0i32;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(n) = self.number() {
                charge = unit * n as i32;
            } else {
                charge = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    charge += unit;
                }
            }
            if charge.abs() > 15 {
                return syntax(self.pos, "charge out of range");
            }
        }
        if self.peek() == Some(b':') {
            self.pos += 1;
            if self.number().is_none() {
                return syntax(self.pos, "expected atom class number");
            }
        }
        if self.peek() != Some(b']') {
            return syntax(self.pos, "unterminated bracket atom");
        }
        self.pos += 1;
        Ok(self.add_atom(element, aromatic, charge as i8, isotope, Some(h)))
    }

    fn parse(&mut self) -> Result<()> {
        let mut prev: Option<usize> = None;
        let mut bond: Option<(BondOrder, usize)> = None;
        let mut branches: Vec<usize> = Vec::new();
        let mut ring_open: Vec<Option<Pending>> = (0..100).map(|_| None).collect();
        let mut need_atom_after_open = false;

        while let Some(c) = self.peek() {
            let here = self.pos;
            match c {
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if bond.is_some() {
                        return syntax(here, "two consecutive bond symbols");
                    }
                    if prev.is_none() {
                        return syntax(here, "bond symbol without a preceding atom");
                    }
                    let order = match c {
                        b'=' => BondOrder::Double,
                        b'#' => BondOrder::Triple,
                        b':' => BondOrder::Aromatic,
                        b'-' => BondOrder::Single,
                        _ => {
                            self.stereo_dropped = true;
                            BondOrder::Single
                        }
                    };
                    bond = Some((order, here));
                    self.pos += 1;
                }
                b'(' => {
                    let Some(p) = prev else {
                        return syntax(here, "branch without a preceding atom");
                    };
                    if bond.is_some() {
                        return syntax(here, "bond symbol before branch");
                    }
                    branches.push(p);
                    need_atom_after_open = true;
                    self.pos += 1;
                }
                b')' => {
                    if need_atom_after_open {
                        return syntax(here, "empty branch");
                    }
                    if bond.is_some() {
                        return syntax(here, "dangling bond symbol");
                    }
                    let Some(p) = branches.pop() else {
                        return syntax(here, "unbalanced ')'");
                    };
                    prev = Some(p);
                    self.pos += 1;
                }
                b'.' => {
                    if bond.is_some() || prev.is_none() {
                        return syntax(here, "misplaced '.'");
                    }
                    if !branches.is_empty() {
                        return syntax(here, "'.' inside a branch");
                    }
                    prev = None;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let Some(p) = prev else {
                        return syntax(here, "ring closure without a preceding atom");
                    };
                    let digit = if c == b'%' {
                        self.pos += 1;
                        let d = self.s.get(self.pos..self.pos + 2).filter(|d| d.iter().all(u8::is_ascii_digit));
                        let Some(d) = d else {
                            return syntax(here, "'%' must be followed by two digits");
                        };
                        self.pos += 2;
                        ((d[0] - b'0') * 10 + (d[1] - b'0')) as usize
                    } else {
                        self.pos += 1;
                        (c - b'0') as usize
                    };
                    let order = bond.take();
                    match ring_open[digit].take() {
                        None => {
                            ring_open[digit] = Some(Pending {
                                atom: p,
                                bond: order.map(|o| o.0),
                                pos: here,
                            });
                        }
                        Some(open) => {
                            let order = match (open.bond, order.map(|o| o.0)) {
                                (Some(a), Some(b)) if a != b => {
                                    return syntax(here, "conflicting ring-closure bond orders")
                                }
                                (Some(a), _) => Some(a),
                                (None, b) => b,
                            };
                            self.add_bond(open.atom, p, order, here)?;
                        }
                    }
                }
                b'[' | b'A'..=b'Z' | b'a'..=b'z' => {
                    let atom = if c == b'[' {
                        self.bracket()?
                    } else {
                        match self.organic() {
                            Some(a) => a,
                            None => return syntax(here, format!("unknown symbol '{}'", c as char)),
                        }
                    };
                    if let Some(p) = prev {
                        self.add_bond(p, atom, bond.take().map(|b| b.0), here)?;
                    } else if let Some((_, at)) = bond {
                        return syntax(at, "bond symbol without a preceding atom");
                    }
                    need_atom_after_open = false;
                    prev = Some(atom);
                }
                b']' => return syntax(here, "unbalanced ']'"),
                _ => return syntax(here, format!("unexpected character '{}'", c as char)),
            }
        }
        if let Some((_, at)) = bond {
            return syntax(at, "dangling bond symbol");
        }
        if prev.is_none() {
            return syntax(self.s.len(), "trailing '.'");
        }
        if !branches.is_empty() {
            return syntax(self.s.len(), "unbalanced '('");
        }
        if let Some(p) = ring_open.iter().flatten().next() {
            return syntax(p.pos, "unclosed ring-closure digit");
        }
        Ok(())
    }
}

fn bond_order_sum(g: &MolGraph, atom: usize) -> (u32, u32) {
    let a = &g.atoms[atom];
    let mut doubled_hcount = 0u32;
    let mut valence = 0u32;
    for &(_, bi) in g.neighbors(atom) {
        let order = g.bonds[bi].order;
        valence += order.valence_units();
        doubled_hcount += match order {
            BondOrder::Aromatic if a.aromatic && matches!(a.element, Element::O | Element::S) => 2,
            BondOrder::Aromatic => 3,
            o => 2 * o.valence_units(),
        };
    }
    (doubled_hcount / 2, valence)
}

/// Implicit hydrogens of organic-subset atom `atom` given its bonds.
///
/// Aromatic bonds contribute 1.5 to the order sum of `b c n p` atoms
/// (rounded down after summing) and 1 for `o s`. The valence check counts
/// every aromatic bond as 1. Bracket atoms always return 0.
pub fn implicit_hydrogen_count(g: &MolGraph, atom: usize) -> Result<u8> {
    let a = &g.atoms[atom];
    if a.is_bracket() {
        return Ok(0);
    }
    let valences = a.element.organic_valences().ok_or_else(|| ChemError::Syntax {
        pos: 0,
        msg: format!("{} is not in the organic subset", a.element),
    })?;
    let (order_sum, check) = bond_order_sum(g, atom);
    let max = *valences.last().unwrap();
    if check > max {
        return Err(ChemError::Valence {
            atom,
            element: a.element.symbol().to_string(),
            order_sum: check,
        });
    }
    Ok(valences
        .iter()
        .find(|&&v| v >= order_sum)
        .map_or(0, |&v| (v - order_sum) as u8))
}

/// Parses a SMILES string into a molecular graph with implicit
/// hydrogens and ring information.
pub fn parse_smiles(text: &str) -> Result<MolGraph> {
    if text.is_empty() {
        return Err(ChemError::Empty);
    }
    let mut p = Parser {
        s: text.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        implicit_bond: Vec::new(),
        stereo_dropped: false,
    };
    p.parse()?;
    if p.stereo_dropped {
        warn!("stereo marks in {text:?} were ignored");
    }
    let mut g = MolGraph::assemble(p.atoms, p.bonds, text.to_string());
    g.rings = rings::smallest_cycle_basis(&g);
    let info = rings::ring_info(&g);
    for (atom, flag) in g.atoms.iter_mut().zip(&info.atom_in_ring) {
        atom.in_ring = *flag;
    }
    // An unwritten bond joining two aromatic atoms outside any ring (the
    // biaryl link) is single.
    for (bi, bond) in g.bonds.iter_mut().enumerate() {
        if p.implicit_bond[bi] && bond.order == BondOrder::Aromatic && !info.bond_in_ring[bi] {
            bond.order = BondOrder::Single;
        }
    }
    for i in 0..g.atoms.len() {
        let h = implicit_hydrogen_count(&g, i)?;
        g.atoms[i].implicit_h = h;
    }
    if let Some(a) = g.atoms.iter().find(|a| a.aromatic && !a.in_ring) {
        return Err(ChemError::AromaticOutsideRing { atom: a.index });
    }
    Ok(g)
}
