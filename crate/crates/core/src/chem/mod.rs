//! SMILES parsing, ring perception, canonical SMILES and substructure
//! patterns.
//!
//! The dialect covers the organic subset, bracket atoms with isotope,
//! hydrogen count and charge, the bond symbols `- = # :`, branches, ring
//! closures (`1`..`9`, `%nn`) and `.` for disconnected components.
//! Stereo marks (`/`, `\`, `@`) are accepted and dropped.

mod canon;
mod elements;
mod pattern;
mod rings;
mod smiles;

use std::fmt;

use thiserror::Error;

pub use canon::{canonical_ranks, canonicalize};
pub use elements::{element_by_symbol, Element, ElementData};
pub use pattern::{bundled_patterns, match_pattern, parse_patterns, pattern, AtomConstraint, BondConstraint, Pattern};
pub use rings::{ring_info, RingInfo};
pub use smiles::{implicit_hydrogen_count, parse_smiles};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChemError {
    #[error("SMILES syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("valence error on atom {atom} ({element}): bond order sum {order_sum} exceeds the allowed valence")]
    Valence { atom: usize, element: String, order_sum: u32 },
    #[error("aromatic atom {atom} is not in a ring")]
    AromaticOutsideRing { atom: usize },
    #[error("empty SMILES")]
    Empty,
    #[error("pattern definition error: {0}")]
    Pattern(String),
}

pub type Result<T> = std::result::Result<T, ChemError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Small integer code used by canonical invariants.
    pub fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }

    /// Bond order counted for valence, aromatic counted as 1.
    pub fn valence_units(self) -> u32 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub element: Element,
    pub aromatic: bool,
    pub formal_charge: i8,
    pub isotope: Option<u16>,
    /// Hydrogen count written inside a bracket atom; `None` for organic
    /// subset atoms.
    pub explicit_h: Option<u8>,
    pub implicit_h: u8,
    pub index: usize,
    pub in_ring: bool,
}

impl Atom {
    pub fn total_h(&self) -> u32 {
        self.implicit_h as u32 + self.explicit_h.unwrap_or(0) as u32
    }

    pub fn is_bracket(&self) -> bool {
        self.explicit_h.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.a == atom {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Clone, Debug)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    /// Smallest cycle basis, each ring as atom indices in cycle order.
    pub rings: Vec<Vec<usize>>,
    pub source: String,
    adj: Vec<Vec<(usize, usize)>>,
}

impl MolGraph {
    pub(crate) fn assemble(atoms: Vec<Atom>, bonds: Vec<Bond>, source: String) -> Self {
        let mut adj = vec![Vec::new(); atoms.len()];
        for (i, b) in bonds.iter().enumerate() {
            adj[b.a].push((b.b, i));
            adj[b.b].push((b.a, i));
        }
        MolGraph {
            atoms,
            bonds,
            rings: Vec::new(),
            source,
            adj,
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    /// `(neighbor, bond index)` pairs of `atom`.
    pub fn neighbors(&self, atom: usize) -> &[(usize, usize)] {
        &self.adj[atom]
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.adj[atom].len()
    }

    /// Neighbors that are not hydrogen atoms.
    pub fn heavy_degree(&self, atom: usize) -> usize {
        self.adj[atom]
            .iter()
            .filter(|(n, _)| !self.atoms[*n].element.is_hydrogen())
            .count()
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.adj[a].iter().find(|(n, _)| *n == b).map(|(_, i)| &self.bonds[*i])
    }

    /// Connected component label for every atom, numbered from 0 in order
    /// of the lowest atom index.
    pub fn components(&self) -> Vec<usize> {
        let n = self.atoms.len();
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            let mut stack = vec![s];
            comp[s] = next;
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adj[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn num_components(&self) -> usize {
        self.components().iter().max().map_or(0, |m| m + 1)
    }

    /// Same graph with atoms renumbered so that old atom `i` becomes
    /// `perm[i]`. Ring perception is redone on the new numbering.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        let n = self.atoms.len();
        assert_eq!(perm.len(), n);
        let mut atoms = vec![None; n];
        for (i, a) in self.atoms.iter().enumerate() {
            let mut a = a.clone();
            a.index = perm[i];
            atoms[perm[i]] = Some(a);
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond {
                a: perm[b.a],
                b: perm[b.b],
                order: b.order,
            })
            .collect();
        let mut g = MolGraph::assemble(atoms.into_iter().map(Option::unwrap).collect(), bonds, self.source.clone());
        g.rings = rings::smallest_cycle_basis(&g);
        g
    }
}

impl fmt::Display for MolGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&canonicalize(self))
    }
}
