//! Canonical atom ranking and SMILES emission.
//!
//! Atom invariants are refined by neighbor ranks until the partition is
//! stable. Remaining ties are broken by branching on every member of the
//! first tied cell; the lexicographically smallest emitted string over all
//! leaves is the canonical form.

use std::fmt::Write;

use log::warn;

use super::smiles::implicit_hydrogen_count;
use super::{BondOrder, MolGraph};

/// Upper bound on explored tie-breaking leaves. Only reached by highly
/// symmetric graphs far beyond desk-scale molecules.
const MAX_LEAVES: usize = 20_000;

fn initial_ranks(g: &MolGraph) -> Vec<u64> {
    let keys: Vec<_> = g
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            (
                a.element.atomic_number(),
                a.isotope.unwrap_or(0),
                g.degree(i),
                a.formal_charge,
                a.total_h(),
                a.aromatic,
                a.in_ring,
            )
        })
        .collect();
    ranks_from_keys(&keys)
}

/// Rank of each key = number of keys strictly smaller.
fn ranks_from_keys<K: Ord>(keys: &[K]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    let mut ranks = vec![0; keys.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = if pos > 0 && keys[order[pos - 1]] == keys[i] {
            ranks[order[pos - 1]]
        } else {
            pos as u64
        };
    }
    ranks
}

fn class_count(ranks: &[u64]) -> usize {
    let mut r = ranks.to_vec();
    r.sort_unstable();
    r.dedup();
    r.len()
}

fn refine(g: &MolGraph, mut ranks: Vec<u64>) -> Vec<u64> {
    let mut classes = class_count(&ranks);
    loop {
        let keys: Vec<(u64, Vec<(u64, u8)>)> = (0..g.num_atoms())
            .map(|i| {
                let mut nb: Vec<(u64, u8)> = g
                    .neighbors(i)
                    .iter()
                    .map(|&(n, bi)| (ranks[n], g.bonds[bi].order.code()))
                    .collect();
                nb.sort_unstable();
                (ranks[i], nb)
            })
            .collect();
        let next = ranks_from_keys(&keys);
        let c = class_count(&next);
        ranks = next;
        if c == classes {
            return ranks;
        }
        classes = c;
    }
}

struct Search<'a> {
    g: &'a MolGraph,
    leaves: usize,
    best: Option<(String, Vec<u64>)>,
}

impl Search<'_> {
    fn run(&mut self, ranks: Vec<u64>) {
        if self.leaves >= MAX_LEAVES {
            return;
        }
        let ranks = refine(self.g, ranks);
        let n = ranks.len();
        // First tied cell in rank order.
        let mut sorted: Vec<usize> = (0..n).collect();
        sorted.sort_by_key(|&i| ranks[i]);
        let tied = sorted.windows(2).find(|w| ranks[w[0]] == ranks[w[1]]).map(|w| ranks[w[0]]);
        match tied {
            None => {
                self.leaves += 1;
                let s = emit(self.g, &ranks);
                if self.best.as_ref().is_none_or(|(b, _)| s < *b) {
                    self.best = Some((s, ranks));
                }
            }
            Some(cell) => {
                let members: Vec<usize> = (0..n).filter(|&i| ranks[i] == cell).collect();
                for &m in &members {
                    let split: Vec<u64> = (0..n)
                        .map(|i| 2 * ranks[i] + u64::from(ranks[i] == cell && i != m))
                        .collect();
                    self.run(split);
                }
            }
        }
    }
}

/// Canonical ranks (a permutation of `0..n`) and the canonical string.
fn canonical(g: &MolGraph) -> (String, Vec<u64>) {
    if g.num_atoms() == 0 {
        return (String::new(), Vec::new());
    }
    let mut search = Search {
        g,
        leaves: 0,
        best: None,
    };
    search.run(initial_ranks(g));
    if search.leaves >= MAX_LEAVES {
        warn!("canonical search for {:?} hit the leaf bound", g.source);
    }
    let (s, ranks) = search.best.expect("at least one leaf");
    let order = ranks_from_keys(&ranks);
    (s, order)
}

/// Canonical rank of every atom: a permutation of `0..n` that is the same
/// for every input numbering of the graph, up to automorphism.
pub fn canonical_ranks(g: &MolGraph) -> Vec<usize> {
    canonical(g).1.into_iter().map(|r| r as usize).collect()
}

/// Canonical SMILES: identical for every atom ordering of the same graph.
pub fn canonicalize(g: &MolGraph) -> String {
    canonical(g).0
}

fn bond_symbol(g: &MolGraph, a: usize, b: usize, order: BondOrder) -> &'static str {
    let both_aromatic = g.atoms[a].aromatic && g.atoms[b].aromatic;
    match order {
        BondOrder::Single if both_aromatic => "-",
        BondOrder::Single => "",
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic if both_aromatic => "",
        BondOrder::Aromatic => ":",
    }
}

fn atom_text(g: &MolGraph, i: usize, out: &mut String) {
    let a = &g.atoms[i];
    let sym = a.element.symbol();
    let organic = a.element.organic_valences().is_some();
    let plain = organic
        && a.formal_charge == 0
        && a.isotope.is_none()
        && match a.explicit_h {
            None => true,
            Some(h) => {
                let mut probe = g.clone();
                probe.atoms[i].explicit_h = None;
                implicit_hydrogen_count(&probe, i).ok() == Some(h)
            }
        };
    let sym_out = if a.aromatic { sym.to_lowercase() } else { sym.to_string() };
    if plain {
        out.push_str(&sym_out);
        return;
    }
    out.push('[');
    if let Some(iso) = a.isotope {
        write!(out, "{iso}").unwrap();
    }
    out.push_str(&sym_out);
    match a.total_h() {
        0 => {}
        1 => out.push('H'),
        h => write!(out, "H{h}").unwrap(),
    }
    match a.formal_charge {
        0 => {}
        1 => out.push('+'),
        -1 => out.push('-'),
        c if c > 0 => write!(out, "+{c}").unwrap(),
        c => write!(out, "-{}", -c).unwrap(),
    }
    out.push(']');
}

fn ring_label(d: usize, out: &mut String) {
    if d < 10 {
        write!(out, "{d}").unwrap();
    } else {
        write!(out, "%{d:02}").unwrap();
    }
}

struct Layout {
    children: Vec<Vec<(usize, usize)>>,
    /// Ring bonds opened at an atom, in discovery order.
    opens: Vec<Vec<usize>>,
    /// Ring bonds closed at an atom, in discovery order.
    closes: Vec<Vec<usize>>,
}

fn layout(g: &MolGraph, ranks: &[u64], root: usize, visited: &mut [bool], lay: &mut Layout, used: &mut [bool]) {
    // Iterative DFS keeping neighbor order by rank.
    let mut stack = vec![(root, 0usize)];
    visited[root] = true;
    let sorted_nbrs = |u: usize| -> Vec<(usize, usize)> {
        let mut v = g.neighbors(u).to_vec();
        v.sort_by_key(|&(n, _)| ranks[n]);
        v
    };
    let mut nbr_cache: Vec<Option<Vec<(usize, usize)>>> = vec![None; g.num_atoms()];
    while let Some(&mut (u, ref mut k)) = stack.last_mut() {
        let nbrs = nbr_cache[u].get_or_insert_with(|| sorted_nbrs(u));
        if *k >= nbrs.len() {
            stack.pop();
            continue;
        }
        let (v, bi) = nbrs[*k];
        *k += 1;
        if used[bi] {
            continue;
        }
        used[bi] = true;
        if visited[v] {
            lay.opens[v].push(bi);
            lay.closes[u].push(bi);
        } else {
            visited[v] = true;
            lay.children[u].push((v, bi));
            stack.push((v, 0));
        }
    }
}

/// Ring closures are found while the DFS is still inside the subtree, so a
/// bond is "opened" at its earlier atom. Emission follows the same order.
fn emit(g: &MolGraph, ranks: &[u64]) -> String {
    let n = g.num_atoms();
    let mut lay = Layout {
        children: vec![Vec::new(); n],
        opens: vec![Vec::new(); n],
        closes: vec![Vec::new(); n],
    };
    let mut visited = vec![false; n];
    let mut used = vec![false; g.bonds.len()];
    let mut roots: Vec<usize> = (0..n).collect();
    roots.sort_by_key(|&i| ranks[i]);
    let mut parts = Vec::new();
    for r in roots {
        if visited[r] {
            continue;
        }
        layout(g, ranks, r, &mut visited, &mut lay, &mut used);
        let mut s = String::new();
        let mut digits: Vec<Option<usize>> = vec![None; g.bonds.len()];
        let mut free = vec![true; 100];
        write_atom(g, r, &lay, &mut digits, &mut free, &mut s);
        parts.push(s);
    }
    parts.sort();
    parts.join(".")
}

fn write_atom(g: &MolGraph, root: usize, lay: &Layout, digits: &mut [Option<usize>], free: &mut [bool], out: &mut String) {
    enum Step {
        Atom(usize),
        Text(&'static str),
    }
    let mut stack = vec![Step::Atom(root)];
    while let Some(step) = stack.pop() {
        let u = match step {
            Step::Text(t) => {
                out.push_str(t);
                continue;
            }
            Step::Atom(u) => u,
        };
        atom_text(g, u, out);
        for &bi in &lay.closes[u] {
            let d = digits[bi].take().expect("ring bond opened before closing");
            free[d] = true;
            ring_label(d, out);
        }
        for &bi in &lay.opens[u] {
            let d = (1..100).find(|&d| free[d]).expect("fewer than 100 open rings");
            free[d] = false;
            digits[bi] = Some(d);
            let b = &g.bonds[bi];
            out.push_str(bond_symbol(g, b.a, b.b, b.order));
            ring_label(d, out);
        }
        let kids = &lay.children[u];
        for (j, &(v, bi)) in kids.iter().enumerate().rev() {
            let last = j + 1 == kids.len();
            if !last {
                stack.push(Step::Text(")"));
            }
            stack.push(Step::Atom(v));
            stack.push(Step::Text(bond_symbol(g, u, v, g.bonds[bi].order)));
            if !last {
                stack.push(Step::Text("("));
            }
        }
    }
}
