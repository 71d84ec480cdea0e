//! Smallest cycle basis by Horton's candidate set and GF(2) elimination.

use std::collections::{BTreeSet, VecDeque};

use super::MolGraph;

#[derive(Clone, Debug, PartialEq)]
pub struct RingInfo {
    pub rings: Vec<Vec<usize>>,
    pub atom_in_ring: Vec<bool>,
    pub bond_in_ring: Vec<bool>,
}

pub fn ring_info(g: &MolGraph) -> RingInfo {
    let mut atom_in_ring = vec![false; g.num_atoms()];
    let mut bond_in_ring = vec![false; g.bonds.len()];
    for ring in &g.rings {
        for (k, &a) in ring.iter().enumerate() {
            atom_in_ring[a] = true;
            let b = ring[(k + 1) % ring.len()];
            if let Some(&(_, bi)) = g.neighbors(a).iter().find(|(n, _)| *n == b) {
                bond_in_ring[bi] = true;
            }
        }
    }
    RingInfo {
        rings: g.rings.clone(),
        atom_in_ring,
        bond_in_ring,
    }
}

type Bits = Vec<u64>;

fn set_bit(bits: &mut Bits, i: usize) {
    bits[i / 64] ^= 1 << (i % 64);
}

fn bfs_tree(g: &MolGraph, root: usize) -> (Vec<usize>, Vec<Option<(usize, usize)>>) {
    let n = g.num_atoms();
    let mut dist = vec![usize::MAX; n];
    let mut parent = vec![None; n];
    dist[root] = 0;
    let mut q = VecDeque::from([root]);
    while let Some(u) = q.pop_front() {
        let mut nbrs = g.neighbors(u).to_vec();
        nbrs.sort_unstable();
        for (v, bi) in nbrs {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                parent[v] = Some((u, bi));
                q.push_back(v);
            }
        }
    }
    (dist, parent)
}

fn path_to_root(parent: &[Option<(usize, usize)>], mut v: usize) -> (Vec<usize>, Vec<usize>) {
    let mut atoms = vec![v];
    let mut bonds = Vec::new();
    while let Some((p, bi)) = parent[v] {
        bonds.push(bi);
        atoms.push(p);
        v = p;
    }
    (atoms, bonds)
}

/// Orders the atoms of a cycle given by its bond set, starting from the
/// lowest atom index and stepping to its lower-indexed ring neighbor.
fn cycle_atoms(g: &MolGraph, bits: &Bits) -> Vec<usize> {
    let in_cycle = |bi: usize| bits[bi / 64] >> (bi % 64) & 1 == 1;
    let bonds: Vec<usize> = (0..g.bonds.len()).filter(|&b| in_cycle(b)).collect();
    let start = bonds.iter().flat_map(|&b| [g.bonds[b].a, g.bonds[b].b]).min().unwrap();
    let ring_nbrs = |a: usize| -> Vec<usize> {
        let mut v: Vec<usize> = g
            .neighbors(a)
            .iter()
            .filter(|(_, bi)| in_cycle(*bi))
            .map(|(n, _)| *n)
            .collect();
        v.sort_unstable();
        v
    };
    let mut out = vec![start];
    let mut prev = start;
    let mut cur = ring_nbrs(start)[0];
    while cur != start {
        out.push(cur);
        let next = ring_nbrs(cur).into_iter().find(|&n| n != prev).unwrap();
        prev = cur;
        cur = next;
    }
    out
}

pub(crate) fn smallest_cycle_basis(g: &MolGraph) -> Vec<Vec<usize>> {
    let (n, m) = (g.num_atoms(), g.bonds.len());
    let target = m + g.num_components() - n;
    if target == 0 {
        return Vec::new();
    }
    let words = m.div_ceil(64);
    let mut candidates: BTreeSet<(usize, Bits)> = BTreeSet::new();
    for root in 0..n {
        let (dist, parent) = bfs_tree(g, root);
        for (bi, b) in g.bonds.iter().enumerate() {
            if dist[b.a] == usize::MAX || parent[b.a].map(|p| p.1) == Some(bi) || parent[b.b].map(|p| p.1) == Some(bi) {
                continue;
            }
            let (pa, ea) = path_to_root(&parent, b.a);
            let (pb, eb) = path_to_root(&parent, b.b);
            let shared = pa.iter().filter(|a| pb.contains(a)).count();
            if shared != 1 {
                continue;
            }
            let mut bits = vec![0u64; words];
            for &e in ea.iter().chain(&eb) {
                set_bit(&mut bits, e);
            }
            set_bit(&mut bits, bi);
            candidates.insert((ea.len() + eb.len() + 1, bits));
        }
    }

    // Reduced basis keyed by pivot bit (lowest set bit).
    let mut basis: Vec<(usize, Bits)> = Vec::new();
    let mut chosen = Vec::new();
    for (_, cand) in candidates {
        let mut v = cand.clone();
        for (pivot, row) in &basis {
            if v[pivot / 64] >> (pivot % 64) & 1 == 1 {
                v.iter_mut().zip(row).for_each(|(x, y)| *x ^= y);
            }
        }
        let Some(pivot) = (0..m).find(|&i| v[i / 64] >> (i % 64) & 1 == 1) else {
            continue;
        };
        for (_, row) in basis.iter_mut() {
            if row[pivot / 64] >> (pivot % 64) & 1 == 1 {
                row.iter_mut().zip(&v).for_each(|(x, y)| *x ^= y);
            }
        }
        basis.push((pivot, v));
        chosen.push(cand);
        if chosen.len() == target {
            break;
        }
    }
    chosen.iter().map(|bits| cycle_atoms(g, bits)).collect()
}
