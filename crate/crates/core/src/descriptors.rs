//! A fixed registry of 24 molecular descriptors computed from a
//! [`MolGraph`].
//!
//! Rule tables:
//!
//! * H-bond donor: N or O carrying at least one hydrogen.
//! * H-bond acceptor: O with formal charge <= 0; neutral aromatic N without
//!   hydrogen; neutral aliphatic N that is not bonded to a carbon or sulfur
//!   double-bonded to oxygen (amide and sulfonamide nitrogens are excluded).
//! * Rotatable bond: non-ring single bond between heavy atoms that each have
//!   at least two heavy neighbors, excluding the amide C-N bond.
//! * sp3 carbon: aliphatic carbon with only single bonds.
//! * LongestCarbonChain: atom count of the longest path through aliphatic
//!   carbons outside rings.
//! * `fr_*`: match counts of the bundled functional-group patterns.

use std::sync::OnceLock;

use thiserror::Error;

use crate::chem::{match_pattern, pattern, BondOrder, Element, MolGraph};

const REGISTRY: &str = include_str!("../data/descriptors.tsv");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DescriptorError {
    #[error("unknown descriptor {0:?}")]
    UnknownDescriptor(String),
    #[error("descriptor {name} produced a non-finite value")]
    NonFinite { name: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    Continuous,
    Count,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSpec {
    pub name: String,
    pub kind: DescriptorKind,
    pub phrase_bank: Vec<String>,
    pub sampling_weight: f64,
}

pub fn registry() -> &'static [DescriptorSpec] {
    static CELL: OnceLock<Vec<DescriptorSpec>> = OnceLock::new();
    CELL.get_or_init(|| {
        REGISTRY
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                assert_eq!(f.len(), 4, "registry line {l:?}");
                DescriptorSpec {
                    name: f[0].to_string(),
                    kind: match f[1] {
                        "continuous" => DescriptorKind::Continuous,
                        "count" => DescriptorKind::Count,
                        k => panic!("unknown descriptor kind {k}"),
                    },
                    sampling_weight: f[2].parse().expect("sampling weight"),
                    phrase_bank: f[3].split(" | ").map(|s| s.trim().to_string()).collect(),
                }
            })
            .collect()
    })
}

/// Registry position of `name`.
pub fn descriptor_index(name: &str) -> Option<usize> {
    registry().iter().position(|d| d.name == name)
}

pub fn descriptor_names() -> Vec<&'static str> {
    registry().iter().map(|d| d.name.as_str()).collect()
}

/// One value per registry entry, in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorVector {
    pub values: Vec<f64>,
}

impl DescriptorVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        descriptor_index(name).map(|i| self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        registry().iter().map(|d| d.name.as_str()).zip(self.values.iter().copied())
    }
}

fn atom_mass(g: &MolGraph, exact: bool) -> f64 {
    let h = Element::H.data();
    let h_mass = if exact { h.monoisotopic_mass } else { h.standard_weight };
    let mut masses: Vec<f64> = g
        .atoms
        .iter()
        .map(|a| {
            let d = a.element.data();
            let own = match a.isotope {
                Some(iso) => iso as f64,
                None if exact => d.monoisotopic_mass,
                None => d.standard_weight,
            };
            own + a.total_h() as f64 * h_mass
        })
        .collect();
    // A fixed summation order keeps the float result independent of atom
    // numbering.
    masses.sort_by(f64::total_cmp);
    masses.iter().sum()
}

fn heavy(g: &MolGraph) -> impl Iterator<Item = usize> + '_ {
    (0..g.num_atoms()).filter(move |&i| !g.atoms[i].element.is_hydrogen())
}

/// Carbon or sulfur double-bonded to oxygen.
fn is_acyl_center(g: &MolGraph, i: usize) -> bool {
    matches!(g.atoms[i].element, Element::C | Element::S)
        && g.neighbors(i)
            .iter()
            .any(|&(n, bi)| g.bonds[bi].order == BondOrder::Double && g.atoms[n].element == Element::O)
}

fn is_acceptor(g: &MolGraph, i: usize) -> bool {
    let a = &g.atoms[i];
    match a.element {
        Element::O => a.formal_charge <= 0,
        Element::N if a.formal_charge != 0 => false,
        Element::N if a.aromatic => a.total_h() == 0,
        Element::N => !g.neighbors(i).iter().any(|&(n, _)| is_acyl_center(g, n)),
        _ => false,
    }
}

fn is_rotatable(g: &MolGraph, bi: usize, in_ring: &[bool]) -> bool {
    let b = &g.bonds[bi];
    if b.order != BondOrder::Single || in_ring[bi] {
        return false;
    }
    let (x, y) = (b.a, b.b);
    if g.atoms[x].element.is_hydrogen() || g.atoms[y].element.is_hydrogen() {
        return false;
    }
    if g.heavy_degree(x) < 2 || g.heavy_degree(y) < 2 {
        return false;
    }
    let amide = |n: usize, c: usize| g.atoms[n].element == Element::N && g.atoms[c].element == Element::C && is_acyl_center(g, c);
    !(amide(x, y) || amide(y, x))
}

fn is_sp3_carbon(g: &MolGraph, i: usize) -> bool {
    let a = &g.atoms[i];
    a.element == Element::C
        && !a.aromatic
        && g.neighbors(i).iter().all(|&(_, bi)| g.bonds[bi].order == BondOrder::Single)
}

/// Longest path (in atoms) through the forest of chain carbons.
fn longest_carbon_chain(g: &MolGraph) -> usize {
    let chain: Vec<bool> = g
        .atoms
        .iter()
        .map(|a| a.element == Element::C && !a.aromatic && !a.in_ring)
        .collect();
    let farthest = |start: usize| -> (usize, usize) {
        let mut dist = vec![usize::MAX; g.num_atoms()];
        dist[start] = 1;
        let mut stack = vec![start];
        let mut best = (1, start);
        while let Some(u) = stack.pop() {
            for &(v, _) in g.neighbors(u) {
                if chain[v] && dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    if dist[v] > best.0 || (dist[v] == best.0 && v < best.1) {
                        best = (dist[v], v);
                    }
                    stack.push(v);
                }
            }
        }
        best
    };
    (0..g.num_atoms())
        .filter(|&i| chain[i])
        .map(|i| farthest(farthest(i).1).0)
        .max()
        .unwrap_or(0)
}

fn bond_ring_flags(g: &MolGraph) -> Vec<bool> {
    crate::chem::ring_info(g).bond_in_ring
}

/// Value of descriptor `name` for `g`.
pub fn compute_descriptor(g: &MolGraph, name: &str) -> Result<f64, DescriptorError> {
    let count = |n: usize| n as f64;
    let v = match name {
        "MolWt" => atom_mass(g, false),
        "ExactMolWt" => atom_mass(g, true),
        "HeavyAtomCount" => count(heavy(g).count()),
        "NumHeteroatoms" => count(heavy(g).filter(|&i| g.atoms[i].element != Element::C).count()),
        "NumHDonors" => count(
            (0..g.num_atoms())
                .filter(|&i| matches!(g.atoms[i].element, Element::N | Element::O) && g.atoms[i].total_h() > 0)
                .count(),
        ),
        "NumHAcceptors" => count((0..g.num_atoms()).filter(|&i| is_acceptor(g, i)).count()),
        "NumRotatableBonds" => {
            let in_ring = bond_ring_flags(g);
            count((0..g.bonds.len()).filter(|&b| is_rotatable(g, b, &in_ring)).count())
        }
        "RingCount" => count(g.rings.len()),
        "NumAromaticRings" => count(g.rings.iter().filter(|r| r.iter().all(|&a| g.atoms[a].aromatic)).count()),
        "NumAromaticAtoms" => count(g.atoms.iter().filter(|a| a.aromatic).count()),
        "FractionCSP3" => {
            let carbons = g.atoms.iter().filter(|a| a.element == Element::C).count();
            if carbons == 0 {
                0.0
            } else {
                count((0..g.num_atoms()).filter(|&i| is_sp3_carbon(g, i)).count()) / carbons as f64
            }
        }
        "NumValenceElectrons" => g
            .atoms
            .iter()
            .map(|a| a.element.data().valence_electrons as f64 + a.total_h() as f64 - a.formal_charge as f64)
            .sum(),
        "HalogenCount" => count(g.atoms.iter().filter(|a| a.element.is_halogen()).count()),
        "FormalChargeSum" => g.atoms.iter().map(|a| a.formal_charge as f64).sum(),
        "MaxRingSize" => count(g.rings.iter().map(Vec::len).max().unwrap_or(0)),
        "LongestCarbonChain" => count(longest_carbon_chain(g)),
        _ => match name.strip_prefix("fr_").and_then(pattern) {
            Some(p) if descriptor_index(name).is_some() => count(match_pattern(g, p).len()),
            _ => return Err(DescriptorError::UnknownDescriptor(name.to_string())),
        },
    };
    if !v.is_finite() {
        return Err(DescriptorError::NonFinite { name: name.to_string() });
    }
    Ok(v)
}

pub fn compute_all(g: &MolGraph) -> Result<DescriptorVector, DescriptorError> {
    let values = registry()
        .iter()
        .map(|d| compute_descriptor(g, &d.name))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DescriptorVector { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::parse_smiles;

    fn d(smiles: &str, name: &str) -> f64 {
        compute_descriptor(&parse_smiles(smiles).unwrap(), name).unwrap()
    }

    #[test]
    fn registry_shape() {
        let r = registry();
        assert_eq!(r.len(), 24);
        let mut names: Vec<_> = r.iter().map(|d| &d.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 24);
        let max_fr = r.iter().filter(|d| d.name.starts_with("fr_")).map(|d| d.sampling_weight).fold(0.0, f64::max);
        let min_other = r.iter().filter(|d| !d.name.starts_with("fr_")).map(|d| d.sampling_weight).fold(f64::INFINITY, f64::min);
        assert!(max_fr < min_other && max_fr < 1.0);
        for spec in r {
            assert!((2..=4).contains(&spec.phrase_bank.len()), "{}", spec.name);
            assert!(spec.phrase_bank.iter().all(|p| p.contains(&spec.name)));
        }
    }

    #[test]
    fn water() {
        assert!((d("O", "MolWt") - 18.015).abs() < 0.01);
        let v = compute_all(&parse_smiles("O").unwrap()).unwrap();
        assert_eq!(v.get("RingCount"), Some(0.0));
        assert_eq!(v.get("NumHDonors"), Some(1.0));
        assert_eq!(v.get("HalogenCount"), Some(0.0));
        assert_eq!(v.get("NumValenceElectrons"), Some(8.0));
    }

    #[test]
    fn ethanol() {
        assert_eq!(d("CCO", "HeavyAtomCount"), 3.0);
        assert_eq!(d("CCO", "FractionCSP3"), 1.0);
        assert_eq!(d("CCO", "LongestCarbonChain"), 2.0);
        assert_eq!(d("CCO", "fr_hydroxyl"), 1.0);
        assert_eq!(d("CCO", "NumRotatableBonds"), 0.0);
        assert_eq!(d("CCCCO", "NumRotatableBonds"), 2.0);
    }

    #[test]
    fn benzene() {
        let v = compute_all(&parse_smiles("c1ccccc1").unwrap()).unwrap();
        assert_eq!(v.get("NumAromaticRings"), Some(1.0));
        assert_eq!(v.get("NumAromaticAtoms"), Some(6.0));
        assert_eq!(v.get("FractionCSP3"), Some(0.0));
        assert_eq!(v.get("MaxRingSize"), Some(6.0));
    }

    #[test]
    fn salt_without_carbon() {
        let v = compute_all(&parse_smiles("[Na+].[Cl-]").unwrap()).unwrap();
        assert_eq!(v.get("FractionCSP3"), Some(0.0));
        assert_eq!(v.get("HalogenCount"), Some(1.0));
        assert_eq!(v.get("FormalChargeSum"), Some(0.0));
    }

    #[test]
    fn acetic_acid_and_amides() {
        assert_eq!(d("CC(=O)O", "fr_carboxylic_acid"), 1.0);
        assert_eq!(d("CC(=O)O", "NumHAcceptors"), 2.0);
        assert_eq!(d("CC(=O)NC", "NumHAcceptors"), 1.0);
        assert_eq!(d("CCC(=O)NCC", "NumRotatableBonds"), 2.0);
        assert_eq!(d("c1ccncc1", "NumHAcceptors"), 1.0);
        assert_eq!(d("c1cc[nH]c1", "NumHAcceptors"), 0.0);
        assert_eq!(d("c1cc[nH]c1", "NumHDonors"), 1.0);
        assert_eq!(d("CCN", "NumHAcceptors"), 1.0);
    }

    #[test]
    fn fraction_csp3_mixed() {
        assert!((d("Cc1ccccc1", "FractionCSP3") - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(d("C=CC", "FractionCSP3"), 1.0 / 3.0);
    }

    #[test]
    fn longest_chain_skips_rings() {
        assert_eq!(d("CCCC(C)CC1CCCCC1", "LongestCarbonChain"), 5.0);
        assert_eq!(d("CCCC(CCC)CC", "LongestCarbonChain"), 7.0);
        assert_eq!(d("c1ccccc1", "LongestCarbonChain"), 0.0);
    }

    #[test]
    fn exact_mass_is_close_to_average() {
        let g = parse_smiles("CC(=O)Oc1ccccc1C(=O)O").unwrap();
        let (avg, exact) = (d("CC(=O)Oc1ccccc1C(=O)O", "MolWt"), d("CC(=O)Oc1ccccc1C(=O)O", "ExactMolWt"));
        assert!((avg - 180.159).abs() < 0.01, "{avg}");
        assert!((exact - 180.042).abs() < 0.01, "{exact}");
        assert!(g.num_atoms() == 13);
    }

    #[test]
    fn unknown_name() {
        let g = parse_smiles("C").unwrap();
        assert_eq!(
            compute_descriptor(&g, "TPSA"),
            Err(DescriptorError::UnknownDescriptor("TPSA".into()))
        );
        assert!(compute_descriptor(&g, "fr_bogus").is_err());
    }
}
