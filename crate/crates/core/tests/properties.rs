use std::sync::OnceLock;

use moltailor::chem::{bundled_patterns, canonicalize, match_pattern, parse_smiles, BondOrder, MolGraph};
use moltailor::corpus::{build_mtmtr, prepare_corpus, synth_molecules};
use moltailor::descriptors::{compute_all, registry, DescriptorKind};
use moltailor::eval::{average_precision, roc_auc};
use moltailor::model::count_mentions;
use moltailor::selfcheck::{brute_force_ap, brute_force_auc, decomposition_sweep, DECOMPOSITION_TOL};
use moltailor::tensor::{Tape, Tensor};
use proptest::prelude::*;
use proptest::sample::Index;

fn pool() -> &'static [String] {
    static POOL: OnceLock<Vec<String>> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut v: Vec<String> = ["OCC", "c1ccccc1O", "CC(=O)Oc1ccccc1C(=O)O", "C1CC2CCC1CC2", "[NH4+].[Cl-]", "O=[N+]([O-])c1ccc(Br)cc1"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend(synth_molecules(60, 17));
        v
    })
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn molecule_and_perm() -> impl Strategy<Value = (MolGraph, Vec<usize>)> {
    any::<Index>().prop_flat_map(|i| {
        let g = parse_smiles(&pool()[i.index(pool().len())]).unwrap();
        let n = g.num_atoms();
        (Just(g), permutation(n))
    })
}

fn total_h(g: &MolGraph) -> u32 {
    g.atoms.iter().map(|a| a.total_h()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn renumbering_preserves_canonical_form_and_descriptors((g, perm) in molecule_and_perm()) {
        let p = g.permuted(&perm);
        prop_assert_eq!(canonicalize(&g), canonicalize(&p));
        prop_assert_eq!(compute_all(&g).unwrap().values, compute_all(&p).unwrap().values);
        prop_assert_eq!(total_h(&g), total_h(&p));
        for pat in bundled_patterns() {
            prop_assert_eq!(match_pattern(&g, pat).len(), match_pattern(&p, pat).len());
        }
    }

    #[test]
    fn canonical_smiles_round_trips((g, _) in molecule_and_perm()) {
        let c = canonicalize(&g);
        prop_assert_eq!(canonicalize(&parse_smiles(&c).unwrap()), c);
    }

    #[test]
    fn ring_count_is_cyclomatic_number((g, _) in molecule_and_perm()) {
        prop_assert_eq!(g.rings.len() + g.num_atoms(), g.bonds.len() + g.num_components());
    }

    #[test]
    fn descriptor_ranges((g, _) in molecule_and_perm()) {
        let d = compute_all(&g).unwrap();
        for (spec, v) in registry().iter().zip(&d.values) {
            prop_assert!(v.is_finite());
            if spec.kind == DescriptorKind::Count {
                prop_assert!(v.fract() == 0.0, "{} = {}", spec.name, v);
                // Net charge is the one signed count.
                prop_assert!(*v >= 0.0 || spec.name == "FormalChargeSum", "{} = {}", spec.name, v);
            }
        }
        prop_assert!(d.get("MolWt").unwrap() > 0.0);
        prop_assert!((0.0..=1.0).contains(&d.get("FractionCSP3").unwrap()));
        // Average and monoisotopic masses differ by under 1 Da per heavy atom
        // (Br is the widest at 0.99) and under 0.01 Da per hydrogen.
        let hydrogens: u32 = g.atoms.iter().map(|a| a.total_h()).sum();
        let bound = g.num_atoms() as f64 + 0.01 * hydrogens as f64;
        prop_assert!((d.get("ExactMolWt").unwrap() - d.get("MolWt").unwrap()).abs() <= bound);
        for ring in &g.rings {
            let aromatic_bonds = ring
                .iter()
                .zip(ring.iter().cycle().skip(1))
                .all(|(&a, &b)| g.bond_between(a, b).is_some_and(|bd| bd.order == BondOrder::Aromatic));
            if aromatic_bonds {
                prop_assert!(ring.iter().all(|&a| g.atoms[a].aromatic));
            }
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, cols], 3.0, &mut rng);
        let mut shifted = x.clone();
        for r in 0..rows {
            let c = shift * (r as f64 + 1.0);
            shifted.data_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v += c);
        }
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x), tape.constant(shifted));
        let (sa, sb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
        prop_assert!(tape.value(sa).max_abs_diff(tape.value(sb)) <= 1e-12);
        for r in 0..rows {
            let s: f64 = tape.value(sa).data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mixing_identity_holds(seed in any::<u64>()) {
        let s = decomposition_sweep(2, seed).unwrap();
        prop_assert!(s.max_residual < DECOMPOSITION_TOL, "{:?}", s);
        prop_assert!(s.lambda_min >= 0.0 && s.lambda_max <= 1.0 && s.masked_lambda_max == 0.0);
    }

    #[test]
    fn ranking_metrics_match_brute_force_and_ignore_monotone_maps(
        cases in prop::collection::vec((0u8..6, any::<bool>()), 2..12),
    ) {
        let scores: Vec<f64> = cases.iter().map(|c| c.0 as f64 / 5.0 - 0.3).collect();
        let labels: Vec<bool> = cases.iter().map(|c| c.1).collect();
        let y: Vec<f64> = labels.iter().map(|&b| f64::from(u8::from(b))).collect();
        let mask = vec![true; y.len()];
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + s.powi(3)).collect();
        match brute_force_auc(&scores, &labels) {
            Some(oracle) => {
                let auc = roc_auc(&scores, &y, &mask).unwrap();
                prop_assert!((auc - oracle).abs() < 1e-12);
                prop_assert_eq!(auc, roc_auc(&warped, &y, &mask).unwrap());
            }
            None => prop_assert!(roc_auc(&scores, &y, &mask).is_err()),
        }
        if let Some(oracle) = brute_force_ap(&scores, &labels) {
            let ap = average_precision(&scores, &y, &mask).unwrap();
            prop_assert!((ap - oracle).abs() < 1e-12);
            prop_assert_eq!(ap, average_precision(&warped, &y, &mask).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn corpus_records_are_consistent(seed in any::<u64>(), n in 30usize..80) {
        let mols = synth_molecules(n, seed);
        let (mut recs, mut man) = build_mtmtr(&mols, seed).unwrap();
        let (again, _) = build_mtmtr(&mols, seed).unwrap();
        prop_assert_eq!(&recs, &again);
        prop_assert_eq!(man.occurrences.values().sum::<usize>(), recs.iter().map(|r| r.count()).sum::<usize>());
        for r in &recs {
            for (spec, &m) in registry().iter().zip(&r.m) {
                prop_assert_eq!(count_mentions(&r.description, &spec.name) > 0, m == 1, "{}", r.description);
            }
        }
        prepare_corpus(&mut recs, &mut man, seed).unwrap();
        let s = &man.split;
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..recs.len()).collect::<Vec<_>>());
        for (j, st) in man.label_stats.iter().enumerate() {
            let v: Vec<f64> = s.train.iter().filter(|&&i| recs[i].m[j] == 1).map(|&i| recs[i].y[j]).collect();
            if st.degenerate || v.len() < 2 {
                continue;
            }
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            prop_assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6, "{j}: {mean} {std}");
        }
    }
}
