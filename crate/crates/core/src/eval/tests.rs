use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::corpus::{split_dataset, synth_molecules};
use crate::model::{smiles_pieces, text_pieces, toy_config, Model, Vocab};

fn regression_task(labels: Vec<f64>, seed: u64) -> ProbeTask {
    let n = labels.len();
    ProbeTask {
        name: "t".into(),
        kind: TaskKind::Regression,
        smiles: vec!["C".into(); n],
        labels: labels.into_iter().map(|v| vec![v]).collect(),
        mask: vec![vec![true]; n],
        split: split_dataset(n, [0.8, 0.1, 0.1], seed).unwrap(),
        description: String::new(),
    }
}

fn normal_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

#[test]
fn oracle_features_fit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y: Vec<f64> = (0..300).map(|_| rng.gen_range(-5.0..20.0)).collect();
    let task = regression_task(y.clone(), 3);
    let feats: Vec<Vec<f64>> = y.iter().map(|v| vec![*v]).collect();
    let r = linear_probe(&task, &feats, &[0, 1, 2], &ProbeConfig::default()).unwrap();
    assert!(r.mean < 1e-3, "{r:?}");
}

#[test]
fn random_features_score_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 500;
    let labels: Vec<Vec<f64>> = (0..n).map(|i| vec![(i % 2) as f64]).collect();
    let task = ProbeTask {
        name: "null".into(),
        kind: TaskKind::Classification,
        smiles: vec!["C".into(); n],
        labels,
        mask: vec![vec![true]; n],
        split: split_dataset(n, [0.8, 0.1, 0.1], 5).unwrap(),
        description: String::new(),
    };
    let feats = normal_rows(n, 64, &mut rng);
    let r = linear_probe(&task, &feats, &[0, 1, 2], &ProbeConfig::default()).unwrap();
    assert!((0.4..=0.6).contains(&r.mean), "{r:?}");
}

/// Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|a| a / norm).collect());
    }
    q
}

#[test]
fn probe_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d) = (200, 6);
    let x = normal_rows(n, d, &mut rng);
    let y: Vec<f64> = x.iter().map(|r| r[0] - 2.0 * r[3] + 0.3 * { let z: f64 = StandardNormal.sample(&mut rng); z }).collect();
    let task = regression_task(y, 8);
    let q = orthogonal(d, &mut rng);
    let rotated: Vec<Vec<f64>> = x
        .iter()
        .map(|r| q.iter().map(|row| row.iter().zip(r).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let cfg = ProbeConfig {
        max_epochs: 60,
        ..ProbeConfig::default()
    };
    let a = linear_probe(&task, &x, &[0, 1], &cfg).unwrap();
    let b = linear_probe(&task, &rotated, &[0, 1], &cfg).unwrap();
    for (u, v) in a.per_seed.iter().zip(&b.per_seed) {
        assert!((u - v).abs() <= 0.01, "{a:?} {b:?}");
    }
    assert_eq!(a.chosen_lr, b.chosen_lr);
}

#[test]
fn probe_is_reproducible_and_needs_two_seeds() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = normal_rows(80, 4, &mut rng);
    let task = regression_task(x.iter().map(|r| r[1]).collect(), 2);
    let cfg = ProbeConfig {
        max_epochs: 20,
        ..ProbeConfig::default()
    };
    let a = linear_probe(&task, &x, &[7, 8], &cfg).unwrap();
    assert_eq!(a, linear_probe(&task, &x, &[7, 8], &cfg).unwrap());
    assert_eq!(a.chosen_lr.len(), 2);
    assert!(a.chosen_lr.iter().all(|lr| (1e-5..=1e-2).contains(lr)));
    assert!(matches!(linear_probe(&task, &x, &[7], &cfg), Err(EvalError::Config(_))));
}

#[test]
fn lr_grid_is_log_uniform_in_range() {
    let cfg = ProbeConfig::default();
    let g = lr_grid(&cfg, 3);
    assert_eq!(g.len(), 10);
    assert_eq!(g, lr_grid(&cfg, 3));
    assert_ne!(g, lr_grid(&cfg, 4));
    assert!(g.iter().all(|v| (1e-5..=1e-2).contains(v)));
}

#[test]
fn task_validation_rejects_bad_labels() {
    let mut t = regression_task(vec![1.0; 20], 0);
    t.kind = TaskKind::Classification;
    t.labels[3][0] = 0.5;
    assert!(matches!(t.validate(), Err(EvalError::Task(_))));
    let mut t = regression_task(vec![1.0; 20], 0);
    t.split.val.push(t.split.train[0]);
    assert!(t.validate().is_err());
}

#[test]
fn task_csv_reads_masks_and_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tox.csv");
    let mut body = String::from("smiles,a,b,mask_b\n");
    for i in 0..20 {
        let b = if i == 4 { String::new() } else { (i % 2).to_string() };
        body.push_str(&format!("{},{},{},{}\n", "C".repeat(i + 1), i % 2, b, u8::from(i != 5)));
    }
    std::fs::write(&path, body).unwrap();
    let t = read_task_csv(&path, TaskKind::Classification, "p", 0).unwrap();
    assert_eq!(t.name, "tox");
    assert_eq!(t.columns(), 2);
    assert!(!t.mask[4][1] && !t.mask[5][1] && t.mask[6][1] && t.mask[4][0]);
}

#[test]
fn descriptor_tasks_share_split_and_prompts() {
    let mols = synth_molecules(40, 1);
    let names = [Q5_PROMPTED[0], Q5_PROMPTED[1], Q5_UNPROMPTED, Q5_UNRELATED];
    let p = q5_prompt();
    let tasks = descriptor_tasks(&mols, &names, |_| p.clone(), 9).unwrap();
    assert_eq!(tasks.len(), 4);
    assert!(tasks.iter().all(|t| t.split == tasks[0].split && t.description == p));
    for name in Q5_PROMPTED {
        assert_eq!(crate::model::count_mentions(&p, name), 1, "{p}");
    }
    for name in [Q5_UNPROMPTED, Q5_UNRELATED] {
        assert_eq!(crate::model::count_mentions(&p, name), 0);
    }
    assert_eq!(crate::model::count_mentions(&single_prompt("RingCount"), "RingCount"), 1);
    assert!(descriptor_tasks(&mols, &["Nope"], |_| String::new(), 0).is_err());
}

/// Untrained toy model with weights large enough for visible attention.
fn toy_model(seed: u64) -> Model {
    let text = Vocab::build(
        text_pieces("assess molwt ringcount matters for the task . to be or not this is question ,"),
        1,
        16,
    );
    let mol = Vocab::build(smiles_pieces("CCOc1ccccc1Cl(=O)N").into_iter().map(|p| p.0), 1, 16);
    let mut m = Model::new(toy_config(), text, mol, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        for v in m.store.get_mut(id).data_mut() {
            *v += 0.4 * { let z: f64 = StandardNormal.sample(&mut rng); z };
        }
    }
    m
}

#[test]
fn attention_trace_invariants() {
    let m = toy_model(3);
    let smiles = "CCOc1ccccc1";
    let a = extract_cls_attention(&m, smiles, "assess molwt for the task.").unwrap();
    assert_eq!(a.ut_words.len(), 6);
    assert_eq!(a.ut_words[1].word, "molwt");
    for ws in [&a.ut_words, &a.mt_words] {
        assert!((ws.iter().map(|w| w.weight).sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(a.mt_atoms.len(), 9);
    assert!((a.mt_atoms.iter().map(|w| w.weight).sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(a.molecule_mass > 0.0 && a.molecule_mass < 1.0);

    let hidden = extract_cls_attention_with(&m, smiles, "assess molwt for the task.", true).unwrap();
    assert_eq!(hidden.molecule_mass, 0.0);
    assert!(hidden.mt_atoms.iter().all(|w| w.weight == 0.0 && w.raw == 0.0));

    let b = extract_cls_attention(&m, smiles, "to be or not to be, this is the question.").unwrap();
    let diff = a
        .mt_atoms
        .iter()
        .zip(&b.mt_atoms)
        .map(|(x, y)| (x.weight - y.weight).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-6);

    let svg = render_svg(&a).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<circle").count(), 9);
}

#[test]
fn attention_needs_dual_tower() {
    let mut cfg = toy_config();
    cfg.architecture = crate::model::Architecture::MolOnly;
    let v = Vocab::build(["C"], 1, 16);
    let m = Model::new(cfg, v.clone(), v, 0).unwrap();
    assert!(matches!(extract_cls_attention(&m, "CC", "x"), Err(EvalError::Config(_))));
}

#[test]
fn layout_keeps_bonds_near_unit_length() {
    let g = crate::chem::parse_smiles("c1ccccc1CC(=O)O").unwrap();
    let pos = layout_2d(&g);
    for b in &g.bonds {
        let d = ((pos[b.a].0 - pos[b.b].0).powi(2) + (pos[b.a].1 - pos[b.b].1).powi(2)).sqrt();
        assert!((0.6..1.5).contains(&d), "bond {b:?} length {d}");
    }
    assert_eq!(pos, layout_2d(&g));
}
