use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::transformer::{AttentionParams, BlockParams};

fn toy_config(arch: Architecture) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        ..super::toy_config()
    }
}

fn vocabs() -> (Vocab, Vocab) {
    let text = Vocab::build(text_pieces("assess molwt ringcount matters for the task ."), 1, 16);
    let mol = Vocab::build(smiles_pieces("CCOc1ccccc1Cl(=O)N[NH4+]").into_iter().map(|p| p.0), 1, 16);
    (text, mol)
}

fn toy(arch: Architecture, seed: u64) -> Model {
    let (t, m) = vocabs();
    Model::new(toy_config(arch), t, m, seed).unwrap()
}

fn z_of(model: &Model, batch: &Batch) -> Vec<f64> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let f = model.forward(&mut tape, &b, batch).unwrap();
    tape.value(f.z).data().to_vec()
}

#[test]
fn smiles_tokens() {
    let (_, mol) = vocabs();
    let t = tokenize_smiles(&mol, "CCO");
    let toks: Vec<&str> = t.ids.iter().map(|&i| mol.token(i)).collect();
    assert_eq!(toks, ["[CLS]", "C", "C", "O"]);
    assert_eq!(t.atoms, [None, Some(0), Some(1), Some(2)]);
    let pieces: Vec<String> = smiles_pieces("c1ccccc1Cl").into_iter().map(|p| p.0).collect();
    assert_eq!(pieces.last().unwrap(), "Cl");
    assert_eq!(pieces.len(), 9);
    assert_eq!(smiles_pieces("[NH4+]"), vec![("[NH4+]".to_string(), Some(0))]);
    let p = smiles_pieces("C%12CC%12Br");
    assert_eq!(p[1].0, "%12");
    assert_eq!(p[5], ("Br".to_string(), Some(3)));
}

#[test]
fn smiles_truncation_keeps_cls() {
    let (_, mut mol) = vocabs();
    mol.max_len = 3;
    let t = tokenize_smiles(&mol, "CCCCCC");
    assert_eq!(t.ids.len(), 3);
    assert_eq!(t.ids[0], CLS_ID);
}

#[test]
fn text_tokens() {
    let (text, _) = vocabs();
    let ids = tokenize_text(&text, "MolWt matters.");
    let toks: Vec<&str> = ids.iter().map(|&i| text.token(i)).collect();
    assert_eq!(toks, ["[CLS]", "molwt", "matters", ".", "[SEP]"]);
    assert_eq!(tokenize_text(&text, ""), vec![CLS_ID, SEP_ID]);
    assert_eq!(tokenize_text(&text, "zebra")[1], UNK_ID);
    assert_eq!(text_pieces("fr_ester, ok"), ["fr_ester", ",", "ok"]);
}

#[test]
fn mentions_count_whole_words() {
    assert_eq!(count_mentions("ExactMolWt rises. MolWt too.", "MolWt"), 1);
    assert_eq!(count_mentions("ExactMolWt rises.", "ExactMolWt"), 1);
}

#[test]
fn vocab_is_order_independent() {
    let a = Vocab::build(["b", "a", "b", "c"], 1, 8);
    let b = Vocab::build(["c", "b", "a", "b"], 1, 8);
    assert_eq!(a, b);
    assert_eq!(&a.tokens()[..5], SPECIALS.map(String::from).as_slice());
    let rare = Vocab::build(["b", "a", "b"], 2, 8);
    assert_eq!(rare.len(), 6);
    assert_eq!(rare.id("a"), UNK_ID);
    let json = serde_json::to_string(&a).unwrap();
    assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), a);
}

#[test]
fn config_validation() {
    let mut c = toy_config(Architecture::MolTailor);
    c.l_uni = 2;
    assert!(c.validate().is_err());
    let mut c = toy_config(Architecture::MolTailor);
    c.h_t = 3;
    assert!(c.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn output_shapes() {
    let model = toy(Architecture::MolTailor, 1);
    let a = model.encode("CCO", "assess molwt");
    let b = model.encode("c1ccccc1Cl", "ringcount matters for the task .");
    let batch = Batch::collate(&[&a, &b]);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false);
    let (x_m, _) = model.encode_molecule(&mut tape, &bind, &batch).unwrap();
    assert_eq!(tape.shape(x_m), [2, batch.n_m, 8]);
    let (x_t, _) = model.encode_text_unimodal(&mut tape, &bind, &batch).unwrap();
    assert_eq!(tape.shape(x_t), [2, batch.n_t, 8]);
    let (z, _, probs) = model.fuse(&mut tape, &bind, x_t, x_m, &batch).unwrap();
    assert_eq!(tape.shape(z), [2, 8]);
    assert_eq!(probs.len(), 1);
    let f = model.forward(&mut tape, &bind, &batch).unwrap();
    assert_eq!(tape.shape(f.pred), [2, 3]);

    for arch in [Architecture::MolOnly, Architecture::Concat] {
        let model = toy(arch, 2);
        let batch = Batch::collate(&[&model.encode("CCO", "assess"), &model.encode("CCCl", "molwt matters")]);
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, false);
        let f = model.forward(&mut tape, &bind, &batch).unwrap();
        assert_eq!(tape.shape(f.pred), [2, 3]);
    }
}

#[test]
fn hidden_molecule_matches_text_only_pipeline() {
    let model = toy(Architecture::MolTailor, 3);
    let mut batch = Batch::collate(&[&model.encode("CCOc1ccccc1", "assess molwt matters")]);
    batch.hide_molecule();
    let fused = z_of(&model, &batch);

    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let (mut x, _) = model.encode_text_unimodal(&mut tape, &b, &batch).unwrap();
    for blk in &model.mt {
        let h = blk.bind(&b);
        let plain = BlockParams {
            attn: AttentionParams {
                wq: h.attn.wq_t,
                wk: h.attn.wk_t,
                wv: h.attn.wv_t,
                wo: h.attn.wo,
                heads: h.attn.heads,
            },
            ffn: h.ffn,
            norm1: h.norm1,
            norm2: h.norm2,
        };
        x = teb(&mut tape, x, &plain, &batch.text_mask, model.config.wiring()).unwrap().out;
    }
    let cls: Vec<f64> = tape.value(x).data()[..8].to_vec();
    let diff = fused.iter().zip(&cls).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "{diff}");
}

#[test]
fn molecule_tokens_influence_z() {
    let model = toy(Architecture::MolTailor, 4);
    let a = Batch::collate(&[&model.encode("CCO", "assess molwt")]);
    let b = Batch::collate(&[&model.encode("CCN", "assess molwt")]);
    let (za, zb) = (z_of(&model, &a), z_of(&model, &b));
    assert!(za.iter().zip(&zb).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn padding_does_not_change_z() {
    for arch in [Architecture::MolTailor, Architecture::MolOnly, Architecture::Concat] {
        let model = toy(arch, 5);
        let short = model.encode("CO", "molwt");
        let long = model.encode("CCOc1ccccc1Cl", "assess ringcount matters for the task .");
        let alone = z_of(&model, &Batch::collate(&[&short]));
        let padded = z_of(&model, &Batch::collate(&[&short, &long]));
        let diff = alone.iter().zip(&padded).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{arch:?}: {diff}");
    }
}

#[test]
fn zero_head_predicts_bias() {
    let mut model = toy(Architecture::MolTailor, 6);
    *model.store.get_mut(model.head_w) = Tensor::zeros(&[8, 3]);
    *model.store.get_mut(model.head_b) = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let e = model.encode("CCO", "molwt");
    let p = model.predict(&[&e, &e]).unwrap();
    assert_eq!(p, vec![vec![0.5, -1.0, 2.0]; 2]);
}

fn grads_by_prefix(model: &Model) -> (f64, f64) {
    let batch = Batch::collate(&[&model.encode("CCO", "assess molwt"), &model.encode("CCCl", "ringcount")]);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true);
    let f = model.forward(&mut tape, &b, &batch).unwrap();
    let y = Tensor::new(vec![2, 3], vec![1.0, -1.0, 0.5, 0.2, 0.3, -0.7]).unwrap();
    let m = Tensor::full(&[2, 3], 1.0);
    let (loss, _) = mtr_loss(&mut tape, f.pred, &y, &m).unwrap();
    let g = tape.backward(loss).unwrap();
    let mut mol = 0.0;
    let mut text = 0.0;
    for id in model.store.ids() {
        let n = g.get(b.var(id)).map_or(0.0, |t| t.data().iter().map(|v| v.abs()).sum());
        if model.store.name(id).starts_with("mol.") {
            mol += n;
        } else if model.store.name(id).starts_with("text.") {
            text += n;
        }
    }
    (mol, text)
}

#[test]
fn gradients_reach_both_towers() {
    let model = toy(Architecture::MolTailor, 7);
    let (mol, text) = grads_by_prefix(&model);
    assert!(mol > 0.0 && text > 0.0);
    let mut frozen = model.clone();
    frozen.config.freeze_m_encoder = true;
    let (mol, text) = grads_by_prefix(&frozen);
    assert_eq!(mol, 0.0);
    assert!(text > 0.0);
}

#[test]
fn loss_hand_example() {
    let mut tape = Tape::new();
    let pred = tape.param(Tensor::zeros(&[1, 2]));
    let y = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
    let m = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let (loss, report) = mtr_loss(&mut tape, pred, &y, &m).unwrap();
    assert_eq!(tape.value(loss).item(), 1.0);
    assert_eq!(report.counts, [1]);
    let g = tape.backward(loss).unwrap().wrt(pred);
    assert_eq!(g.data(), &[-2.0, 0.0]);
}

#[test]
fn loss_mean_semantics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, w) = (4, 5);
    let p = Tensor::randn(&[n, w], 1.0, &mut rng);
    let y = Tensor::randn(&[n, w], 1.0, &mut rng);
    let m = Tensor::from_fn(&[n, w], |i| if i % 3 == 0 || i / w == 2 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let (_, r) = mtr_loss(&mut tape, pv, &y, &m).unwrap();

    let mut expect = 0.0;
    let mut valid = 0;
    for j in 0..n {
        let c: f64 = (0..w).map(|i| m.data()[j * w + i]).sum();
        if c > 0.0 {
            valid += 1;
            expect += (0..w)
                .map(|i| m.data()[j * w + i] * (y.data()[j * w + i] - p.data()[j * w + i]).powi(2))
                .sum::<f64>()
                / c;
        }
    }
    assert!((r.total - expect / valid as f64).abs() < 1e-12);

    let dup = |t: &Tensor| {
        let mut d = t.data().to_vec();
        d.extend_from_slice(t.data());
        Tensor::new(vec![2 * n, w], d).unwrap()
    };
    let mut tape = Tape::new();
    let pv = tape.constant(dup(&p));
    let (_, r2) = mtr_loss(&mut tape, pv, &dup(&y), &dup(&m)).unwrap();
    assert!((r.total - r2.total).abs() < 1e-12);

    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let (_, same) = mtr_loss(&mut tape, pv, &p, &m).unwrap();
    assert_eq!(same.total, 0.0);
}

#[test]
fn empty_masks_are_skipped() {
    let mut tape = Tape::new();
    let pred = tape.param(Tensor::zeros(&[2, 2]));
    let y = Tensor::full(&[2, 2], 1.0);
    let m = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let (_, r) = mtr_loss(&mut tape, pred, &y, &m).unwrap();
    assert_eq!((r.skipped, r.total), (1, 1.0));
    let none = Tensor::zeros(&[2, 2]);
    assert!(matches!(mtr_loss(&mut tape, pred, &y, &none), Err(ModelError::AllRecordsSkipped)));
}

#[test]
fn end_to_end_gradient_check() {
    for seed in 0..2 {
        let r = toy_gradient_check(seed, 1e-5).unwrap();
        assert!(r.max_rel < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn checkpoint_roundtrip() {
    let model = toy(Architecture::MolTailor, 12);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = Model::load(dir.path()).unwrap();
    assert_eq!(back.config, model.config);
    let e = model.encode("CCOc1ccccc1", "assess molwt");
    assert_eq!(back.predict(&[&e]).unwrap(), model.predict(&[&e]).unwrap());
}
