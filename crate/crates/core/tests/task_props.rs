use kvlbert::checkpoint;
use kvlbert::kb::KnowledgeBase;
use kvlbert::model::{ModelConfig, ModelParams};
use kvlbert::pipeline::InjectionOptions;
use kvlbert::synth::{make_synthetic, SynthConfig, Synthetic};
use kvlbert::task::{
    build_vocab, metrics, predict, prepare_all, score_pair, Dataset, Knowledge, Mode, Prediction, ScoreVector,
};
use kvlbert::train::{train, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model() -> ModelConfig {
    ModelConfig { d: 16, heads: 2, layers: 2, d_ff: 32, d_app: 4, max_seq: 32, ..Default::default() }
}

fn small_synth(seed: u64, train: usize) -> Synthetic {
    make_synthetic(&SynthConfig { seed, train, eval: 0, answers: 8, context_words: 20, d_app: 4, ..Default::default() })
}

fn knowledge(syn: &Synthetic, k: usize) -> Knowledge {
    Knowledge { kb: syn.kb.clone(), stoplist: syn.stoplist(), opts: InjectionOptions::with_k(k) }
}

fn model(cfg: &ModelConfig, rows: usize, seed: u64) -> ModelParams {
    ModelParams::init(cfg, rows, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn duplicate_candidates_score_the_same() {
    let syn = small_synth(1, 3);
    let know = knowledge(&syn, 2);
    let vocab = build_vocab(&syn.kb, &syn.train.instances);
    let params = model(&small_model(), vocab.rows(), 1);
    for inst in &syn.train.instances {
        let mut twin = inst.clone();
        twin.responses[2] = twin.responses[0].clone();
        let a = score_pair(&twin, 0, &params, &vocab, &know).unwrap();
        let b = score_pair(&twin, 2, &params, &vocab, &know).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn zero_head_scores_zero() {
    let syn = small_synth(2, 3);
    let know = knowledge(&syn, 2);
    let vocab = build_vocab(&syn.kb, &syn.train.instances);
    let mut params = model(&small_model(), vocab.rows(), 2);
    params.head_w.fill(0.0);
    params.head_b.fill(0.0);
    for inst in &syn.train.instances {
        assert_eq!(predict(inst, &params, &vocab, &know).unwrap().scores, [0.0; 4]);
    }
}

#[test]
fn reloaded_checkpoint_scores_bit_identically() {
    let syn = small_synth(3, 4);
    let know = knowledge(&syn, 2);
    let vocab = build_vocab(&syn.kb, &syn.train.instances);
    let mut params = model(&small_model(), vocab.rows(), 3);
    params.snap_to_f32();
    let mut buf = Vec::new();
    checkpoint::write(&mut buf, &params, &vocab).unwrap();
    let (back, back_vocab) = checkpoint::read(&buf[..]).unwrap();
    assert_eq!(back_vocab, vocab);
    for inst in &syn.train.instances {
        for c in 0..4 {
            let a = score_pair(inst, c, &params, &vocab, &know).unwrap();
            let b = score_pair(inst, c, &back, &back_vocab, &know).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn score_vector_examples() {
    assert_eq!(ScoreVector::from_scores([1.0, 2.0, 3.0, 4.0]).argmax(), 3);
    assert_eq!(ScoreVector::from_scores([5.0; 4]).argmax(), 0);
    assert_eq!(ScoreVector::from_scores([0.0; 4]).probs, [0.25; 4]);
}

fn paired(answers: &[bool], rationales: &[bool]) -> Vec<Prediction> {
    let mk = |i: usize, mode, ok: bool| Prediction { id: format!("p{i}"), mode, predicted: usize::from(!ok), gold: 0 };
    answers
        .iter()
        .enumerate()
        .map(|(i, &ok)| mk(i, Mode::QtoA, ok))
        .chain(rationales.iter().enumerate().map(|(i, &ok)| mk(i, Mode::QAtoR, ok)))
        .collect()
}

#[test]
fn metric_examples() {
    let m = metrics(&paired(&[true; 5], &[true; 5])).unwrap();
    assert_eq!((m.acc_qa, m.acc_qar_given, m.acc_joint), (Some(1.0), Some(1.0), Some(1.0)));
    let m = metrics(&paired(&[true; 5], &[false; 5])).unwrap();
    assert_eq!(m.acc_joint, Some(0.0));
    let mut preds = paired(&[true; 3], &[true; 2]);
    preds.retain(|p| !(p.id == "p0" && p.mode == Mode::QAtoR));
    let m = metrics(&preds).unwrap();
    assert_eq!(m.unpaired, ["p0", "p2"]);
    assert_eq!(m.n_joint, 1);
    let dup = [paired(&[true], &[])[0].clone(), paired(&[false], &[])[0].clone()];
    assert!(metrics(&dup).is_err());
}

proptest! {
    #[test]
    fn joint_never_exceeds_either_accuracy(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let (a, r): (Vec<bool>, Vec<bool>) = pairs.iter().cloned().unzip();
        let m = metrics(&paired(&a, &r)).unwrap();
        let joint = m.acc_joint.unwrap();
        prop_assert!(joint <= m.acc_qa.unwrap().min(m.acc_qar_given.unwrap()));
        let both = pairs.iter().filter(|(x, y)| *x && *y).count();
        prop_assert_eq!(joint, both as f64 / pairs.len() as f64);
    }

    #[test]
    fn argmax_ignores_a_common_shift(s in prop::array::uniform4(-50i32..50), c in -1000i32..1000) {
        let base = s.map(f64::from);
        let shifted = base.map(|x| x + f64::from(c));
        prop_assert_eq!(ScoreVector::from_scores(base).argmax(), ScoreVector::from_scores(shifted).argmax());
    }
}

#[test]
fn one_instance_is_memorized() {
    let syn = small_synth(4, 1);
    let know = knowledge(&syn, 2);
    let vocab = build_vocab(&syn.kb, &syn.train.instances);
    let data = prepare_all(&syn.train.instances, &know, &vocab, &small_model()).unwrap();
    let cfg = TrainConfig { epochs: 200, batch_size: 1, lr: 0.05, ..Default::default() };
    let out = train(&small_model(), &cfg, vocab.rows(), &data, None, |_| Ok(())).unwrap();
    let last = out.log.last().unwrap();
    assert!(last.loss < 0.01, "loss {}", last.loss);
    assert_eq!(last.acc_qa, Some(1.0));
}

#[test]
fn initial_loss_is_near_uniform() {
    let syn = make_synthetic(&SynthConfig { seed: 5, train: 400, eval: 0, ..Default::default() });
    let know = knowledge(&syn, 2);
    let vocab = build_vocab(&syn.kb, &syn.train.instances);
    let cfg = ModelConfig::default();
    let params = model(&cfg, vocab.rows(), 5);
    let data = prepare_all(&syn.train.instances, &know, &vocab, &cfg).unwrap();
    let mean: f64 = data
        .iter()
        .map(|p| kvlbert::task::predict_prepared(p, &params).unwrap().loss(p.gold))
        .sum::<f64>()
        / data.len() as f64;
    assert!((mean - 4f64.ln()).abs() < 0.05, "mean initial loss {mean}");
}

#[test]
fn without_knowledge_all_modes_train_identically() {
    let syn = small_synth(6, 24);
    let vocab = build_vocab(&syn.kb, &syn.train.instances);
    let cfg = TrainConfig { epochs: 3, batch_size: 4, ..Default::default() };
    let run = |opts: InjectionOptions| {
        let know = Knowledge { kb: KnowledgeBase::empty(), stoplist: syn.stoplist(), opts };
        let data = prepare_all(&syn.train.instances, &know, &vocab, &small_model()).unwrap();
        let out = train(&small_model(), &cfg, vocab.rows(), &data, None, |_| Ok(())).unwrap();
        (out.log, out.params)
    };
    let base = run(InjectionOptions::with_k(0));
    assert_eq!(run(InjectionOptions::with_k(2)), base);
    assert_eq!(run(InjectionOptions { mask_off: true, ..InjectionOptions::with_k(2) }), base);
}

#[test]
fn gold_positions_are_uniform() {
    let syn = make_synthetic(&SynthConfig { seed: 0, train: 4000, eval: 0, ..Default::default() });
    let mut counts = [0usize; 4];
    for inst in &syn.train.instances {
        counts[inst.gold] += 1;
    }
    let expected = 1000.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99th percentile of chi-squared with 3 degrees of freedom
    assert!(chi2 < 11.345, "counts {counts:?}, chi2 {chi2}");
}

#[test]
fn only_the_gold_answer_is_linked_to_the_query() {
    let syn = make_synthetic(&SynthConfig { seed: 8, train: 300, eval: 100, ..Default::default() });
    let stop = syn.stoplist();
    for inst in syn.train.instances.iter().chain(&syn.eval.instances) {
        let linked: Vec<String> = kvlbert::pipeline::tokenize(&inst.query)
            .iter()
            .flat_map(|t| syn.kb.query_entities(t, usize::MAX, &stop))
            .map(|(e, _)| e)
            .collect();
        for (c, resp) in inst.responses.iter().enumerate() {
            let hit = kvlbert::pipeline::tokenize(resp).iter().any(|t| linked.contains(t));
            assert_eq!(hit, c == inst.gold, "{:?} candidate {c}", inst.id);
        }
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let dump = |seed| {
        let syn = make_synthetic(&SynthConfig { seed, train: 50, eval: 20, ..Default::default() });
        let mut out = kvlbert::synth::kb_to_tsv(&syn.kb).into_bytes();
        syn.train.write_jsonl(&mut out).unwrap();
        syn.eval.write_jsonl(&mut out).unwrap();
        out
    };
    assert_eq!(dump(9), dump(9));
    assert_ne!(dump(9), dump(10));
}

#[test]
fn dataset_jsonl_roundtrip() {
    let syn = small_synth(11, 5);
    let mut buf = Vec::new();
    syn.train.write_jsonl(&mut buf).unwrap();
    let back = Dataset::read_jsonl(&buf[..]).unwrap();
    assert_eq!(back.instances, syn.train.instances);
}
