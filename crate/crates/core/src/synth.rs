//! Seeded synthetic multiple-choice task that can only be solved through
//! the knowledge base.
//!
//! Every query carries a fresh cue concept whose single KB fact points at one
//! of a small closed set of answer concepts; the gold response names that
//! answer, the distractors name other answers. Cue concepts of the train and
//! eval splits are disjoint, so the link has to come from injected knowledge
//! rather than memorized embeddings. Responses also carry a context word, and
//! in exactly one distractor that word's own fact points at the cue's answer:
//! with the visible matrix that injection stays private to its anchor, without
//! it the injected answer leaks into the whole sequence.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kb::{Fact, KnowledgeBase, Stoplist};
use crate::pipeline::Region;
use crate::task::{Dataset, ImageSize, Instance, Mode, CANDIDATES};

const RELATION: &str = "RelatedTo";
const QUERY_FILLERS: &[&str] = &["why", "is", "the", "what", "a"];
const RESPONSE_FILLERS: &[&str] = &["the", "a", "is", "it", "of"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub eval: usize,
    pub answers: usize,
    pub context_words: usize,
    pub d_app: usize,
    /// Extra random regions per image besides the full-image one.
    pub regions: usize,
    pub width: f64,
    pub height: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            train: 4000,
            eval: 1000,
            answers: 20,
            context_words: 2000,
            d_app: 16,
            regions: 1,
            width: 640.0,
            height: 480.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub kb: KnowledgeBase,
    /// Answer concepts; they must not trigger injections themselves.
    pub stoplist_words: Vec<String>,
    pub train: Dataset,
    pub eval: Dataset,
}

impl Synthetic {
    pub fn stoplist(&self) -> Stoplist {
        let mut s = Stoplist::default();
        for w in &self.stoplist_words {
            s.insert(w);
        }
        s
    }
}

fn answer(i: usize) -> String {
    format!("obj{i}")
}

fn cue(i: usize) -> String {
    format!("cue{i}")
}

fn context(i: usize) -> String {
    format!("ctx{i}")
}

fn weight<R: Rng>(rng: &mut R) -> f64 {
    // two decimals keep the TSV form short and exact on re-read
    (rng.gen_range(100..500) as f64) / 100.0
}

pub fn make_synthetic(cfg: &SynthConfig) -> Synthetic {
    assert!(cfg.answers >= CANDIDATES, "need at least {CANDIDATES} answer concepts");
    assert!(cfg.d_app > 0 && cfg.context_words > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.train + cfg.eval;
    let mut facts = Vec::with_capacity(n + cfg.context_words);

    let cue_answer: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.answers)).collect();
    for (i, &a) in cue_answer.iter().enumerate() {
        facts.push(Fact { head: cue(i), relation: RELATION.into(), tail: answer(a), weight: weight(&mut rng) });
    }
    let mut by_answer: Vec<Vec<usize>> = vec![Vec::new(); cfg.answers];
    for w in 0..cfg.context_words {
        let a = rng.gen_range(0..cfg.answers);
        by_answer[a].push(w);
        facts.push(Fact { head: context(w), relation: RELATION.into(), tail: answer(a), weight: weight(&mut rng) });
    }
    // every answer needs at least one context word to build the noisy distractor
    for (a, words) in by_answer.iter_mut().enumerate() {
        if words.is_empty() {
            let w = cfg.context_words + a;
            words.push(w);
            facts.push(Fact { head: context(w), relation: RELATION.into(), tail: answer(a), weight: weight(&mut rng) });
        }
    }

    let mut make = |range: std::ops::Range<usize>, split: &str| -> Dataset {
        let instances = range
            .map(|c| {
                let gold_answer = cue_answer[c];
                let gold = rng.gen_range(0..CANDIDATES);
                let mut others: Vec<usize> = (0..cfg.answers).filter(|&a| a != gold_answer).collect();
                others.shuffle(&mut rng);
                let mut cands: Vec<usize> = others[..CANDIDATES - 1].to_vec();
                cands.insert(gold, gold_answer);
                let noisy = *(0..CANDIDATES)
                    .filter(|&i| i != gold)
                    .collect::<Vec<_>>()
                    .choose(&mut rng)
                    .unwrap();

                let pick = |rng: &mut ChaCha8Rng, words: &[&str]| words.choose(rng).unwrap().to_string();
                let query = [
                    pick(&mut rng, QUERY_FILLERS),
                    pick(&mut rng, QUERY_FILLERS),
                    cue(c),
                    pick(&mut rng, QUERY_FILLERS),
                ]
                .join(" ");
                let responses: Vec<String> = cands
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| {
                        let target = if i == noisy {
                            gold_answer
                        } else {
                            loop {
                                let t = rng.gen_range(0..cfg.answers);
                                if t != gold_answer {
                                    break t;
                                }
                            }
                        };
                        let w = *by_answer[target].choose(&mut rng).unwrap();
                        [pick(&mut rng, RESPONSE_FILLERS), context(w), answer(a), pick(&mut rng, RESPONSE_FILLERS)].join(" ")
                    })
                    .collect();
                let linked = cands.iter().filter(|&&a| a == gold_answer).count();
                assert_eq!(linked, 1, "exactly one candidate is linked to the cue");

                let mut regions = vec![Region {
                    bbox: [0.0, 0.0, cfg.width, cfg.height],
                    appearance: (0..cfg.d_app).map(|_| rng.gen_range(0.0..1.0)).collect(),
                    label: None,
                }];
                for _ in 0..cfg.regions {
                    let x0 = rng.gen_range(0.0..cfg.width * 0.5);
                    let y0 = rng.gen_range(0.0..cfg.height * 0.5);
                    let x1 = rng.gen_range(x0 + 1.0..=cfg.width);
                    let y1 = rng.gen_range(y0 + 1.0..=cfg.height);
                    regions.push(Region {
                        bbox: [x0.floor(), y0.floor(), x1.floor(), y1.floor()],
                        appearance: (0..cfg.d_app).map(|_| rng.gen_range(0.0..1.0)).collect(),
                        label: None,
                    });
                }
                Instance {
                    id: Some(format!("{split}-{c:05}")),
                    mode: Mode::QtoA,
                    query,
                    answer: None,
                    responses,
                    gold,
                    image: ImageSize { width: cfg.width, height: cfg.height },
                    regions,
                }
            })
            .collect();
        Dataset { instances }
    };
    let train = make(0..cfg.train, "train");
    let eval = make(cfg.train..n, "eval");
    Synthetic {
        kb: KnowledgeBase::from_facts(facts),
        stoplist_words: (0..cfg.answers).map(answer).collect(),
        train,
        eval,
    }
}

/// The KB as TSV, one fact per line.
pub fn kb_to_tsv(kb: &KnowledgeBase) -> String {
    let mut out = String::from("# head\trelation\ttail\tweight\n");
    for f in kb.facts() {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", f.head, f.relation, f.tail, f.weight));
    }
    out
}
