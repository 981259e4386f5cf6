#![allow(dead_code)]

pub mod oracle;

use kvlbert::kb::{Fact, KnowledgeBase, Stoplist};
use kvlbert::pipeline::{assemble, EnrichedSequence, InjectionOptions, Region, Scene};
use proptest::prelude::*;

pub const WORDS: &[&str] = &[
    "church", "bride", "dog", "ball", "park", "rain", "coat", "the", "a", "cake", "knife", "party",
];

pub fn scene(d_app: usize, extra: usize) -> Scene {
    let mut regions = vec![Region { bbox: [0.0, 0.0, 64.0, 48.0], appearance: vec![0.25; d_app], label: None }];
    for i in 0..extra {
        let f = i as f64;
        regions.push(Region {
            bbox: [f, f, 20.0 + f, 30.0 + f],
            appearance: (0..d_app).map(|c| (c as f64 + f) * 0.1).collect(),
            label: Some(format!("obj{i}")),
        });
    }
    Scene { width: 64.0, height: 48.0, regions }
}

#[derive(Debug, Clone)]
pub struct Case {
    pub kb: KnowledgeBase,
    pub query: Vec<String>,
    pub response: Vec<String>,
    pub regions: usize,
}

impl Case {
    pub fn assemble(&self, opts: InjectionOptions, d_app: usize) -> EnrichedSequence {
        assemble(&self.query, &self.response, &scene(d_app, self.regions), d_app, &self.kb, &Stoplist::default(), opts)
            .expect("valid case")
    }
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(WORDS).prop_map(str::to_string)
}

/// Entities may be multi-word, which exercises runs longer than one token.
fn entity() -> impl Strategy<Value = String> {
    prop_oneof![
        3 => word(),
        1 => (word(), word()).prop_map(|(a, b)| format!("{a} {b}")),
    ]
}

pub fn fact() -> impl Strategy<Value = Fact> {
    (word(), entity(), 1u32..50).prop_map(|(h, t, w)| Fact { head: h, relation: "RelatedTo".into(), tail: t, weight: w as f64 / 10.0 })
}

pub fn case() -> impl Strategy<Value = Case> {
    (
        prop::collection::vec(fact(), 0..25),
        prop::collection::vec(word(), 0..6),
        prop::collection::vec(word(), 0..6),
        0usize..3,
    )
        .prop_map(|(facts, query, response, regions)| Case { kb: KnowledgeBase::from_facts(facts), query, response, regions })
}
