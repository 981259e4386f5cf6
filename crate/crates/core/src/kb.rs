//! Weighted commonsense triple store with top-k entity retrieval.
//!
//! Facts are indexed under both endpoints, so a token matching either the
//! head or the tail of a fact retrieves the opposite endpoint.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use serde::Serialize;

use crate::error::Result;

/// Function words that never trigger retrieval unless a custom stoplist is given.
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "were", "be", "been", "am", "of", "to", "in", "on", "at",
    "by", "for", "with", "from", "and", "or", "but", "not", "it", "its", "this", "that", "these",
    "those", "he", "she", "they", "we", "you", "i", "his", "her", "their", "our", "your", "my",
    "him", "them", "us", "me", "do", "does", "did", "has", "have", "had", "what", "why", "how",
    "who", "where", "when", "which", "there", "here", "so", "as", "if", "than", "then", "will",
    "would", "can", "could", "should",
];

/// Lowercase, trim, and collapse internal whitespace (and underscores) to single spaces.
pub fn normalize_concept(raw: &str) -> String {
    raw.split(|c: char| c.is_whitespace() || c == '_')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fact {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Endpoint {
    Head,
    Tail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub fact: usize,
    /// Which endpoint of the fact equals the indexed concept.
    pub matched: Endpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub accepted: usize,
    pub rejected: Vec<RejectedLine>,
}

/// Concepts for which retrieval is suppressed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stoplist(HashSet<String>);

impl Default for Stoplist {
    fn default() -> Self {
        Stoplist(DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect())
    }
}

impl Stoplist {
    pub fn empty() -> Self {
        Stoplist(HashSet::new())
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Stoplist(
            words
                .into_iter()
                .map(|w| normalize_concept(w.as_ref()))
                .filter(|w| !w.is_empty())
                .collect(),
        )
    }

    /// One word per line; blank lines and `#` comments are ignored.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut words = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            words.push(line.to_string());
        }
        Ok(Self::from_words(words))
    }

    pub fn insert(&mut self, word: &str) {
        self.0.insert(normalize_concept(word));
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    facts: Vec<Fact>,
    index: HashMap<String, Vec<Posting>>,
}

impl KnowledgeBase {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a knowledge base from already-validated facts.
    pub fn from_facts(facts: Vec<Fact>) -> Self {
        let mut index: HashMap<String, Vec<Posting>> = HashMap::new();
        for (id, fact) in facts.iter().enumerate() {
            index.entry(fact.head.clone()).or_default().push(Posting {
                fact: id,
                matched: Endpoint::Head,
            });
            if fact.tail != fact.head {
                index.entry(fact.tail.clone()).or_default().push(Posting {
                    fact: id,
                    matched: Endpoint::Tail,
                });
            }
        }
        for postings in index.values_mut() {
            postings.sort_by(|a, b| posting_order(&facts, a, b));
        }
        KnowledgeBase { facts, index }
    }

    /// Parses `head \t relation \t tail \t weight` lines. Malformed lines are
    /// skipped and listed in the report; only I/O failures are errors.
    pub fn ingest<R: BufRead>(reader: R) -> Result<(Self, LoadReport)> {
        let mut facts = Vec::new();
        let mut report = LoadReport::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            match parse_fact(&line) {
                Ok(fact) => {
                    facts.push(fact);
                    report.accepted += 1;
                }
                Err(reason) => report.rejected.push(RejectedLine { line: i + 1, reason }),
            }
        }
        Ok((Self::from_facts(facts), report))
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn postings(&self, concept: &str) -> &[Posting] {
        self.index.get(concept).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Concepts that appear as a head or tail of some fact.
    pub fn concepts(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    /// The opposite endpoint of a posting's fact.
    pub fn other_endpoint(&self, posting: &Posting) -> &str {
        let fact = &self.facts[posting.fact];
        match posting.matched {
            Endpoint::Head => &fact.tail,
            Endpoint::Tail => &fact.head,
        }
    }

    /// Top-k related entities for `token`, by descending fact weight.
    ///
    /// Each entity appears at most once, carrying the weight of its strongest
    /// fact. Stoplisted and unknown tokens yield nothing.
    pub fn query_entities(&self, token: &str, k: usize, stoplist: &Stoplist) -> Vec<(String, f64)> {
        if k == 0 || stoplist.contains(token) {
            return Vec::new();
        }
        let mut seen: HashSet<&str> = HashSet::new();
        let mut out = Vec::with_capacity(k.min(self.postings(token).len()));
        for posting in self.postings(token) {
            let entity = self.other_endpoint(posting);
            if entity == token || !seen.insert(entity) {
                continue;
            }
            out.push((entity.to_string(), self.facts[posting.fact].weight));
            if out.len() == k {
                break;
            }
        }
        out
    }
}

fn posting_order(facts: &[Fact], a: &Posting, b: &Posting) -> Ordering {
    let (fa, fb) = (&facts[a.fact], &facts[b.fact]);
    let other = |f: &Fact, p: &Posting| -> String {
        match p.matched {
            Endpoint::Head => f.tail.clone(),
            Endpoint::Tail => f.head.clone(),
        }
    };
    fb.weight
        .total_cmp(&fa.weight)
        .then_with(|| other(fa, a).cmp(&other(fb, b)))
        .then_with(|| fa.relation.cmp(&fb.relation))
        .then_with(|| a.fact.cmp(&b.fact))
}

fn parse_fact(line: &str) -> std::result::Result<Fact, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 tab-separated fields, found {}", fields.len()));
    }
    let head = normalize_concept(fields[0]);
    let relation = fields[1].trim().to_string();
    let tail = normalize_concept(fields[2]);
    if head.is_empty() || tail.is_empty() {
        return Err("empty head or tail concept".into());
    }
    if relation.is_empty() {
        return Err("empty relation".into());
    }
    let weight: f64 = fields[3]
        .trim()
        .parse()
        .map_err(|_| format!("unparseable weight {:?}", fields[3].trim()))?;
    if !weight.is_finite() {
        return Err(format!("non-finite weight {weight}"));
    }
    if weight < 0.0 {
        return Err(format!("negative weight {weight}"));
    }
    Ok(Fact {
        head,
        relation,
        tail,
        weight,
    })
}
