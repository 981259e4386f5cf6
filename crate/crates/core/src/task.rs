//! Multiple-choice scoring and the answer / rationale / joint metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbedPlan, Vocab};
use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, Stoplist};
use crate::model::{ModelConfig, ModelParams};
use crate::pipeline::{assemble, tokenize, EnrichedSequence, InjectionOptions, Region, Scene, VisibleMatrix};

pub const CANDIDATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    QtoA,
    QAtoR,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default)]
    pub mode: Mode,
    pub query: String,
    /// For rationale instances: the gold answer, appended to the query segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub responses: Vec<String>,
    pub gold: usize,
    pub image: ImageSize,
    pub regions: Vec<Region>,
}

impl Instance {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.responses.len() != CANDIDATES {
            return Err(format!("expected {CANDIDATES} responses, got {}", self.responses.len()));
        }
        if self.gold >= CANDIDATES {
            return Err(format!("gold index {} out of range 0..{CANDIDATES}", self.gold));
        }
        Ok(())
    }

    pub fn query_tokens(&self) -> Vec<String> {
        let mut q = tokenize(&self.query);
        if let Some(a) = &self.answer {
            q.extend(tokenize(a));
        }
        q
    }

    pub fn scene(&self) -> Scene {
        Scene {
            width: self.image.width,
            height: self.image.height,
            regions: self.regions.clone(),
        }
    }
}

/// Instances with their ids resolved; missing ids become `#<line>`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut instances = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let mut inst: Instance = serde_json::from_str(&line)
                .map_err(|e| Error::rejected(format!("#{lineno}"), format!("malformed JSON: {e}")))?;
            let id = inst.id.get_or_insert_with(|| format!("#{lineno}")).clone();
            inst.validate().map_err(|r| Error::rejected(id, r))?;
            instances.push(inst);
        }
        Ok(Dataset { instances })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for inst in &self.instances {
            serde_json::to_writer(&mut w, inst)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Knowledge source plus the injection policy.
#[derive(Debug, Clone)]
pub struct Knowledge {
    pub kb: KnowledgeBase,
    pub stoplist: Stoplist,
    pub opts: InjectionOptions,
}

impl Knowledge {
    pub fn enrich(&self, inst: &Instance, candidate: usize, d_app: usize) -> Result<EnrichedSequence> {
        let id = inst.id.as_deref().unwrap_or("");
        inst.validate().map_err(|r| Error::rejected(id, r))?;
        let response = tokenize(&inst.responses[candidate]);
        assemble(&inst.query_tokens(), &response, &inst.scene(), d_app, &self.kb, &self.stoplist, self.opts)
            .map_err(|e| e.for_instance(id))
    }
}

/// Vocabulary covering every KB concept and every token of `instances`.
pub fn build_vocab(kb: &KnowledgeBase, instances: &[Instance]) -> Vocab {
    let mut surfaces: Vec<String> = Vec::new();
    for f in kb.facts() {
        surfaces.extend(tokenize(&f.head));
        surfaces.extend(tokenize(&f.tail));
    }
    for inst in instances {
        surfaces.extend(inst.query_tokens());
        for r in &inst.responses {
            surfaces.extend(tokenize(r));
        }
    }
    Vocab::build(surfaces.iter().map(String::as_str))
}

/// An instance with all four candidate sequences resolved against the tables.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub mode: Mode,
    pub gold: usize,
    pub candidates: Vec<(EmbedPlan, VisibleMatrix)>,
}

pub fn prepare(inst: &Instance, knowledge: &Knowledge, vocab: &Vocab, cfg: &ModelConfig) -> Result<Prepared> {
    let id = inst.id.clone().unwrap_or_default();
    let candidates = (0..CANDIDATES)
        .map(|c| {
            let seq = knowledge.enrich(inst, c, cfg.d_app)?;
            let plan = EmbedPlan::new(&seq, vocab, cfg.max_seq, cfg.d, cfg.d_app).map_err(|e| e.for_instance(&id))?;
            Ok((plan, seq.visible))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { id, mode: inst.mode, gold: inst.gold, candidates })
}

pub fn prepare_all(instances: &[Instance], knowledge: &Knowledge, vocab: &Vocab, cfg: &ModelConfig) -> Result<Vec<Prepared>> {
    instances
        .par_iter()
        .map(|inst| prepare(inst, knowledge, vocab, cfg))
        .collect()
}

/// Candidate scores and their softmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreVector {
    pub scores: [f64; CANDIDATES],
    pub probs: [f64; CANDIDATES],
}

impl ScoreVector {
    pub fn from_scores(scores: [f64; CANDIDATES]) -> Self {
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = scores.map(|s| (s - max).exp());
        let z: f64 = e.iter().sum();
        ScoreVector { scores, probs: e.map(|x| x / z) }
    }

    /// Highest score, first index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..CANDIDATES {
            if self.scores[i] > self.scores[best] {
                best = i;
            }
        }
        best
    }

    /// Cross-entropy of the softmax against `gold`.
    pub fn loss(&self, gold: usize) -> f64 {
        let max = self.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        lse - self.scores[gold]
    }
}

pub fn score_pair(inst: &Instance, candidate: usize, params: &ModelParams, vocab: &Vocab, knowledge: &Knowledge) -> Result<f64> {
    if candidate >= CANDIDATES {
        return Err(Error::rejected(
            inst.id.clone().unwrap_or_default(),
            format!("candidate {candidate} out of range"),
        ));
    }
    let p = prepare(inst, knowledge, vocab, &params.config)?;
    let (plan, vis) = &p.candidates[candidate];
    params.score(plan, vis)
}

pub fn predict(inst: &Instance, params: &ModelParams, vocab: &Vocab, knowledge: &Knowledge) -> Result<ScoreVector> {
    let p = prepare(inst, knowledge, vocab, &params.config)?;
    predict_prepared(&p, params)
}

pub fn predict_prepared(p: &Prepared, params: &ModelParams) -> Result<ScoreVector> {
    let mut scores = [0.0; CANDIDATES];
    for (s, (plan, vis)) in scores.iter_mut().zip(&p.candidates) {
        *s = params.score(plan, vis)?;
    }
    Ok(ScoreVector::from_scores(scores))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Prediction {
    pub id: String,
    pub mode: Mode,
    pub predicted: usize,
    pub gold: usize,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.predicted == self.gold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    #[serde(rename = "acc_QA")]
    pub acc_qa: Option<f64>,
    #[serde(rename = "acc_QAR_given")]
    pub acc_qar_given: Option<f64>,
    pub acc_joint: Option<f64>,
    pub n_qa: usize,
    pub n_qar: usize,
    pub n_joint: usize,
    /// Ids present in only one mode while both modes occur in the data.
    pub unpaired: Vec<String>,
}

/// Accuracy per mode, and joint accuracy over ids answered in both modes.
///
/// When only one mode occurs the joint metric is not applicable and is `None`.
pub fn metrics(preds: &[Prediction]) -> Result<Metrics> {
    let mut by_mode: BTreeMap<Mode, BTreeMap<&str, bool>> = BTreeMap::new();
    for p in preds {
        if by_mode.entry(p.mode).or_default().insert(&p.id, p.correct()).is_some() {
            return Err(Error::rejected(p.id.clone(), format!("duplicate id in {:?} instances", p.mode)));
        }
    }
    let empty = BTreeMap::new();
    let qa = by_mode.get(&Mode::QtoA).unwrap_or(&empty);
    let qar = by_mode.get(&Mode::QAtoR).unwrap_or(&empty);
    let acc = |m: &BTreeMap<&str, bool>| {
        (!m.is_empty()).then(|| m.values().filter(|&&c| c).count() as f64 / m.len() as f64)
    };
    let (mut n_joint, mut both, mut unpaired) = (0, 0, Vec::new());
    if !qa.is_empty() && !qar.is_empty() {
        let ids: BTreeSet<&str> = qa.keys().chain(qar.keys()).copied().collect();
        for id in ids {
            match (qa.get(id), qar.get(id)) {
                (Some(&a), Some(&r)) => {
                    n_joint += 1;
                    both += usize::from(a && r);
                }
                _ => unpaired.push(id.to_string()),
            }
        }
    }
    Ok(Metrics {
        acc_qa: acc(qa),
        acc_qar_given: acc(qar),
        acc_joint: (n_joint > 0).then(|| both as f64 / n_joint as f64),
        n_qa: qa.len(),
        n_qar: qar.len(),
        n_joint,
        unpaired,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
}

/// Scores every prepared instance (in parallel) and computes the metrics.
pub fn evaluate_prepared(data: &[Prepared], params: &ModelParams) -> Result<Evaluation> {
    let predictions = data
        .par_iter()
        .map(|p| {
            let sv = predict_prepared(p, params)?;
            Ok(Prediction { id: p.id.clone(), mode: p.mode, predicted: sv.argmax(), gold: p.gold })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { metrics: metrics(&predictions)?, predictions })
}

pub fn evaluate(data: &Dataset, params: &ModelParams, vocab: &Vocab, knowledge: &Knowledge) -> Result<Evaluation> {
    let prepared = prepare_all(&data.instances, knowledge, vocab, &params.config)?;
    evaluate_prepared(&prepared, params)
}
