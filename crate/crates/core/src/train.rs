//! Minibatch training with 4-way cross-entropy and SGD with momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::task::{evaluate_prepared, Prepared, ScoreVector, CANDIDATES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0,1) and weight_decay non-negative".into()));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    #[serde(rename = "acc_QA")]
    pub acc_qa: Option<f64>,
    #[serde(rename = "acc_QAR_given")]
    pub acc_qar_given: Option<f64>,
    pub acc_joint: Option<f64>,
}

/// SGD with momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ModelParams,
}

impl Sgd {
    pub fn new(params: &ModelParams, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let vs = self.velocity.tensors_mut();
        for (((_, p), (_, g)), (_, v)) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(vs) {
            for ((p, g), v) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                let g = g + wd * *p;
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

pub fn global_norm(grads: &ModelParams) -> f64 {
    grads.tensors().iter().map(|(_, m)| m.sum_sq()).sum::<f64>().sqrt()
}

/// Adds the batch-mean gradient of the cross-entropy of one instance and
/// returns its loss.
pub fn accumulate_instance(params: &ModelParams, p: &Prepared, scale: f64, grads: &mut ModelParams) -> Result<f64> {
    let mut tapes = Vec::with_capacity(CANDIDATES);
    let mut scores = [0.0; CANDIDATES];
    for (s, (plan, vis)) in scores.iter_mut().zip(&p.candidates) {
        let (v, tape) = params.score_traced(plan, vis)?;
        *s = v;
        tapes.push(tape);
    }
    let sv = ScoreVector::from_scores(scores);
    for (c, (tape, (plan, _))) in tapes.into_iter().zip(&p.candidates).enumerate() {
        let target = if c == p.gold { 1.0 } else { 0.0 };
        params.backward(tape, plan, scale * (sv.probs[c] - target), grads)?;
    }
    Ok(sv.loss(p.gold))
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
}

/// Trains from a seeded initialization. Accuracy columns of each record are
/// measured on `eval` when given, otherwise on the training data.
///
/// `on_epoch` sees every record as soon as it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    vocab_rows: usize,
    data: &[Prepared],
    eval: Option<&[Prepared]>,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(model_cfg, vocab_rows, &mut rng)?;
    let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut grads = params.zeros_like();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            for (_, g) in grads.tensors_mut() {
                g.fill(0.0);
            }
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += accumulate_instance(&params, &data[i], scale, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: batch_loss * scale });
            }
            total += batch_loss;
            if let Some(max) = cfg.clip_norm {
                let norm = global_norm(&grads);
                if norm > max {
                    for (_, g) in grads.tensors_mut() {
                        g.scale(max / norm);
                    }
                }
            }
            opt.step(&mut params, &grads);
        }
        if !params.is_finite() {
            return Err(Error::Diverged { epoch, step: data.len().div_ceil(cfg.batch_size), loss: f64::NAN });
        }
        // Snapping every epoch keeps logged metrics exact for a saved checkpoint.
        params.snap_to_f32();
        let m = evaluate_prepared(eval.unwrap_or(data), &params)?.metrics;
        let rec = EpochRecord {
            epoch,
            loss: total / data.len() as f64,
            acc_qa: m.acc_qa,
            acc_qar_given: m.acc_qar_given,
            acc_joint: m.acc_joint,
        };
        on_epoch(&rec)?;
        log.push(rec);
    }
    Ok(Trained { params, log })
}
