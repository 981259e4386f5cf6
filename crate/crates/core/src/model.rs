//! The full scorer: embeddings, encoder stack, and a linear head on `[CLS]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbedPlan, EmbedTables};
use crate::encoder::{Encoder, LayerParams};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::pipeline::VisibleMatrix;

/// Default bound of the uniform initialization of every embedding table.
pub const EMBED_INIT: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// Width of region appearance vectors.
    pub d_app: usize,
    /// Size of the position table.
    pub max_seq: usize,
    /// Encoder weights get standard deviation `init_gain / sqrt(fan_in)`.
    pub init_gain: f64,
    /// Embedding tables start uniform in `[-embed_init, embed_init]`.
    pub embed_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            layers: 2,
            d_ff: 128,
            d_app: 16,
            max_seq: 128,
            init_gain: 1.0,
            embed_init: EMBED_INIT,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || !self.d.is_multiple_of(8) {
            return bad(format!("d = {} must be a positive multiple of 8", self.d));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} is not divisible by {} heads", self.d, self.heads));
        }
        if self.d_ff == 0 || self.d_app == 0 || self.max_seq == 0 {
            return bad("d_ff, d_app and max_seq must be positive".into());
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return bad(format!("init_gain = {} must be positive", self.init_gain));
        }
        if !(self.embed_init.is_finite() && self.embed_init >= 0.0) {
            return bad(format!("embed_init = {} must be non-negative", self.embed_init));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tables: EmbedTables,
    pub layers: Vec<LayerParams>,
    /// d×1.
    pub head_w: Mat,
    /// 1×1.
    pub head_b: Mat,
}

/// What `backward` needs from one scored sequence.
#[derive(Debug)]
pub struct ScoreTape<'m> {
    encoder: Encoder<'m>,
    cls: Vec<f64>,
    rows: usize,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig, vocab_rows: usize) -> Self {
        ModelParams {
            config: config.clone(),
            tables: EmbedTables::zeros(vocab_rows, config.max_seq, config.d, config.d_app),
            layers: (0..config.layers).map(|_| LayerParams::zeros(config.d, config.d_ff)).collect(),
            head_w: Mat::zeros(config.d, 1),
            head_b: Mat::zeros(1, 1),
        }
    }

    pub fn init<R: Rng>(config: &ModelConfig, vocab_rows: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, e) = (config.d, config.embed_init);
        let tables = EmbedTables {
            token: Mat::uniform(vocab_rows, d, e, rng),
            segment: Mat::uniform(3, d, e, rng),
            position: Mat::uniform(config.max_seq, d, e, rng),
            img_token: Mat::uniform(1, d, e, rng),
            appearance_proj: Mat::uniform(config.d_app, d, e, rng),
        };
        let layers = (0..config.layers)
            .map(|_| LayerParams::init(d, config.d_ff, config.init_gain, rng))
            .collect();
        let bound = config.init_gain * (3.0 / d as f64).sqrt();
        Ok(ModelParams {
            config: config.clone(),
            tables,
            layers,
            head_w: Mat::uniform(d, 1, bound, rng),
            head_b: Mat::zeros(1, 1),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config, self.tables.token.rows)
    }

    pub fn vocab_rows(&self) -> usize {
        self.tables.token.rows
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let t = &self.tables;
        let mut out = vec![
            ("embed.token".to_string(), &t.token),
            ("embed.segment".to_string(), &t.segment),
            ("embed.position".to_string(), &t.position),
            ("embed.img_token".to_string(), &t.img_token),
            ("embed.appearance_proj".to_string(), &t.appearance_proj),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors().into_iter().map(|(n, m)| (format!("layer{l}.{n}"), m)));
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let t = &mut self.tables;
        let mut out = vec![
            ("embed.token".to_string(), &mut t.token),
            ("embed.segment".to_string(), &mut t.segment),
            ("embed.position".to_string(), &mut t.position),
            ("embed.img_token".to_string(), &mut t.img_token),
            ("embed.appearance_proj".to_string(), &mut t.appearance_proj),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.tensors_mut().into_iter().map(|(n, m)| (format!("layer{l}.{n}"), m)));
        }
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Rounds every parameter to the nearest `f32`, so that a saved
    /// checkpoint reloads to exactly the same model.
    pub fn snap_to_f32(&mut self) {
        for (_, m) in self.tensors_mut() {
            m.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    pub fn encode(&self, plan: &EmbedPlan, visible: &VisibleMatrix) -> Result<(Mat, AttentionOut)> {
        let x = plan.embed(&self.tables);
        let mut enc = Encoder::new(&self.layers, self.config.heads)?;
        let h = enc.forward(&x, visible)?;
        Ok((h, enc.attention().unwrap_or_default()))
    }

    pub fn score(&self, plan: &EmbedPlan, visible: &VisibleMatrix) -> Result<f64> {
        Ok(self.score_traced(plan, visible)?.0)
    }

    pub fn score_traced(&self, plan: &EmbedPlan, visible: &VisibleMatrix) -> Result<(f64, ScoreTape<'_>)> {
        let x = plan.embed(&self.tables);
        let mut encoder = Encoder::new(&self.layers, self.config.heads)?;
        let h = encoder.forward(&x, visible)?;
        let cls = h.row(0).to_vec();
        let s = crate::linalg::dot(&cls, &self.head_w.data) + self.head_b.data[0];
        Ok((s, ScoreTape { encoder, cls, rows: h.rows }))
    }

    /// Accumulates `dscore * d(score)/d(params)` into `grads`.
    pub fn backward(&self, mut tape: ScoreTape<'_>, plan: &EmbedPlan, dscore: f64, grads: &mut ModelParams) -> Result<()> {
        let d = self.config.d;
        for (g, c) in grads.head_w.data.iter_mut().zip(&tape.cls) {
            *g += dscore * c;
        }
        grads.head_b.data[0] += dscore;
        let mut dh = Mat::zeros(tape.rows, d);
        for (o, w) in dh.row_mut(0).iter_mut().zip(&self.head_w.data) {
            *o = dscore * w;
        }
        let dx = tape.encoder.backward(&dh, &mut grads.layers)?;
        plan.backward(&dx, &mut grads.tables);
        Ok(())
    }
}

pub type AttentionOut = crate::encoder::AttentionTrace;
