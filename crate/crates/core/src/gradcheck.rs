//! Central finite differences against the hand-written backward pass.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};
use crate::pipeline::InjectionOptions;
use crate::synth::{make_synthetic, SynthConfig};
use crate::task::{build_vocab, prepare, predict_prepared, Knowledge, Prepared};
use crate::train::accumulate_instance;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are
/// zero up to rounding do not turn into huge ratios.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// The small model and instance used by the check.
pub fn check_model(seed: u64) -> Result<(ModelParams, Prepared)> {
    let syn = make_synthetic(&SynthConfig {
        seed,
        train: 1,
        eval: 0,
        answers: 6,
        context_words: 6,
        d_app: 4,
        ..Default::default()
    });
    let knowledge = Knowledge { kb: syn.kb.clone(), stoplist: syn.stoplist(), opts: InjectionOptions::with_k(2) };
    let cfg = ModelConfig { d: 16, heads: 2, layers: 2, d_ff: 32, d_app: 4, max_seq: 32, init_gain: 1.0, ..Default::default() };
    let vocab = build_vocab(&syn.kb, &syn.train.instances);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(&cfg, vocab.rows(), &mut rng)?;
    // Embeddings at their training-init scale of 0.02 sit so close to the
    // LayerNorm singularity that a 1e-3 step is far from infinitesimal, so the
    // check uses unit-scale tables; biases and gains get something to do too.
    for (name, m) in params.tensors_mut() {
        if name.starts_with("embed.") {
            m.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        } else if name.contains("ln") || name.ends_with(".b1") || name.ends_with(".b2") || name == "head.b" {
            m.data.iter_mut().for_each(|x| *x += rng.gen_range(-0.5..0.5));
        }
    }
    let prepared = prepare(&syn.train.instances[0], &knowledge, &vocab, &cfg)?;
    Ok((params, prepared))
}

fn loss(params: &ModelParams, p: &Prepared) -> Result<f64> {
    Ok(predict_prepared(p, params)?.loss(p.gold))
}

/// Compares analytic and numeric gradients of the instance loss on
/// `samples` parameters drawn by picking a tensor, then an entry.
pub fn gradient_check(seed: u64, samples: usize) -> Result<GradCheckReport> {
    gradient_check_with_step(seed, samples, STEP)
}

pub fn gradient_check_with_step(seed: u64, samples: usize, step: f64) -> Result<GradCheckReport> {
    let (mut params, prepared) = check_model(seed)?;
    let mut grads = params.zeros_like();
    accumulate_instance(&params, &prepared, 1.0, &mut grads)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut worst = (0.0, String::new());
    for _ in 0..samples {
        let t = rng.gen_range(0..names.len());
        let len = params.tensors()[t].1.data.len();
        let idx = *(0..len).collect::<Vec<_>>().choose(&mut rng).unwrap();
        let analytic = grads.tensors()[t].1.data[idx];

        let orig = params.tensors()[t].1.data[idx];
        params.tensors_mut()[t].1.data[idx] = orig + step;
        let up = loss(&params, &prepared)?;
        params.tensors_mut()[t].1.data[idx] = orig - step;
        let down = loss(&params, &prepared)?;
        params.tensors_mut()[t].1.data[idx] = orig;

        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic, numeric);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, format!("{}[{idx}]", names[t]));
        }
    }
    Ok(GradCheckReport {
        checked: samples,
        max_rel_err: worst.0,
        worst: worst.1,
        tolerance: TOLERANCE,
        pass: worst.0 < TOLERANCE,
    })
}
