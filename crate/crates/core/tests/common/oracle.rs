//! A plain transformer encoder written with nested vectors and scalar loops,
//! sharing nothing with the library but the parameter layout.

use kvlbert::encoder::LayerParams;
use kvlbert::linalg::Mat;
use rand::Rng;

type Rows = Vec<Vec<f64>>;

fn rows(m: &Mat) -> Rows {
    (0..m.rows).map(|i| m.row(i).to_vec()).collect()
}

fn mul(a: &Rows, w: &Mat) -> Rows {
    a.iter()
        .map(|r| (0..w.cols).map(|j| (0..w.rows).map(|k| r[k] * w.get(k, j)).sum()).collect())
        .collect()
}

fn layer_norm(x: &Rows, g: &Mat, b: &Mat) -> Rows {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-12).sqrt();
            r.iter().enumerate().map(|(c, v)| (v - mean) / sd * g.data[c] + b.data[c]).collect()
        })
        .collect()
}

fn gelu(u: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * u * (1.0 + (c * (u + 0.044715 * u.powi(3))).tanh())
}

/// Unmasked multi-head attention block, post-LN, GELU feed-forward.
pub fn plain_layer(x: &Rows, p: &LayerParams, heads: usize) -> Rows {
    let n = x.len();
    let d = p.wq.cols;
    let dh = d / heads;
    let (q, k, v) = (mul(x, &p.wq), mul(x, &p.wk), mul(x, &p.wv));
    let mut ctx = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                ctx[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let attn = mul(&ctx, &p.wo);
    let r1: Rows = (0..n).map(|i| (0..d).map(|c| x[i][c] + attn[i][c]).collect()).collect();
    let y1 = layer_norm(&r1, &p.ln1_g, &p.ln1_b);
    let mut u = mul(&y1, &p.w1);
    for r in &mut u {
        for (c, val) in r.iter_mut().enumerate() {
            *val = gelu(*val + p.b1.data[c]);
        }
    }
    let f = mul(&u, &p.w2);
    let r2: Rows = (0..n).map(|i| (0..d).map(|c| y1[i][c] + f[i][c] + p.b2.data[c]).collect()).collect();
    layer_norm(&r2, &p.ln2_g, &p.ln2_b)
}

pub fn plain_encoder(x: &Mat, layers: &[LayerParams], heads: usize) -> Mat {
    let mut h = rows(x);
    for p in layers {
        h = plain_layer(&h, p, heads);
    }
    Mat::from_vec(x.rows, x.cols, h.concat())
}

/// Layer with every tensor, LayerNorm and biases included, drawn at random.
pub fn random_layer<R: Rng>(d: usize, d_ff: usize, rng: &mut R) -> LayerParams {
    let mut p = LayerParams::init(d, d_ff, 1.0, rng);
    for (name, m) in p.tensors_mut() {
        let (lo, hi) = if name.ends_with("_g") { (0.5, 1.5) } else if name.starts_with('w') { (0.0, 0.0) } else { (-0.5, 0.5) };
        if hi > lo {
            m.data.iter_mut().for_each(|x| *x = rng.gen_range(lo..hi));
        }
    }
    p
}

pub fn random_input<R: Rng>(n: usize, d: usize, rng: &mut R) -> Mat {
    Mat::uniform(n, d, 1.0, rng)
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
