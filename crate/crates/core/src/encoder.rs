//! Post-LN transformer blocks with visible-matrix mask-self-attention.
//!
//! Forward keeps everything backward needs; gradients are computed by hand.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt_acc, matmul_tn_acc, Mat};
use crate::pipeline::VisibleMatrix;

/// Added to logits of invisible pairs (times `W - 1`) before scaling.
pub const MASK_PENALTY: f64 = 1e9;
pub const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
}

impl LayerParams {
    pub fn zeros(d: usize, d_ff: usize) -> Self {
        LayerParams {
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            w1: Mat::zeros(d, d_ff),
            b1: Mat::zeros(1, d_ff),
            w2: Mat::zeros(d_ff, d),
            b2: Mat::zeros(1, d),
            ln1_g: Mat::zeros(1, d),
            ln1_b: Mat::zeros(1, d),
            ln2_g: Mat::zeros(1, d),
            ln2_b: Mat::zeros(1, d),
        }
    }

    /// Weights uniform with standard deviation `gain / sqrt(fan_in)`, biases
    /// zero, LayerNorm gains one.
    pub fn init<R: Rng>(d: usize, d_ff: usize, gain: f64, rng: &mut R) -> Self {
        let bound = |fan_in: usize| gain * (3.0 / fan_in as f64).sqrt();
        LayerParams {
            wq: Mat::uniform(d, d, bound(d), rng),
            wk: Mat::uniform(d, d, bound(d), rng),
            wv: Mat::uniform(d, d, bound(d), rng),
            wo: Mat::uniform(d, d, bound(d), rng),
            w1: Mat::uniform(d, d_ff, bound(d), rng),
            b1: Mat::zeros(1, d_ff),
            w2: Mat::uniform(d_ff, d, bound(d_ff), rng),
            b2: Mat::zeros(1, d),
            ln1_g: Mat::filled(1, d, 1.0),
            ln1_b: Mat::zeros(1, d),
            ln2_g: Mat::filled(1, d, 1.0),
            ln2_b: Mat::zeros(1, d),
        }
    }

    pub fn d(&self) -> usize {
        self.wq.rows
    }

    pub fn tensors(&self) -> [(&'static str, &Mat); 12] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Mat); 12] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
        ]
    }
}

/// Per-layer, per-head attention probabilities of the last forward pass.
pub type AttentionTrace = Vec<Vec<Mat>>;

#[derive(Debug, Clone)]
struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    x: Mat,
    attn: AttnCache,
    ln1: LnCache,
    y1: Mat,
    u: Mat,
    f: Mat,
    ln2: LnCache,
}

fn head_cols(m: &Mat, h: usize, dh: usize) -> Mat {
    let mut out = Mat::zeros(m.rows, dh);
    for i in 0..m.rows {
        out.row_mut(i).copy_from_slice(&m.row(i)[h * dh..(h + 1) * dh]);
    }
    out
}

fn add_head_cols(dst: &mut Mat, src: &Mat, h: usize, dh: usize) {
    for i in 0..dst.rows {
        let row = &mut dst.row_mut(i)[h * dh..(h + 1) * dh];
        for (a, b) in row.iter_mut().zip(src.row(i)) {
            *a += b;
        }
    }
}

fn attention_forward(x: &Mat, p: &LayerParams, visible: &VisibleMatrix, heads: usize) -> (Mat, AttnCache) {
    let n = x.rows;
    let d = p.d();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = matmul(x, &p.wq);
    let k = matmul(x, &p.wk);
    let v = matmul(x, &p.wv);
    let mut ctx = Mat::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (head_cols(&q, h, dh), head_cols(&k, h, dh), head_cols(&v, h, dh));
        let mut s = Mat::zeros(n, n);
        matmul_nt_acc(&qh, &kh, &mut s);
        for i in 0..n {
            let row = s.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for (j, x) in row.iter_mut().enumerate() {
                let w = if visible.get(i, j) { 1.0 } else { 0.0 };
                *x = (*x + (w - 1.0) * MASK_PENALTY) * scale;
                max = max.max(*x);
            }
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        let ch = matmul(&s, &vh);
        add_head_cols(&mut ctx, &ch, h, dh);
        probs.push(s);
    }
    let out = matmul(&ctx, &p.wo);
    (out, AttnCache { q, k, v, probs, ctx })
}

/// One mask-self-attention sublayer (no residual, no LayerNorm).
///
/// Returns the projected output and each head's row-stochastic attention.
pub fn mask_attention(x: &Mat, layer: &LayerParams, visible: &VisibleMatrix, heads: usize) -> Result<(Mat, Vec<Mat>)> {
    check_shapes(x, layer, visible, heads)?;
    let (out, cache) = attention_forward(x, layer, visible, heads);
    Ok((out, cache.probs))
}

fn check_shapes(x: &Mat, layer: &LayerParams, visible: &VisibleMatrix, heads: usize) -> Result<()> {
    let d = layer.d();
    if x.cols != d {
        return Err(Error::Dimension { context: "encoder input width", expected: d, actual: x.cols });
    }
    if visible.n() != x.rows {
        return Err(Error::Dimension { context: "visible matrix size", expected: x.rows, actual: visible.n() });
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("hidden size {d} is not divisible by {heads} heads")));
    }
    Ok(())
}

fn layer_norm(r: &Mat, g: &Mat, b: &Mat) -> (Mat, LnCache) {
    let d = r.cols;
    let mut xhat = Mat::zeros(r.rows, d);
    let mut y = Mat::zeros(r.rows, d);
    let mut inv_std = Vec::with_capacity(r.rows);
    for i in 0..r.rows {
        let row = r.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let (xh, yr) = (xhat.row_mut(i), &mut y.data[i * d..(i + 1) * d]);
        for c in 0..d {
            xh[c] = (row[c] - mean) * inv;
            yr[c] = xh[c] * g.data[c] + b.data[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Mat, cache: &LnCache, g: &Mat, dg: &mut Mat, db: &mut Mat) -> Mat {
    let d = dy.cols;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows {
        let (dyr, xh) = (dy.row(i), cache.xhat.row(i));
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            dg.data[c] += dyr[c] * xh[c];
            db.data[c] += dyr[c];
            dxhat[c] = dyr[c] * g.data[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let inv = cache.inv_std[i];
        for (c, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = inv * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn add_bias(m: &mut Mat, b: &Mat) {
    for i in 0..m.rows {
        for (x, bv) in m.row_mut(i).iter_mut().zip(&b.data) {
            *x += bv;
        }
    }
}

fn sum_rows_into(m: &Mat, out: &mut Mat) {
    for i in 0..m.rows {
        for (o, x) in out.data.iter_mut().zip(m.row(i)) {
            *o += x;
        }
    }
}

fn layer_forward(x: &Mat, p: &LayerParams, visible: &VisibleMatrix, heads: usize) -> (Mat, LayerCache) {
    let (mut r1, attn) = attention_forward(x, p, visible, heads);
    r1.add_assign(x);
    let (y1, ln1) = layer_norm(&r1, &p.ln1_g, &p.ln1_b);
    let mut u = matmul(&y1, &p.w1);
    add_bias(&mut u, &p.b1);
    let f = Mat::from_vec(u.rows, u.cols, u.data.iter().map(|&v| gelu(v)).collect());
    let mut r2 = matmul(&f, &p.w2);
    add_bias(&mut r2, &p.b2);
    r2.add_assign(&y1);
    let (y2, ln2) = layer_norm(&r2, &p.ln2_g, &p.ln2_b);
    let cache = LayerCache { x: x.clone(), attn, ln1, y1, u, f, ln2 };
    (y2, cache)
}

fn layer_backward(dy2: &Mat, c: &LayerCache, p: &LayerParams, g: &mut LayerParams, heads: usize) -> Mat {
    let n = dy2.rows;
    let d = p.d();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dr2 = layer_norm_backward(dy2, &c.ln2, &p.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
    // feed-forward branch
    matmul_tn_acc(&c.f, &dr2, &mut g.w2);
    sum_rows_into(&dr2, &mut g.b2);
    let mut du = Mat::zeros(n, p.w1.cols);
    matmul_nt_acc(&dr2, &p.w2, &mut du);
    for (x, &u) in du.data.iter_mut().zip(&c.u.data) {
        *x *= gelu_grad(u);
    }
    matmul_tn_acc(&c.y1, &du, &mut g.w1);
    sum_rows_into(&du, &mut g.b1);
    let mut dy1 = dr2;
    matmul_nt_acc(&du, &p.w1, &mut dy1);

    let dr1 = layer_norm_backward(&dy1, &c.ln1, &p.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
    // attention branch
    let a = &c.attn;
    matmul_tn_acc(&a.ctx, &dr1, &mut g.wo);
    let mut dctx = Mat::zeros(n, d);
    matmul_nt_acc(&dr1, &p.wo, &mut dctx);
    let mut dq = Mat::zeros(n, d);
    let mut dk = Mat::zeros(n, d);
    let mut dv = Mat::zeros(n, d);
    for h in 0..heads {
        let s = &a.probs[h];
        let (qh, kh, vh) = (head_cols(&a.q, h, dh), head_cols(&a.k, h, dh), head_cols(&a.v, h, dh));
        let dch = head_cols(&dctx, h, dh);
        let mut ds = Mat::zeros(n, n);
        matmul_nt_acc(&dch, &vh, &mut ds);
        let mut dvh = Mat::zeros(n, dh);
        matmul_tn_acc(s, &dch, &mut dvh);
        // softmax backward, then the 1/sqrt(dk) factor
        for i in 0..n {
            let (sr, dr) = (s.row(i), ds.row_mut(i));
            let dotp: f64 = sr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (x, &sv) in dr.iter_mut().zip(sr) {
                *x = sv * (*x - dotp) * scale;
            }
        }
        let dqh = matmul(&ds, &kh);
        let mut dkh = Mat::zeros(n, dh);
        matmul_tn_acc(&ds, &qh, &mut dkh);
        add_head_cols(&mut dq, &dqh, h, dh);
        add_head_cols(&mut dk, &dkh, h, dh);
        add_head_cols(&mut dv, &dvh, h, dh);
    }
    matmul_tn_acc(&c.x, &dq, &mut g.wq);
    matmul_tn_acc(&c.x, &dk, &mut g.wk);
    matmul_tn_acc(&c.x, &dv, &mut g.wv);
    let mut dx = dr1;
    matmul_nt_acc(&dq, &p.wq, &mut dx);
    matmul_nt_acc(&dk, &p.wk, &mut dx);
    matmul_nt_acc(&dv, &p.wv, &mut dx);
    dx
}

/// A stack of blocks that remembers its last forward pass.
///
/// `backward` consumes that trace; calling it again without a new forward is
/// an error.
#[derive(Debug)]
pub struct Encoder<'p> {
    layers: &'p [LayerParams],
    heads: usize,
    trace: Option<Vec<LayerCache>>,
}

impl<'p> Encoder<'p> {
    pub fn new(layers: &'p [LayerParams], heads: usize) -> Result<Self> {
        if let Some(l) = layers.first() {
            if heads == 0 || l.d() % heads != 0 {
                return Err(Error::Config(format!("hidden size {} is not divisible by {heads} heads", l.d())));
            }
        }
        Ok(Encoder { layers, heads, trace: None })
    }

    pub fn forward(&mut self, x: &Mat, visible: &VisibleMatrix) -> Result<Mat> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for p in self.layers {
            check_shapes(&h, p, visible, self.heads)?;
            let (y, cache) = layer_forward(&h, p, visible, self.heads);
            caches.push(cache);
            h = y;
        }
        self.trace = Some(caches);
        Ok(h)
    }

    /// Attention probabilities of the retained forward pass.
    pub fn attention(&self) -> Option<AttentionTrace> {
        self.trace
            .as_ref()
            .map(|cs| cs.iter().map(|c| c.attn.probs.clone()).collect())
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the encoder input.
    pub fn backward(&mut self, dout: &Mat, grads: &mut [LayerParams]) -> Result<Mat> {
        let caches = self.trace.take().ok_or(Error::NoForwardTrace)?;
        if grads.len() != self.layers.len() {
            return Err(Error::Dimension {
                context: "gradient layers",
                expected: self.layers.len(),
                actual: grads.len(),
            });
        }
        let mut d = dout.clone();
        for ((c, p), g) in caches.iter().zip(self.layers).zip(grads.iter_mut()).rev() {
            if d.shape() != c.x.shape() {
                return Err(Error::Dimension { context: "output gradient rows", expected: c.x.rows, actual: d.rows });
            }
            d = layer_backward(&d, c, p, g, self.heads);
        }
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Plain scaled dot-product attention, one head at a time, no mask.
    fn unmasked_oracle(x: &Mat, p: &LayerParams, heads: usize) -> Mat {
        let n = x.rows;
        let d = p.d();
        let dh = d / heads;
        let proj = |w: &Mat| {
            let mut m = vec![vec![0.0; d]; n];
            for i in 0..n {
                for c in 0..d {
                    m[i][c] = (0..d).map(|k| x.get(i, k) * w.get(k, c)).sum();
                }
            }
            m
        };
        let (q, k, v) = (proj(&p.wq), proj(&p.wk), proj(&p.wv));
        let mut ctx = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    ctx[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        let mut out = Mat::zeros(n, d);
        for i in 0..n {
            for c in 0..d {
                out.set(i, c, (0..d).map(|k| ctx[i][k] * p.wo.get(k, c)).sum());
            }
        }
        out
    }

    #[test]
    fn all_visible_matches_unmasked_attention() {
        let mut r = rng(1);
        let p = LayerParams::init(16, 32, 1.0, &mut r);
        let x = Mat::uniform(6, 16, 1.0, &mut r);
        let (out, _) = mask_attention(&x, &p, &VisibleMatrix::all_visible(6), 4).unwrap();
        assert!(out.max_abs_diff(&unmasked_oracle(&x, &p, 4)) < 1e-10);
    }

    #[test]
    fn invisible_pairs_get_no_weight() {
        let mut r = rng(2);
        let p = LayerParams::init(8, 16, 1.0, &mut r);
        let x = Mat::uniform(4, 8, 1.0, &mut r);
        let mut vis = VisibleMatrix::all_visible(4);
        vis.set(0, 3, false);
        vis.set(2, 1, false);
        let (_, probs) = mask_attention(&x, &p, &vis, 2).unwrap();
        for s in &probs {
            assert!(s.get(0, 3) < 1e-300);
            assert!(s.get(2, 1) < 1e-300);
            for i in 0..4 {
                assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut r = rng(3);
        let p = LayerParams::init(8, 16, 1.0, &mut r);
        let x = Mat::uniform(4, 8, 1.0, &mut r);
        assert!(matches!(
            mask_attention(&x, &p, &VisibleMatrix::all_visible(5), 2),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            mask_attention(&x, &p, &VisibleMatrix::all_visible(4), 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn backward_needs_forward() {
        let mut r = rng(4);
        let layers = vec![LayerParams::init(8, 16, 1.0, &mut r)];
        let mut grads = vec![LayerParams::zeros(8, 16)];
        let mut enc = Encoder::new(&layers, 2).unwrap();
        let dout = Mat::zeros(3, 8);
        assert!(matches!(enc.backward(&dout, &mut grads), Err(Error::NoForwardTrace)));
        enc.forward(&Mat::uniform(3, 8, 1.0, &mut r), &VisibleMatrix::all_visible(3)).unwrap();
        enc.backward(&dout, &mut grads).unwrap();
        // the trace is consumed
        assert!(matches!(enc.backward(&dout, &mut grads), Err(Error::NoForwardTrace)));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for u in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu(u + 1e-6) - gelu(u - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = rng(5);
        let layers = vec![LayerParams::init(8, 16, 1.0, &mut r), LayerParams::init(8, 16, 1.0, &mut r)];
        let x = Mat::uniform(5, 8, 1.0, &mut r);
        let probe = Mat::uniform(5, 8, 1.0, &mut r);
        let mut vis = VisibleMatrix::all_visible(5);
        vis.set(1, 4, false);
        vis.set(4, 1, false);
        let loss = |x: &Mat| {
            let mut e = Encoder::new(&layers, 2).unwrap();
            let y = e.forward(x, &vis).unwrap();
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut enc = Encoder::new(&layers, 2).unwrap();
        enc.forward(&x, &vis).unwrap();
        let mut grads = vec![LayerParams::zeros(8, 16), LayerParams::zeros(8, 16)];
        let dx = enc.backward(&probe, &mut grads).unwrap();
        for idx in 0..x.data.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data[idx] += 1e-5;
            xm.data[idx] -= 1e-5;
            let num = (loss(&xp) - loss(&xm)) / 2e-5;
            assert!((num - dx.data[idx]).abs() < 1e-6, "idx {idx}: {num} vs {}", dx.data[idx]);
        }
    }
}
