//! Dense row-major matrices and the handful of kernels the encoder needs.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec shape");
        Mat { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `out = a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    matmul_acc(a, b, &mut out);
    out
}

/// `out += a · b`.
pub fn matmul_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    assert_eq!((out.rows, out.cols), (a.rows, b.cols), "matmul output shape");
    gemm_acc(a.rows, a.cols, b.cols, &a.data, a.cols, 1, &b.data, &mut out.data);
}

/// `out += aᵀ · b` where `a` is m×p and `b` is m×q; `out` is p×q.
pub fn matmul_tn_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dims");
    assert_eq!((out.rows, out.cols), (a.cols, b.cols), "matmul_tn output shape");
    gemm_acc(a.cols, a.rows, b.cols, &a.data, 1, a.cols, &b.data, &mut out.data);
}

/// `out += a · bᵀ` where `a` is m×k and `b` is n×k; `out` is m×n.
pub fn matmul_nt_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dims");
    assert_eq!((out.rows, out.cols), (a.rows, b.rows), "matmul_nt output shape");
    let bt = transpose(b);
    gemm_acc(a.rows, a.cols, bt.cols, &a.data, a.cols, 1, &bt.data, &mut out.data);
}

pub fn transpose(a: &Mat) -> Mat {
    let mut t = Mat::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for (j, &v) in a.row(i).iter().enumerate() {
            t.data[j * a.rows + i] = v;
        }
    }
    t
}

const MR: usize = 4;
const NR: usize = 8;

/// `out (m×n) += A (m×kk) · B (kk×n)`, with `A[i][k] = a[i*rs + k*cs]` and
/// `B`, `out` dense row-major.
///
/// The 4×8 register tile keeps the accumulators out of memory across the
/// whole inner dimension; edges fall back to plain loops.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, kk: usize, n: usize, a: &[f64], rs: usize, cs: usize, b: &[f64], out: &mut [f64]) {
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0f64; NR]; MR];
            for k in 0..kk {
                let bk: &[f64; NR] = b[k * n + j..k * n + j + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * rs + k * cs];
                    for c in 0..NR {
                        row[c] += av * bk[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let o = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                for c in 0..NR {
                    o[c] += row[c];
                }
            }
            j += NR;
        }
        if j < n {
            for r in i..i + MR {
                for k in 0..kk {
                    let av = a[r * rs + k * cs];
                    for c in j..n {
                        out[r * n + c] += av * b[k * n + c];
                    }
                }
            }
        }
        i += MR;
    }
    for r in i..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for k in 0..kk {
            let av = a[r * rs + k * cs];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[k * n..(k + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the loop vectorize.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}
