//! Scalar kernels shared by the forward and backward passes. Generic over
//! the activation float so the finite-difference tests can run the exact
//! same graph in 64-bit.

use num_traits::Float;

/// Activation/parameter scalar. f32 in production, f64 in numeric tests.
pub trait Real: Float + Send + Sync + std::fmt::Debug + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    #[inline(always)]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map_to<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Unrolled into eight independent accumulator lanes so the backend can
/// vectorize; lane order is fixed, so results stay deterministic.
#[inline(always)]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); 8];
    let mut chunks_a = a.chunks_exact(8);
    let mut chunks_b = b.chunks_exact(8);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        for i in 0..8 {
            lanes[i] = lanes[i] + ca[i] * cb[i];
        }
    }
    let mut acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for (&x, &y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        acc = acc + x * y;
    }
    acc
}

#[inline(always)]
pub fn axpy<T: Real>(out: &mut [T], scale: T, x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = *o + scale * v;
    }
}

/// y[t] = W x[t] for every row t, with W of shape [out, in]. Rows are
/// processed four at a time so each weight row is reused while hot.
pub fn linear_forward<T: Real>(x: &[T], w: &Mat<T>, t_len: usize) -> Vec<T> {
    let (out_dim, in_dim) = (w.rows, w.cols);
    debug_assert_eq!(x.len(), t_len * in_dim);
    let mut y = vec![T::zero(); t_len * out_dim];
    let mut t = 0;
    while t + 4 <= t_len {
        let (x0, x1, x2, x3) = (
            &x[t * in_dim..(t + 1) * in_dim],
            &x[(t + 1) * in_dim..(t + 2) * in_dim],
            &x[(t + 2) * in_dim..(t + 3) * in_dim],
            &x[(t + 3) * in_dim..(t + 4) * in_dim],
        );
        for o in 0..out_dim {
            let wr = w.row(o);
            y[t * out_dim + o] = dot(x0, wr);
            y[(t + 1) * out_dim + o] = dot(x1, wr);
            y[(t + 2) * out_dim + o] = dot(x2, wr);
            y[(t + 3) * out_dim + o] = dot(x3, wr);
        }
        t += 4;
    }
    while t < t_len {
        let xt = &x[t * in_dim..(t + 1) * in_dim];
        let yt = &mut y[t * out_dim..(t + 1) * out_dim];
        for o in 0..out_dim {
            yt[o] = dot(xt, w.row(o));
        }
        t += 1;
    }
    y
}

/// Accumulate dW += dy^T x and return dx = dy W.
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &Mat<T>,
    dy: &[T],
    dw: &mut Mat<T>,
    t_len: usize,
) -> Vec<T> {
    let (out_dim, in_dim) = (w.rows, w.cols);
    let mut dx = vec![T::zero(); t_len * in_dim];
    for t in 0..t_len {
        let xt = &x[t * in_dim..(t + 1) * in_dim];
        let dyt = &dy[t * out_dim..(t + 1) * out_dim];
        let dxt = &mut dx[t * in_dim..(t + 1) * in_dim];
        for o in 0..out_dim {
            let g = dyt[o];
            if g != T::zero() {
                axpy(dxt, g, w.row(o));
                axpy(dw.row_mut(o), g, xt);
            }
        }
    }
    dx
}

pub const NORM_EPS: f64 = 1e-5;

/// Root-mean-square normalization with learned gain; returns the inverse
/// rms so the backward pass can avoid recomputing it.
pub fn rmsnorm_forward<T: Real>(x: &[T], gain: &[T]) -> (Vec<T>, T) {
    let d = x.len();
    let mut ms = T::zero();
    for &v in x {
        ms = ms + v * v;
    }
    ms = ms / T::from_f64(d as f64);
    let inv = (ms + T::from_f64(NORM_EPS)).sqrt().recip();
    let out = x
        .iter()
        .zip(gain.iter())
        .map(|(&v, &g)| v * inv * g)
        .collect();
    (out, inv)
}

/// Gradients through rmsnorm: accumulates dgain, returns dx.
pub fn rmsnorm_backward<T: Real>(
    dy: &[T],
    x: &[T],
    gain: &[T],
    inv: T,
    dgain: &mut [T],
) -> Vec<T> {
    let d = x.len();
    // h = gradient w.r.t. the normalized vector x * inv.
    let mut h_dot_x = T::zero();
    for i in 0..d {
        let h = dy[i] * gain[i];
        h_dot_x = h_dot_x + h * x[i];
        dgain[i] = dgain[i] + dy[i] * x[i] * inv;
    }
    let inv3_over_d = inv * inv * inv / T::from_f64(d as f64);
    (0..d)
        .map(|i| {
            let h = dy[i] * gain[i];
            inv * h - inv3_over_d * h_dot_x * x[i]
        })
        .collect()
}

#[inline(always)]
pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline(always)]
pub fn silu_grad<T: Real>(x: T) -> T {
    let sig = T::one() / (T::one() + (-x).exp());
    sig * (T::one() + x * (T::one() - sig))
}

/// In-place numerically stable softmax over a slice.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Log-softmax of one logits row evaluated at `target`, accumulated in f64.
pub fn log_prob_f64<T: Real>(row: &[T], target: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        max = max.max(v.to_f64());
    }
    let mut sum = 0.0f64;
    for &v in row {
        sum += (v.to_f64() - max).exp();
    }
    row[target].to_f64() - max - sum.ln()
}
