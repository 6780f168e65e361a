//! Neural-network building blocks with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so the production path runs in `f32`
//! while gradient checks run in `f64`. Activations are stored as `[C, N]`
//! matrices where `N` flattens `(batch, height, width)`; convolutions lower
//! to GEMM through im2col, which is where virtually all the compute goes.

use ndarray::{Array1, Array2};
use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Float scalar the network can run in. Bridges to the matching
/// `matrixmultiply` GEMM kernel.
pub trait Real:
    Float + std::ops::AddAssign + std::ops::MulAssign + std::iter::Sum + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    /// Checkpoint dtype tag.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a(m x k) * b(k x n) + beta * c`, all row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// Same as [`Real::gemm`] but with `b` stored transposed (`n x k`
    /// row-major), read through strides instead of materializing a copy.
    #[allow(clippy::too_many_arguments)]
    fn gemm_nt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b_t: &[Self], beta: Self, c: &mut [Self]);
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gemm_nt(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b_t: &[f32], beta: f32, c: &mut [f32]) {
        debug_assert!(a.len() >= m * k && b_t.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b_t.as_ptr(), 1, k as isize,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gemm_nt(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b_t: &[f64], beta: f64, c: &mut [f64]) {
        debug_assert!(a.len() >= m * k && b_t.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b_t.as_ptr(), 1, k as isize,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Spatial layout of a `[C, N]` activation: `N = batch * height * width`.
/// 1D convolutions over time use `height = 1` with frequency as channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn cols(&self) -> usize {
        self.batch * self.height * self.width
    }

    fn per_sample(&self) -> usize {
        self.height * self.width
    }
}

/// Mutable view of one parameter tensor and its gradient accumulator.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
}

/// Read-only view used for checkpointing and inventories.
pub struct ParamView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a [T],
}

pub(crate) fn kaiming_uniform<T: Real>(fan_in: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}

/// Convolution with `same` zero padding, lowered to one GEMM per sample.
///
/// Weights are `[cout, cin * kh * kw]`; a 1D time convolution is the
/// `kh = 1` case.
#[derive(Clone)]
pub struct ConvLayer<T> {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
    pub grad_weight: Array2<T>,
    pub grad_bias: Option<Array1<T>>,
    cols: Vec<T>,
    cached_input: Option<Array2<T>>,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(cin: usize, cout: usize, kh: usize, kw: usize, with_bias: bool, rng: &mut ChaCha8Rng) -> Self {
        assert!(kh % 2 == 1 && kw % 2 == 1, "kernel dims must be odd");
        let fan_in = cin * kh * kw;
        let weight =
            Array2::from_shape_vec((cout, fan_in), kaiming_uniform(fan_in, cout * fan_in, rng))
                .expect("weight shape");
        Self {
            cin,
            cout,
            kh,
            kw,
            grad_weight: Array2::zeros((cout, fan_in)),
            grad_bias: with_bias.then(|| Array1::zeros(cout)),
            bias: with_bias.then(|| Array1::zeros(cout)),
            weight,
            cols: Vec::new(),
            cached_input: None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    /// Gathers the `kh * kw` shifted copies of one sample's channels into
    /// `cols`, zero-filling outside the sample.
    #[allow(clippy::too_many_arguments)]
    fn im2col_into(
        cols: &mut Vec<T>,
        x: &[T],
        g: &Grid,
        sample: usize,
        cin: usize,
        kh: usize,
        kw: usize,
    ) {
        let (h, w) = (g.height, g.width);
        let p = g.per_sample();
        let n_total = g.cols();
        let rows = cin * kh * kw;
        cols.resize(rows * p, T::zero());
        let (ph, pw) = (kh as isize / 2, kw as isize / 2);
        let mut row = 0;
        for ci in 0..cin {
            let src_base = ci * n_total + sample * p;
            for kd in 0..kh {
                let dh = kd as isize - ph;
                for kt in 0..kw {
                    let dw = kt as isize - pw;
                    let dst_base = row * p;
                    row += 1;
                    for d in 0..h {
                        let sd = d as isize + dh;
                        let dst = &mut cols[dst_base + d * w..dst_base + (d + 1) * w];
                        if sd < 0 || sd >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        // Valid destination t range so that t + dw stays in [0, w).
                        let t0 = (-dw).max(0) as usize;
                        let t1 = (w as isize).min(w as isize - dw) as usize;
                        dst[..t0].fill(T::zero());
                        dst[t1..].fill(T::zero());
                        if t0 < t1 {
                            let src_off = src_base + sd as usize * w;
                            dst[t0..t1].copy_from_slice(
                                &x[(src_off as isize + t0 as isize + dw) as usize
                                    ..(src_off as isize + t1 as isize + dw) as usize],
                            );
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add transpose of `im2col` for the input gradient.
    fn col2im(&self, dcols: &[T], dx: &mut [T], g: &Grid, sample: usize) {
        let (h, w) = (g.height, g.width);
        let p = g.per_sample();
        let n_total = g.cols();
        let (ph, pw) = (self.kh as isize / 2, self.kw as isize / 2);
        let mut row = 0;
        for ci in 0..self.cin {
            let dst_base = ci * n_total + sample * p;
            for kd in 0..self.kh {
                let dh = kd as isize - ph;
                for kt in 0..self.kw {
                    let dw = kt as isize - pw;
                    let src_base = row * p;
                    row += 1;
                    for d in 0..h {
                        let sd = d as isize + dh;
                        if sd < 0 || sd >= h as isize {
                            continue;
                        }
                        let t0 = (-dw).max(0) as usize;
                        let t1 = ((w as isize).min(w as isize - dw)) as usize;
                        if t0 >= t1 {
                            continue;
                        }
                        let src = &dcols[src_base + d * w + t0..src_base + d * w + t1];
                        let dst_off = (dst_base as isize + sd * w as isize + t0 as isize + dw) as usize;
                        let dst = &mut dx[dst_off..dst_off + (t1 - t0)];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += *s;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Array2<T>, g: &Grid, train: bool) -> Array2<T> {
        debug_assert_eq!(x.nrows(), self.cin);
        debug_assert_eq!(x.ncols(), g.cols());
        let p = g.per_sample();
        let rows = self.cin * self.kh * self.kw;
        let mut y = Array2::<T>::zeros((self.cout, g.cols()));
        let xs = x.as_slice().expect("standard layout");
        {
            let mut cols = std::mem::take(&mut self.cols);
            let w_slice = self.weight.as_slice().expect("standard layout");
            let ys = y.as_slice_mut().expect("standard layout");
            let mut out = vec![T::zero(); self.cout * p];
            for b in 0..g.batch {
                Self::im2col_into(&mut cols, xs, g, b, self.cin, self.kh, self.kw);
                // y[:, b*p..(b+1)*p] = W . cols — strided output via per-row copy.
                T::gemm(self.cout, rows, p, T::one(), w_slice, &cols, T::zero(), &mut out);
                for co in 0..self.cout {
                    ys[co * g.cols() + b * p..co * g.cols() + (b + 1) * p]
                        .copy_from_slice(&out[co * p..(co + 1) * p]);
                }
            }
            self.cols = cols;
        }
        if let Some(bias) = &self.bias {
            for (co, &bv) in bias.iter().enumerate() {
                y.row_mut(co).mapv_inplace(|v| v + bv);
            }
        }
        if train {
            self.cached_input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<T>, g: &Grid) -> Array2<T> {
        let x = self.cached_input.take().expect("forward(train) before backward");
        let p = g.per_sample();
        let n_total = g.cols();
        let rows = self.cin * self.kh * self.kw;
        let xs = x.as_slice().expect("standard layout");
        let dys = dy.as_slice().expect("standard layout");
        let mut dx = Array2::<T>::zeros((self.cin, n_total));
        let dxs = dx.as_slice_mut().expect("standard layout");

        let w_t = transpose_to_vec(&self.weight);
        let mut cols = std::mem::take(&mut self.cols);
        let mut dy_b = vec![T::zero(); self.cout * p];
        let mut dcols = vec![T::zero(); rows * p];
        for b in 0..g.batch {
            for co in 0..self.cout {
                dy_b[co * p..(co + 1) * p]
                    .copy_from_slice(&dys[co * n_total + b * p..co * n_total + (b + 1) * p]);
            }
            // Weight gradient: dW += dY_b . cols_b^T  (recompute cols, read
            // the transpose through strides).
            Self::im2col_into(&mut cols, xs, g, b, self.cin, self.kh, self.kw);
            let gw = self.grad_weight.as_slice_mut().expect("standard layout");
            T::gemm_nt(self.cout, p, rows, T::one(), &dy_b, &cols, T::one(), gw);
            // Input gradient: dcols = W^T . dY_b, scattered back.
            T::gemm(rows, self.cout, p, T::one(), &w_t, &dy_b, T::zero(), &mut dcols);
            self.col2im(&dcols, dxs, g, b);
        }
        self.cols = cols;
        if let Some(gb) = &mut self.grad_bias {
            for co in 0..self.cout {
                let mut acc = T::zero();
                for v in dy.row(co) {
                    acc += *v;
                }
                gb[co] += acc;
            }
        }
        dx
    }

    pub fn zero_grads(&mut self) {
        self.grad_weight.fill(T::zero());
        if let Some(gb) = &mut self.grad_bias {
            gb.fill(T::zero());
        }
    }
}

fn transpose_to_vec<T: Real>(a: &Array2<T>) -> Vec<T> {
    let (r, c) = a.dim();
    let s = a.as_slice().expect("standard layout");
    transpose_slice(s, r, c)
}

fn transpose_slice<T: Real>(s: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = s[i * c + j];
        }
    }
    out
}

/// Per-channel batch normalization with padding-aware statistics.
///
/// `affine_shift = false` drops the additive shift so the layer carries no
/// bias-like parameter (used inside decoder heads).
#[derive(Clone)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Option<Array1<T>>,
    pub grad_gamma: Array1<T>,
    pub grad_beta: Option<Array1<T>>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: f64,
    pub eps: f64,
    cached: Option<BnCache<T>>,
}

#[derive(Clone)]
struct BnCache<T> {
    xhat: Array2<T>,
    inv_std: Vec<T>,
    valid: Vec<bool>,
    count: usize,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, affine_shift: bool) -> Self {
        Self {
            gamma: Array1::from_elem(channels, T::one()),
            beta: affine_shift.then(|| Array1::zeros(channels)),
            grad_gamma: Array1::zeros(channels),
            grad_beta: affine_shift.then(|| Array1::zeros(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, T::one()),
            momentum: 0.1,
            eps: 1e-5,
            cached: None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.as_ref().map_or(0, |b| b.len())
    }

    pub fn forward(&mut self, x: &Array2<T>, valid: &[bool], train: bool) -> Array2<T> {
        let (channels, n) = x.dim();
        debug_assert_eq!(valid.len(), n);
        let mut y = Array2::<T>::zeros((channels, n));
        if !train {
            for c in 0..channels {
                let mean = self.running_mean[c];
                let inv_std = T::from_f64(1.0 / (self.running_var[c].as_f64() + self.eps).sqrt());
                let g = self.gamma[c];
                let b = self.beta.as_ref().map_or(T::zero(), |bt| bt[c]);
                let xr = x.row(c);
                let mut yr = y.row_mut(c);
                for (o, &v) in yr.iter_mut().zip(xr.iter()) {
                    *o = g * (v - mean) * inv_std + b;
                }
            }
            return y;
        }

        let count = valid.iter().filter(|&&v| v).count().max(1);
        let mut xhat = Array2::<T>::zeros((channels, n));
        let mut inv_stds = Vec::with_capacity(channels);
        for c in 0..channels {
            let xr = x.row(c);
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for (i, &v) in xr.iter().enumerate() {
                if valid[i] {
                    let vf = v.as_f64();
                    sum += vf;
                    sumsq += vf * vf;
                }
            }
            let mean = sum / count as f64;
            let var = (sumsq / count as f64 - mean * mean).max(0.0);
            let inv_std = 1.0 / (var + self.eps).sqrt();

            self.running_mean[c] = T::from_f64(
                (1.0 - self.momentum) * self.running_mean[c].as_f64() + self.momentum * mean,
            );
            self.running_var[c] = T::from_f64(
                (1.0 - self.momentum) * self.running_var[c].as_f64() + self.momentum * var,
            );

            let mean_t = T::from_f64(mean);
            let inv_std_t = T::from_f64(inv_std);
            let g = self.gamma[c];
            let b = self.beta.as_ref().map_or(T::zero(), |bt| bt[c]);
            let mut xh = xhat.row_mut(c);
            let mut yr = y.row_mut(c);
            for ((xh_i, y_i), &v) in xh.iter_mut().zip(yr.iter_mut()).zip(xr.iter()) {
                let h = (v - mean_t) * inv_std_t;
                *xh_i = h;
                *y_i = g * h + b;
            }
            inv_stds.push(inv_std_t);
        }
        self.cached = Some(BnCache {
            xhat,
            inv_std: inv_stds,
            valid: valid.to_vec(),
            count,
        });
        y
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let cache = self.cached.take().expect("forward(train) before backward");
        let (channels, n) = dy.dim();
        let count = T::from_f64(cache.count as f64);
        let mut dx = Array2::<T>::zeros((channels, n));
        for c in 0..channels {
            let dyr = dy.row(c);
            let xh = cache.xhat.row(c);
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                if cache.valid[i] {
                    sum_dy += dyr[i];
                    sum_dy_xhat += dyr[i] * xh[i];
                }
            }
            self.grad_gamma[c] += sum_dy_xhat;
            if let Some(gb) = &mut self.grad_beta {
                gb[c] += sum_dy;
            }
            let scale = self.gamma[c] * cache.inv_std[c];
            let mean_dy = sum_dy / count;
            let mean_dy_xhat = sum_dy_xhat / count;
            let mut dxr = dx.row_mut(c);
            for i in 0..n {
                if cache.valid[i] {
                    dxr[i] = scale * (dyr[i] - mean_dy - xh[i] * mean_dy_xhat);
                }
            }
        }
        dx
    }

    pub fn zero_grads(&mut self) {
        self.grad_gamma.fill(T::zero());
        if let Some(gb) = &mut self.grad_beta {
            gb.fill(T::zero());
        }
    }
}

/// Rectifier with a cached activation mask.
#[derive(Clone, Default)]
pub struct Relu {
    mask: Vec<u8>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Real>(&mut self, x: &mut Array2<T>, train: bool) {
        if train {
            self.mask.resize(x.len(), 0);
            let xs = x.as_slice_mut().expect("standard layout");
            for (v, m) in xs.iter_mut().zip(self.mask.iter_mut()) {
                if *v > T::zero() {
                    *m = 1;
                } else {
                    *v = T::zero();
                    *m = 0;
                }
            }
        } else {
            for v in x.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
    }

    pub fn backward<T: Real>(&self, dy: &mut Array2<T>) {
        let ds = dy.as_slice_mut().expect("standard layout");
        for (v, &m) in ds.iter_mut().zip(&self.mask) {
            if m == 0 {
                *v = T::zero();
            }
        }
    }
}

/// Inverted dropout; identity in eval mode.
#[derive(Clone)]
pub struct Dropout {
    pub rate: f64,
    mask: Vec<u8>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Self { rate, mask: Vec::new() }
    }

    pub fn forward<T: Real>(&mut self, x: &mut Array2<T>, train: bool, rng: &mut ChaCha8Rng) {
        if !train || self.rate <= 0.0 {
            self.mask.clear();
            return;
        }
        use rand::RngCore;
        // Threshold compare on the raw u32 stream; one draw per element.
        let threshold = (self.rate * 4294967296.0) as u32;
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        self.mask.resize(x.len(), 0);
        let xs = x.as_slice_mut().expect("standard layout");
        for (v, m) in xs.iter_mut().zip(self.mask.iter_mut()) {
            if rng.next_u32() < threshold {
                *v = T::zero();
                *m = 0;
            } else {
                *v *= keep;
                *m = 1;
            }
        }
    }

    pub fn backward<T: Real>(&self, dy: &mut Array2<T>) {
        if self.mask.is_empty() {
            return;
        }
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let ds = dy.as_slice_mut().expect("standard layout");
        for (v, &m) in ds.iter_mut().zip(&self.mask) {
            if m == 0 {
                *v = T::zero();
            } else {
                *v *= keep;
            }
        }
    }
}
