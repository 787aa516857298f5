use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// The differentiable primitives all operate on rank-2 tensors; scalars are
/// `[1, 1]` and column vectors `[n, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len(), 1],
            data: values,
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (*n, 1),
            [] => (1, 1),
            _ => (self.shape[0], self.data.len() / self.shape[0].max(1)),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Two elementwise maps computed in one pass.
    pub fn map_pair(&self, f: impl Fn(f64) -> (f64, f64)) -> (Tensor, Tensor) {
        let (a, b): (Vec<f64>, Vec<f64>) = self.data.iter().map(|&x| f(x)).unzip();
        (
            Tensor {
                shape: self.shape.clone(),
                data: a,
            },
            Tensor {
                shape: self.shape.clone(),
                data: b,
            },
        )
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.data.len(), other.data.len());
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn with_data(mut self, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(self.data.len(), data.len());
        self.data = data;
        self
    }

    pub(crate) fn reshaped(mut self, rows: usize, cols: usize) -> Tensor {
        self.shape = vec![rows, cols];
        self
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `a [r, k] · b [k, c]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { nn_avx2(a, b, &mut out, k, c) };
        return out;
    }
    nn_kernel(a, b, &mut out, k, c);
    out
}

#[inline(always)]
fn nn_kernel(a: &[f64], b: &[f64], out: &mut [f64], k: usize, c: usize) {
    if c == 0 || k == 0 {
        return;
    }
    for (orow, arow) in out.chunks_exact_mut(c).zip(a.chunks_exact(k)) {
        for (&aip, brow) in arow.iter().zip(b.chunks_exact(c)) {
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn nn_avx2(a: &[f64], b: &[f64], out: &mut [f64], k: usize, c: usize) {
    nn_kernel(a, b, out, k, c)
}

/// `g [r, c] · bᵀ` where `b` is `[k, c]`; result `[r, k]`.
pub(crate) fn matmul_nt(g: &[f64], b: &[f64], r: usize, c: usize, k: usize) -> Vec<f64> {
    let mut bt = vec![0.0; c * k];
    for p in 0..k {
        for q in 0..c {
            bt[q * k + p] = b[p * c + q];
        }
    }
    matmul_nn(g, &bt, r, c, k)
}

/// `aᵀ · g` where `a` is `[r, k]` and `g` is `[r, c]`; result `[k, c]`.
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * c];
    let _ = r;
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { tn_avx2(a, g, &mut out, k, c) };
        return out;
    }
    tn_kernel(a, g, &mut out, k, c);
    out
}

#[inline(always)]
fn tn_kernel(a: &[f64], g: &[f64], out: &mut [f64], k: usize, c: usize) {
    if c == 0 || k == 0 {
        return;
    }
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(c)) {
        for (&aip, orow) in arow.iter().zip(out.chunks_exact_mut(c)) {
            if aip == 0.0 {
                continue;
            }
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tn_avx2(a: &[f64], g: &[f64], out: &mut [f64], k: usize, c: usize) {
    tn_kernel(a, g, out, k, c)
}

pub(crate) fn softplus(x: f64) -> f64 {
    softplus_sigmoid(x).0
}

/// `(softplus(x), sigmoid(x))` from a single exponential.
pub(crate) fn softplus_sigmoid(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let sp = x.max(0.0) + e.ln_1p();
    let s = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, s)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
