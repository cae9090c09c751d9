//! Complex matrices and the 2-D discrete Fourier transform.
//!
//! One-dimensional transforms use a recursive mixed-radix Cooley–Tukey
//! decomposition over the prime factors of the length. When the largest
//! prime factor is big, the innermost transform of that size goes through
//! Bluestein's chirp-z algorithm on a power-of-two convolution instead of a
//! quadratic direct DFT. Plans (twiddles, factorization, chirps) are cached
//! per thread.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Primes above this size are handled by Bluestein's algorithm.
const DIRECT_PRIME_MAX: usize = 13;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::shape("complex_tensor", re.shape(), im.shape()));
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn from_real(re: Tensor) -> Self {
        let im = Tensor::zeros(re.shape());
        ComplexTensor { re, im }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        ComplexTensor {
            re: Tensor::zeros(shape),
            im: Tensor::zeros(shape),
        }
    }

    /// Builds a complex tensor filled with the constant `re + j·im`.
    pub fn full(shape: &[usize], re: f64, im: f64) -> Self {
        ComplexTensor {
            re: Tensor::full(shape, re),
            im: Tensor::full(shape, im),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn get(&self, flat: usize) -> Complex64 {
        Complex64::new(self.re.data()[flat], self.im.data()[flat])
    }

    pub fn to_complex_vec(&self) -> Vec<Complex64> {
        self.re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect()
    }

    pub(crate) fn from_complex_vec(shape: &[usize], values: &[Complex64]) -> Self {
        ComplexTensor {
            re: Tensor::from_parts(shape.to_vec(), values.iter().map(|c| c.re).collect()),
            im: Tensor::from_parts(shape.to_vec(), values.iter().map(|c| c.im).collect()),
        }
    }

    /// `[2, rows, cols]` tensor with the real part first.
    pub fn to_packed(&self) -> Tensor {
        let mut data = self.re.data().to_vec();
        data.extend_from_slice(self.im.data());
        let mut shape = vec![2];
        shape.extend_from_slice(self.shape());
        Tensor::from_parts(shape, data)
    }

    pub fn amplitude(&self) -> Tensor {
        amplitude(self)
    }

    pub fn phase(&self) -> Tensor {
        phase(self)
    }

    pub fn max_abs_diff(&self, other: &ComplexTensor) -> f64 {
        self.re.max_abs_diff(&other.re).max(self.im.max_abs_diff(&other.im))
    }
}

// ------------------------------------------------------------------ plans

struct Bluestein {
    len: usize,
    /// `e^{-jπk²/len}` for `k < len`.
    chirp: Vec<Complex64>,
    /// Transform of the conjugate chirp, wrapped to the convolution length.
    kernel: Vec<Complex64>,
    conv: Rc<FftPlan>,
}

struct FftPlan {
    len: usize,
    /// `e^{-2πjk/len}` for `k < len`.
    twiddles: Vec<Complex64>,
    /// Prime factors in ascending order; the last one is the leaf radix.
    factors: Vec<usize>,
    bluestein: Option<Bluestein>,
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<FftPlan>>> = RefCell::new(HashMap::new());
}

fn plan_for(len: usize) -> Rc<FftPlan> {
    if let Some(p) = PLANS.with(|c| c.borrow().get(&len).cloned()) {
        return p;
    }
    let plan = Rc::new(FftPlan::new(len));
    PLANS.with(|c| c.borrow_mut().insert(len, plan.clone()));
    plan
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

fn unit_root(k: usize, n: usize) -> Complex64 {
    let angle = -2.0 * PI * (k as f64) / (n as f64);
    Complex64::new(angle.cos(), angle.sin())
}

impl FftPlan {
    fn new(len: usize) -> Self {
        let twiddles = (0..len).map(|k| unit_root(k, len)).collect();
        let factors = prime_factors(len);
        let bluestein = match factors.last() {
            Some(&p) if p > DIRECT_PRIME_MAX => Some(Bluestein::new(p)),
            _ => None,
        };
        FftPlan {
            len,
            twiddles,
            factors,
            bluestein,
        }
    }

    fn forward(&self, data: &mut [Complex64]) {
        debug_assert_eq!(data.len(), self.len);
        if self.len <= 1 {
            return;
        }
        if self.len.is_power_of_two() {
            self.radix2(data);
            return;
        }
        let input = data.to_vec();
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.len];
        self.recurse(&input, 1, data, &mut scratch, self.len, 0);
    }

    /// Iterative in-place radix-2 transform for power-of-two lengths.
    fn radix2(&self, data: &mut [Complex64]) {
        let n = self.len;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if i < j {
                data.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let step = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let a = data[start + k];
                    let b = data[start + k + half] * self.twiddles[k * step];
                    data[start + k] = a + b;
                    data[start + k + half] = a - b;
                }
            }
            size *= 2;
        }
    }

    /// Transforms the `n` samples `x[0], x[stride], ...` into `out`.
    fn recurse(&self, x: &[Complex64], stride: usize, out: &mut [Complex64], scratch: &mut [Complex64], n: usize, level: usize) {
        if n == 1 {
            out[0] = x[0];
            return;
        }
        let p = self.factors[level];
        if p == n {
            match &self.bluestein {
                Some(b) if b.len == p => {
                    for (k, o) in out.iter_mut().enumerate() {
                        *o = x[k * stride];
                    }
                    b.transform(out);
                }
                _ => self.direct(x, stride, out, n),
            }
            return;
        }
        let m = n / p;
        for r in 0..p {
            self.recurse(
                &x[r * stride..],
                stride * p,
                &mut out[r * m..(r + 1) * m],
                &mut scratch[r * m..(r + 1) * m],
                m,
                level + 1,
            );
        }
        // out[r*m + k] now holds Y_r[k]; combine X[k + q·m] = Σ_r W_n^{r(k+qm)} Y_r[k].
        let step = self.len / n;
        let combined = &mut scratch[..n];
        for k in 0..m {
            for q in 0..p {
                let idx = k + q * m;
                let mut acc = out[k];
                for r in 1..p {
                    let tw = self.twiddles[((r * idx) % n) * step];
                    acc += out[r * m + k] * tw;
                }
                combined[idx] = acc;
            }
        }
        out.copy_from_slice(combined);
    }

    fn direct(&self, x: &[Complex64], stride: usize, out: &mut [Complex64], n: usize) {
        let step = self.len / n;
        for (k, o) in out.iter_mut().enumerate().take(n) {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..n {
                acc += x[j * stride] * self.twiddles[((j * k) % n) * step];
            }
            *o = acc;
        }
    }
}

impl Bluestein {
    fn new(len: usize) -> Self {
        let conv_len = (2 * len - 1).next_power_of_two();
        let chirp: Vec<Complex64> = (0..len)
            .map(|k| {
                // k² mod 2·len keeps the angle argument small and exact.
                let k2 = (k * k) % (2 * len);
                let angle = -PI * (k2 as f64) / (len as f64);
                Complex64::new(angle.cos(), angle.sin())
            })
            .collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); conv_len];
        kernel[0] = chirp[0].conj();
        for k in 1..len {
            kernel[k] = chirp[k].conj();
            kernel[conv_len - k] = chirp[k].conj();
        }
        let conv = plan_for(conv_len);
        conv.forward(&mut kernel);
        Bluestein {
            len,
            chirp,
            kernel,
            conv,
        }
    }

    fn transform(&self, data: &mut [Complex64]) {
        let m = self.kernel.len();
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        for k in 0..self.len {
            buf[k] = data[k] * self.chirp[k];
        }
        self.conv.forward(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel) {
            *b = (*b * k).conj();
        }
        // Inverse via conjugation: ifft(y) = conj(fft(conj(y))) / m.
        self.conv.forward(&mut buf);
        let scale = 1.0 / m as f64;
        for k in 0..self.len {
            data[k] = buf[k].conj() * scale * self.chirp[k];
        }
    }
}

// ------------------------------------------------------------ transforms

/// In-place unnormalized DFT of a complex sequence of any length.
pub fn fft_1d(data: &mut [Complex64]) {
    plan_for(data.len()).forward(data);
}

/// In-place 2-D transform of a row-major `[rows, cols]` complex buffer.
///
/// The forward transform is unnormalized; with `inverse` the conjugate
/// kernel is used and, when `normalize` is set, the result is divided by
/// `rows·cols`.
pub fn fft2_inplace(data: &mut [Complex64], rows: usize, cols: usize, inverse: bool, normalize: bool) {
    assert_eq!(data.len(), rows * cols, "buffer does not match [{rows}, {cols}]");
    if inverse {
        data.iter_mut().for_each(|v| *v = v.conj());
    }
    if cols > 1 {
        let plan = plan_for(cols);
        for row in data.chunks_mut(cols) {
            plan.forward(row);
        }
    }
    if rows > 1 {
        let plan = plan_for(rows);
        let mut column = vec![Complex64::new(0.0, 0.0); rows];
        for c in 0..cols {
            for r in 0..rows {
                column[r] = data[r * cols + c];
            }
            plan.forward(&mut column);
            for r in 0..rows {
                data[r * cols + c] = column[r];
            }
        }
    }
    if inverse {
        let scale = if normalize { 1.0 / (rows * cols) as f64 } else { 1.0 };
        data.iter_mut().for_each(|v| *v = v.conj() * scale);
    }
}

/// Transforms a packed `[2, rows, cols]` buffer and returns a packed result.
pub(crate) fn transform_packed(packed: &[f64], rows: usize, cols: usize, inverse: bool, normalize: bool) -> Vec<f64> {
    let n = rows * cols;
    let mut buf: Vec<Complex64> = (0..n).map(|i| Complex64::new(packed[i], packed[n + i])).collect();
    fft2_inplace(&mut buf, rows, cols, inverse, normalize);
    let mut out = vec![0.0; 2 * n];
    for (i, c) in buf.iter().enumerate() {
        out[i] = c.re;
        out[n + i] = c.im;
    }
    out
}

fn matrix_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, format!("expected a matrix, got shape {shape:?}"))),
    }
}

/// 2-D DFT of a real `[C, T]` matrix:
/// `F(u,v) = Σ_h Σ_w x(h,w)·e^{−j2π(hu/C + wv/T)}`.
pub fn fft2(x: &Tensor) -> Result<ComplexTensor> {
    fft2_complex(&ComplexTensor::from_real(x.clone()))
}

pub fn fft2_complex(z: &ComplexTensor) -> Result<ComplexTensor> {
    let (rows, cols) = matrix_dims(z.shape(), "fft2")?;
    let mut buf = z.to_complex_vec();
    fft2_inplace(&mut buf, rows, cols, false, false);
    Ok(ComplexTensor::from_complex_vec(z.shape(), &buf))
}

/// Inverse 2-D DFT with `1/(C·T)` normalization.
pub fn ifft2(z: &ComplexTensor) -> Result<ComplexTensor> {
    let (rows, cols) = matrix_dims(z.shape(), "ifft2")?;
    let mut buf = z.to_complex_vec();
    fft2_inplace(&mut buf, rows, cols, true, true);
    Ok(ComplexTensor::from_complex_vec(z.shape(), &buf))
}

/// Elementwise `(R² + I²)^{1/2}`.
pub fn amplitude(z: &ComplexTensor) -> Tensor {
    Tensor::from_parts(
        z.shape().to_vec(),
        z.re.data().iter().zip(z.im.data()).map(|(r, i)| r.hypot(*i)).collect(),
    )
}

/// Elementwise four-quadrant phase `atan2(I, R)`, with `atan2(0, 0) = 0`.
pub fn phase(z: &ComplexTensor) -> Tensor {
    Tensor::from_parts(
        z.shape().to_vec(),
        z.re
            .data()
            .iter()
            .zip(z.im.data())
            .map(|(&r, &i)| if r == 0.0 && i == 0.0 { 0.0 } else { i.atan2(r) })
            .collect(),
    )
}

pub fn complex_mul(a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("complex_mul", a.shape(), b.shape()));
    }
    let values: Vec<Complex64> = a
        .to_complex_vec()
        .into_iter()
        .zip(b.to_complex_vec())
        .map(|(x, y)| x * y)
        .collect();
    Ok(ComplexTensor::from_complex_vec(a.shape(), &values))
}

/// Literal double-sum DFT, `O(C²T²)`. Reference implementation for tests.
pub fn dft2_naive(x: &Tensor) -> Result<ComplexTensor> {
    let (rows, cols) = matrix_dims(x.shape(), "dft2_naive")?;
    let xs = x.data();
    let mut re = vec![0.0; rows * cols];
    let mut im = vec![0.0; rows * cols];
    for u in 0..rows {
        for v in 0..cols {
            let (mut sr, mut si) = (0.0, 0.0);
            for h in 0..rows {
                for w in 0..cols {
                    // Reduce the phase to one turn before scaling by 2π.
                    let turns = ((h * u) % rows) as f64 / rows as f64 + ((w * v) % cols) as f64 / cols as f64;
                    let angle = -2.0 * PI * turns;
                    sr += xs[h * cols + w] * angle.cos();
                    si += xs[h * cols + w] * angle.sin();
                }
            }
            re[u * cols + v] = sr;
            im[u * cols + v] = si;
        }
    }
    Ok(ComplexTensor {
        re: Tensor::from_parts(vec![rows, cols], re),
        im: Tensor::from_parts(vec![rows, cols], im),
    })
}
