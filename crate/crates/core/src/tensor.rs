//! Dense real tensors, complex matrices, the 2-D DFT and a seeded generator.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major real tensor of arbitrary rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} entries, got {}",
                shape,
                len,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("tensor entry {i}")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| std * rng.normal()).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &RealTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "axpy between {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

/// Euclidean norm over every entry of the tensor.
pub fn l2_norm(t: &RealTensor) -> f64 {
    // scaled accumulation so huge or tiny gradients do not overflow
    let max = t.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return 0.0;
    }
    let sum: f64 = t.data.iter().map(|v| (v / max) * (v / max)).sum();
    max * sum.sqrt()
}

/// Row-major dense complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_real(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::from_vec(
            rows,
            cols,
            data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        )
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = Complex64::new(d, 0.0);
        }
        m
    }

    /// Entries drawn uniformly from [-1, 1] (real part only unless `complex`).
    pub fn random(rows: usize, cols: usize, complex: bool, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let re = rng.uniform(-1.0, 1.0);
                let im = if complex { rng.uniform(-1.0, 1.0) } else { 0.0 };
                Complex64::new(re, im)
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn matmul(&self, other: &ComplexMatrix) -> Result<ComplexMatrix> {
        matmul(self, other)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * alpha).collect(),
        }
    }

    pub fn sub(&self, other: &ComplexMatrix) -> Result<ComplexMatrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &ComplexMatrix) -> Result<ComplexMatrix> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(
        &self,
        other: &ComplexMatrix,
        f: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> Result<ComplexMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn column(&self, j: usize) -> Vec<Complex64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn matmul(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    if a.cols != b.rows {
        return Err(Error::dim(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = ComplexMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == Complex64::new(0.0, 0.0) {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

fn fft2_with(plane: &ComplexMatrix, inverse: bool) -> Result<ComplexMatrix> {
    if !plane.is_square() {
        return Err(Error::dim(format!(
            "fft2 needs a square plane, got {}x{}",
            plane.rows, plane.cols
        )));
    }
    let n = plane.rows;
    if n == 0 {
        return Err(Error::Size("fft2 on an empty plane".into()));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let mut out = plane.clone();
    // rows are contiguous
    for row in out.data.chunks_mut(n) {
        fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            column[i] = out.data[i * n + j];
        }
        fft.process(&mut column);
        for i in 0..n {
            out.data[i * n + j] = column[i];
        }
    }
    if inverse {
        let scale = 1.0 / (n * n) as f64;
        out.data.iter_mut().for_each(|z| *z *= scale);
    }
    Ok(out)
}

/// Forward 2-D DFT: `F[u,v] = sum_{p,q} x[p,q] exp(-2 pi i (up + vq) / n)`.
pub fn fft2(plane: &ComplexMatrix) -> Result<ComplexMatrix> {
    fft2_with(plane, false)
}

/// Inverse of [`fft2`], including the `1/n^2` normalization.
pub fn ifft2(plane: &ComplexMatrix) -> Result<ComplexMatrix> {
    fft2_with(plane, true)
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded pseudorandom stream. Equal seeds give bit-identical streams.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Derive an independent child stream, e.g. one per run or per grid cell.
    /// Forks nest: `fork(a).fork(b)` differs from `fork(b)`.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut child = self.inner.clone();
        child.set_stream(splitmix64(self.inner.get_stream() ^ splitmix64(stream.wrapping_add(1))));
        child.set_word_pos(0);
        Rng {
            seed: self.seed,
            inner: child,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.gen::<bool>()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
