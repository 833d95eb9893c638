//! Singular values and Procrustes projection of multi-channel 2-D convolution
//! kernels, computed per frequency without ever forming the full operator.
//!
//! Everything here uses the circular-convolution model
//! `y_i[p,q] = sum_{j,r,s} K[r,s,i,j] x_j[(p-r) mod n, (q-s) mod n]`, whose
//! 2-D DFT block-diagonalizes into one `d x c` matrix per frequency `(u,v)`.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, svd_small};
use crate::tensor::{fft2, ifft2, ComplexMatrix, RealTensor, Rng};

/// Materialized operators larger than this (in `n^2 max(d,c)`) are refused.
pub const MATERIALIZE_LIMIT: usize = 512;

/// Convolution kernel stored as `(row, col, out_channel, in_channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel4 {
    k: usize,
    d: usize,
    c: usize,
    weights: RealTensor,
}

impl Kernel4 {
    pub fn new(k: usize, d: usize, c: usize, weights: Vec<f64>) -> Result<Self> {
        if k == 0 || d == 0 || c == 0 {
            return Err(Error::Size(format!(
                "kernel extents must be positive, got k={k} d={d} c={c}"
            )));
        }
        let weights = RealTensor::from_vec(&[k, k, d, c], weights)?;
        Ok(Self { k, d, c, weights })
    }

    pub fn zeros(k: usize, d: usize, c: usize) -> Self {
        Self::new(k, d, c, vec![0.0; k * k * d * c]).expect("positive extents")
    }

    /// Center tap carries the identity from input channel `i` to output channel `i`.
    pub fn delta(k: usize, channels: usize) -> Self {
        let mut kernel = Self::zeros(k, channels, channels);
        let mid = k / 2;
        for i in 0..channels {
            kernel.set(mid, mid, i, i, 1.0);
        }
        kernel
    }

    /// Gaussian weights with fan-in scaled variance `2 / (k^2 c)`.
    pub fn he_normal(k: usize, d: usize, c: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (k * k * c) as f64).sqrt();
        let weights = RealTensor::randn(&[k, k, d, c], std, rng);
        Self { k, d, c, weights }
    }

    pub fn random_uniform(k: usize, d: usize, c: usize, rng: &mut Rng) -> Self {
        let w = (0..k * k * d * c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Self::new(k, d, c, w).expect("positive extents")
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn out_channels(&self) -> usize {
        self.d
    }

    pub fn in_channels(&self) -> usize {
        self.c
    }

    pub fn weights(&self) -> &RealTensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut RealTensor {
        &mut self.weights
    }

    pub fn into_weights(self) -> RealTensor {
        self.weights
    }

    #[inline]
    pub fn index(&self, r: usize, s: usize, out: usize, inp: usize) -> usize {
        ((r * self.k + s) * self.d + out) * self.c + inp
    }

    pub fn get(&self, r: usize, s: usize, out: usize, inp: usize) -> f64 {
        self.weights.data()[self.index(r, s, out, inp)]
    }

    pub fn set(&mut self, r: usize, s: usize, out: usize, inp: usize, value: f64) {
        let idx = self.index(r, s, out, inp);
        self.weights.data_mut()[idx] = value;
    }

    /// Keeps taps `[0, k) x [0, k)`, dropping everything else.
    pub fn truncate(&self, k: usize) -> Result<Kernel4> {
        if k > self.k {
            return Err(Error::Size(format!(
                "cannot truncate a {}x{} kernel to {k}x{k}",
                self.k, self.k
            )));
        }
        let mut out = Kernel4::zeros(k, self.d, self.c);
        for r in 0..k {
            for s in 0..k {
                for i in 0..self.d {
                    for j in 0..self.c {
                        out.set(r, s, i, j, self.get(r, s, i, j));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Zero-pads the support to `n x n` (taps stay at their offsets).
    pub fn pad_to(&self, n: usize) -> Result<Kernel4> {
        if n < self.k {
            return Err(Error::Size(format!(
                "cannot pad a {}x{} kernel to {n}x{n}",
                self.k, self.k
            )));
        }
        let mut out = Kernel4::zeros(n, self.d, self.c);
        for r in 0..self.k {
            for s in 0..self.k {
                for i in 0..self.d {
                    for j in 0..self.c {
                        out.set(r, s, i, j, self.get(r, s, i, j));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_distance(&self, other: &Kernel4) -> Result<f64> {
        if (self.k, self.d, self.c) != (other.k, other.d, other.c) {
            return Err(Error::dim("kernels differ in shape"));
        }
        Ok(self
            .weights
            .data()
            .iter()
            .zip(other.weights.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

/// One `d x c` complex matrix per 2-D frequency `(u, v)`, stored row-major in `(u, v)`.
#[derive(Clone, Debug)]
pub struct FreqSliceSet {
    n: usize,
    slices: Vec<ComplexMatrix>,
}

impl FreqSliceSet {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn slice(&self, u: usize, v: usize) -> &ComplexMatrix {
        &self.slices[u * self.n + v]
    }

    pub fn slices(&self) -> &[ComplexMatrix] {
        &self.slices
    }

    /// Index of the conjugate partner `(-u mod n, -v mod n)`.
    fn mirror(&self, u: usize, v: usize) -> (usize, usize) {
        ((self.n - u) % self.n, (self.n - v) % self.n)
    }

    /// Largest `|P(u,v) - conj(P(-u,-v))|_F` over all frequencies.
    pub fn conjugate_symmetry_error(&self) -> f64 {
        let mut worst = 0.0_f64;
        for u in 0..self.n {
            for v in 0..self.n {
                let (mu, mv) = self.mirror(u, v);
                let diff = self
                    .slice(u, v)
                    .sub(&self.slice(mu, mv).conj())
                    .expect("equal slice shapes")
                    .frobenius_norm();
                worst = worst.max(diff);
            }
        }
        worst
    }

    /// Inverse transform back to an `n x n` kernel (imaginary residue dropped).
    pub fn to_kernel(&self) -> Result<Kernel4> {
        let n = self.n;
        let first = &self.slices[0];
        let (d, c) = (first.rows(), first.cols());
        let mut kernel = Kernel4::zeros(n, d, c);
        let mut plane = ComplexMatrix::zeros(n, n);
        for i in 0..d {
            for j in 0..c {
                for u in 0..n {
                    for v in 0..n {
                        plane[(u, v)] = self.slice(u, v)[(i, j)];
                    }
                }
                let spatial = ifft2(&plane)?;
                for r in 0..n {
                    for s in 0..n {
                        kernel.set(r, s, i, j, spatial[(r, s)].re);
                    }
                }
            }
        }
        Ok(kernel)
    }
}

/// Per-frequency matrices `P(u,v)[i,j] = F_n(K[:,:,i,j])[u,v]`.
pub fn kernel_fft_slices(kernel: &Kernel4, n: usize) -> Result<FreqSliceSet> {
    if n < kernel.k {
        return Err(Error::Size(format!(
            "transform size {n} is smaller than kernel size {}",
            kernel.k
        )));
    }
    let (d, c) = (kernel.d, kernel.c);
    let mut slices = vec![ComplexMatrix::zeros(d, c); n * n];
    let mut plane = ComplexMatrix::zeros(n, n);
    for i in 0..d {
        for j in 0..c {
            plane.data_mut().fill(Complex64::new(0.0, 0.0));
            for r in 0..kernel.k {
                for s in 0..kernel.k {
                    plane[(r, s)] = Complex64::new(kernel.get(r, s, i, j), 0.0);
                }
            }
            let freq = fft2(&plane)?;
            for u in 0..n {
                for v in 0..n {
                    slices[u * n + v][(i, j)] = freq[(u, v)];
                }
            }
        }
    }
    Ok(FreqSliceSet { n, slices })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpectrumReport {
    pub n: usize,
    /// Union over all frequencies, sorted descending; `n^2 min(d,c)` entries.
    pub singular_values: Vec<f64>,
    pub sigma_max: f64,
    pub sigma_min_nonzero: Option<f64>,
    pub condition_number: Option<f64>,
}

impl SpectrumReport {
    fn from_values(n: usize, mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| b.total_cmp(a));
        let sigma_max = values.first().copied().unwrap_or(0.0);
        let cutoff = nonzero_cutoff(sigma_max);
        let sigma_min_nonzero = values.iter().rev().copied().find(|&s| s > cutoff);
        let condition_number = sigma_min_nonzero.map(|s| sigma_max / s);
        Self {
            n,
            singular_values: values,
            sigma_max,
            sigma_min_nonzero,
            condition_number,
        }
    }

    /// Singular values treated as nonzero (above a relative `1e-8` cutoff).
    pub fn nonzero(&self) -> impl Iterator<Item = f64> + '_ {
        let cutoff = nonzero_cutoff(self.sigma_max);
        self.singular_values.iter().copied().filter(move |&s| s > cutoff)
    }

    /// Largest `|sigma - target|` over the nonzero singular values.
    pub fn max_deviation_from(&self, target: f64) -> f64 {
        self.nonzero().map(|s| (s - target).abs()).fold(0.0, f64::max)
    }
}

fn nonzero_cutoff(sigma_max: f64) -> f64 {
    (sigma_max * 1e-8).max(1e-300)
}

/// Full singular-value multiset of the circular convolution operator.
pub fn conv_singular_values(kernel: &Kernel4, n: usize) -> Result<SpectrumReport> {
    let slices = kernel_fft_slices(kernel, n)?;
    slice_singular_values(&slices)
}

pub fn slice_singular_values(slices: &FreqSliceSet) -> Result<SpectrumReport> {
    let mut values = Vec::new();
    for p in slices.slices() {
        values.extend(svd_small(p)?.singular_values);
    }
    Ok(SpectrumReport::from_values(slices.n, values))
}

/// Largest singular value of the circular operator at size `n`.
pub fn conv_spectral_norm(kernel: &Kernel4, n: usize) -> Result<f64> {
    let slices = kernel_fft_slices(kernel, n)?;
    let mut best = 0.0_f64;
    for p in slices.slices() {
        best = best.max(linalg::spectral_norm(p)?);
    }
    Ok(best)
}

/// Value that makes a `c -> d` convolution norm-preserving in expectation:
/// `sqrt(d / min(d,c))`, times `sqrt(2)` when a ReLU follows.
pub fn target_sigma(d: usize, c: usize, relu_corrected: bool) -> f64 {
    let base = d as f64 / d.min(c) as f64;
    if relu_corrected {
        (2.0 * base).sqrt()
    } else {
        base.sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct KernelProjection {
    /// Inverse transform of the projected slices, `n x n` support.
    pub full: Kernel4,
    /// `full` cut back to the original `k x k` support.
    pub truncated: Kernel4,
    pub projected_slices: FreqSliceSet,
    pub max_iterations: usize,
    pub max_residual: f64,
}

/// Projects every frequency slice to constant nonzero singular values and
/// returns the kernel at its original spatial size.
pub fn project_kernel(kernel: &Kernel4, n: usize, sigma_target: f64) -> Result<Kernel4> {
    project_kernel_detailed(kernel, n, sigma_target).map(|p| p.truncated)
}

pub fn project_kernel_detailed(
    kernel: &Kernel4,
    n: usize,
    sigma_target: f64,
) -> Result<KernelProjection> {
    if !(sigma_target > 0.0) {
        return Err(Error::Config(format!(
            "sigma_target must be positive, got {sigma_target}"
        )));
    }
    let slices = kernel_fft_slices(kernel, n)?;
    let mut projected: Vec<Option<ComplexMatrix>> = vec![None; n * n];
    let mut max_iterations = 0;
    let mut max_residual = 0.0_f64;
    for u in 0..n {
        for v in 0..n {
            if projected[u * n + v].is_some() {
                continue;
            }
            let outcome = linalg::procrustes_detailed(
                slices.slice(u, v),
                sigma_target,
                linalg::NS_DEFAULT_MAX_ITERS,
                linalg::NS_DEFAULT_TOL,
            )
            .map_err(|e| Error::SliceConvergence {
                u,
                v,
                source: Box::new(e),
            })?;
            max_iterations = max_iterations.max(outcome.iterations);
            max_residual = max_residual.max(outcome.residual);
            // projection commutes with conjugation, so the mirrored slice is free
            let (mu, mv) = slices.mirror(u, v);
            if (mu, mv) != (u, v) {
                projected[mu * n + mv] = Some(outcome.projected.conj());
            }
            projected[u * n + v] = Some(outcome.projected);
        }
    }
    let projected_slices = FreqSliceSet {
        n,
        slices: projected.into_iter().map(|p| p.expect("every slice visited")).collect(),
    };
    let full = projected_slices.to_kernel()?;
    let truncated = full.truncate(kernel.k)?;
    Ok(KernelProjection {
        full,
        truncated,
        projected_slices,
        max_iterations,
        max_residual,
    })
}

/// Explicit `n^2 d x n^2 c` circular-convolution matrix; index `(ch, p, q)` flattens
/// as `ch n^2 + p n + q`.
pub fn materialize_conv_operator(kernel: &Kernel4, n: usize) -> Result<ComplexMatrix> {
    if n < kernel.k {
        return Err(Error::Size(format!(
            "operator size {n} is smaller than kernel size {}",
            kernel.k
        )));
    }
    if n * n * kernel.d.max(kernel.c) > MATERIALIZE_LIMIT {
        return Err(Error::Size(format!(
            "materializing n^2 max(d,c) = {} exceeds {MATERIALIZE_LIMIT}",
            n * n * kernel.d.max(kernel.c)
        )));
    }
    let nn = n * n;
    let mut m = ComplexMatrix::zeros(nn * kernel.d, nn * kernel.c);
    for i in 0..kernel.d {
        for j in 0..kernel.c {
            for r in 0..kernel.k {
                for s in 0..kernel.k {
                    let w = kernel.get(r, s, i, j);
                    if w == 0.0 {
                        continue;
                    }
                    for p in 0..n {
                        for q in 0..n {
                            let src_p = (p + n - r % n) % n;
                            let src_q = (q + n - s % n) % n;
                            m[(i * nn + p * n + q, j * nn + src_p * n + src_q)] +=
                                Complex64::new(w, 0.0);
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Diagnostic for the `d / min(d,c)` approximation: the exact
/// `sqrt(E|dy|^2 / E|proj_range(dy)|^2)` for sample output gradients `dy`
/// shaped `(d, n, n)`, where the projection is onto the range of the
/// circular operator.
pub fn exact_target_sigma(kernel: &Kernel4, n: usize, grads: &[RealTensor]) -> Result<f64> {
    let slices = kernel_fft_slices(kernel, n)?;
    let d = kernel.d;
    let bases: Vec<ComplexMatrix> = slices
        .slices()
        .iter()
        .map(|p| {
            let svd = svd_small(p)?;
            let cutoff = nonzero_cutoff(svd.sigma_max());
            let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
            let mut u = ComplexMatrix::zeros(d, rank);
            for row in 0..d {
                for col in 0..rank {
                    u[(row, col)] = svd.u[(row, col)];
                }
            }
            Ok(u)
        })
        .collect::<Result<_>>()?;

    let mut total = 0.0;
    let mut in_range = 0.0;
    let mut plane = ComplexMatrix::zeros(n, n);
    for g in grads {
        if g.shape() != [d, n, n] {
            return Err(Error::dim(format!(
                "gradient sample shaped {:?}, expected {:?}",
                g.shape(),
                [d, n, n]
            )));
        }
        let mut freq = Vec::with_capacity(d);
        for ch in 0..d {
            for p in 0..n {
                for q in 0..n {
                    plane[(p, q)] = Complex64::new(g.data()[(ch * n + p) * n + q], 0.0);
                }
            }
            freq.push(fft2(&plane)?);
        }
        for u in 0..n {
            for v in 0..n {
                let y: Vec<Complex64> = freq.iter().map(|f| f[(u, v)]).collect();
                total += y.iter().map(|z| z.norm_sqr()).sum::<f64>();
                let basis = &bases[u * n + v];
                for col in 0..basis.cols() {
                    let coef: Complex64 =
                        (0..d).map(|row| basis[(row, col)].conj() * y[row]).sum();
                    in_range += coef.norm_sqr();
                }
            }
        }
    }
    if in_range == 0.0 {
        return Err(Error::Singular(
            "gradient samples lie entirely in the operator's null space".into(),
        ));
    }
    Ok((total / in_range).sqrt())
}

/// On-disk kernel document: `{k, d, c, weights}` with weights in `(k,k,d,c)` row-major order.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelFile {
    pub k: usize,
    pub d: usize,
    pub c: usize,
    pub weights: Vec<f64>,
}

impl From<&Kernel4> for KernelFile {
    fn from(kernel: &Kernel4) -> Self {
        Self {
            k: kernel.k,
            d: kernel.d,
            c: kernel.c,
            weights: kernel.weights.data().to_vec(),
        }
    }
}

impl TryFrom<KernelFile> for Kernel4 {
    type Error = Error;

    fn try_from(file: KernelFile) -> Result<Kernel4> {
        Kernel4::new(file.k, file.d, file.c, file.weights)
    }
}

/// Parses a kernel document, reporting failures with a byte offset.
pub fn parse_kernel_json(text: &str) -> Result<Kernel4> {
    let file: KernelFile = serde_json::from_str(text).map_err(|e| Error::Input {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    Kernel4::try_from(file).map_err(|e| Error::Input {
        offset: 0,
        message: e.to_string(),
    })
}

pub fn read_kernel(path: &Path) -> Result<Kernel4> {
    parse_kernel_json(&std::fs::read_to_string(path)?)
}

pub fn write_kernel(path: &Path, kernel: &Kernel4) -> Result<()> {
    let text = serde_json::to_string_pretty(&KernelFile::from(kernel))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// serde_json reports 1-based line and column; convert to a 0-based byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}
