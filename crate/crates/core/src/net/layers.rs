//! Layers with explicit forward and reverse passes. Activations are
//! `(batch, channels, height, width)` tensors; pooled features and logits are
//! `(batch, features)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::{self, Kernel4};
use crate::tensor::{RealTensor, Rng};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Marks a convolution as conv*: its kernel is re-projected so every nonzero
/// singular value at feature size `n` equals `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub n: usize,
    pub sigma: f64,
}

/// 2-D cross-correlation with zero padding `(k-1)/2` before each axis;
/// output extent is `ceil(input / stride)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernel: Kernel4,
    pub stride: usize,
    pub projection: Option<Projection>,
}

impl Conv2d {
    pub fn new(kernel: Kernel4, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            projection: None,
        }
    }

    pub fn he(k: usize, out_ch: usize, in_ch: usize, stride: usize, rng: &mut Rng) -> Self {
        Self::new(Kernel4::he_normal(k, out_ch, in_ch, rng), stride)
    }

    pub fn out_extent(&self, input: usize) -> usize {
        input.div_ceil(self.stride)
    }

    fn pad(&self) -> isize {
        ((self.kernel.k() - 1) / 2) as isize
    }

    /// Re-projects the kernel if this layer is a conv*. Returns the largest
    /// Newton–Schulz iteration count used.
    pub fn project(&mut self) -> Result<Option<usize>> {
        let Some(p) = self.projection else {
            return Ok(None);
        };
        let out = spectrum::project_kernel_detailed(&self.kernel, p.n, p.sigma)?;
        self.kernel = out.truncated;
        Ok(Some(out.max_iterations))
    }

    /// Weights re-laid out as `(out, in, r, s)` for the spatial loops.
    fn oihw(&self) -> Vec<f64> {
        let (k, d, c) = (
            self.kernel.k(),
            self.kernel.out_channels(),
            self.kernel.in_channels(),
        );
        let w = self.kernel.weights().data();
        let mut out = vec![0.0; w.len()];
        for r in 0..k {
            for s in 0..k {
                for o in 0..d {
                    for i in 0..c {
                        out[((o * c + i) * k + r) * k + s] = w[((r * k + s) * d + o) * c + i];
                    }
                }
            }
        }
        out
    }

    /// Output positions `o` for which `o * stride + tap - pad` lands in `[0, extent)`.
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let stride = self.stride as isize;
        let shift = tap as isize - self.pad();
        // o * stride + shift >= 0
        let lo = if shift >= 0 {
            0
        } else {
            ((-shift) + stride - 1) / stride
        };
        // o * stride + shift <= extent - 1
        let top = extent as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { top / stride + 1 };
        let lo = (lo as usize).min(out_extent);
        let hi = (hi as usize).min(out_extent);
        (lo, hi.max(lo))
    }

    pub fn forward(&self, x: &RealTensor) -> Result<RealTensor> {
        let [n, c, h, w] = dims4(x)?;
        if c != self.kernel.in_channels() {
            return Err(Error::dim(format!(
                "conv expects {} input channels, got {c}",
                self.kernel.in_channels()
            )));
        }
        let (k, d) = (self.kernel.k(), self.kernel.out_channels());
        let (ho, wo) = (self.out_extent(h), self.out_extent(w));
        let weights = self.oihw();
        let mut out = vec![0.0; n * d * ho * wo];
        let xs = x.data();
        let stride = self.stride;
        let pad = self.pad();
        let rows: Vec<(usize, usize)> = (0..k).map(|r| self.valid_range(r, h, ho)).collect();
        let cols: Vec<(usize, usize)> = (0..k).map(|s| self.valid_range(s, w, wo)).collect();
        for b in 0..n {
            for o in 0..d {
                let plane = &mut out[(b * d + o) * ho * wo..(b * d + o + 1) * ho * wo];
                for i in 0..c {
                    let input = &xs[(b * c + i) * h * w..(b * c + i + 1) * h * w];
                    for r in 0..k {
                        let (ylo, yhi) = rows[r];
                        for s in 0..k {
                            let wt = weights[((o * c + i) * k + r) * k + s];
                            if wt == 0.0 {
                                continue;
                            }
                            let (xlo, xhi) = cols[s];
                            for oy in ylo..yhi {
                                let iy = (oy * stride) as isize + r as isize - pad;
                                let in_row = &input[iy as usize * w..(iy as usize + 1) * w];
                                let out_row = &mut plane[oy * wo..(oy + 1) * wo];
                                for ox in xlo..xhi {
                                    let ix = (ox * stride) as isize + s as isize - pad;
                                    out_row[ox] += wt * in_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        RealTensor::from_vec(&[n, d, ho, wo], out)
    }

    /// Returns `(grad_input, grad_kernel)`; the kernel gradient uses the
    /// `(k, k, out, in)` layout of [`Kernel4`].
    pub fn backward(&self, x: &RealTensor, grad_out: &RealTensor) -> Result<(RealTensor, RealTensor)> {
        let [n, c, h, w] = dims4(x)?;
        let (k, d) = (self.kernel.k(), self.kernel.out_channels());
        let (ho, wo) = (self.out_extent(h), self.out_extent(w));
        if grad_out.shape() != [n, d, ho, wo] {
            return Err(Error::dim(format!(
                "conv gradient shaped {:?}, expected {:?}",
                grad_out.shape(),
                [n, d, ho, wo]
            )));
        }
        let weights = self.oihw();
        let mut gw = vec![0.0; weights.len()];
        let mut gx = vec![0.0; x.len()];
        let xs = x.data();
        let gs = grad_out.data();
        let stride = self.stride;
        let pad = self.pad();
        let rows: Vec<(usize, usize)> = (0..k).map(|r| self.valid_range(r, h, ho)).collect();
        let cols: Vec<(usize, usize)> = (0..k).map(|s| self.valid_range(s, w, wo)).collect();
        for b in 0..n {
            for o in 0..d {
                let gplane = &gs[(b * d + o) * ho * wo..(b * d + o + 1) * ho * wo];
                for i in 0..c {
                    let base = (b * c + i) * h * w;
                    for r in 0..k {
                        let (ylo, yhi) = rows[r];
                        for s in 0..k {
                            let widx = ((o * c + i) * k + r) * k + s;
                            let wt = weights[widx];
                            let (xlo, xhi) = cols[s];
                            let mut acc = 0.0;
                            for oy in ylo..yhi {
                                let iy = ((oy * stride) as isize + r as isize - pad) as usize;
                                let g_row = &gplane[oy * wo..(oy + 1) * wo];
                                let row_base = base + iy * w;
                                for ox in xlo..xhi {
                                    let ix = ((ox * stride) as isize + s as isize - pad) as usize;
                                    let g = g_row[ox];
                                    acc += g * xs[row_base + ix];
                                    gx[row_base + ix] += wt * g;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        // back to (r, s, out, in)
        let mut grad_kernel = vec![0.0; gw.len()];
        for r in 0..k {
            for s in 0..k {
                for o in 0..d {
                    for i in 0..c {
                        grad_kernel[((r * k + s) * d + o) * c + i] = gw[((o * c + i) * k + r) * k + s];
                    }
                }
            }
        }
        Ok((
            RealTensor::from_vec(&[n, c, h, w], gx)?,
            RealTensor::from_vec(&[k, k, d, c], grad_kernel)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: RealTensor,
    pub beta: RealTensor,
    pub running_mean: RealTensor,
    pub running_var: RealTensor,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        let mut gamma = RealTensor::zeros(&[channels]);
        gamma.fill(1.0);
        let mut running_var = RealTensor::zeros(&[channels]);
        running_var.fill(1.0);
        Self {
            gamma,
            beta: RealTensor::zeros(&[channels]),
            running_mean: RealTensor::zeros(&[channels]),
            running_var,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &RealTensor, mode: Mode) -> Result<(RealTensor, BatchNormCache)> {
        let [n, c, h, w] = dims4(x)?;
        if c != self.channels() {
            return Err(Error::dim(format!(
                "batchnorm over {} channels got {c}",
                self.channels()
            )));
        }
        let plane = h * w;
        let count = n * plane;
        let xs = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match mode {
            Mode::Train => {
                for ch in 0..c {
                    let mut sum = 0.0;
                    for b in 0..n {
                        sum += xs[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .sum::<f64>();
                    }
                    let m = sum / count as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        sq += xs[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count as f64;
                }
                let unbias = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * var[ch] * unbias;
                }
            }
            Mode::Eval => {
                mean.copy_from_slice(self.running_mean.data());
                var.copy_from_slice(self.running_var.data());
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        let (g, bt) = (self.gamma.data(), self.beta.data());
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for idx in range {
                    let xh = (xs[idx] - mean[ch]) * inv_std[ch];
                    xhat[idx] = xh;
                    out[idx] = g[ch] * xh + bt[ch];
                }
            }
        }
        Ok((
            RealTensor::from_vec(x.shape(), out)?,
            BatchNormCache {
                xhat,
                inv_std,
                mode,
            },
        ))
    }

    /// Returns `(grad_input, grad_gamma, grad_beta)`.
    pub fn backward(
        &self,
        cache: &BatchNormCache,
        grad_out: &RealTensor,
    ) -> Result<(RealTensor, RealTensor, RealTensor)> {
        let [n, c, h, w] = dims4(grad_out)?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let gs = grad_out.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                for idx in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    dgamma[ch] += gs[idx] * cache.xhat[idx];
                    dbeta[ch] += gs[idx];
                }
            }
        }
        let gamma = self.gamma.data();
        let mut gx = vec![0.0; gs.len()];
        for b in 0..n {
            for ch in 0..c {
                let scale = gamma[ch] * cache.inv_std[ch];
                for idx in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    gx[idx] = match cache.mode {
                        Mode::Train => {
                            scale
                                * (gs[idx]
                                    - dbeta[ch] / count
                                    - cache.xhat[idx] * dgamma[ch] / count)
                        }
                        Mode::Eval => scale * gs[idx],
                    };
                }
            }
        }
        Ok((
            RealTensor::from_vec(grad_out.shape(), gx)?,
            RealTensor::from_vec(&[c], dgamma)?,
            RealTensor::from_vec(&[c], dbeta)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: RealTensor,
    pub bias: RealTensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            weight: RealTensor::randn(&[output, input], (1.0 / input as f64).sqrt(), rng),
            bias: RealTensor::zeros(&[output]),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.shape()[0], self.weight.shape()[1])
    }

    pub fn forward(&self, x: &RealTensor) -> Result<RealTensor> {
        let (out_f, in_f) = self.dims();
        if x.shape().len() != 2 || x.shape()[1] != in_f {
            return Err(Error::dim(format!(
                "linear expects (batch, {in_f}), got {:?}",
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let (w, b, xs) = (self.weight.data(), self.bias.data(), x.data());
        let mut out = vec![0.0; n * out_f];
        for row in 0..n {
            let xr = &xs[row * in_f..(row + 1) * in_f];
            for o in 0..out_f {
                let wr = &w[o * in_f..(o + 1) * in_f];
                out[row * out_f + o] = b[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        RealTensor::from_vec(&[n, out_f], out)
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    pub fn backward(
        &self,
        x: &RealTensor,
        grad_out: &RealTensor,
    ) -> Result<(RealTensor, RealTensor, RealTensor)> {
        let (out_f, in_f) = self.dims();
        let n = x.shape()[0];
        if grad_out.shape() != [n, out_f] {
            return Err(Error::dim(format!(
                "linear gradient shaped {:?}, expected {:?}",
                grad_out.shape(),
                [n, out_f]
            )));
        }
        let (w, xs, gs) = (self.weight.data(), x.data(), grad_out.data());
        let mut gx = vec![0.0; n * in_f];
        let mut gw = vec![0.0; out_f * in_f];
        let mut gb = vec![0.0; out_f];
        for row in 0..n {
            let xr = &xs[row * in_f..(row + 1) * in_f];
            for o in 0..out_f {
                let g = gs[row * out_f + o];
                gb[o] += g;
                for i in 0..in_f {
                    gw[o * in_f + i] += g * xr[i];
                    gx[row * in_f + i] += g * w[o * in_f + i];
                }
            }
        }
        Ok((
            RealTensor::from_vec(&[n, in_f], gx)?,
            RealTensor::from_vec(&[out_f, in_f], gw)?,
            RealTensor::from_vec(&[out_f], gb)?,
        ))
    }
}

pub fn relu(x: &RealTensor) -> RealTensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    RealTensor::from_vec(x.shape(), data).expect("same shape")
}

/// Subgradient 0 at the kink.
pub fn relu_backward(x: &RealTensor, grad_out: &RealTensor) -> RealTensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    RealTensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn global_avg_pool(x: &RealTensor) -> Result<RealTensor> {
    let [n, c, h, w] = dims4(x)?;
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    RealTensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &RealTensor) -> Result<RealTensor> {
    let plane = input_shape[2] * input_shape[3];
    let mut data = Vec::with_capacity(plane * grad_out.len());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat(g / plane as f64).take(plane));
    }
    RealTensor::from_vec(input_shape, data)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &RealTensor, labels: &[usize]) -> Result<(f64, RealTensor, usize)> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::dim(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    let mut errors = 0;
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::dim(format!("label {label} out of range for {k} classes")));
        }
        let z = &logits.data()[row * k..(row + 1) * k];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += log_sum - z[label];
        let argmax = z
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > z[best] { i } else { best });
        if argmax != label {
            errors += 1;
        }
        for j in 0..k {
            let p = (z[j] - log_sum).exp();
            grad[row * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, RealTensor::from_vec(&[n, k], grad)?, errors))
}

pub(crate) fn dims4(x: &RealTensor) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::dim(format!(
            "expected a (batch, channels, height, width) tensor, got {:?}",
            x.shape()
        ))),
    }
}
