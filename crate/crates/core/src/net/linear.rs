//! Linear residual network `x_{l+1} = (I + W_l) x_l` with squared loss
//! `E = 1/(2B) sum_b ||x_{L+1,b} - y_b||^2`.
//!
//! Batches are `(B, N)` row matrices. Besides the per-batch forward/backward
//! there is a sufficient-statistics path that evaluates the same loss,
//! gradients and boundary gradient norms from `N x N` second moments, which
//! makes long full-batch runs cheap.

use crate::error::{Error, Result};
use crate::tensor::RealTensor;

/// `(m x k) * (k x n)`, row-major.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += aip * v;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn identity(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    out
}

fn trace(a: &[f64], n: usize) -> f64 {
    (0..n).map(|i| a[i * n + i]).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearResNet {
    n: usize,
    /// One `N x N` matrix per block.
    pub weights: Vec<RealTensor>,
}

#[derive(Clone, Debug)]
pub struct LinearTape {
    /// `x_1 .. x_{L+1}`, each `(B, N)`.
    pub boundaries: Vec<RealTensor>,
    pub targets: RealTensor,
    pub loss: f64,
}

/// Second moments of a fixed batch: `Sxx = X^T X / B`, `Syx = Y^T X / B`,
/// `Syy = Y^T Y / B` (all `N x N`).
#[derive(Clone, Debug)]
pub struct GramStats {
    pub n: usize,
    pub batch: usize,
    sxx: Vec<f64>,
    syx: Vec<f64>,
    syy: Vec<f64>,
}

impl GramStats {
    pub fn from_batch(x: &RealTensor, y: &RealTensor) -> Result<Self> {
        let (b, n) = check_batch(x, y)?;
        let xt = transpose(x.data(), b, n);
        let yt = transpose(y.data(), b, n);
        let scale = |v: Vec<f64>| v.into_iter().map(|e| e / b as f64).collect::<Vec<_>>();
        Ok(Self {
            n,
            batch: b,
            sxx: scale(mm(&xt, x.data(), n, b, n)),
            syx: scale(mm(&yt, x.data(), n, b, n)),
            syy: scale(mm(&yt, y.data(), n, b, n)),
        })
    }
}

fn check_batch(x: &RealTensor, y: &RealTensor) -> Result<(usize, usize)> {
    match (x.shape(), y.shape()) {
        (&[b, n], &[b2, n2]) if b == b2 && n == n2 && b > 0 => Ok((b, n)),
        (a, c) => Err(Error::dim(format!(
            "inputs {a:?} and targets {c:?} must both be (batch, N)"
        ))),
    }
}

impl LinearResNet {
    /// All `W_l = 0`, so every block Jacobian starts at `I`.
    pub fn zeros(n: usize, blocks: usize) -> Self {
        Self {
            n,
            weights: (0..blocks).map(|_| RealTensor::zeros(&[n, n])).collect(),
        }
    }

    pub fn from_weights(weights: Vec<RealTensor>) -> Result<Self> {
        let n = weights.first().map(|w| w.shape()[0]).unwrap_or(0);
        if weights.iter().any(|w| w.shape() != [n, n]) {
            return Err(Error::dim("linear residual weights must all be N x N"));
        }
        Ok(Self { n, weights })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> usize {
        self.weights.len()
    }

    /// `I + W_l`, row-major.
    pub fn block_jacobian(&self, l: usize) -> Vec<f64> {
        let mut j = self.weights[l].data().to_vec();
        for i in 0..self.n {
            j[i * self.n + i] += 1.0;
        }
        j
    }

    /// End-to-end map `M = (I + W_L) ... (I + W_1)`.
    pub fn product(&self) -> Vec<f64> {
        let n = self.n;
        (0..self.blocks()).fold(identity(n), |acc, l| mm(&self.block_jacobian(l), &acc, n, n, n))
    }

    pub fn forward(&self, x: &RealTensor, y: &RealTensor) -> Result<LinearTape> {
        let (b, n) = check_batch(x, y)?;
        if n != self.n {
            return Err(Error::dim(format!("network is {}-dimensional, batch is {n}", self.n)));
        }
        let mut boundaries = vec![x.clone()];
        for l in 0..self.blocks() {
            // rows: x_{l+1}^T = x_l^T (I + W_l)^T
            let jt = transpose(&self.block_jacobian(l), n, n);
            let next = mm(boundaries[l].data(), &jt, b, n, n);
            boundaries.push(RealTensor::from_vec(&[b, n], next)?);
        }
        let out = boundaries.last().expect("nonempty");
        let loss = out
            .data()
            .iter()
            .zip(y.data())
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f64>()
            / (2.0 * b as f64);
        Ok(LinearTape {
            boundaries,
            targets: y.clone(),
            loss,
        })
    }

    /// Returns `(dE/dW_l for each block, dE/dx_l for l = 1 .. L+1)`.
    pub fn backward(&self, tape: &LinearTape) -> Result<(Vec<RealTensor>, Vec<RealTensor>)> {
        if tape.boundaries.len() != self.blocks() + 1 {
            return Err(Error::State("tape does not match the network".into()));
        }
        let n = self.n;
        let b = tape.targets.shape()[0];
        let out = tape.boundaries.last().expect("nonempty");
        let residual: Vec<f64> = out
            .data()
            .iter()
            .zip(tape.targets.data())
            .map(|(o, t)| (o - t) / b as f64)
            .collect();
        let mut g = RealTensor::from_vec(&[b, n], residual)?;
        let mut boundary = vec![g.clone()];
        let mut weight_grads = vec![RealTensor::zeros(&[n, n]); self.blocks()];
        for l in (0..self.blocks()).rev() {
            let gt = transpose(g.data(), b, n);
            weight_grads[l] = RealTensor::from_vec(&[n, n], mm(&gt, tape.boundaries[l].data(), n, b, n))?;
            g = RealTensor::from_vec(&[b, n], mm(g.data(), &self.block_jacobian(l), b, n, n))?;
            boundary.push(g.clone());
        }
        boundary.reverse();
        Ok((weight_grads, boundary))
    }

    /// Partial products: `prefix[l] = (I+W_{l-1})...(I+W_1)` and
    /// `suffix[l] = (I+W_L)...(I+W_{l+1})`, zero-based `l`.
    fn partial_products(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (n, blocks) = (self.n, self.blocks());
        let jac: Vec<Vec<f64>> = (0..blocks).map(|l| self.block_jacobian(l)).collect();
        let mut prefix = vec![identity(n)];
        for j in jac.iter().take(blocks.saturating_sub(1)) {
            let next = mm(j, prefix.last().expect("nonempty"), n, n, n);
            prefix.push(next);
        }
        let mut suffix = vec![identity(n); blocks];
        for l in (0..blocks.saturating_sub(1)).rev() {
            suffix[l] = mm(&suffix[l + 1], &jac[l + 1], n, n, n);
        }
        (prefix, suffix)
    }

    /// Loss and weight gradients from second moments; identical to the batch path.
    pub fn gram_loss_and_grads(&self, stats: &GramStats) -> Result<(f64, Vec<RealTensor>)> {
        let n = self.n;
        if stats.n != n {
            return Err(Error::dim("statistics dimension does not match the network"));
        }
        let m = self.product();
        let m_sxx = mm(&m, &stats.sxx, n, n, n);
        let quad = trace(&mm(&m_sxx, &transpose(&m, n, n), n, n, n), n);
        let cross: f64 = m.iter().zip(&stats.syx).map(|(a, b)| a * b).sum();
        let loss = 0.5 * (trace(&stats.syy, n) - 2.0 * cross + quad);
        let gm: Vec<f64> = m_sxx.iter().zip(&stats.syx).map(|(a, b)| a - b).collect();
        let (prefix, suffix) = self.partial_products();
        let grads = (0..self.blocks())
            .map(|l| {
                let left = mm(&transpose(&suffix[l], n, n), &gm, n, n, n);
                RealTensor::from_vec(&[n, n], mm(&left, &transpose(&prefix[l], n, n), n, n, n))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((loss, grads))
    }

    /// `||dE/dx_l||_F` for `l = 1 .. L+1` from second moments.
    pub fn gram_boundary_norms(&self, stats: &GramStats) -> Vec<f64> {
        let n = self.n;
        let m = self.product();
        let mt = transpose(&m, n, n);
        let msm = mm(&mm(&m, &stats.sxx, n, n, n), &mt, n, n, n);
        let msxy = mm(&m, &transpose(&stats.syx, n, n), n, n, n);
        let b2 = stats.batch as f64;
        // C = R^T R / B^2 with R the (B, N) residual
        let c: Vec<f64> = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                (msm[idx] - msxy[idx] - msxy[j * n + i] + stats.syy[idx]) / b2
            })
            .collect();
        let mut norms = vec![0.0; self.blocks() + 1];
        norms[self.blocks()] = trace(&c, n).max(0.0).sqrt();
        // A_l = (I+W_L)...(I+W_l)
        let mut a = identity(n);
        for l in (0..self.blocks()).rev() {
            a = mm(&a, &self.block_jacobian(l), n, n, n);
            let ca = mm(&c, &a, n, n, n);
            let val = trace(&mm(&transpose(&a, n, n), &ca, n, n, n), n);
            norms[l] = val.max(0.0).sqrt();
        }
        norms
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn half_identity_block_scales_by_one_and_a_half() {
        let mut w = RealTensor::zeros(&[2, 2]);
        w.data_mut()[0] = 0.5;
        w.data_mut()[3] = 0.5;
        let net = LinearResNet::from_weights(vec![w]).unwrap();
        let x = RealTensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let tape = net.forward(&x, &x).unwrap();
        assert_eq!(tape.boundaries[1].data(), &[1.5, 0.0]);
    }

    #[test]
    fn boundary_gradients_match_closed_form_product() {
        let mut rng = Rng::new(41);
        let (n, blocks, b) = (4, 3, 5);
        let net = LinearResNet::from_weights(
            (0..blocks).map(|_| RealTensor::randn(&[n, n], 0.3, &mut rng)).collect(),
        )
        .unwrap();
        let x = RealTensor::randn(&[b, n], 1.0, &mut rng);
        let y = RealTensor::randn(&[b, n], 1.0, &mut rng);
        let tape = net.forward(&x, &y).unwrap();
        let (_, grads) = net.backward(&tape).unwrap();
        let out = tape.boundaries.last().unwrap();
        for l in 0..=blocks {
            // dE/dx_l = prod_{m >= l} (I + W_m)^T (x_{L+1} - y) / B, per sample
            for s in 0..b {
                let mut v: Vec<f64> = (0..n)
                    .map(|i| (out.data()[s * n + i] - y.data()[s * n + i]) / b as f64)
                    .collect();
                for m in (l..blocks).rev() {
                    let j = net.block_jacobian(m);
                    v = (0..n).map(|c| (0..n).map(|r| j[r * n + c] * v[r]).sum()).collect();
                }
                for i in 0..n {
                    assert!((grads[l].data()[s * n + i] - v[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gram_path_matches_batch_path() {
        let mut rng = Rng::new(42);
        let (n, blocks, b) = (5, 4, 9);
        let net = LinearResNet::from_weights(
            (0..blocks).map(|_| RealTensor::randn(&[n, n], 0.2, &mut rng)).collect(),
        )
        .unwrap();
        let x = RealTensor::randn(&[b, n], 1.0, &mut rng);
        let y = RealTensor::randn(&[b, n], 1.0, &mut rng);
        let tape = net.forward(&x, &y).unwrap();
        let (wg, bg) = net.backward(&tape).unwrap();
        let stats = GramStats::from_batch(&x, &y).unwrap();
        let (loss, gwg) = net.gram_loss_and_grads(&stats).unwrap();
        assert!((loss - tape.loss).abs() < 1e-12);
        for (a, g) in wg.iter().zip(&gwg) {
            for (u, v) in a.data().iter().zip(g.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        for (norm, g) in net.gram_boundary_norms(&stats).iter().zip(&bg) {
            assert!((norm - g.l2_norm()).abs() < 1e-10);
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = Rng::new(43);
        let (n, blocks, b) = (3, 2, 4);
        let mut net = LinearResNet::from_weights(
            (0..blocks).map(|_| RealTensor::randn(&[n, n], 0.3, &mut rng)).collect(),
        )
        .unwrap();
        let x = RealTensor::randn(&[b, n], 1.0, &mut rng);
        let y = RealTensor::randn(&[b, n], 1.0, &mut rng);
        let (grads, _) = net.backward(&net.forward(&x, &y).unwrap()).unwrap();
        let h = 1e-6;
        for l in 0..blocks {
            for i in 0..n * n {
                let orig = net.weights[l].data()[i];
                net.weights[l].data_mut()[i] = orig + h;
                let plus = net.forward(&x, &y).unwrap().loss;
                net.weights[l].data_mut()[i] = orig - h;
                let minus = net.forward(&x, &y).unwrap().loss;
                net.weights[l].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                assert!((numeric - grads[l].data()[i]).abs() < 1e-8);
            }
        }
    }
}
