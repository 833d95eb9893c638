//! Gradient-norm telemetry and the norm-preservation bounds.
//!
//! The stored ratio is `||dE/dx_l|| / ||dE/dx_{l+1}||` (block input over
//! block output); both norms are kept so the reciprocal is recoverable.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::svd_small;
use crate::net::{Block, BlockKind, GradReport, GramStats, Layer, LinearResNet, Network, Skip};
use crate::spectrum::conv_spectral_norm;
use crate::tensor::{ComplexMatrix, RealTensor, Rng};

pub const RATIO_CSV_HEADER: [&str; 8] = [
    "run_id",
    "epoch",
    "step",
    "block_index",
    "block_kind",
    "grad_norm_in",
    "grad_norm_out",
    "ratio",
];

/// `c_rho` for ReLU.
pub const RELU_DERIVATIVE_BOUND: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    pub run_id: String,
    pub epoch: usize,
    pub step: usize,
    /// 1-based.
    pub block_index: usize,
    pub block_kind: String,
    pub grad_norm_in: f64,
    pub grad_norm_out: f64,
    /// `None` when the output gradient is zero.
    pub ratio: Option<f64>,
}

impl RatioRecord {
    pub fn new(
        run_id: &str,
        epoch: usize,
        step: usize,
        block_index: usize,
        block_kind: &str,
        grad_norm_in: f64,
        grad_norm_out: f64,
    ) -> Self {
        let ratio = (grad_norm_out > 0.0).then(|| grad_norm_in / grad_norm_out);
        Self {
            run_id: run_id.to_string(),
            epoch,
            step,
            block_index,
            block_kind: block_kind.to_string(),
            grad_norm_in,
            grad_norm_out,
            ratio,
        }
    }

    pub fn deviation(&self) -> Option<f64> {
        self.ratio.map(|r| (r - 1.0).abs())
    }

    pub fn is_transition(&self) -> bool {
        self.block_kind.starts_with("transition") || self.block_kind == PLAIN_TRANSITION
    }
}

/// Label for plain blocks that change channels or resolution.
pub const PLAIN_TRANSITION: &str = "plain-transition";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordMeta<'a> {
    pub run_id: &'a str,
    pub epoch: usize,
    pub step: usize,
}

/// Block label used in the ratio CSV.
pub fn block_label(block: &Block, transition: bool) -> &'static str {
    match block.kind {
        BlockKind::Plain if transition => PLAIN_TRANSITION,
        kind => kind.as_str(),
    }
}

/// One record per block, read from the boundary gradients.
pub fn record_ratios(report: &GradReport, net: &Network, meta: &RecordMeta) -> Result<Vec<RatioRecord>> {
    if report.boundaries.len() != net.blocks.len() + 1 {
        return Err(Error::State(format!(
            "gradient report has {} boundaries for {} blocks",
            report.boundaries.len(),
            net.blocks.len()
        )));
    }
    let flags = net.transition_flags()?;
    Ok(net
        .blocks
        .iter()
        .enumerate()
        .map(|(l, block)| {
            RatioRecord::new(
                meta.run_id,
                meta.epoch,
                meta.step,
                l + 1,
                block_label(block, flags[l]),
                report.boundaries[l].l2_norm(),
                report.boundaries[l + 1].l2_norm(),
            )
        })
        .collect())
}

fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

/// Append-only CSV sink for ratio records.
pub struct RatioCsv<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> RatioCsv<W> {
    pub fn new(writer: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(writer);
        inner.write_record(RATIO_CSV_HEADER)?;
        Ok(Self { inner })
    }

    pub fn append(&mut self, records: &[RatioRecord]) -> Result<()> {
        for r in records {
            self.inner.write_record([
                r.run_id.clone(),
                r.epoch.to_string(),
                r.step.to_string(),
                r.block_index.to_string(),
                r.block_kind.clone(),
                fmt_float(r.grad_norm_in),
                fmt_float(r.grad_norm_out),
                r.ratio.map(fmt_float).unwrap_or_else(|| "nan".into()),
            ])?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

/// Parses a ratio CSV, checking the header exactly.
pub fn read_ratio_csv(text: &str) -> Result<Vec<RatioRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != RATIO_CSV_HEADER {
        return Err(Error::Input {
            offset: 0,
            message: format!("unexpected ratio CSV header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let offset = row.position().map(|p| p.byte() as usize).unwrap_or(0);
        let bad = |field: &str| Error::Input {
            offset,
            message: format!("bad {field} field"),
        };
        let float = |i: usize, name: &str| -> Result<f64> { row[i].parse::<f64>().map_err(|_| bad(name)) };
        let int = |i: usize, name: &str| -> Result<usize> { row[i].parse::<usize>().map_err(|_| bad(name)) };
        let ratio = match &row[7] {
            "nan" => None,
            _ => Some(float(7, "ratio")?),
        };
        out.push(RatioRecord {
            run_id: row[0].to_string(),
            epoch: int(1, "epoch")?,
            step: int(2, "step")?,
            block_index: int(3, "block_index")?,
            block_kind: row[4].to_string(),
            grad_norm_in: float(5, "grad_norm_in")?,
            grad_norm_out: float(6, "grad_norm_out")?,
            ratio,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    #[serde(rename = "L")]
    pub l: usize,
    pub gamma: f64,
    pub c: f64,
    pub delta: f64,
    pub c_rho: f64,
    /// Whether `L >= 3 gamma`, the depth condition of the bound.
    pub applicable: bool,
}

/// `gamma = max |log sigma(R)|`, `c = 2 (sqrt(pi) + sqrt(3 gamma))^2`, `delta = c / L`.
pub fn theorem2_delta(r: &ComplexMatrix, l: usize) -> Result<BoundParams> {
    if !r.is_square() {
        return Err(Error::dim(format!("R must be square, got {}x{}", r.rows(), r.cols())));
    }
    if l == 0 {
        return Err(Error::Config("block count L must be positive".into()));
    }
    let svd = svd_small(r)?;
    let (hi, lo) = (svd.sigma_max(), svd.sigma_min());
    if !(lo > 0.0) || lo <= hi * 1e-14 {
        return Err(Error::Singular(format!(
            "R has sigma_min = {lo:.3e}; gamma is undefined"
        )));
    }
    let gamma = hi.ln().abs().max(lo.ln().abs());
    let c = 2.0 * (std::f64::consts::PI.sqrt() + (3.0 * gamma).sqrt()).powi(2);
    Ok(BoundParams {
        l,
        gamma,
        c,
        delta: c / l as f64,
        c_rho: RELU_DERIVATIVE_BOUND,
        applicable: l as f64 >= 3.0 * gamma,
    })
}

/// `delta = c_rho^2 sigma_max(W1) sigma_max(W2)` for a batchnorm-free
/// `relu, conv, relu, conv` residual block on `n x n` feature maps.
///
/// The zero-padded layer equals a crop of the circular convolution on an
/// `(n + k - 1)`-sized map, so its spectral norm is bounded by the circular
/// one evaluated there.
pub fn corollary1_delta(block: &Block, n: usize) -> Result<f64> {
    let unsupported = |why: &str| Err(Error::Applicability(why.to_string()));
    if block.kind != BlockKind::ResidualIdentity || block.skip != Skip::Identity || !block.entry.is_empty() {
        return unsupported("block is not an identity-skip residual block");
    }
    let convs = match block.branch.as_slice() {
        [Layer::Relu, Layer::Conv(a), Layer::Relu, Layer::Conv(b)] => [a, b],
        _ => return unsupported("branch is not relu, conv, relu, conv without batchnorm"),
    };
    let mut delta = RELU_DERIVATIVE_BOUND * RELU_DERIVATIVE_BOUND;
    for conv in convs {
        if conv.stride != 1 {
            return unsupported("strided convolution in the branch");
        }
        let m = n + conv.kernel.k() - 1;
        delta *= conv_spectral_norm(&conv.kernel, m)?;
    }
    Ok(delta)
}

/// Hyperparameters of the linear residual experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinExpSettings {
    pub samples: usize,
    pub steps: usize,
    /// Learning rate is `lr_scale / L`.
    pub lr_scale: f64,
    pub noise_std: f64,
    /// Ratios and the `|ratio - 1| <= sigma_max(W_l)` check are evaluated every `log_every` steps
    /// and at the final step.
    pub log_every: usize,
}

impl Default for LinExpSettings {
    fn default() -> Self {
        Self {
            samples: 512,
            steps: 5000,
            lr_scale: 0.1,
            noise_std: 0.1,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinExpEntry {
    #[serde(rename = "L")]
    pub l: usize,
    pub final_loss: f64,
    /// Per-block `|ratio - 1|` at the final step.
    pub final_deviations: Vec<f64>,
    pub max_ratio_deviation: f64,
    pub median_ratio_deviation: f64,
    pub max_sigma: f64,
    pub theorem2_delta: f64,
    pub lemma1_delta: f64,
    pub logged_steps: usize,
    /// Logged (step, block) pairs where `|ratio - 1| > sigma_max(W_l)`.
    pub lemma1_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinExpReport {
    pub n: usize,
    pub gamma: f64,
    pub entries: Vec<LinExpEntry>,
}

/// Median; NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn real_part(r: &ComplexMatrix) -> Result<Vec<f64>> {
    if r.data().iter().any(|z| z.im != 0.0) {
        return Err(Error::Config("R must be real".into()));
    }
    Ok(r.data().iter().map(|z| z.re).collect())
}

fn sigma_max_real(w: &RealTensor) -> Result<f64> {
    let n = w.shape()[0];
    Ok(svd_small(&ComplexMatrix::from_real(n, n, w.data())?)?.sigma_max())
}

/// Trains `prod (I + W_l)` from `W_l = 0` by full-batch gradient descent on
/// `y = R x + noise` for every `L`, recording per-block ratios.
pub fn linear_residual_experiment(
    r: &ComplexMatrix,
    l_values: &[usize],
    settings: &LinExpSettings,
    rng: &mut Rng,
) -> Result<LinExpReport> {
    if !r.is_square() || r.rows() == 0 || r.rows() > 32 {
        return Err(Error::dim(format!(
            "R must be square with N <= 32, got {}x{}",
            r.rows(),
            r.cols()
        )));
    }
    if settings.samples == 0 || settings.log_every == 0 || !(settings.lr_scale > 0.0) {
        return Err(Error::Config(format!("invalid linear experiment settings {settings:?}")));
    }
    let n = r.rows();
    let rr = real_part(r)?;
    let gamma = theorem2_delta(r, 1)?.gamma;
    let b = settings.samples;
    let x = RealTensor::randn(&[b, n], 1.0, rng);
    let mut y = vec![0.0; b * n];
    for s in 0..b {
        for i in 0..n {
            let xs = &x.data()[s * n..(s + 1) * n];
            y[s * n + i] = (0..n).map(|j| rr[i * n + j] * xs[j]).sum::<f64>() + settings.noise_std * rng.normal();
        }
    }
    let y = RealTensor::from_vec(&[b, n], y)?;
    let stats = GramStats::from_batch(&x, &y)?;

    let mut l_sorted = l_values.to_vec();
    l_sorted.sort_unstable();
    l_sorted.dedup();
    let mut entries = Vec::with_capacity(l_sorted.len());
    for &l in &l_sorted {
        if l == 0 {
            return Err(Error::Config("L must be positive".into()));
        }
        let lr = settings.lr_scale / l as f64;
        let mut net = LinearResNet::zeros(n, l);
        let mut initial = None;
        let mut logged = 0;
        let mut violations = 0;
        let mut final_loss = f64::NAN;
        for step in 0..=settings.steps {
            let (loss, grads) = net.gram_loss_and_grads(&stats)?;
            let init = *initial.get_or_insert(loss);
            if !loss.is_finite() || loss > 10.0 * init {
                return Err(Error::Divergence {
                    depth: l,
                    loss,
                    initial: init,
                });
            }
            final_loss = loss;
            if step % settings.log_every == 0 || step == settings.steps {
                logged += 1;
                let norms = net.gram_boundary_norms(&stats);
                for (blk, w) in net.weights.iter().enumerate() {
                    if norms[blk + 1] == 0.0 {
                        continue;
                    }
                    let dev = (norms[blk] / norms[blk + 1] - 1.0).abs();
                    let sigma = sigma_max_real(w)?;
                    if dev > sigma + 1e-12 * (1.0 + sigma) {
                        violations += 1;
                    }
                }
            }
            if step == settings.steps {
                break;
            }
            for (w, g) in net.weights.iter_mut().zip(&grads) {
                w.axpy(-lr, g)?;
            }
        }
        let norms = net.gram_boundary_norms(&stats);
        let deviations: Vec<f64> = (0..l).map(|i| (norms[i] / norms[i + 1] - 1.0).abs()).collect();
        let sigmas = net
            .weights
            .iter()
            .map(sigma_max_real)
            .collect::<Result<Vec<_>>>()?;
        let max_sigma = sigmas.iter().copied().fold(0.0, f64::max);
        entries.push(LinExpEntry {
            l,
            final_loss,
            max_ratio_deviation: deviations.iter().copied().fold(0.0, f64::max),
            median_ratio_deviation: median(&deviations),
            final_deviations: deviations,
            max_sigma,
            theorem2_delta: theorem2_delta(r, l)?.delta,
            lemma1_delta: max_sigma,
            logged_steps: logged,
            lemma1_violations: violations,
        });
    }
    Ok(LinExpReport { n, gamma, entries })
}

/// `Q diag(s) Q^T` with `Q` a seeded random orthogonal matrix and `s`
/// log-uniform in `[e^-gamma, e^gamma]` (endpoints included), so the result
/// is symmetric positive definite with the given gamma.
pub fn random_spd(n: usize, gamma: f64, rng: &mut Rng) -> Result<ComplexMatrix> {
    if n == 0 {
        return Err(Error::Size("empty matrix".into()));
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for u in &q {
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let logs: Vec<f64> = (0..n)
        .map(|i| match i {
            0 => gamma,
            1 => -gamma,
            _ => rng.uniform(-gamma, gamma),
        })
        .collect();
    let mut data = vec![0.0; n * n];
    for (k, u) in q.iter().enumerate() {
        let s = logs[k].exp();
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] += s * u[i] * u[j];
            }
        }
    }
    ComplexMatrix::from_real(n, n, &data)
}
