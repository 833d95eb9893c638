use super::layers::Mode;
use super::Network;
use crate::error::Result;
use crate::tensor::RealTensor;

const DEFAULT_SAMPLES: usize = 24;

/// Central-difference check in train mode with up to 24 sampled entries per
/// parameter tensor. Returns the max of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(net: &Network, batch: &RealTensor, labels: &[usize], h: f64) -> Result<f64> {
    grad_check_with(net, batch, labels, h, Mode::Train, DEFAULT_SAMPLES)
}

pub fn grad_check_with(
    net: &Network,
    batch: &RealTensor,
    labels: &[usize],
    h: f64,
    mode: Mode,
    samples_per_param: usize,
) -> Result<f64> {
    let mut work = net.clone();
    let (_, tape) = work.forward(batch, labels, mode)?;
    let analytic = work.backward(&tape)?.params;
    let mut worst: f64 = 0.0;
    for (p, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        let step = (len / samples_per_param.max(1)).max(1);
        for idx in (0..len).step_by(step).take(samples_per_param.max(1)) {
            let original = work.params()[p].data()[idx];
            work.params_mut()[p].data_mut()[idx] = original + h;
            let (plus, _) = work.forward(batch, labels, mode)?;
            work.params_mut()[p].data_mut()[idx] = original - h;
            let (minus, _) = work.forward(batch, labels, mode)?;
            work.params_mut()[p].data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
