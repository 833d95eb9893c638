//! Minibatch SGD loop with periodic conv* re-projection and ratio probing.

use std::time::{Duration, Instant};

use procres::net::{Mode, Network, Sgd};
use procres::probe::{record_ratios, RatioRecord, RecordMeta};
use procres::tensor::Rng;
use procres::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::data::SyntheticDataset;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub run_id: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// conv* layers are re-projected after every `projection_period` steps.
    pub projection_period: usize,
    pub lr_decay: bool,
    pub ratio_every: usize,
    /// Only epochs `>= ratio_from_epoch` are probed.
    pub ratio_from_epoch: usize,
    pub shuffle_seed: u64,
    /// Evaluate train and test loss/error after each epoch.
    pub evaluate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub run_id: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_loss: f64,
    pub test_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub epoch: usize,
    pub step: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub run_id: String,
    pub losses: Vec<LossRow>,
    pub ratios: Vec<RatioRecord>,
    /// Set when training stopped on a non-finite loss or activation.
    pub failure: Option<Failure>,
    pub net: Network,
    pub steps: usize,
    pub projection_time: Duration,
    pub total_time: Duration,
}

fn learning_rate(opts: &TrainOptions, epoch: usize) -> f64 {
    if opts.lr_decay && 2 * (epoch - 1) >= opts.epochs {
        opts.lr * 0.1
    } else {
        opts.lr
    }
}

pub fn train(mut net: Network, data: &SyntheticDataset, opts: &TrainOptions) -> Result<RunResult> {
    if opts.batch_size == 0 || opts.projection_period == 0 || opts.ratio_every == 0 {
        return Err(Error::Config("batch size, projection period and ratio interval must be positive".into()));
    }
    let start = Instant::now();
    let mut projection_time = Duration::ZERO;
    let mut rng = Rng::new(opts.shuffle_seed);
    let mut opt = Sgd::new(&net, opts.momentum, opts.weight_decay);
    let n = data.train_labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::new();
    let mut ratios = Vec::new();
    let mut failure = None;
    let mut step = 0;
    'epochs: for epoch in 1..=opts.epochs {
        let lr = learning_rate(opts, epoch);
        rng.shuffle(&mut order);
        for chunk in order.chunks(opts.batch_size) {
            let (batch, labels) = data.train_batch(chunk)?;
            let outcome = net
                .forward(&batch, &labels, Mode::Train)
                .and_then(|(_, tape)| net.backward(&tape))
                .and_then(|report| {
                    if report.is_finite() {
                        Ok(report)
                    } else {
                        Err(Error::Numeric("parameter gradient".into()))
                    }
                });
            let report = match outcome {
                Ok(r) => r,
                Err(Error::Numeric(what)) => {
                    failure = Some(Failure {
                        epoch,
                        step,
                        message: format!("non-finite value in {what}"),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if epoch >= opts.ratio_from_epoch && step % opts.ratio_every == 0 {
                let meta = RecordMeta {
                    run_id: &opts.run_id,
                    epoch,
                    step,
                };
                ratios.extend(record_ratios(&report, &net, &meta)?);
            }
            opt.step(&mut net, &report.params, lr)?;
            step += 1;
            if step % opts.projection_period == 0 {
                let t = Instant::now();
                net.project()?;
                projection_time += t.elapsed();
            }
        }
        if opts.evaluate {
            let eval = net
                .evaluate(&data.train_images, &data.train_labels, 256)
                .and_then(|train| Ok((train, net.evaluate(&data.test_images, &data.test_labels, 256)?)));
            match eval {
                Ok(((train_loss, train_wrong), (test_loss, test_wrong))) => losses.push(LossRow {
                    run_id: opts.run_id.clone(),
                    epoch,
                    train_loss,
                    train_err: train_wrong as f64 / n as f64,
                    test_loss,
                    test_err: test_wrong as f64 / data.test_labels.len().max(1) as f64,
                }),
                Err(Error::Numeric(what)) => {
                    failure = Some(Failure {
                        epoch,
                        step,
                        message: format!("non-finite value in {what} during evaluation"),
                    });
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(RunResult {
        run_id: opts.run_id.clone(),
        losses,
        ratios,
        failure,
        net,
        steps: step,
        projection_time,
        total_time: start.elapsed(),
    })
}

/// Generalization gap per epoch (`test_err - train_err`) over the first
/// `epochs` rows; returns `(mean, max)`.
pub fn gap_statistics(losses: &[LossRow], epochs: usize) -> Option<(f64, f64)> {
    let gaps: Vec<f64> = losses
        .iter()
        .filter(|r| r.epoch <= epochs)
        .map(|r| r.test_err - r.train_err)
        .collect();
    if gaps.is_empty() {
        return None;
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    Some((mean, gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
}
