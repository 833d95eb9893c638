//! Synthetic class-prototype images used in place of a natural-image
//! dataset. Each class has a smooth random prototype per channel; examples
//! are shifted, optionally flipped, noisy copies. Channels are normalized
//! with the training-set statistics.

use procres::tensor::{RealTensor, Rng};
use procres::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub train: usize,
    pub test: usize,
    /// Std of the additive Gaussian noise, relative to unit-amplitude prototypes.
    pub noise: f64,
    /// Maximum circular shift in pixels along each axis.
    pub max_shift: usize,
    pub flip: bool,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub train_images: RealTensor,
    pub train_labels: Vec<usize>,
    pub test_images: RealTensor,
    pub test_labels: Vec<usize>,
    /// Per-channel `(mean, std)` removed from both splits.
    pub normalization: Vec<(f64, f64)>,
}

const WAVES: usize = 3;

fn prototypes(spec: &DatasetSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let s = spec.size;
    let plane = s * s;
    (0..spec.classes)
        .map(|_| {
            let mut img = vec![0.0; spec.channels * plane];
            for ch in 0..spec.channels {
                let offset = rng.uniform(-0.5, 0.5);
                let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
                    .map(|_| {
                        (
                            rng.below(3) as f64,
                            rng.below(3) as f64,
                            rng.uniform(0.0, std::f64::consts::TAU),
                            rng.uniform(0.3, 1.0),
                        )
                    })
                    .collect();
                for y in 0..s {
                    for x in 0..s {
                        let mut v = offset;
                        for &(fy, fx, phase, amp) in &waves {
                            let t = std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / s as f64;
                            v += amp * (t + phase).cos();
                        }
                        img[ch * plane + y * s + x] = v;
                    }
                }
            }
            img
        })
        .collect()
}

fn sample(spec: &DatasetSpec, protos: &[Vec<f64>], count: usize, rng: &mut Rng) -> (Vec<f64>, Vec<usize>) {
    let s = spec.size;
    let plane = s * s;
    let per = spec.channels * plane;
    let mut labels: Vec<usize> = (0..count).map(|i| i % spec.classes).collect();
    rng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(count * per);
    let span = 2 * spec.max_shift + 1;
    for &label in &labels {
        let mut shift = || (rng.below(span) as isize - spec.max_shift as isize).rem_euclid(s as isize) as usize;
        let (dy, dx) = (shift(), shift());
        let flip = spec.flip && rng.coin();
        let proto = &protos[label];
        for ch in 0..spec.channels {
            for y in 0..s {
                for x in 0..s {
                    let sy = (y + dy) % s;
                    let mut sx = (x + dx) % s;
                    if flip {
                        sx = s - 1 - sx;
                    }
                    data.push(proto[ch * plane + sy * s + sx] + spec.noise * rng.normal());
                }
            }
        }
    }
    (data, labels)
}

impl SyntheticDataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        if spec.classes < 2 || spec.channels == 0 || spec.size == 0 || spec.train == 0 {
            return Err(Error::Config(format!("invalid dataset spec {spec:?}")));
        }
        if !(spec.noise >= 0.0) {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        let root = Rng::new(spec.seed);
        let protos = prototypes(spec, &mut root.fork(0));
        let (mut train, train_labels) = sample(spec, &protos, spec.train, &mut root.fork(1));
        let (mut test, test_labels) = sample(spec, &protos, spec.test, &mut root.fork(2));

        let plane = spec.size * spec.size;
        let per = spec.channels * plane;
        let mut normalization = Vec::with_capacity(spec.channels);
        for ch in 0..spec.channels {
            let values = || {
                train
                    .chunks(per)
                    .flat_map(move |img| img[ch * plane..(ch + 1) * plane].iter().copied())
            };
            let count = (spec.train * plane) as f64;
            let mean = values().sum::<f64>() / count;
            let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            normalization.push((mean, var.sqrt().max(1e-12)));
        }
        for buf in [&mut train, &mut test] {
            for img in buf.chunks_mut(per) {
                for (ch, &(mean, std)) in normalization.iter().enumerate() {
                    for v in &mut img[ch * plane..(ch + 1) * plane] {
                        *v = (*v - mean) / std;
                    }
                }
            }
        }
        let shape = |n: usize| [n, spec.channels, spec.size, spec.size];
        Ok(Self {
            spec: spec.clone(),
            train_images: RealTensor::from_vec(&shape(spec.train), train)?,
            train_labels,
            test_images: RealTensor::from_vec(&shape(spec.test), test)?,
            test_labels,
            normalization,
        })
    }

    /// Gathers the listed training examples into one batch.
    pub fn train_batch(&self, indices: &[usize]) -> Result<(RealTensor, Vec<usize>)> {
        let per = self.spec.channels * self.spec.size * self.spec.size;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.train_images.data()[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.train_labels[i]).collect();
        Ok((
            RealTensor::from_vec(&[indices.len(), self.spec.channels, self.spec.size, self.spec.size], data)?,
            labels,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            classes: 4,
            channels: 3,
            size: 8,
            train: 40,
            test: 12,
            noise: 0.5,
            max_shift: 2,
            flip: true,
            seed: 3,
        }
    }

    #[test]
    fn channels_are_normalized_and_labels_in_range() {
        let d = SyntheticDataset::generate(&spec()).unwrap();
        assert!(d.train_labels.iter().chain(&d.test_labels).all(|&l| l < 4));
        let plane = 64;
        for ch in 0..3 {
            let vals: Vec<f64> = d
                .train_images
                .data()
                .chunks(3 * plane)
                .flat_map(|img| img[ch * plane..(ch + 1) * plane].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = SyntheticDataset::generate(&spec()).unwrap();
        let b = SyntheticDataset::generate(&spec()).unwrap();
        assert_eq!(a.train_images, b.train_images);
        assert_eq!(a.test_labels, b.test_labels);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut s = spec();
        s.classes = 1;
        assert!(SyntheticDataset::generate(&s).is_err());
    }
}
