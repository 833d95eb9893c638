//! JSON run configurations. Unknown keys are rejected; omitted keys take
//! the defaults below.

use std::path::{Path, PathBuf};

use procres::net::{ArchSpec, Architecture};
use procres::probe::LinExpSettings;
use procres::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;

/// Training-run configuration. Optimizer defaults: lr 0.1, momentum 0.9,
/// weight decay 1e-4, projection every 2 steps. Batch 64 replaces 128
/// because the synthetic training set is 10x smaller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub architecture: Architecture,
    /// Block count `L`.
    pub depth: usize,
    pub widths: Vec<usize>,
    pub expansion: usize,
    pub input_size: usize,
    pub input_channels: usize,
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub projection_period: usize,
    /// Single `x0.1` step at half the epochs when set.
    pub lr_decay: bool,
    pub seed: u64,
    /// Additional seeds for aggregation mode; the run uses `seed` when empty.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub train_samples: usize,
    pub test_samples: usize,
    pub noise: f64,
    pub max_shift: usize,
    pub flip: bool,
    pub data_seed: u64,
    /// Ratios are recorded every this many steps.
    pub ratio_every: usize,
    /// Epoch window of the generalization-gap statistics.
    pub gap_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Resnet,
            depth: 9,
            widths: vec![16, 32, 64],
            expansion: 4,
            input_size: 16,
            input_channels: 3,
            classes: 10,
            epochs: 30,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            projection_period: 2,
            lr_decay: true,
            seed: 0,
            seeds: vec![],
            output_dir: PathBuf::from("out"),
            train_samples: 5000,
            test_samples: 1000,
            noise: 1.0,
            max_shift: 2,
            flip: true,
            data_seed: 0,
            ratio_every: 10,
            gap_epochs: 30,
        }
    }
}

impl RunConfig {
    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec {
            architecture: self.architecture,
            depth: self.depth,
            widths: self.widths.clone(),
            input_size: self.input_size,
            classes: self.classes,
            input_channels: self.input_channels,
            expansion: self.expansion,
            proc_kernel: 3,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes,
            channels: self.input_channels,
            size: self.input_size,
            train: self.train_samples,
            test: self.test_samples,
            noise: self.noise,
            max_shift: self.max_shift,
            flip: self.flip,
            seed: self.data_seed,
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch_spec().validate()?;
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("projection_period", self.projection_period),
            ("train_samples", self.train_samples),
            ("test_samples", self.test_samples),
            ("ratio_every", self.ratio_every),
            ("gap_epochs", self.gap_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive, momentum in [0, 1), weight decay >= 0".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Linear residual experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinExpConfig {
    pub n: usize,
    /// Target `max |log sigma(R)|` of the generated SPD `R`.
    pub gamma: f64,
    pub r_seed: u64,
    /// Explicit row-major `R`; overrides `n`, `gamma` and `r_seed`.
    pub r: Option<Vec<Vec<f64>>>,
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub samples: usize,
    pub steps: usize,
    pub lr_scale: f64,
    pub noise_std: f64,
    pub log_every: usize,
    pub output_dir: PathBuf,
}

impl Default for LinExpConfig {
    fn default() -> Self {
        let s = LinExpSettings::default();
        Self {
            n: 8,
            gamma: 0.5,
            r_seed: 0,
            r: None,
            depths: vec![4, 8, 16, 32],
            seeds: vec![0, 1, 2, 3, 4],
            samples: s.samples,
            steps: s.steps,
            lr_scale: s.lr_scale,
            noise_std: s.noise_std,
            log_every: s.log_every,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl LinExpConfig {
    pub fn settings(&self) -> LinExpSettings {
        LinExpSettings {
            samples: self.samples,
            steps: self.steps,
            lr_scale: self.lr_scale,
            noise_std: self.noise_std,
            log_every: self.log_every,
        }
    }
}

/// Channel-sweep configuration for the probe network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FigRatioConfig {
    pub c_values: Vec<usize>,
    pub d_values: Vec<usize>,
    /// Cells with small `c` and `c << d`, reported as expected failures.
    pub failure_c: Vec<usize>,
    pub failure_d: Vec<usize>,
    pub runs: usize,
    pub epochs: usize,
    pub input_size: usize,
    pub input_channels: usize,
    pub hidden: usize,
    pub classes: usize,
    pub train_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub projection_period: usize,
    pub noise: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for FigRatioConfig {
    fn default() -> Self {
        Self {
            c_values: vec![8, 16, 32, 64],
            d_values: vec![8, 16, 32, 64],
            failure_c: vec![1, 2],
            failure_d: vec![32, 64],
            runs: 10,
            epochs: 10,
            input_size: 6,
            input_channels: 3,
            hidden: 16,
            classes: 10,
            train_samples: 64,
            batch_size: 16,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            projection_period: 4,
            noise: 1.0,
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl FigRatioConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("runs", self.runs),
            ("epochs", self.epochs),
            ("hidden", self.hidden),
            ("train_samples", self.train_samples),
            ("batch_size", self.batch_size),
            ("projection_period", self.projection_period),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.input_size < 3 || self.classes < 2 {
            return Err(Error::Config("input size must be >= 3 and classes >= 2".into()));
        }
        let all = self.c_values.iter().chain(&self.d_values).chain(&self.failure_c).chain(&self.failure_d);
        if all.clone().any(|&v| v == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Reads a JSON config, reporting parse errors with a byte offset.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    parse_json(&text)
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let offset = text
            .split_inclusive('\n')
            .take(e.line().saturating_sub(1))
            .map(str::len)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::Input {
            offset,
            message: e.to_string(),
        }
    })
}
