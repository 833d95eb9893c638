//! The five reproduction commands. Each returns its results in memory and
//! writes its output files; all outputs are deterministic for a fixed
//! configuration.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use procres::net::{build_network, probe_network, save_checkpoint, ProbeSpec};
use procres::probe::{
    linear_residual_experiment, median, random_spd, theorem2_delta, BoundParams, LinExpReport, RatioCsv,
    RatioRecord,
};
use procres::spectrum::{
    conv_singular_values, project_kernel_detailed, read_kernel, target_sigma, write_kernel, SpectrumReport,
};
use procres::tensor::{ComplexMatrix, Rng};
use procres::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{FigRatioConfig, LinExpConfig, RunConfig};
use crate::data::{DatasetSpec, SyntheticDataset};
use crate::train::{gap_statistics, train, Failure, LossRow, RunResult, TrainOptions};

pub const LOSS_CSV_HEADER: [&str; 6] = ["run_id", "epoch", "train_loss", "train_err", "test_loss", "test_err"];
pub const FIGRATIO_CSV_HEADER: [&str; 9] = [
    "c",
    "d",
    "projected",
    "failure_case",
    "runs",
    "mean_ratio",
    "std_ratio",
    "deviation",
    "failed_runs",
];

fn fmt(v: f64) -> String {
    format!("{v:.8e}")
}

// ---------------------------------------------------------------- spectrum

pub struct SpectrumOutput {
    pub report: SpectrumReport,
    pub summary: String,
}

pub fn cmd_spectrum(kernel_file: &Path, n: usize, json_out: Option<&Path>) -> Result<SpectrumOutput> {
    let kernel = read_kernel(kernel_file)?;
    let report = conv_singular_values(&kernel, n)?;
    let values = &report.singular_values;
    let first = values.first().copied().unwrap_or(0.0);
    let flat = values.iter().all(|v| (v - first).abs() <= 1e-9 * first.max(1.0));
    let summary = if flat {
        format!(
            "{} singular values (k={}, d={}, c={}, n={n})\nall singular values = {first:.6}",
            values.len(),
            kernel.k(),
            kernel.out_channels(),
            kernel.in_channels()
        )
    } else {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "none".into());
        format!(
            "{} singular values (k={}, d={}, c={}, n={n})\nsigma_max = {:.6}\nsigma_min_nonzero = {}\ncondition_number = {}",
            values.len(),
            kernel.k(),
            kernel.out_channels(),
            kernel.in_channels(),
            report.sigma_max,
            opt(report.sigma_min_nonzero),
            opt(report.condition_number)
        )
    };
    if let Some(path) = json_out {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(SpectrumOutput { report, summary })
}

// ---------------------------------------------------------------- project

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectSummary {
    pub target_sigma: f64,
    pub before_sigma_max: f64,
    pub before_sigma_min_nonzero: Option<f64>,
    /// Max deviation of the projected (pre-truncation) nonzero spectrum from the target.
    pub projected_deviation: f64,
    pub after_sigma_max: f64,
    pub after_sigma_min_nonzero: Option<f64>,
    /// Max deviation of the truncated output kernel's nonzero spectrum.
    pub truncated_deviation: f64,
    /// Frobenius distance between input and output kernels.
    pub movement: f64,
    pub newton_schulz_iterations: usize,
    pub newton_schulz_residual: f64,
}

impl ProjectSummary {
    pub fn render(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "none".into());
        format!(
            "target sigma = {:.6}\nbefore: sigma_max = {:.6}, sigma_min_nonzero = {}\n\
             projected (pre-truncation) max deviation = {:.3e}\n\
             after truncation: sigma_max = {:.6}, sigma_min_nonzero = {}, max deviation = {:.3e}\n\
             movement = {:.3e}\nnewton-schulz: {} iterations, residual {:.3e}",
            self.target_sigma,
            self.before_sigma_max,
            opt(self.before_sigma_min_nonzero),
            self.projected_deviation,
            self.after_sigma_max,
            opt(self.after_sigma_min_nonzero),
            self.truncated_deviation,
            self.movement,
            self.newton_schulz_iterations,
            self.newton_schulz_residual
        )
    }
}

pub fn cmd_project(kernel_file: &Path, n: usize, relu: bool, out_file: &Path) -> Result<ProjectSummary> {
    let kernel = read_kernel(kernel_file)?;
    let target = target_sigma(kernel.out_channels(), kernel.in_channels(), relu);
    let before = conv_singular_values(&kernel, n)?;
    let projection = project_kernel_detailed(&kernel, n, target)?;
    let projected = conv_singular_values(&projection.full, n)?;
    let after = conv_singular_values(&projection.truncated, n)?;
    write_kernel(out_file, &projection.truncated)?;
    Ok(ProjectSummary {
        target_sigma: target,
        before_sigma_max: before.sigma_max,
        before_sigma_min_nonzero: before.sigma_min_nonzero,
        projected_deviation: projected.max_deviation_from(target),
        after_sigma_max: after.sigma_max,
        after_sigma_min_nonzero: after.sigma_min_nonzero,
        truncated_deviation: after.max_deviation_from(target),
        movement: kernel.frobenius_distance(&projection.truncated)?,
        newton_schulz_iterations: projection.max_iterations,
        newton_schulz_residual: projection.max_residual,
    })
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub steps: usize,
    pub failure: Option<Failure>,
    pub final_train_loss: Option<f64>,
    pub final_test_err: Option<f64>,
    pub mean_gap: Option<f64>,
    pub max_gap: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapAggregate {
    pub epochs: usize,
    pub median_mean_gap: f64,
    pub median_max_gap: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: RunConfig,
    pub depth_layers: usize,
    pub parameters: usize,
    pub runs: Vec<RunSummary>,
    pub gap: Option<GapAggregate>,
}

pub struct TrainOutput {
    pub summary: TrainSummary,
    pub losses: Vec<LossRow>,
    pub ratios: Vec<RatioRecord>,
    /// Wall-clock seconds spent in training and in projection, per run.
    pub timings: Vec<(String, f64, f64)>,
}

pub fn run_id(cfg: &RunConfig, seed: u64) -> String {
    format!("{}-L{}-s{seed}", cfg.architecture.as_str(), cfg.depth)
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(LOSS_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.epoch.to_string(),
            fmt(r.train_loss),
            fmt(r.train_err),
            fmt(r.test_loss),
            fmt(r.test_err),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(text: &str) -> Result<Vec<LossRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != LOSS_CSV_HEADER {
        return Err(Error::Input {
            offset: 0,
            message: format!("unexpected loss CSV header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let offset = rec.position().map(|p| p.byte() as usize).unwrap_or(0);
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Input {
                offset,
                message: format!("bad {} field", LOSS_CSV_HEADER[i]),
            })
        };
        rows.push(LossRow {
            run_id: rec[0].to_string(),
            epoch: rec[1].parse().map_err(|_| Error::Input {
                offset,
                message: "bad epoch field".into(),
            })?,
            train_loss: num(2)?,
            train_err: num(3)?,
            test_loss: num(4)?,
            test_err: num(5)?,
        });
    }
    Ok(rows)
}

fn write_ratio_csv(path: &Path, records: &[RatioRecord]) -> Result<()> {
    let mut sink = RatioCsv::new(BufWriter::new(File::create(path)?))?;
    sink.append(records)?;
    sink.finish()?;
    Ok(())
}

/// Trains every seed of the configuration. Writes `ratios.csv`, `loss.csv`,
/// `summary.json` and one checkpoint per run under `output_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let data = SyntheticDataset::generate(&cfg.dataset_spec())?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut results: Vec<(u64, RunResult)> = Vec::new();
    let mut depth_layers = 0;
    let mut parameters = 0;
    for seed in cfg.seed_list() {
        let root = Rng::new(seed);
        let net = build_network(&cfg.arch_spec(), &mut root.fork(1))?;
        depth_layers = net.depth();
        parameters = net.param_count();
        let opts = TrainOptions {
            run_id: run_id(cfg, seed),
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            projection_period: cfg.projection_period,
            lr_decay: cfg.lr_decay,
            ratio_every: cfg.ratio_every,
            ratio_from_epoch: 1,
            shuffle_seed: root.fork(2).next_u64(),
            evaluate: true,
        };
        results.push((seed, train(net, &data, &opts)?));
    }
    results.sort_by(|a, b| a.1.run_id.cmp(&b.1.run_id));

    let mut runs = Vec::new();
    let mut losses = Vec::new();
    let mut ratios = Vec::new();
    let mut timings = Vec::new();
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    for (seed, r) in &results {
        let checkpoint = match &r.failure {
            None => Some(save_checkpoint(&r.net, &ckpt_dir, &r.run_id)?),
            Some(_) => None,
        };
        let gap = gap_statistics(&r.losses, cfg.gap_epochs);
        runs.push(RunSummary {
            run_id: r.run_id.clone(),
            seed: *seed,
            steps: r.steps,
            failure: r.failure.clone(),
            final_train_loss: r.losses.last().map(|l| l.train_loss),
            final_test_err: r.losses.last().map(|l| l.test_err),
            mean_gap: gap.map(|g| g.0),
            max_gap: gap.map(|g| g.1),
            checkpoint: checkpoint.map(|p| p.strip_prefix(&cfg.output_dir).map(Path::to_path_buf).unwrap_or(p)),
        });
        losses.extend(r.losses.iter().cloned());
        ratios.extend(r.ratios.iter().cloned());
        timings.push((
            r.run_id.clone(),
            r.total_time.as_secs_f64(),
            r.projection_time.as_secs_f64(),
        ));
    }
    let means: Vec<f64> = runs.iter().filter_map(|r| r.mean_gap).collect();
    let maxes: Vec<f64> = runs.iter().filter_map(|r| r.max_gap).collect();
    let gap = (!means.is_empty()).then(|| GapAggregate {
        epochs: cfg.gap_epochs,
        median_mean_gap: median(&means),
        median_max_gap: median(&maxes),
    });
    write_loss_csv(&cfg.output_dir.join("loss.csv"), &losses)?;
    write_ratio_csv(&cfg.output_dir.join("ratios.csv"), &ratios)?;
    let summary = TrainSummary {
        config: cfg.clone(),
        depth_layers,
        parameters,
        runs,
        gap,
    };
    fs::write(cfg.output_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(TrainOutput {
        summary,
        losses,
        ratios,
        timings,
    })
}

// ---------------------------------------------------------------- linexp

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinExpSeedReport {
    pub seed: u64,
    pub report: LinExpReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinExpOutput {
    pub config: LinExpConfig,
    pub gamma: f64,
    pub bounds: Vec<BoundParams>,
    pub runs: Vec<LinExpSeedReport>,
    /// Per depth (sorted), the median over seeds of the max-over-blocks `|ratio - 1|`.
    pub median_max_deviation: Vec<(usize, f64)>,
    pub total_lemma1_violations: usize,
}

pub fn linexp_matrix(cfg: &LinExpConfig) -> Result<ComplexMatrix> {
    match &cfg.r {
        Some(rows) => {
            let n = rows.len();
            if n == 0 || rows.iter().any(|r| r.len() != n) {
                return Err(Error::Config("explicit R must be a nonempty square matrix".into()));
            }
            ComplexMatrix::from_real(n, n, &rows.concat())
        }
        None => random_spd(cfg.n, cfg.gamma, &mut Rng::new(cfg.r_seed)),
    }
}

/// Writes `linexp.json` under `output_dir`.
pub fn cmd_linexp(cfg: &LinExpConfig) -> Result<LinExpOutput> {
    if cfg.seeds.is_empty() || cfg.depths.is_empty() {
        return Err(Error::Config("linexp needs at least one seed and one depth".into()));
    }
    let r = linexp_matrix(cfg)?;
    let mut depths = cfg.depths.clone();
    depths.sort_unstable();
    depths.dedup();
    let bounds = depths
        .iter()
        .map(|&l| theorem2_delta(&r, l))
        .collect::<Result<Vec<_>>>()?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let report = linear_residual_experiment(&r, &depths, &cfg.settings(), &mut Rng::new(seed))?;
        runs.push(LinExpSeedReport { seed, report });
    }
    let median_max_deviation = depths
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let v: Vec<f64> = runs.iter().map(|r| r.report.entries[i].max_ratio_deviation).collect();
            (l, median(&v))
        })
        .collect();
    let total_lemma1_violations = runs
        .iter()
        .flat_map(|r| &r.report.entries)
        .map(|e| e.lemma1_violations)
        .sum();
    let out = LinExpOutput {
        config: cfg.clone(),
        gamma: bounds[0].gamma,
        bounds,
        runs,
        median_max_deviation,
        total_lemma1_violations,
    };
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("linexp.json"), serde_json::to_string_pretty(&out)?)?;
    Ok(out)
}

// ---------------------------------------------------------------- figratio

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigRatioCell {
    pub c: usize,
    pub d: usize,
    pub projected: bool,
    pub failure_case: bool,
    pub runs: usize,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    /// `|mean_ratio - 1|`.
    pub deviation: f64,
    /// Runs that stopped on a non-finite value and are excluded from the mean.
    pub failed_runs: usize,
}

/// Mean ratio of the probed layer over the last epoch's steps, per run and
/// cell. Writes `figratio.csv` under `output_dir`.
pub fn cmd_figratio(cfg: &FigRatioConfig) -> Result<Vec<FigRatioCell>> {
    cfg.validate()?;
    let data = SyntheticDataset::generate(&DatasetSpec {
        classes: cfg.classes,
        channels: cfg.input_channels,
        size: cfg.input_size,
        train: cfg.train_samples,
        test: 1,
        noise: cfg.noise,
        max_shift: 1,
        flip: true,
        seed: cfg.seed,
    })?;
    let mut cells: Vec<(usize, usize, bool)> = Vec::new();
    for &c in &cfg.c_values {
        for &d in &cfg.d_values {
            cells.push((c, d, false));
        }
    }
    for &c in &cfg.failure_c {
        for &d in &cfg.failure_d {
            if !cells.iter().any(|&(a, b, _)| a == c && b == d) {
                cells.push((c, d, true));
            }
        }
    }
    let mut out = Vec::new();
    for &(c, d, failure_case) in &cells {
        for projected in [true, false] {
            let mut values = Vec::new();
            let mut failed = 0;
            for run in 0..cfg.runs {
                // projected and unprojected runs share initial weights and batch order
                let stream = ((c as u64) << 40) | ((d as u64) << 20) | run as u64;
                let root = Rng::new(cfg.seed).fork(stream);
                let spec = ProbeSpec {
                    c,
                    d,
                    input_channels: cfg.input_channels,
                    input_size: cfg.input_size,
                    hidden: cfg.hidden,
                    classes: cfg.classes,
                    projected,
                };
                let net = probe_network(&spec, &mut root.fork(1))?;
                let opts = TrainOptions {
                    run_id: format!("c{c}-d{d}-{}-r{run}", if projected { "proj" } else { "plain" }),
                    epochs: cfg.epochs,
                    batch_size: cfg.batch_size,
                    lr: cfg.lr,
                    momentum: cfg.momentum,
                    weight_decay: cfg.weight_decay,
                    projection_period: cfg.projection_period,
                    lr_decay: false,
                    ratio_every: 1,
                    ratio_from_epoch: cfg.epochs,
                    shuffle_seed: root.fork(2).next_u64(),
                    evaluate: false,
                };
                let result = train(net, &data, &opts)?;
                let ratios: Vec<f64> = result.ratios.iter().filter_map(|r| r.ratio).collect();
                if result.failure.is_some() || ratios.is_empty() {
                    failed += 1;
                    continue;
                }
                values.push(ratios.iter().sum::<f64>() / ratios.len() as f64);
            }
            let k = values.len().max(1) as f64;
            let mean = values.iter().sum::<f64>() / k;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
            let mean = if values.is_empty() { f64::NAN } else { mean };
            out.push(FigRatioCell {
                c,
                d,
                projected,
                failure_case,
                runs: values.len(),
                mean_ratio: mean,
                std_ratio: var.sqrt(),
                deviation: (mean - 1.0).abs(),
                failed_runs: failed,
            });
        }
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(cfg.output_dir.join("figratio.csv"))?));
    w.write_record(FIGRATIO_CSV_HEADER)?;
    for cell in &out {
        w.write_record([
            cell.c.to_string(),
            cell.d.to_string(),
            cell.projected.to_string(),
            cell.failure_case.to_string(),
            cell.runs.to_string(),
            fmt(cell.mean_ratio),
            fmt(cell.std_ratio),
            fmt(cell.deviation),
            cell.failed_runs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(out)
}
