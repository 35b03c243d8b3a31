//! Monte Carlo evaluation over estimating kernel width, resolution factor,
//! and confounder noise.
//!
//! Each replicate draws a fresh set of scenes at full resolution, derives
//! confounders with the true filter, draws treatments and outcomes, then for
//! every (width, factor) cell downsamples the scenes, fits a single-layer
//! propensity model, and records four estimates. Scenes, confounders, and
//! outcomes of a replicate are shared by all cells with the same noise
//! level, so cell-to-cell differences are paired comparisons.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::confounder::{ConfounderSpec, KernelFilter};
use crate::dgp::{generate_dataset, DgpConfig};
use crate::error::{Error, Result};
use crate::estimators::{diff_in_means, ipw_hajek, ipw_ht, Clip};
use crate::propensity::{train, ConvNetSpec, TrainConfig};
use crate::raster::{downsample, scaled_len, synth_scene, Raster, SynthParams};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Estimator {
    DiffInMeans,
    HorvitzThompson,
    Hajek,
    /// Hajek weighting with the true propensities.
    OracleHajek,
}

impl Estimator {
    pub const ALL: [Estimator; 4] =
        [Estimator::DiffInMeans, Estimator::HorvitzThompson, Estimator::Hajek, Estimator::OracleHajek];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::DiffInMeans => "dim",
            Estimator::HorvitzThompson => "ht",
            Estimator::Hajek => "hajek",
            Estimator::OracleHajek => "oracle_hajek",
        }
    }
}

/// Monte Carlo summary of one estimator against the truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub abs_bias: f64,
    pub rmse: f64,
    pub rel_abs_bias: f64,
    pub rel_rmse: f64,
    pub mc_se: f64,
}

fn bias_rmse(estimates: &[f64], tau: f64) -> (f64, f64) {
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let mse = estimates.iter().map(|e| (e - tau) * (e - tau)).sum::<f64>() / n;
    ((mean - tau).abs(), mse.sqrt())
}

/// Absolute bias, RMSE, their ratios to `baseline`'s, and the Monte Carlo
/// standard error `sd / sqrt(R)` of the mean estimate.
pub fn metrics(estimates: &[f64], tau: f64, baseline: &[f64]) -> Result<Metrics> {
    if estimates.is_empty() || baseline.is_empty() {
        return Err(Error::invalid("metrics need at least one estimate and one baseline estimate"));
    }
    if estimates.iter().chain(baseline).any(|e| !e.is_finite()) {
        return Err(Error::invalid("estimates must be finite"));
    }
    let (abs_bias, rmse) = bias_rmse(estimates, tau);
    let (base_bias, base_rmse) = bias_rmse(baseline, tau);
    if base_bias == 0.0 || base_rmse == 0.0 {
        return Err(Error::degenerate("baseline estimator has zero bias or RMSE"));
    }
    let r = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / r;
    let mc_se = if estimates.len() > 1 {
        (estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (r - 1.0)).sqrt() / r.sqrt()
    } else {
        0.0
    };
    Ok(Metrics { abs_bias, rmse, rel_abs_bias: abs_bias / base_bias, rel_rmse: rmse / base_rmse, mc_se })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Scene generator; its seed is replaced by one derived per replicate.
    pub scene: SynthParams,
    pub true_filter: KernelFilter,
    pub est_kernel_widths: Vec<usize>,
    /// Filters in the estimating convolution layer.
    pub filter_count: usize,
    pub resolution_factors: Vec<f64>,
    pub noise_sigmas: Vec<f64>,
    pub replicates: usize,
    pub scenes_per_replicate: usize,
    pub dgp: DgpConfig,
    pub train: TrainConfig,
    pub clip: Clip,
    pub master_seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            scene: SynthParams { height: 64, width: 64, ..SynthParams::default() },
            true_filter: KernelFilter::diagonal(9, 1).expect("odd width"),
            est_kernel_widths: vec![5, 7, 9, 11, 13],
            filter_count: 4,
            resolution_factors: vec![1.0, 0.5, 0.25, 0.12],
            noise_sigmas: vec![0.0],
            replicates: 200,
            scenes_per_replicate: 500,
            dgp: DgpConfig::default(),
            train: default_grid_training(),
            clip: Clip::default(),
            master_seed: 0,
        }
    }
}

/// Optimizer settings used by the grid unless overridden.
pub fn default_grid_training() -> TrainConfig {
    TrainConfig {
        optimizer: crate::propensity::Optimizer::AdamNesterov,
        base_lr: 0.05,
        lr_schedule: crate::propensity::LrSchedule::Cosine,
        epochs: 10,
        batch_size: 50,
        augment_flips: false,
        seed: 0,
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.est_kernel_widths.is_empty() {
            problems.push("est_kernel_widths is empty".to_string());
        }
        if let Some(w) = self.est_kernel_widths.iter().find(|&&w| w == 0 || w % 2 == 0) {
            problems.push(format!("estimating kernel width {w} is not odd"));
        }
        if self.filter_count == 0 {
            problems.push("filter_count must be positive".to_string());
        }
        if self.resolution_factors.is_empty() {
            problems.push("resolution_factors is empty".to_string());
        }
        if let Some(f) = self.resolution_factors.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            problems.push(format!("resolution factor {f} outside (0, 1]"));
        }
        if self.noise_sigmas.is_empty() {
            problems.push("noise_sigmas is empty".to_string());
        }
        if let Some(s) = self.noise_sigmas.iter().find(|&&s| !(s >= 0.0) || !s.is_finite()) {
            problems.push(format!("noise sigma {s} is negative or not finite"));
        }
        if self.replicates == 0 {
            problems.push("replicates must be positive".to_string());
        }
        if self.scenes_per_replicate < 2 {
            problems.push("scenes_per_replicate must be at least 2".to_string());
        }
        if self.true_filter.channels() != self.scene.channels {
            problems.push("true filter channels differ from scene channels".to_string());
        }
        if self.true_filter.width() > self.scene.height.min(self.scene.width) {
            problems.push("true filter does not fit the scenes".to_string());
        }
        for (what, r) in [
            ("scene", self.scene.validate()),
            ("dgp", self.dgp.validate()),
            ("train", self.train.validate()),
            ("clip", self.clip.validate()),
        ] {
            if let Err(e) = r {
                problems.push(format!("{what}: {e}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// A (width, factor, noise) combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub kernel_width: usize,
    pub resolution_factor: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub cell: Cell,
    pub estimator: Estimator,
    pub metrics: Metrics,
    pub n_reps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedCell {
    pub cell: Cell,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub skipped: Vec<SkippedCell>,
    /// Replicates dropped per cell because training failed.
    pub excluded: Vec<(Cell, usize)>,
}

pub const REPORT_HEADER: &str =
    "kernel_width,resolution_factor,noise_sigma,estimator,abs_bias,rmse,rel_abs_bias,rel_rmse,n_reps,mc_se";

impl EvalReport {
    pub fn row(&self, width: usize, factor: f64, noise: f64, estimator: Estimator) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.cell.kernel_width == width
                && r.cell.resolution_factor == factor
                && r.cell.noise_sigma == noise
                && r.estimator == estimator
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.cell.kernel_width,
                r.cell.resolution_factor,
                r.cell.noise_sigma,
                r.estimator.name(),
                m.abs_bias,
                m.rmse,
                m.rel_abs_bias,
                m.rel_rmse,
                r.n_reps,
                m.mc_se
            );
        }
        out
    }

    pub fn skipped_csv(&self) -> String {
        let mut out = String::from("kernel_width,resolution_factor,noise_sigma,reason\n");
        for s in &self.skipped {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                s.cell.kernel_width, s.cell.resolution_factor, s.cell.noise_sigma, s.reason
            );
        }
        for (cell, n) in &self.excluded {
            let _ = writeln!(
                out,
                "{},{},{},excluded {n} replicates after training failure",
                cell.kernel_width, cell.resolution_factor, cell.noise_sigma
            );
        }
        out
    }

    /// Whitespace-separated blocks, one per (estimator, noise, factor),
    /// with kernel width against relative bias and RMSE.
    pub fn to_gnuplot(&self) -> String {
        let mut keys: Vec<(Estimator, u64, u64)> = self
            .rows
            .iter()
            .map(|r| (r.estimator, r.cell.noise_sigma.to_bits(), r.cell.resolution_factor.to_bits()))
            .collect();
        keys.dedup();
        keys.sort();
        keys.dedup();
        let mut out = String::new();
        for (est, noise, factor) in keys {
            let (noise, factor) = (f64::from_bits(noise), f64::from_bits(factor));
            let _ = writeln!(out, "# estimator={} noise_sigma={noise} resolution_factor={factor}", est.name());
            let _ = writeln!(out, "# kernel_width rel_abs_bias rel_rmse mc_se");
            for r in self
                .rows
                .iter()
                .filter(|r| r.estimator == est && r.cell.noise_sigma == noise && r.cell.resolution_factor == factor)
            {
                let m = &r.metrics;
                let _ = writeln!(out, "{} {} {} {}", r.cell.kernel_width, m.rel_abs_bias, m.rel_rmse, m.mc_se);
            }
            out.push_str("\n\n");
        }
        out
    }
}

/// Estimates of one replicate in one cell, or why none exist.
type CellOutcome = std::result::Result<[f64; 4], String>;

struct Replicate {
    /// Indexed like the runnable cells of the noise level.
    outcomes: Vec<CellOutcome>,
}

impl GridSpec {
    /// Estimating architecture for kernel width `k`.
    pub fn model_spec(&self, k: usize) -> ConvNetSpec {
        let mut spec = ConvNetSpec::single_layer(k);
        spec.layers[0].filter_count = self.filter_count;
        spec
    }
}

fn runnable(spec: &GridSpec) -> (Vec<(usize, f64)>, Vec<(usize, f64, String)>) {
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for &factor in &spec.resolution_factors {
        let shape = (scaled_len(spec.scene.height, factor), scaled_len(spec.scene.width, factor), spec.scene.channels);
        for &width in &spec.est_kernel_widths {
            match spec.model_spec(width).validate(shape) {
                Ok(()) => ok.push((width, factor)),
                Err(e) => skipped.push((width, factor, e.to_string())),
            }
        }
    }
    (ok, skipped)
}

fn run_replicate(spec: &GridSpec, noise_index: usize, replicate: usize, cells: &[(usize, f64)]) -> Result<Replicate> {
    let seed = spec.master_seed;
    let r = replicate as u64;
    let scene_params = SynthParams { seed: rng::derive_seed(seed, &[rng::tag("scenes"), r]), ..spec.scene.clone() };
    let scenes = (0..spec.scenes_per_replicate as u64)
        .map(|i| synth_scene(&scene_params, i))
        .collect::<Result<Vec<Raster>>>()?;
    let conf = ConfounderSpec {
        filter: spec.true_filter.clone(),
        noise_sigma: spec.noise_sigmas[noise_index],
        seed: rng::derive_seed(seed, &[rng::tag("confounder"), noise_index as u64, r]),
    };
    let dgp = DgpConfig { seed: rng::derive_seed(seed, &[rng::tag("dgp"), r]), ..spec.dgp.clone() };
    let records = generate_dataset(&scenes, &conf, &dgp)?;
    let t: Vec<u8> = records.iter().map(|r| r.t).collect();
    let y: Vec<f64> = records.iter().map(|r| r.y).collect();
    let p_true: Vec<f64> = records.iter().map(|r| r.p_true).collect();

    let dim = diff_in_means(&t, &y);
    let oracle = ipw_hajek(&t, &y, &p_true, spec.clip);
    let mut outcomes = Vec::with_capacity(cells.len());
    let mut resampled: Option<(f64, Vec<Raster>)> = None;
    for (ci, &(width, factor)) in cells.iter().enumerate() {
        if resampled.as_ref().map(|(f, _)| *f) != Some(factor) {
            let rs = scenes.iter().map(|s| downsample(s, factor)).collect::<Result<Vec<_>>>()?;
            resampled = Some((factor, rs));
        }
        let rasters = &resampled.as_ref().expect("just filled").1;
        let cfg = TrainConfig {
            seed: rng::derive_seed(seed, &[rng::tag("train"), noise_index as u64, ci as u64, r]),
            ..spec.train.clone()
        };
        let outcome = match (&dim, &oracle) {
            (Ok(dim), Ok(oracle)) => match train(rasters, &t, &spec.model_spec(width), &cfg) {
                Ok(fit) => {
                    let pi = fit.model.predict_batch(rasters)?;
                    let ht = ipw_ht(&t, &y, &pi, spec.clip)?;
                    match ipw_hajek(&t, &y, &pi, spec.clip) {
                        Ok(hajek) => Ok([*dim, ht, hajek, *oracle]),
                        Err(e) => Err(e.to_string()),
                    }
                }
                Err(e @ (Error::Divergence { .. } | Error::Degenerate(_))) => Err(e.to_string()),
                Err(e) => return Err(e),
            },
            (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
        };
        outcomes.push(outcome);
    }
    Ok(Replicate { outcomes })
}

/// Runs the full grid on a pool of `jobs` worker threads. The report does
/// not depend on `jobs`.
pub fn run_grid_with_jobs(spec: &GridSpec, jobs: usize) -> Result<EvalReport> {
    spec.validate()?;
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| Error::invalid(e.to_string()))?;
    let (cells, skipped_pairs) = runnable(spec);
    let mut report = EvalReport::default();
    for (ni, &noise) in spec.noise_sigmas.iter().enumerate() {
        let reps: Vec<Replicate> = pool.install(|| {
            (0..spec.replicates).into_par_iter().map(|r| run_replicate(spec, ni, r, &cells)).collect::<Result<Vec<_>>>()
        })?;
        for (width, factor, reason) in &skipped_pairs {
            report.skipped.push(SkippedCell {
                cell: Cell { kernel_width: *width, resolution_factor: *factor, noise_sigma: noise },
                reason: reason.clone(),
            });
        }
        for (ci, &(width, factor)) in cells.iter().enumerate() {
            let cell = Cell { kernel_width: width, resolution_factor: factor, noise_sigma: noise };
            let ok: Vec<[f64; 4]> = reps.iter().filter_map(|r| r.outcomes[ci].as_ref().ok().copied()).collect();
            let failed = reps.len() - ok.len();
            if failed > 0 {
                report.excluded.push((cell, failed));
            }
            if ok.is_empty() {
                report.skipped.push(SkippedCell { cell, reason: "every replicate failed".into() });
                continue;
            }
            let column = |k: usize| ok.iter().map(|e| e[k]).collect::<Vec<f64>>();
            let baseline = column(0);
            for (k, est) in Estimator::ALL.iter().enumerate() {
                let metrics = metrics(&column(k), spec.dgp.tau, &baseline)?;
                report.rows.push(ReportRow { cell, estimator: *est, metrics, n_reps: ok.len() });
            }
        }
    }
    Ok(report)
}

/// [`run_grid_with_jobs`] using every available core.
pub fn run_grid(spec: &GridSpec) -> Result<EvalReport> {
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    run_grid_with_jobs(spec, jobs)
}
