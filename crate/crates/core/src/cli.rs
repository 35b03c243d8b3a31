//! Command-line front end: `simulate`, `train`, `estimate`, `salience`, `grid`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::dgp::generate_dataset;
use crate::error::{Error, Result};
use crate::estimators::{balance_diagnostics, diff_in_means, ipw_hajek, ipw_ht};
use crate::evaluation::run_grid_with_jobs;
use crate::manifest::{load_manifest, raster_location, write_manifest, ManifestRow};
use crate::propensity::{load_checkpoint, save_checkpoint, train, PropensityModel};
use crate::raster::{downsample, encode_raster, load_raster, synth_scene, Raster};
use crate::salience::{min_max_normalized, salience_map};

#[derive(Debug, Parser)]
#[command(name = "imconf", version, about = "Image-confounded causal inference toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed; replaces every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scenes, confounders, treatments and outcomes.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a propensity model to a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Difference-in-means and IPW estimates with balance diagnostics.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Model used when the manifest has no `pi_hat` column.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Input-gradient salience maps for every scene of a manifest.
    Salience {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Monte Carlo evaluation over kernel widths, resolutions and noise.
    Grid {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common }
            | Command::Train { common, .. }
            | Command::Estimate { common, .. }
            | Command::Salience { common, .. }
            | Command::Grid { common } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Train { .. } => "train",
            Command::Estimate { .. } => "estimate",
            Command::Salience { .. } => "salience",
            Command::Grid { .. } => "grid",
        }
    }
}

/// Output directory that is cleaned up unless [`OutDir::finish`] runs.
struct OutDir {
    root: PathBuf,
    created_root: bool,
    created: Vec<PathBuf>,
    finished: bool,
}

impl OutDir {
    fn open(root: &Path) -> Result<OutDir> {
        let created_root = !root.exists();
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(OutDir { root: root.to_path_buf(), created_root, created: Vec::new(), finished: false })
    }

    fn dir(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if !p.exists() {
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            self.created.push(p.clone());
        }
        Ok(p)
    }

    fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.root.join(rel);
        self.created.push(p.clone());
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<()> {
        let meta = format!(
            "command = {command}\nconfig_sha256 = {}\nseed = {}\nversion = {}\n",
            cfg.hash(),
            cfg.seed,
            env!("CARGO_PKG_VERSION")
        );
        self.write("run_meta.txt", meta.as_bytes())?;
        self.write("config.txt", cfg.canonical_text().as_bytes())?;
        self.finished = true;
        Ok(())
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        if self.finished {
            return;
        }
        if self.created_root {
            let _ = fs::remove_dir_all(&self.root);
            return;
        }
        for p in self.created.iter().rev() {
            if p.is_dir() {
                let _ = fs::remove_dir_all(p);
            } else {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn load_config(common: &Common, needs_tau: bool) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if common.jobs == Some(0) {
        return Err(Error::Config(vec!["--jobs must be at least 1".into()]));
    }
    cfg.validate(needs_tau)?;
    Ok(cfg)
}

fn jobs(common: &Common) -> usize {
    common.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn raster_name(scene_id: u64) -> String {
    format!("scene_{scene_id:06}.raster")
}

/// Loads every manifest raster at the model's resolution.
fn model_inputs(manifest: &Path, rows: &[ManifestRow], factor: f64) -> Result<Vec<Raster>> {
    if rows.is_empty() {
        return Err(Error::degenerate("manifest has no rows"));
    }
    rows.iter().map(|row| downsample(&load_raster(raster_location(manifest, row))?, factor)).collect()
}

fn simulate(common: &Common) -> Result<()> {
    let cfg = load_config(common, true)?;
    let mut out = OutDir::open(&common.out)?;
    out.dir("rasters")?;
    let params = cfg.synth_params();
    let scenes = (0..cfg.scene_count as u64).map(|i| synth_scene(&params, i)).collect::<Result<Vec<_>>>()?;
    let conf = cfg.confounder_spec()?;
    let dgp = cfg.dgp_config();
    let records = generate_dataset(&scenes, &conf, &dgp)?;
    let mut rows = Vec::with_capacity(records.len());
    for (rec, scene) in records.iter().zip(&scenes) {
        let rel = format!("rasters/{}", raster_name(rec.scene_id));
        out.write(&rel, &encode_raster(scene)?)?;
        rows.push(ManifestRow { raster_path: rel, ..ManifestRow::from(rec) });
    }
    let mut manifest = Vec::new();
    write_manifest(&rows, &mut manifest)?;
    out.write("manifest.csv", &manifest)?;
    out.write("confounder_filter.raster", &encode_raster(&conf.filter.to_raster())?)?;
    let truth = format!(
        "tau = {}\nbeta = {}\ngamma = {}\nsigma_w = {}\nsigma_y = {}\nnoise_sigma = {}\n\
         confounder_kernel_width = {}\nseed = {}\nscene_seed = {}\nconfounder_seed = {}\ndgp_seed = {}\n",
        dgp.tau,
        dgp.beta,
        dgp.gamma,
        dgp.sigma_w,
        dgp.sigma_y,
        conf.noise_sigma,
        conf.filter.width(),
        cfg.seed,
        params.seed,
        conf.seed,
        dgp.seed
    );
    out.write("groundtruth.txt", truth.as_bytes())?;
    out.finish("simulate", &cfg)
}

fn train_cmd(common: &Common, manifest: &Path) -> Result<()> {
    let cfg = load_config(common, false)?;
    let mut out = OutDir::open(&common.out)?;
    let mut rows = load_manifest(manifest)?;
    let rasters = model_inputs(manifest, &rows, cfg.resolution_factor)?;
    let t: Vec<u8> = rows.iter().map(|r| r.t).collect();
    let fit = train(&rasters, &t, &cfg.model, &cfg.train_config())?;
    let ckpt = out.root.join("model.ckpt");
    out.created.push(ckpt.clone());
    save_checkpoint(&fit.model, &ckpt)?;

    let mut trace = String::from("epoch,loss\n");
    for (i, l) in fit.loss_trace.iter().enumerate() {
        let _ = writeln!(trace, "{},{l}", i + 1);
    }
    let _ = writeln!(trace, "final,{}", fit.final_loss);
    out.write("loss_trace.csv", trace.as_bytes())?;

    let pi = fit.model.predict_batch(&rasters)?;
    for (row, p) in rows.iter_mut().zip(pi) {
        let abs = raster_location(manifest, row);
        row.raster_path = fs::canonicalize(&abs).map_err(|e| Error::io(&abs, e))?.display().to_string();
        row.pi_hat = Some(p);
    }
    let mut buf = Vec::new();
    write_manifest(&rows, &mut buf)?;
    out.write("manifest_pi.csv", &buf)?;
    out.finish("train", &cfg)
}

fn estimate_cmd(common: &Common, manifest: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(common, false)?;
    let mut out = OutDir::open(&common.out)?;
    let rows = load_manifest(manifest)?;
    if rows.is_empty() {
        return Err(Error::degenerate("manifest has no rows"));
    }
    let pi: Vec<f64> = match rows.iter().map(|r| r.pi_hat).collect::<Option<Vec<f64>>>() {
        Some(pi) => pi,
        None => match checkpoint {
            Some(path) => {
                let model = load_checkpoint(path)?;
                model.predict_batch(&model_inputs(manifest, &rows, cfg.resolution_factor)?)?
            }
            None => {
                return Err(Error::format(
                    "pi_hat",
                    "manifest lacks complete pi_hat values and no checkpoint was given",
                ))
            }
        },
    };
    let t: Vec<u8> = rows.iter().map(|r| r.t).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.y).collect();
    let mut text = String::from("estimator,estimate\n");
    let _ = writeln!(text, "dim,{}", diff_in_means(&t, &y)?);
    let _ = writeln!(text, "ht,{}", ipw_ht(&t, &y, &pi, cfg.clip)?);
    let _ = writeln!(text, "hajek,{}", ipw_hajek(&t, &y, &pi, cfg.clip)?);
    out.write("estimates.csv", text.as_bytes())?;

    let covs: Vec<Vec<f64>> = rows.iter().map(|r| r.covariates.to_vec()).collect();
    let bal = balance_diagnostics(&t, &covs, &pi, cfg.clip)?;
    let mut text = String::from("covariate,raw_diff,weighted_diff\n");
    for (j, (r, w)) in bal.raw_diff.iter().zip(&bal.weighted_diff).enumerate() {
        let _ = writeln!(text, "cov{},{r},{w}", j + 1);
    }
    out.write("balance.csv", text.as_bytes())?;
    out.finish("estimate", &cfg)
}

fn salience_cmd(common: &Common, manifest: &Path, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(common, false)?;
    let mut out = OutDir::open(&common.out)?;
    out.dir("salience")?;
    let model: PropensityModel = load_checkpoint(checkpoint)?;
    let rows = load_manifest(manifest)?;
    let rasters = model_inputs(manifest, &rows, cfg.resolution_factor)?;
    for (row, r) in rows.iter().zip(&rasters) {
        let map = salience_map(&model, r)?;
        let stem = format!("salience/scene_{:06}", row.scene_id);
        out.write(format!("{stem}.raster"), &encode_raster(&map)?)?;
        out.write(format!("{stem}_norm.raster"), &encode_raster(&min_max_normalized(&map)?)?)?;
        if cfg.salience_csv {
            let mut text = String::from("h,w,value\n");
            for h in 0..map.height() {
                for w in 0..map.width() {
                    let _ = writeln!(text, "{h},{w},{}", map.get(h, w, 0));
                }
            }
            out.write(format!("{stem}.csv"), text.as_bytes())?;
        }
    }
    out.finish("salience", &cfg)
}

fn grid_cmd(common: &Common) -> Result<()> {
    let cfg = load_config(common, true)?;
    let mut out = OutDir::open(&common.out)?;
    let report = run_grid_with_jobs(&cfg.grid_spec(), jobs(common))?;
    for (cell, n) in &report.excluded {
        eprintln!(
            "width {} factor {} noise {}: excluded {n} replicates",
            cell.kernel_width, cell.resolution_factor, cell.noise_sigma
        );
    }
    out.write("eval_report.csv", report.to_csv().as_bytes())?;
    out.write("skipped_cells.csv", report.skipped_csv().as_bytes())?;
    out.write("eval_report.dat", report.to_gnuplot().as_bytes())?;
    out.finish("grid", &cfg)
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    match &cli.command {
        Command::Simulate { .. } => simulate(common),
        Command::Train { manifest, .. } => train_cmd(common, manifest),
        Command::Estimate { manifest, checkpoint, .. } => estimate_cmd(common, manifest, checkpoint.as_deref()),
        Command::Salience { manifest, checkpoint, .. } => salience_cmd(common, manifest, checkpoint),
        Command::Grid { .. } => grid_cmd(common),
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("imconf {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
