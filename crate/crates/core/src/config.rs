//! Flat `key = value` run configuration shared by every subcommand.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown or repeated keys are errors, and every problem in a file is
//! reported at once.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::confounder::{ConfounderSpec, KernelFilter};
use crate::dgp::DgpConfig;
use crate::error::{Error, Result};
use crate::estimators::Clip;
use crate::evaluation::{default_grid_training, GridSpec};
use crate::propensity::{ConvLayerSpec, ConvNetSpec, TrainConfig};
use crate::raster::SynthParams;
use crate::rng;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed; component seeds derive from it unless given"),
    ("scene.height", "scene height in pixels"),
    ("scene.width", "scene width in pixels"),
    ("scene.channels", "scene channels"),
    ("scene.correlation_length", "smoothing length of synthetic scenes, pixels"),
    ("scene.amplitude", "pixel standard deviation of synthetic scenes"),
    ("scene.count", "scenes per dataset or grid replicate"),
    ("scene.seed", "scene generator seed"),
    ("confounder.kernel_width", "width of the diagonal generating filter"),
    ("confounder.noise_sigma", "standard deviation of per-pixel noise added before pooling"),
    ("confounder.seed", "confounder noise seed"),
    ("dgp.beta", "treatment slope on the confounder"),
    ("dgp.gamma", "outcome slope on the confounder"),
    ("dgp.tau", "true treatment effect"),
    ("dgp.sigma_w", "treatment noise standard deviation"),
    ("dgp.sigma_y", "outcome noise standard deviation"),
    ("dgp.seed", "treatment and outcome seed"),
    ("model.layers", "comma-separated layers, each <filters>x<width>[:max2][:linear]"),
    ("model.batch_norm", "batch normalization after each convolution"),
    ("model.projection_dim", "1x1 projection channels, 0 to skip"),
    ("model.head_norm", "normalize pooled features before the head"),
    ("model.resolution_factor", "downsampling applied to rasters before the model sees them"),
    ("train.optimizer", "sgd or adam_nesterov"),
    ("train.base_lr", "base learning rate"),
    ("train.lr_schedule", "constant or cosine"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "mini-batch size"),
    ("train.augment_flips", "random horizontal and vertical flips"),
    ("train.seed", "initialization, shuffling and augmentation seed"),
    ("estimate.clip_lo", "lower propensity clip"),
    ("estimate.clip_hi", "upper propensity clip"),
    ("salience.csv", "also write (h,w,value) CSV files"),
    ("grid.kernel_widths", "estimating kernel widths"),
    ("grid.resolution_factors", "estimation-side resolution factors"),
    ("grid.noise_sigmas", "confounder noise levels"),
    ("grid.replicates", "Monte Carlo replicates per cell"),
    ("grid.filter_count", "filters in the estimating convolution"),
];

/// Parsed configuration. Component seeds left unset derive from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SynthParams,
    pub scene_count: usize,
    pub confounder_width: usize,
    pub noise_sigma: f64,
    pub dgp: DgpConfig,
    /// Whether `dgp.tau` was given explicitly.
    pub tau_given: bool,
    pub model: ConvNetSpec,
    pub resolution_factor: f64,
    pub train: TrainConfig,
    pub clip: Clip,
    pub salience_csv: bool,
    pub grid_kernel_widths: Vec<usize>,
    pub grid_resolution_factors: Vec<f64>,
    pub grid_noise_sigmas: Vec<f64>,
    pub grid_replicates: usize,
    pub grid_filter_count: usize,
    component_seeds: BTreeMap<&'static str, u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grid = GridSpec::default();
        RunConfig {
            seed: 0,
            scene: grid.scene.clone(),
            scene_count: grid.scenes_per_replicate,
            confounder_width: grid.true_filter.width(),
            noise_sigma: 0.0,
            dgp: grid.dgp.clone(),
            tau_given: false,
            model: grid.model_spec(grid.true_filter.width()),
            resolution_factor: 1.0,
            train: default_grid_training(),
            clip: Clip::default(),
            salience_csv: false,
            grid_kernel_widths: grid.est_kernel_widths.clone(),
            grid_resolution_factors: grid.resolution_factors.clone(),
            grid_noise_sigmas: grid.noise_sigmas.clone(),
            grid_replicates: grid.replicates,
            grid_filter_count: grid.filter_count,
            component_seeds: BTreeMap::new(),
        }
    }
}

const SEED_KEYS: [&str; 4] = ["scene.seed", "confounder.seed", "dgp.seed", "train.seed"];

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got `{value}`")),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String> {
    value.split(',').map(|item| parse_value(key, item.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut problems = Vec::new();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = value`", lineno + 1));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _)| *k == key) {
                problems.push(format!("line {}: unknown key `{key}`", lineno + 1));
                continue;
            }
            if let Some(first) = seen.insert(key.to_string(), lineno + 1) {
                problems.push(format!("line {}: `{key}` already set on line {first}", lineno + 1));
                continue;
            }
            if let Err(e) = cfg.set(key, value) {
                problems.push(format!("line {}: {e}", lineno + 1));
            }
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "scene.height" => self.scene.height = parse_value(key, v)?,
            "scene.width" => self.scene.width = parse_value(key, v)?,
            "scene.channels" => self.scene.channels = parse_value(key, v)?,
            "scene.correlation_length" => self.scene.correlation_length = parse_value(key, v)?,
            "scene.amplitude" => self.scene.amplitude = parse_value(key, v)?,
            "scene.count" => self.scene_count = parse_value(key, v)?,
            "confounder.kernel_width" => self.confounder_width = parse_value(key, v)?,
            "confounder.noise_sigma" => self.noise_sigma = parse_value(key, v)?,
            "dgp.beta" => self.dgp.beta = parse_value(key, v)?,
            "dgp.gamma" => self.dgp.gamma = parse_value(key, v)?,
            "dgp.tau" => {
                self.dgp.tau = parse_value(key, v)?;
                self.tau_given = true;
            }
            "dgp.sigma_w" => self.dgp.sigma_w = parse_value(key, v)?,
            "dgp.sigma_y" => self.dgp.sigma_y = parse_value(key, v)?,
            "model.layers" => {
                self.model.layers = v
                    .split(',')
                    .map(|l| l.parse::<ConvLayerSpec>().map_err(|e| format!("{key}: {e}")))
                    .collect::<std::result::Result<_, _>>()?
            }
            "model.batch_norm" => self.model.batch_norm = parse_bool(key, v)?,
            "model.projection_dim" => self.model.projection_dim = parse_value(key, v)?,
            "model.head_norm" => self.model.head_norm = parse_bool(key, v)?,
            "model.resolution_factor" => self.resolution_factor = parse_value(key, v)?,
            "train.optimizer" => self.train.optimizer = v.parse().map_err(|e| format!("{key}: {e}"))?,
            "train.base_lr" => self.train.base_lr = parse_value(key, v)?,
            "train.lr_schedule" => self.train.lr_schedule = v.parse().map_err(|e| format!("{key}: {e}"))?,
            "train.epochs" => self.train.epochs = parse_value(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, v)?,
            "train.augment_flips" => self.train.augment_flips = parse_bool(key, v)?,
            "estimate.clip_lo" => self.clip.lo = parse_value(key, v)?,
            "estimate.clip_hi" => self.clip.hi = parse_value(key, v)?,
            "salience.csv" => self.salience_csv = parse_bool(key, v)?,
            "grid.kernel_widths" => self.grid_kernel_widths = parse_list(key, v)?,
            "grid.resolution_factors" => self.grid_resolution_factors = parse_list(key, v)?,
            "grid.noise_sigmas" => self.grid_noise_sigmas = parse_list(key, v)?,
            "grid.replicates" => self.grid_replicates = parse_value(key, v)?,
            "grid.filter_count" => self.grid_filter_count = parse_value(key, v)?,
            seed_key if SEED_KEYS.contains(&seed_key) => {
                let name = SEED_KEYS.iter().find(|k| **k == seed_key).expect("listed");
                self.component_seeds.insert(name, parse_value(key, v)?);
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Replaces the master seed and drops explicit component seeds, so every
    /// component seed derives from `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.component_seeds.clear();
    }

    /// Seed for a component key such as `dgp.seed`.
    pub fn component_seed(&self, key: &str) -> u64 {
        match self.component_seeds.get(key) {
            Some(&s) => s,
            None => rng::derive_seed(self.seed, &[rng::tag(key)]),
        }
    }

    /// Checks every invariant, listing all failures. `needs_tau` makes
    /// `dgp.tau` mandatory.
    pub fn validate(&self, needs_tau: bool) -> Result<()> {
        let mut problems = Vec::new();
        if needs_tau && !self.tau_given {
            problems.push("missing required key `dgp.tau`".to_string());
        }
        let mut check = |what: &str, r: Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{what}: {e}"));
            }
        };
        check("scene", self.scene.validate());
        check("confounder", self.confounder_spec().and_then(|c| c.validate()));
        check("dgp", self.dgp.validate());
        check("train", self.train.validate());
        check("estimate", self.clip.validate());
        check("model", self.model.validate(self.model_input_shape()));
        if self.scene_count < 2 {
            problems.push("scene.count must be at least 2".to_string());
        }
        if !(self.resolution_factor > 0.0 && self.resolution_factor <= 1.0) {
            problems.push("model.resolution_factor must lie in (0, 1]".to_string());
        }
        if self.confounder_width > self.scene.height.min(self.scene.width) {
            problems.push("confounder.kernel_width exceeds the scene size".to_string());
        }
        if let Err(Error::Config(grid_problems)) = self.grid_spec().validate() {
            problems.extend(grid_problems.into_iter().map(|p| format!("grid: {p}")));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Shape of rasters after `model.resolution_factor` is applied.
    pub fn model_input_shape(&self) -> (usize, usize, usize) {
        (
            crate::raster::scaled_len(self.scene.height, self.resolution_factor),
            crate::raster::scaled_len(self.scene.width, self.resolution_factor),
            self.scene.channels,
        )
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams { seed: self.component_seed("scene.seed"), ..self.scene.clone() }
    }

    pub fn confounder_spec(&self) -> Result<ConfounderSpec> {
        Ok(ConfounderSpec {
            filter: KernelFilter::diagonal(self.confounder_width, self.scene.channels)?,
            noise_sigma: self.noise_sigma,
            seed: self.component_seed("confounder.seed"),
        })
    }

    pub fn dgp_config(&self) -> DgpConfig {
        DgpConfig { seed: self.component_seed("dgp.seed"), ..self.dgp.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.component_seed("train.seed"), ..self.train.clone() }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            scene: self.scene.clone(),
            true_filter: KernelFilter::diagonal(self.confounder_width.max(1) | 1, self.scene.channels.max(1))
                .expect("odd positive width"),
            est_kernel_widths: self.grid_kernel_widths.clone(),
            filter_count: self.grid_filter_count,
            resolution_factors: self.grid_resolution_factors.clone(),
            noise_sigmas: self.grid_noise_sigmas.clone(),
            replicates: self.grid_replicates,
            scenes_per_replicate: self.scene_count,
            dgp: self.dgp.clone(),
            train: self.train.clone(),
            clip: self.clip,
            master_seed: self.seed,
        }
    }

    /// Canonical text of the effective configuration: every key in table
    /// order with resolved seeds.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let value = match *key {
                "seed" => self.seed.to_string(),
                "scene.height" => self.scene.height.to_string(),
                "scene.width" => self.scene.width.to_string(),
                "scene.channels" => self.scene.channels.to_string(),
                "scene.correlation_length" => self.scene.correlation_length.to_string(),
                "scene.amplitude" => self.scene.amplitude.to_string(),
                "scene.count" => self.scene_count.to_string(),
                "confounder.kernel_width" => self.confounder_width.to_string(),
                "confounder.noise_sigma" => self.noise_sigma.to_string(),
                "dgp.beta" => self.dgp.beta.to_string(),
                "dgp.gamma" => self.dgp.gamma.to_string(),
                "dgp.tau" => self.dgp.tau.to_string(),
                "dgp.sigma_w" => self.dgp.sigma_w.to_string(),
                "dgp.sigma_y" => self.dgp.sigma_y.to_string(),
                "model.layers" => join(&self.model.layers),
                "model.batch_norm" => self.model.batch_norm.to_string(),
                "model.projection_dim" => self.model.projection_dim.to_string(),
                "model.head_norm" => self.model.head_norm.to_string(),
                "model.resolution_factor" => self.resolution_factor.to_string(),
                "train.optimizer" => self.train.optimizer.to_string(),
                "train.base_lr" => self.train.base_lr.to_string(),
                "train.lr_schedule" => self.train.lr_schedule.to_string(),
                "train.epochs" => self.train.epochs.to_string(),
                "train.batch_size" => self.train.batch_size.to_string(),
                "train.augment_flips" => self.train.augment_flips.to_string(),
                "estimate.clip_lo" => self.clip.lo.to_string(),
                "estimate.clip_hi" => self.clip.hi.to_string(),
                "salience.csv" => self.salience_csv.to_string(),
                "grid.kernel_widths" => join(&self.grid_kernel_widths),
                "grid.resolution_factors" => join(&self.grid_resolution_factors),
                "grid.noise_sigmas" => join(&self.grid_noise_sigmas),
                "grid.replicates" => self.grid_replicates.to_string(),
                "grid.filter_count" => self.grid_filter_count.to_string(),
                seed_key => self.component_seed(seed_key).to_string(),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Hex SHA-256 of [`RunConfig::canonical_text`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_text().as_bytes()).iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problems(text: &str) -> Vec<String> {
        match RunConfig::parse(text) {
            Err(Error::Config(p)) => p,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn parses_values_and_comments() {
        let cfg = RunConfig::parse(
            "# sizes\nscene.height = 40\nscene.width=24 # trailing\n\ndgp.tau = 2.5\n\
             model.layers = 4x5:linear, 2x3:max2\ngrid.resolution_factors = 1, 0.5\n",
        )
        .unwrap();
        assert_eq!((cfg.scene.height, cfg.scene.width), (40, 24));
        assert_eq!(cfg.dgp.tau, 2.5);
        assert!(cfg.tau_given);
        assert_eq!(cfg.model.layers.len(), 2);
        assert_eq!(cfg.grid_resolution_factors, vec![1.0, 0.5]);
    }

    #[test]
    fn every_problem_is_reported() {
        let p = problems("bogus = 1\nscene.height = -3\nno equals sign\nseed = 1\nseed = 2\n");
        assert_eq!(p.len(), 4, "{p:?}");
        assert!(p[0].contains("unknown key `bogus`"));
        assert!(p[1].contains("scene.height"));
        assert!(p[3].contains("already set"));
    }

    #[test]
    fn missing_tau_is_named() {
        let cfg = RunConfig::parse("scene.count = 10\n").unwrap();
        assert!(cfg.validate(false).is_ok());
        match cfg.validate(true) {
            Err(Error::Config(p)) => assert!(p.iter().any(|m| m.contains("dgp.tau"))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invariant_failures_are_collected() {
        let cfg =
            RunConfig::parse("dgp.tau = 1\nconfounder.kernel_width = 4\ntrain.epochs = 0\nestimate.clip_lo = 0.7\n")
                .unwrap();
        match cfg.validate(true) {
            Err(Error::Config(p)) => assert!(p.len() >= 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seeds_derive_from_master_unless_given() {
        let a = RunConfig::parse("seed = 5\n").unwrap();
        let b = RunConfig::parse("seed = 6\n").unwrap();
        assert_ne!(a.component_seed("dgp.seed"), b.component_seed("dgp.seed"));
        assert_ne!(a.component_seed("dgp.seed"), a.component_seed("scene.seed"));
        let mut c = RunConfig::parse("seed = 5\ndgp.seed = 77\n").unwrap();
        assert_eq!(c.dgp_config().seed, 77);
        c.override_seed(5);
        assert_eq!(c.dgp_config().seed, a.dgp_config().seed);
    }

    #[test]
    fn canonical_text_reparses_to_same_config() {
        let cfg = RunConfig::parse("seed = 3\ndgp.tau = 0.25\nmodel.layers = 3x5\n").unwrap();
        let mut again = RunConfig::parse(&cfg.canonical_text()).unwrap();
        assert_eq!(again.canonical_text(), cfg.canonical_text());
        assert_eq!(again.hash(), cfg.hash());
        again.override_seed(4);
        assert_ne!(again.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }
}
