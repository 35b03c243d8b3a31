//! Scene-level treatment and outcome generation.
//!
//! Defaults for the structural constants (`beta = 1`, `gamma = 2`, `tau = 1`,
//! `sigma_w = sigma_y = 0.1`) are desk-scale choices, not calibrated values;
//! every entry point lets them be overridden.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::confounder::{scene_confounders, ConfounderSpec};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    /// Treatment sensitivity to the confounder.
    pub beta: f64,
    /// Outcome slope on the confounder.
    pub gamma: f64,
    /// True average treatment effect.
    pub tau: f64,
    pub sigma_w: f64,
    pub sigma_y: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig { beta: 1.0, gamma: 2.0, tau: 1.0, sigma_w: 0.1, sigma_y: 0.1, seed: 0 }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("tau", self.tau)] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        for (name, v) in [("sigma_w", self.sigma_w), ("sigma_y", self.sigma_y)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be a finite value >= 0")));
            }
        }
        Ok(())
    }
}

/// One unit of analysis with both observables and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub raster_ref: String,
    pub u_true: f64,
    pub p_true: f64,
    pub t: u8,
    pub y: f64,
    /// Coordinate-like columns used only by balance diagnostics.
    pub covariates: Vec<f64>,
}

/// Logistic function, kept strictly inside `(0, 1)`.
pub fn logistic(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn assign_treatment<R: Rng + ?Sized>(u: f64, cfg: &DgpConfig, rng: &mut R) -> (f64, u8) {
    let eps: f64 = StandardNormal.sample(rng);
    let p = logistic(cfg.beta * u + cfg.sigma_w * eps);
    let t = u8::from(rng.random::<f64>() < p);
    (p, t)
}

pub fn generate_outcome<R: Rng + ?Sized>(u: f64, t: u8, cfg: &DgpConfig, rng: &mut R) -> f64 {
    let eps: f64 = StandardNormal.sample(rng);
    cfg.gamma * u + cfg.tau * f64::from(t) + cfg.sigma_y * eps
}

/// Draws treatment, outcome, and covariates for scene `scene_id` with
/// confounder `u`, using that scene's own substream.
pub fn draw_scene(scene_id: u64, u: f64, cfg: &DgpConfig) -> SceneRecord {
    let mut g = rng::stream(rng::derive_seed(cfg.seed, &[rng::tag("dgp")]), scene_id);
    let (p_true, t) = assign_treatment(u, cfg, &mut g);
    let y = generate_outcome(u, t, cfg, &mut g);
    let covariates = vec![g.random_range(-1.0..1.0), g.random_range(-1.0..1.0)];
    SceneRecord { scene_id, raster_ref: scene_id.to_string(), u_true: u, p_true, t, y, covariates }
}

/// Confounders for all scenes followed by per-scene treatment and outcome.
pub fn generate_dataset(rasters: &[Raster], conf_spec: &ConfounderSpec, cfg: &DgpConfig) -> Result<Vec<SceneRecord>> {
    cfg.validate()?;
    let u = scene_confounders(rasters, conf_spec)?;
    Ok(u.iter().enumerate().map(|(s, &u)| draw_scene(s as u64, u, cfg)).collect())
}
