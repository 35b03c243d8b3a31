use rand_distr::{Distribution, StandardNormal};

use super::Raster;
use crate::error::{Error, Result};
use crate::rng;

/// Parameters of the synthetic scene generator.
///
/// Scenes are white noise smoothed by a separable Gaussian whose standard
/// deviation is `correlation_length` pixels, rescaled so every pixel has
/// marginal standard deviation `amplitude`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub correlation_length: f64,
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { height: 32, width: 32, channels: 1, correlation_length: 2.0, amplitude: 1.0, seed: 0 }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::invalid("synthetic scene dimensions must be positive"));
        }
        if !(self.correlation_length >= 1.0) || !self.correlation_length.is_finite() {
            return Err(Error::invalid("correlation_length must be >= 1"));
        }
        if !(self.amplitude > 0.0) || !self.amplitude.is_finite() {
            return Err(Error::invalid("amplitude must be > 0"));
        }
        Ok(())
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Generates scene `index` of the synthetic corpus described by `params`.
pub fn synth_scene(params: &SynthParams, index: u64) -> Result<Raster> {
    params.validate()?;
    let (h, w, c) = (params.height, params.width, params.channels);
    let taps = gaussian_taps(params.correlation_length);
    let r = taps.len() / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    // smoothed unit-variance noise has variance (sum of squared taps)^2
    let scale = params.amplitude / taps.iter().map(|t| t * t).sum::<f64>();

    let mut g = rng::stream(rng::derive_seed(params.seed, &[rng::tag("synth")]), index);
    let mut planes = Vec::with_capacity(c);
    for _ in 0..c {
        let noise: Vec<f64> = (0..ph * pw).map(|_| StandardNormal.sample(&mut g)).collect();
        // horizontal pass: ph x w
        let mut tmp = vec![0.0; ph * w];
        for i in 0..ph {
            let row = &noise[i * pw..(i + 1) * pw];
            for j in 0..w {
                tmp[i * w + j] = taps.iter().zip(&row[j..]).map(|(t, v)| t * v).sum();
            }
        }
        // vertical pass: h x w
        let mut plane = vec![0.0; h * w];
        for (k, t) in taps.iter().enumerate() {
            for i in 0..h {
                let src = &tmp[(i + k) * w..(i + k + 1) * w];
                for (dst, v) in plane[i * w..(i + 1) * w].iter_mut().zip(src) {
                    *dst += t * v;
                }
            }
        }
        plane.iter_mut().for_each(|v| *v *= scale);
        planes.push(plane);
    }
    Raster::from_planes(h, w, &planes)
}
