//! Latent scene confounders derived from image content.
//!
//! A confounder is the maximum response of a fixed kernel filter over the
//! scene, optionally perturbed pixel-wise by Gaussian noise, then
//! standardized across scenes.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng;

/// A `width x width x channels` weight pattern, stored in `(h, w, c)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFilter {
    width: usize,
    channels: usize,
    weights: Vec<f64>,
}

impl KernelFilter {
    pub fn new(width: usize, channels: usize, weights: Vec<f64>) -> Result<Self> {
        if width == 0 || width % 2 == 0 {
            return Err(Error::invalid(format!("filter width must be odd, got {width}")));
        }
        if channels == 0 {
            return Err(Error::invalid("filter must have at least one channel"));
        }
        if weights.len() != width * width * channels {
            return Err(Error::invalid(format!(
                "filter expects {} weights, got {}",
                width * width * channels,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("filter weights must be finite"));
        }
        Ok(KernelFilter { width, channels, weights })
    }

    /// Ones on the main diagonal of every channel, zeros elsewhere.
    pub fn diagonal(width: usize, channels: usize) -> Result<Self> {
        let mut weights = vec![0.0; width * width * channels];
        for d in 0..width {
            for c in 0..channels {
                weights[(d * width + d) * channels + c] = 1.0;
            }
        }
        KernelFilter::new(width, channels, weights)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn to_raster(&self) -> Raster {
        Raster::new(self.width, self.width, self.channels, self.weights.clone())
            .expect("filter invariants imply a valid raster")
    }

    pub fn from_raster(r: &Raster) -> Result<Self> {
        if r.height() != r.width() {
            return Err(Error::invalid(format!("filter raster must be square, got {}x{}", r.height(), r.width())));
        }
        KernelFilter::new(r.width(), r.channels(), r.data().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderSpec {
    pub filter: KernelFilter,
    /// Standard deviation of the per-pixel noise added to the similarity map.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ConfounderSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise_sigma must be a finite value >= 0"));
        }
        Ok(())
    }
}

/// Indices `(w', h')` within `floor(z/2)` of `(w, h)` along both axes,
/// clipped to a `width x height` image, in row-major order of `(w', h')`.
pub fn neighborhood_indices(
    w: usize,
    h: usize,
    z: usize,
    (width, height): (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    if z == 0 {
        return Err(Error::invalid("neighborhood size must be positive"));
    }
    if w >= width || h >= height {
        return Err(Error::invalid(format!("center ({w}, {h}) lies outside a {width}x{height} image")));
    }
    let r = z / 2;
    let ws = w.saturating_sub(r)..=(w + r).min(width - 1);
    let hs = h.saturating_sub(r)..=(h + r).min(height - 1);
    Ok(ws.flat_map(|a| hs.clone().map(move |b| (a, b))).collect())
}

/// Sliding inner product of `filter` with `r` at every position where the
/// filter fits entirely (stride 1, no padding, no bias).
pub fn convolve_valid(r: &Raster, filter: &KernelFilter) -> Result<Raster> {
    let (h, w, c) = r.shape();
    let k = filter.width;
    if c != filter.channels {
        return Err(Error::invalid(format!("filter has {} channels, raster has {c}", filter.channels)));
    }
    if k > h || k > w {
        return Err(Error::invalid(format!("filter width {k} exceeds raster size {h}x{w}")));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let span = k * c;
    let data = r.data();
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for kh in 0..k {
                let start = ((i + kh) * w + j) * c;
                let window = &data[start..start + span];
                let taps = &filter.weights[kh * span..(kh + 1) * span];
                acc += window.iter().zip(taps).map(|(a, b)| a * b).sum::<f64>();
            }
            out[i * ow + j] = acc;
        }
    }
    Raster::new(oh, ow, 1, out)
}

pub fn global_max_pool(m: &Raster) -> Result<f64> {
    if m.channels() != 1 {
        return Err(Error::invalid(format!("global max pool expects one channel, got {}", m.channels())));
    }
    Ok(m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Standardizes `values` to mean 0 and population standard deviation 1.
pub fn normalize_gn(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::invalid("normalization needs at least two values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("normalization input must be finite"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let drift = centered.iter().sum::<f64>() / n;
    centered.iter_mut().for_each(|v| *v -= drift);
    let sd = (centered.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::degenerate("zero variance across scenes"));
    }
    Ok(centered.into_iter().map(|v| v / sd).collect())
}

/// Pooled similarity of one scene, before cross-scene normalization.
///
/// `scene` selects the noise substream so scenes can be processed in any
/// order.
pub fn pooled_similarity(r: &Raster, spec: &ConfounderSpec, scene: u64) -> Result<f64> {
    let map = convolve_valid(r, &spec.filter)?;
    if spec.noise_sigma == 0.0 {
        return global_max_pool(&map);
    }
    let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut g = rng::stream(rng::derive_seed(spec.seed, &[rng::tag("confounder-noise")]), scene);
    let noisy: Vec<f64> = map.data().iter().map(|v| v + normal.sample(&mut g)).collect();
    global_max_pool(&Raster::new(map.height(), map.width(), 1, noisy)?)
}

/// Standardized latent confounder for every scene.
pub fn scene_confounders(rasters: &[Raster], spec: &ConfounderSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if rasters.len() < 2 {
        return Err(Error::invalid("at least two scenes are required"));
    }
    let pooled =
        rasters.iter().enumerate().map(|(s, r)| pooled_similarity(r, spec, s as u64)).collect::<Result<Vec<_>>>()?;
    normalize_gn(&pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{synth_scene, SynthParams};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn neighborhood_examples() {
        let n = neighborhood_indices(2, 2, 2, (5, 5)).unwrap();
        let expected: Vec<_> = (1..=3).flat_map(|a| (1..=3).map(move |b| (a, b))).collect();
        assert_eq!(n, expected);
        assert_eq!(neighborhood_indices(3, 1, 1, (5, 5)).unwrap(), vec![(3, 1)]);
        assert_eq!(neighborhood_indices(0, 0, 2, (5, 5)).unwrap(), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert!(neighborhood_indices(5, 0, 2, (5, 5)).is_err());
        assert!(neighborhood_indices(0, 0, 0, (5, 5)).is_err());
    }

    #[test]
    fn diagonal_filter_on_identity_image() {
        let img = Raster::new(3, 3, 1, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let out = convolve_valid(&img, &KernelFilter::diagonal(3, 1).unwrap()).unwrap();
        assert_eq!(out.shape(), (1, 1, 1));
        assert_eq!(out.data(), &[3.0]);
    }

    #[test]
    fn zero_filter_annihilates() {
        let r = synth_scene(&SynthParams { channels: 2, ..Default::default() }, 0).unwrap();
        let f = KernelFilter::new(5, 2, vec![0.0; 50]).unwrap();
        let out = convolve_valid(&r, &f).unwrap();
        assert_eq!(out.shape(), (28, 28, 1));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convolution_rejects_mismatches() {
        let r = Raster::zeros(4, 4, 2).unwrap();
        assert!(convolve_valid(&r, &KernelFilter::diagonal(3, 1).unwrap()).is_err());
        assert!(convolve_valid(&r, &KernelFilter::diagonal(5, 2).unwrap()).is_err());
        assert!(KernelFilter::diagonal(4, 1).is_err());
    }

    #[test]
    fn max_pool_examples() {
        let m = Raster::from_rows(&[&[-1.0, 2.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(global_max_pool(&m).unwrap(), 2.0);
        assert_eq!(global_max_pool(&Raster::filled(3, 2, 1, -4.5).unwrap()).unwrap(), -4.5);
        assert!(global_max_pool(&Raster::zeros(2, 2, 2).unwrap()).is_err());
    }

    #[test]
    fn normalize_examples() {
        let z = normalize_gn(&[1.0, 2.0, 3.0]).unwrap();
        let expected = 1.5f64.sqrt(); // (3-2)/sqrt(2/3)
        assert!((z[0] + expected).abs() < 1e-12);
        assert!(z[1].abs() < 1e-15);
        assert!((z[2] - expected).abs() < 1e-12);
        assert!(matches!(normalize_gn(&[5.0, 5.0, 5.0]), Err(Error::Degenerate(_))));
        assert!(normalize_gn(&[1.0]).is_err());
        let again = normalize_gn(&z).unwrap();
        for (a, b) in z.iter().zip(&again) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_confounders_are_the_plain_composition() {
        let p = SynthParams::default();
        let scenes: Vec<_> = (0..6).map(|i| synth_scene(&p, i).unwrap()).collect();
        let spec = ConfounderSpec { filter: KernelFilter::diagonal(9, 1).unwrap(), noise_sigma: 0.0, seed: 3 };
        let direct: Vec<f64> =
            scenes.iter().map(|r| global_max_pool(&convolve_valid(r, &spec.filter).unwrap()).unwrap()).collect();
        assert_eq!(scene_confounders(&scenes, &spec).unwrap(), normalize_gn(&direct).unwrap());
    }

    #[test]
    fn noisy_confounders_depend_on_seed_only() {
        let p = SynthParams::default();
        let scenes: Vec<_> = (0..6).map(|i| synth_scene(&p, i).unwrap()).collect();
        let spec = ConfounderSpec { filter: KernelFilter::diagonal(9, 1).unwrap(), noise_sigma: 1.0, seed: 3 };
        let a = scene_confounders(&scenes, &spec).unwrap();
        assert_eq!(a, scene_confounders(&scenes, &spec).unwrap());
        let b = scene_confounders(&scenes, &ConfounderSpec { seed: 4, ..spec.clone() }).unwrap();
        assert_ne!(a, b);
        assert!(ConfounderSpec { noise_sigma: -1.0, ..spec }.validate().is_err());
    }

    #[test]
    fn translation_shifts_the_similarity_map() {
        let r = synth_scene(&SynthParams { height: 16, width: 16, ..Default::default() }, 9).unwrap();
        // shift content down-right by one pixel
        let mut shifted = vec![0.0; 256];
        for i in 1..16 {
            for j in 1..16 {
                shifted[i * 16 + j] = r.get(i - 1, j - 1, 0);
            }
        }
        let s = Raster::new(16, 16, 1, shifted).unwrap();
        let f = KernelFilter::new(3, 1, (0..9).map(|i| i as f64 - 4.0).collect()).unwrap();
        let a = convolve_valid(&r, &f).unwrap();
        let b = convolve_valid(&s, &f).unwrap();
        for i in 0..13 {
            for j in 0..13 {
                assert!((a.get(i, j, 0) - b.get(i + 1, j + 1, 0)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn convolution_is_bilinear(seed: u64, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut g = rng::stream(seed, 0);
            let mut rnd = |n: usize| (0..n).map(|_| g.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let r1 = Raster::new(6, 7, 2, rnd(84)).unwrap();
            let r2 = Raster::new(6, 7, 2, rnd(84)).unwrap();
            let f1 = KernelFilter::new(3, 2, rnd(18)).unwrap();
            let f2 = KernelFilter::new(3, 2, rnd(18)).unwrap();
            let mix = Raster::new(6, 7, 2, r1.data().iter().zip(r2.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let lhs = convolve_valid(&mix, &f1).unwrap();
            let (c1, c2) = (convolve_valid(&r1, &f1).unwrap(), convolve_valid(&r2, &f1).unwrap());
            for ((l, x), y) in lhs.data().iter().zip(c1.data()).zip(c2.data()) {
                prop_assert!((l - (a * x + b * y)).abs() < 1e-6);
            }
            let fmix = KernelFilter::new(3, 2, f1.weights().iter().zip(f2.weights()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let lhs = convolve_valid(&r1, &fmix).unwrap();
            let d2 = convolve_valid(&r1, &f2).unwrap();
            for ((l, x), y) in lhs.data().iter().zip(c1.data()).zip(d2.data()) {
                prop_assert!((l - (a * x + b * y)).abs() < 1e-6);
            }
        }

        #[test]
        fn normalized_moments(values in prop::collection::vec(-1e3f64..1e3, 2..50)) {
            prop_assume!(values.iter().any(|v| (v - values[0]).abs() > 1e-6));
            let z = normalize_gn(&values).unwrap();
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((sd - 1.0).abs() < 1e-10);
            for w in 0..values.len() {
                for v in 0..values.len() {
                    if values[w] < values[v] { prop_assert!(z[w] < z[v]); }
                }
            }
        }
    }
}
