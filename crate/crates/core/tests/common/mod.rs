#![allow(dead_code)]

use imconf::propensity::{Activation, ConvLayerSpec, ConvNetSpec, Pool, PropensityModel};
use imconf::raster::Raster;
use imconf::rng;
use rand::Rng;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Default)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates where the one-sided slopes disagree, i.e. the step
    /// straddles a max-pool switch or a ReLU hinge.
    pub kinks: usize,
}

/// Central finite differences of `f` at `x` with step `h`, compared with
/// `analytic`. Relative error is `|a - d| / max(|a|, |d|, 1e-6)`.
pub fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> FdReport {
    assert_eq!(x.len(), analytic.len());
    let f0 = f(x);
    let mut report = FdReport::default();
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
        let scale = fwd.abs().max(bwd.abs()).max(1e-6);
        if (fwd - bwd).abs() > 1e-2 * scale {
            report.kinks += 1;
            continue;
        }
        let d = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - d).abs() / analytic[i].abs().max(d.abs()).max(1e-6);
        report.max_rel_err = report.max_rel_err.max(err);
        report.checked += 1;
    }
    report
}

pub fn random_raster(seed: u64, h: usize, w: usize, c: usize) -> Raster {
    let mut g = rng::stream(seed, 99);
    Raster::new(h, w, c, (0..h * w * c).map(|_| g.random_range(-1.0..1.0)).collect()).unwrap()
}

/// A random architecture of one to three layers that fits an 8x8 input.
pub fn random_spec(seed: u64, channels: usize) -> ConvNetSpec {
    let mut g = rng::stream(seed, 7);
    loop {
        let depth = g.random_range(1..=3);
        let layers = (0..depth)
            .map(|_| ConvLayerSpec {
                filter_count: g.random_range(1..=3),
                kernel_width: [1, 3][g.random_range(0..2)],
                pool: if g.random_bool(0.3) { Pool::Max2 } else { Pool::None },
                activation: if g.random_bool(0.7) { Activation::Relu } else { Activation::Linear },
            })
            .collect();
        let spec = ConvNetSpec {
            layers,
            batch_norm: g.random_bool(0.4),
            projection_dim: [0, 0, 2, 3][g.random_range(0..4)],
            head_norm: g.random_bool(0.4),
        };
        if spec.validate((8, 8, channels)).is_ok() {
            return spec;
        }
    }
}

/// Random parameters with nonzero biases and perturbed batch-norm
/// statistics, so every code path contributes.
pub fn random_model(seed: u64, spec: ConvNetSpec, shape: (usize, usize, usize)) -> PropensityModel {
    let base = PropensityModel::initialized(spec.clone(), shape, seed).unwrap();
    let mut g = rng::stream(seed, 8);
    let params: Vec<f64> = base
        .params()
        .iter()
        .map(|&p| if p == 0.0 { g.random_range(-0.3..0.3) } else { p * g.random_range(0.5..2.0) })
        .collect();
    let half = base.state().len() / 2;
    let mut state = base.state().to_vec();
    // per layer: [mean..., var...]; perturb both halves generically
    for (i, s) in state.iter_mut().enumerate() {
        *s = if *s == 0.0 { g.random_range(-0.5..0.5) } else { g.random_range(0.5..2.0) };
        let _ = (i, half);
    }
    PropensityModel::from_parts(spec, shape, params, state).unwrap()
}
