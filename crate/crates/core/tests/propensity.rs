mod common;

use common::{fd_check, random_model, random_raster, random_spec};
use imconf::confounder::{convolve_valid, global_max_pool, KernelFilter};
use imconf::dgp::logistic;
use imconf::propensity::{
    batch_loss_and_gradient, forward, gradient_wrt_input, mean_bce, predict_batch, train, Activation, ConvLayerSpec,
    ConvNetSpec, LrSchedule, Optimizer, Pool, PropensityModel, TrainConfig,
};
use imconf::raster::{synth_scene, Raster, SynthParams};
use imconf::Error;

#[test]
fn zero_parameters_give_one_half() {
    for (spec, shape) in [(ConvNetSpec::single_layer(3), (8, 8, 1)), (ConvNetSpec::application(3), (40, 40, 3))] {
        let m = PropensityModel::zeroed(spec, shape).unwrap();
        let r = random_raster(1, shape.0, shape.1, shape.2);
        assert_eq!(forward(&m, &r).unwrap(), 0.5);
    }
}

#[test]
fn generator_filter_reproduces_logistic_of_pooled_similarity() {
    let beta = 1.7;
    let filter = KernelFilter::diagonal(9, 1).unwrap();
    let mut m =
        PropensityModel::zeroed(ConvNetSpec { head_norm: false, ..ConvNetSpec::single_layer(9) }, (32, 32, 1)).unwrap();
    m.set_conv_filter(0, 0, &filter).unwrap();
    m.set_head(&[beta], 0.0).unwrap();
    for i in 0..5 {
        let r = synth_scene(&SynthParams::default(), i).unwrap();
        let u = global_max_pool(&convolve_valid(&r, &filter).unwrap()).unwrap();
        let p = forward(&m, &r).unwrap();
        assert!((p - logistic(beta * u)).abs() < 1e-12);
    }
}

#[test]
fn outputs_stay_inside_the_unit_interval() {
    for seed in 0..10 {
        let spec = random_spec(seed, 2);
        let mut m = random_model(seed, spec, (8, 8, 2));
        m.params_mut().iter_mut().for_each(|p| *p *= 50.0);
        let p = forward(&m, &random_raster(seed, 8, 8, 2)).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn input_and_parameter_gradients_match_finite_differences() {
    let mut kinks = 0;
    let mut checked = 0;
    for seed in 0..24u64 {
        let c = 1 + (seed % 3) as usize;
        let spec = random_spec(seed, c);
        let m = random_model(seed, spec.clone(), (8, 8, c));
        let r = random_raster(seed + 1000, 8, 8, c);

        let g = gradient_wrt_input(&m, &r).unwrap();
        assert_eq!(g.shape(), r.shape());
        let f = |x: &[f64]| forward(&m, &Raster::new(8, 8, c, x.to_vec()).unwrap()).unwrap();
        let rep = fd_check(f, r.data(), g.data(), 1e-3);
        assert!(rep.max_rel_err < 1e-4, "seed {seed} {spec:?}: input {rep:?}");
        kinks += rep.kinks;
        checked += rep.checked;

        let gp = m.gradient_wrt_params(&r).unwrap();
        let fp = |p: &[f64]| {
            let mm = PropensityModel::from_parts(spec.clone(), (8, 8, c), p.to_vec(), m.state().to_vec()).unwrap();
            forward(&mm, &r).unwrap()
        };
        let rep = fd_check(fp, m.params(), &gp, 1e-3);
        assert!(rep.max_rel_err < 1e-4, "seed {seed} {spec:?}: params {rep:?}");
        kinks += rep.kinks;
        checked += rep.checked;
    }
    assert!(kinks * 20 < checked, "{kinks} kinks among {checked} coordinates");
}

#[test]
fn training_mode_batch_norm_gradient_matches_finite_differences() {
    let spec = ConvNetSpec {
        layers: vec![
            ConvLayerSpec { filter_count: 3, kernel_width: 3, pool: Pool::Max2, activation: Activation::Relu },
            ConvLayerSpec { filter_count: 2, kernel_width: 1, pool: Pool::None, activation: Activation::Linear },
        ],
        batch_norm: true,
        projection_dim: 2,
        head_norm: true,
    };
    let m = random_model(3, spec.clone(), (8, 8, 2));
    let rasters: Vec<Raster> = (0..4).map(|i| random_raster(50 + i, 8, 8, 2)).collect();
    let labels = [1, 0, 0, 1];
    let (_, grad) = batch_loss_and_gradient(&m, &rasters, &labels, true).unwrap();
    let f = |p: &[f64]| {
        let mm = PropensityModel::from_parts(spec.clone(), (8, 8, 2), p.to_vec(), m.state().to_vec()).unwrap();
        batch_loss_and_gradient(&mm, &rasters, &labels, true).unwrap().0
    };
    let rep = fd_check(f, m.params(), &grad, 1e-3);
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    assert!(rep.checked > rep.kinks * 5, "{rep:?}");
}

#[test]
fn linear_single_layer_gradient_by_hand() {
    // 5x5 input, 3x3 linear filter, no pooling: dp/dM is p(1-p) * w_out
    // times the filter placed at the arg-max window.
    let filter = KernelFilter::new(3, 1, vec![0.5, -1.0, 0.25, 0.0, 2.0, -0.5, 1.0, 0.75, -0.25]).unwrap();
    let w_out = 0.8;
    let mut m =
        PropensityModel::zeroed(ConvNetSpec { head_norm: false, ..ConvNetSpec::single_layer(3) }, (5, 5, 1)).unwrap();
    m.set_conv_filter(0, 0, &filter).unwrap();
    m.set_head(&[w_out], -0.2).unwrap();
    let r = random_raster(17, 5, 5, 1);
    let sim = convolve_valid(&r, &filter).unwrap();
    let best = (0..9).fold(0, |b, i| if sim.data()[i] > sim.data()[b] { i } else { b });
    let (bi, bj) = (best / 3, best % 3);
    let p = logistic(w_out * sim.data()[best] - 0.2);
    let g = gradient_wrt_input(&m, &r).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let inside = (bi..bi + 3).contains(&i) && (bj..bj + 3).contains(&j);
            let expected = if inside { p * (1.0 - p) * w_out * filter.weights()[(i - bi) * 3 + (j - bj)] } else { 0.0 };
            assert!((g.get(i, j, 0) - expected).abs() < 1e-14, "({i},{j})");
        }
    }
}

#[test]
fn zero_conv_weights_give_zero_input_gradient() {
    let mut m = random_model(4, ConvNetSpec::application(1), (12, 12, 2));
    let zeros = KernelFilter::new(1, 2, vec![0.0; 2]).unwrap();
    for k in 0..32 {
        m.set_conv_filter(0, k, &zeros).unwrap();
    }
    let g = gradient_wrt_input(&m, &random_raster(1, 12, 12, 2)).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_prediction_matches_single_forward() {
    let m = random_model(9, random_spec(9, 1), (8, 8, 1));
    assert!(predict_batch(&m, &[]).unwrap().is_empty());
    let rasters: Vec<Raster> = (0..6).map(|i| random_raster(i, 8, 8, 1)).collect();
    assert_eq!(predict_batch(&m, &rasters[..1]).unwrap(), vec![forward(&m, &rasters[0]).unwrap()]);
    let batch = predict_batch(&m, &rasters).unwrap();
    for (r, p) in rasters.iter().zip(&batch) {
        assert_eq!(*p, forward(&m, r).unwrap());
    }
    let mut bad = rasters.clone();
    bad.insert(3, random_raster(0, 7, 8, 1));
    match predict_batch(&m, &bad) {
        Err(Error::InvalidArgument(msg)) => assert!(msg.contains("raster 3"), "{msg}"),
        other => panic!("expected shape error, got {other:?}"),
    }
}

fn scenes(n: u64) -> Vec<Raster> {
    (0..n).map(|i| synth_scene(&SynthParams { seed: 21, ..Default::default() }, i).unwrap()).collect()
}

/// Labels from thresholding the generator's pooled similarity at its median.
fn threshold_labels(rasters: &[Raster]) -> Vec<u8> {
    let f = KernelFilter::diagonal(9, 1).unwrap();
    let u: Vec<f64> = rasters.iter().map(|r| global_max_pool(&convolve_valid(r, &f).unwrap()).unwrap()).collect();
    let mut sorted = u.clone();
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[u.len() / 2 - 1] + sorted[u.len() / 2]) / 2.0;
    u.iter().map(|&v| u8::from(v > median)).collect()
}

#[test]
fn zero_head_starts_at_ln_two() {
    let rasters = scenes(10);
    let labels = threshold_labels(&rasters);
    let mut m = PropensityModel::initialized(ConvNetSpec::single_layer(9), (32, 32, 1), 1).unwrap();
    m.set_head(&[0.0], 0.0).unwrap();
    let loss = mean_bce(&m, &rasters, &labels).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn separable_data_is_fit() {
    let rasters = scenes(20);
    let labels = threshold_labels(&rasters);
    let cfg = TrainConfig {
        optimizer: Optimizer::AdamNesterov,
        base_lr: 0.05,
        lr_schedule: LrSchedule::Constant,
        epochs: 400,
        batch_size: 20,
        augment_flips: false,
        seed: 3,
    };
    let out = train(&rasters, &labels, &ConvNetSpec::single_layer(9), &cfg).unwrap();
    assert_eq!(out.loss_trace.len(), 400);
    assert!(out.loss_trace.iter().all(|l| l.is_finite()));
    assert!(out.final_loss < 0.1 * std::f64::consts::LN_2, "final loss {}", out.final_loss);
}

#[test]
fn training_is_deterministic_per_seed() {
    let rasters = scenes(12);
    let labels = threshold_labels(&rasters);
    let cfg = TrainConfig { epochs: 3, batch_size: 4, augment_flips: true, seed: 8, ..Default::default() };
    let spec = ConvNetSpec::single_layer(5);
    let a = train(&rasters, &labels, &spec, &cfg).unwrap();
    let b = train(&rasters, &labels, &spec, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.loss_trace, b.loss_trace);
    let c = train(&rasters, &labels, &spec, &TrainConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn full_batch_loss_decreases_with_small_steps() {
    let rasters = scenes(10);
    let labels = threshold_labels(&rasters);
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        base_lr: 1e-3,
        lr_schedule: LrSchedule::Constant,
        epochs: 5,
        batch_size: 10,
        augment_flips: false,
        seed: 2,
    };
    let out = train(&rasters, &labels, &ConvNetSpec::single_layer(7), &cfg).unwrap();
    for w in out.loss_trace.windows(2) {
        assert!(w[1] <= w[0], "{:?}", out.loss_trace);
    }
}

#[test]
fn training_rejects_degenerate_data() {
    let rasters = scenes(4);
    let spec = ConvNetSpec::single_layer(9);
    let cfg = TrainConfig::default();
    assert!(matches!(train(&rasters, &[1, 1, 1, 1], &spec, &cfg), Err(Error::Degenerate(_))));
    assert!(matches!(train(&rasters[..1], &[1], &spec, &cfg), Err(Error::Degenerate(_))));
    assert!(train(&rasters, &[1, 0, 1], &spec, &cfg).is_err());
}

#[test]
fn divergence_reports_the_epoch() {
    let rasters: Vec<Raster> = scenes(6).iter().map(|r| r.map(|v| v * 1e150).unwrap()).collect();
    let labels = [1, 0, 1, 0, 1, 0];
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        base_lr: 1e10,
        lr_schedule: LrSchedule::Constant,
        epochs: 5,
        batch_size: 6,
        augment_flips: false,
        seed: 1,
    };
    match train(&rasters, &labels, &ConvNetSpec { head_norm: false, ..ConvNetSpec::single_layer(3) }, &cfg) {
        Err(Error::Divergence { epoch }) => assert!((1..=5).contains(&epoch)),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.loss_trace)),
    }
}

#[test]
fn application_model_trains_with_batch_norm_and_flips() {
    let p = SynthParams { height: 40, width: 40, channels: 3, seed: 5, ..Default::default() };
    let rasters: Vec<Raster> = (0..8).map(|i| synth_scene(&p, i).unwrap()).collect();
    let labels = [1, 0, 1, 0, 0, 1, 1, 0];
    let cfg = TrainConfig { epochs: 2, batch_size: 4, augment_flips: true, ..Default::default() };
    let out = train(&rasters, &labels, &ConvNetSpec::application(3), &cfg).unwrap();
    assert!(out.model.state().iter().all(|v| v.is_finite()));
    assert!(out.model.state().iter().any(|&v| v != 0.0 && v != 1.0));
    // inference never augments
    let p1 = forward(&out.model, &rasters[0]).unwrap();
    assert_eq!(p1, forward(&out.model, &rasters[0]).unwrap());
}
