use super::net::{backward_batch, forward_batch, Layout, Mode, Tensor};
use super::spec::ConvNetSpec;
use crate::confounder::KernelFilter;
use crate::dgp::logistic;
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng;

/// A convolutional map from a raster to a treatment probability.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    spec: ConvNetSpec,
    input_shape: (usize, usize, usize),
    params: Vec<f64>,
    state: Vec<f64>,
    layout: Layout,
}

impl PartialEq for PropensityModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.input_shape == other.input_shape
            && self.params == other.params
            && self.state == other.state
    }
}

impl PropensityModel {
    /// All parameters zero; batch-norm statistics at mean 0, variance 1.
    pub fn zeroed(spec: ConvNetSpec, input_shape: (usize, usize, usize)) -> Result<Self> {
        let layout = Layout::new(&spec, input_shape)?;
        Ok(PropensityModel {
            params: vec![0.0; layout.n_params],
            state: layout.init_state(),
            spec,
            input_shape,
            layout,
        })
    }

    /// Glorot-uniform initialization seeded by `seed`.
    pub fn initialized(spec: ConvNetSpec, input_shape: (usize, usize, usize), seed: u64) -> Result<Self> {
        let mut m = PropensityModel::zeroed(spec, input_shape)?;
        let mut g = rng::stream(rng::derive_seed(seed, &[rng::tag("init")]), 0);
        m.params = m.layout.init_params(&mut g);
        Ok(m)
    }

    /// Rebuilds a model from stored parts, checking sizes and finiteness.
    pub fn from_parts(
        spec: ConvNetSpec,
        input_shape: (usize, usize, usize),
        params: Vec<f64>,
        state: Vec<f64>,
    ) -> Result<Self> {
        let mut m = PropensityModel::zeroed(spec, input_shape)?;
        if params.len() != m.params.len() || state.len() != m.state.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters and {} state values, got {} and {}",
                m.params.len(),
                m.state.len(),
                params.len(),
                state.len()
            )));
        }
        if params.iter().chain(&state).any(|v| !v.is_finite()) {
            return Err(Error::invalid("model values must be finite"));
        }
        m.params = params;
        m.state = state;
        Ok(m)
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Batch-norm running statistics (empty without batch norm).
    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub(crate) fn state_mut(&mut self) -> &mut [f64] {
        &mut self.state
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Copies `filter` into output channel `index` of conv layer `layer`.
    pub fn set_conv_filter(&mut self, layer: usize, index: usize, filter: &KernelFilter) -> Result<()> {
        let l = self.layout.convs.get(layer).ok_or_else(|| Error::invalid(format!("no conv layer {layer}")))?;
        if index >= l.cout || filter.width() != l.k || filter.channels() != l.cin {
            return Err(Error::invalid("filter does not match the layer shape"));
        }
        let (k, cin) = (l.k, l.cin);
        for kh in 0..k {
            for kw in 0..k {
                for ic in 0..cin {
                    self.params[l.w_off + ((index * cin + ic) * k + kh) * k + kw] =
                        filter.weights()[(kh * k + kw) * cin + ic];
                }
            }
        }
        Ok(())
    }

    /// Overwrites the head's affine map.
    pub fn set_head(&mut self, weights: &[f64], bias: f64) -> Result<()> {
        let hd = &self.layout.head;
        if weights.len() != hd.cin {
            return Err(Error::invalid(format!("head expects {} weights", hd.cin)));
        }
        self.params[hd.w_off..hd.w_off + hd.cin].copy_from_slice(weights);
        self.params[hd.b_off] = bias;
        Ok(())
    }

    pub(crate) fn tensor(&self, r: &Raster) -> Result<Tensor> {
        let t = Tensor::from_raster(r);
        self.layout.check_input(&t)?;
        Ok(t)
    }

    pub fn logit(&self, r: &Raster) -> Result<f64> {
        let t = self.tensor(r)?;
        let (caches, _) = forward_batch(&self.layout, &self.params, &self.state, &[&t], Mode::Infer);
        Ok(caches[0].logit)
    }

    /// Predicted treatment probability.
    pub fn forward(&self, r: &Raster) -> Result<f64> {
        self.logit(r).map(logistic)
    }

    fn probability_gradients(&self, r: &Raster, need_dx: bool) -> Result<(Vec<f64>, Option<Tensor>)> {
        let t = self.tensor(r)?;
        let inputs = [&t];
        let (caches, stats) = forward_batch(&self.layout, &self.params, &self.state, &inputs, Mode::Infer);
        let p = logistic(caches[0].logit);
        let dp = p * (1.0 - p);
        let mut grad = vec![0.0; self.params.len()];
        let dx = backward_batch(
            &self.layout,
            &self.params,
            &self.state,
            &inputs,
            &caches,
            &stats,
            &[dp],
            Mode::Infer,
            &mut grad,
            need_dx,
        );
        Ok((grad, dx.map(|mut v| v.remove(0))))
    }

    /// Derivative of the predicted probability with respect to every
    /// input value, shaped like the input.
    pub fn gradient_wrt_input(&self, r: &Raster) -> Result<Raster> {
        let (_, dx) = self.probability_gradients(r, true)?;
        dx.expect("input gradient requested").to_raster()
    }

    /// Derivative of the predicted probability with respect to the flat
    /// parameter vector.
    pub fn gradient_wrt_params(&self, r: &Raster) -> Result<Vec<f64>> {
        self.probability_gradients(r, false).map(|(g, _)| g)
    }

    /// Probabilities for every raster, in order.
    pub fn predict_batch(&self, rasters: &[Raster]) -> Result<Vec<f64>> {
        rasters
            .iter()
            .enumerate()
            .map(|(i, r)| {
                self.forward(r).map_err(|e| match e {
                    Error::InvalidArgument(m) => Error::InvalidArgument(format!("raster {i}: {m}")),
                    other => other,
                })
            })
            .collect()
    }
}

pub fn forward(model: &PropensityModel, r: &Raster) -> Result<f64> {
    model.forward(r)
}

pub fn gradient_wrt_input(model: &PropensityModel, r: &Raster) -> Result<Raster> {
    model.gradient_wrt_input(r)
}

pub fn predict_batch(model: &PropensityModel, rasters: &[Raster]) -> Result<Vec<f64>> {
    model.predict_batch(rasters)
}
