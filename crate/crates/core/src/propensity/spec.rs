use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    None,
    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    Max2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub filter_count: usize,
    pub kernel_width: usize,
    pub pool: Pool,
    pub activation: Activation,
}

impl ConvLayerSpec {
    pub fn new(filter_count: usize, kernel_width: usize) -> Self {
        ConvLayerSpec { filter_count, kernel_width, pool: Pool::None, activation: Activation::Relu }
    }
}

/// Textual form `<filters>x<width>[:max2][:linear]`, e.g. `32x5:max2`.
impl fmt::Display for ConvLayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.filter_count, self.kernel_width)?;
        if self.pool == Pool::Max2 {
            f.write_str(":max2")?;
        }
        if self.activation == Activation::Linear {
            f.write_str(":linear")?;
        }
        Ok(())
    }
}

impl FromStr for ConvLayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let shape = parts.next().unwrap_or_default();
        let (n, k) =
            shape.split_once('x').ok_or_else(|| Error::invalid(format!("layer `{s}`: expected <filters>x<width>")))?;
        let filter_count = n.parse().map_err(|_| Error::invalid(format!("layer `{s}`: bad filter count")))?;
        let kernel_width = k.parse().map_err(|_| Error::invalid(format!("layer `{s}`: bad kernel width")))?;
        let mut layer = ConvLayerSpec::new(filter_count, kernel_width);
        for flag in parts {
            match flag {
                "max2" => layer.pool = Pool::Max2,
                "none" => layer.pool = Pool::None,
                "linear" => layer.activation = Activation::Linear,
                "relu" => layer.activation = Activation::Relu,
                other => return Err(Error::invalid(format!("layer `{s}`: unknown flag `{other}`"))),
            }
        }
        Ok(layer)
    }
}

/// Convolutional propensity architecture.
///
/// Each layer is a valid convolution with bias, then batch normalization
/// (when enabled), the activation, and optional pooling. An optional 1x1
/// projection follows the last layer. The head is a global max pool per
/// channel, optional normalization of the pooled features, an affine map to
/// one logit, and the logistic function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvNetSpec {
    pub layers: Vec<ConvLayerSpec>,
    pub batch_norm: bool,
    /// Output channels of the 1x1 projection; 0 skips it.
    pub projection_dim: usize,
    /// Standardize each pooled feature with batch statistics (running
    /// statistics at inference) before the head. No learnable scale or
    /// shift; the head supplies both.
    pub head_norm: bool,
}

impl ConvNetSpec {
    /// One linear filter, max-pooled globally: the shape of the confounder
    /// generator itself. The pooled feature is normalized before the head.
    pub fn single_layer(kernel_width: usize) -> Self {
        ConvNetSpec {
            layers: vec![ConvLayerSpec {
                filter_count: 1,
                kernel_width,
                pool: Pool::None,
                activation: Activation::Linear,
            }],
            batch_norm: false,
            projection_dim: 0,
            head_norm: true,
        }
    }

    /// Three 32-filter ReLU layers with 2x2 pooling, batch normalization,
    /// and a 3-channel projection.
    pub fn application(kernel_width: usize) -> Self {
        let layer = ConvLayerSpec { filter_count: 32, kernel_width, pool: Pool::Max2, activation: Activation::Relu };
        ConvNetSpec { layers: vec![layer; 3], batch_norm: true, projection_dim: 3, head_norm: false }
    }

    /// Spatial size after every layer, checking that each stays positive.
    pub fn spatial_dims(&self, (h, w, c): (usize, usize, usize)) -> Result<Vec<(usize, usize)>> {
        if self.layers.is_empty() {
            return Err(Error::invalid("network needs at least one convolutional layer"));
        }
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid("input shape must be positive"));
        }
        let (mut h, mut w) = (h, w);
        let mut dims = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let k = layer.kernel_width;
            if k == 0 || k % 2 == 0 {
                return Err(Error::invalid(format!("layer {i}: kernel width {k} must be odd")));
            }
            if layer.filter_count == 0 {
                return Err(Error::invalid(format!("layer {i}: filter count must be positive")));
            }
            if k > h || k > w {
                return Err(Error::invalid(format!("layer {i}: kernel width {k} does not fit a {h}x{w} input")));
            }
            h = h - k + 1;
            w = w - k + 1;
            if layer.pool == Pool::Max2 {
                if h < 2 || w < 2 {
                    return Err(Error::invalid(format!("layer {i}: {h}x{w} map is too small for 2x2 pooling")));
                }
                h /= 2;
                w /= 2;
            }
            dims.push((h, w));
        }
        Ok(dims)
    }

    pub fn validate(&self, input_shape: (usize, usize, usize)) -> Result<()> {
        self.spatial_dims(input_shape).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    /// Adam with a Nesterov-corrected first moment (Nadam).
    AdamNesterov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// `base_lr * (1 + cos(pi * step / total_steps)) / 2`, no restarts.
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment_flips: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::AdamNesterov,
            base_lr: 0.005,
            lr_schedule: LrSchedule::Cosine,
            epochs: 20,
            batch_size: 32,
            augment_flips: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid("base_lr must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

macro_rules! keyword_enum {
    ($ty:ident { $($text:literal => $variant:ident),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::invalid(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text,)+ })
            }
        }
    };
}

keyword_enum!(Optimizer { "sgd" => Sgd, "adam_nesterov" => AdamNesterov });
keyword_enum!(LrSchedule { "constant" => Constant, "cosine" => Cosine });
keyword_enum!(Pool { "none" => None, "max2" => Max2 });
keyword_enum!(Activation { "relu" => Relu, "linear" => Linear });
