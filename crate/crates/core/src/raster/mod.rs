//! Image tensors and the operations applied to them before modelling.

pub(crate) mod io;
mod synth;

pub use io::{decode_raster, encode_raster, load_raster, save_raster};
pub use synth::{synth_scene, SynthParams};

use rand::Rng;

use crate::error::{Error, Result};

/// A `height x width x channels` image stored row-major in `(h, w, c)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!("raster dimensions must be positive, got {height}x{width}x{channels}")));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::invalid("raster dimensions overflow"))?;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "raster data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("raster value at offset {i} is not finite")));
        }
        Ok(Raster { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Raster::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Raster::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds a single-channel raster from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("ragged rows"));
        }
        Raster::new(height, width, 1, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, c: usize) -> usize {
        (h * self.width + w) * self.channels + c
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.index(h, w, c)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copy of channel `c` as a contiguous `height x width` plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Inverse of [`Raster::plane`]: interleaves per-channel planes.
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        let mut data = vec![0.0; height * width * channels];
        for (c, plane) in planes.iter().enumerate() {
            if plane.len() != height * width {
                return Err(Error::invalid("plane size does not match raster dimensions"));
            }
            for (i, &v) in plane.iter().enumerate() {
                data[i * channels + c] = v;
            }
        }
        Raster::new(height, width, channels, data)
    }

    /// Applies `f` to every value, keeping the shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Raster::new(self.height, self.width, self.channels, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Output length along one axis after rescaling by `factor`.
///
/// The small slack keeps products such as `0.1 * 30` from rounding up to
/// an extra pixel.
pub fn scaled_len(len: usize, factor: f64) -> usize {
    ((factor * len as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Overlap weights between an output axis of `out` cells and a source axis
/// of `len` unit cells, each row normalized to sum to one.
fn area_weights(len: usize, out: usize) -> Vec<Vec<(usize, f64)>> {
    let step = len as f64 / out as f64;
    (0..out)
        .map(|i| {
            let start = i as f64 * step;
            let end = if i + 1 == out { len as f64 } else { (i + 1) as f64 * step };
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(len);
            (first..last)
                .filter_map(|p| {
                    let overlap = end.min(p as f64 + 1.0) - start.max(p as f64);
                    (overlap > 0.0).then_some((p, overlap / (end - start)))
                })
                .collect()
        })
        .collect()
}

/// Area-weighted resampling onto a coarser grid of
/// `ceil(factor*H) x ceil(factor*W)` pixels.
pub fn downsample(r: &Raster, factor: f64) -> Result<Raster> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::invalid(format!("downsample factor must lie in (0, 1], got {factor}")));
    }
    if factor == 1.0 {
        return Ok(r.clone());
    }
    let (h, w, c) = r.shape();
    let (oh, ow) = (scaled_len(h, factor), scaled_len(w, factor));
    let rows = area_weights(h, oh);
    let cols = area_weights(w, ow);
    let mut data = vec![0.0; oh * ow * c];
    for (i, row_w) in rows.iter().enumerate() {
        for (j, col_w) in cols.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(p, wp) in row_w {
                    for &(q, wq) in col_w {
                        acc += wp * wq * r.get(p, q, ch);
                    }
                }
                data[(i * ow + j) * c + ch] = acc;
            }
        }
    }
    Raster::new(oh, ow, c, data)
}

/// Which spatial axes to reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flips {
    /// Reverse the row order.
    pub height: bool,
    /// Reverse the column order.
    pub width: bool,
}

impl Flips {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Flips { height: rng.random_bool(0.5), width: rng.random_bool(0.5) }
    }
}

pub fn flip(r: &Raster, flips: Flips) -> Raster {
    if !flips.height && !flips.width {
        return r.clone();
    }
    let (h, w, c) = r.shape();
    let mut data = Vec::with_capacity(r.data.len());
    for i in 0..h {
        let si = if flips.height { h - 1 - i } else { i };
        for j in 0..w {
            let sj = if flips.width { w - 1 - j } else { j };
            let at = r.index(si, sj, 0);
            data.extend_from_slice(&r.data[at..at + c]);
        }
    }
    Raster { height: h, width: w, channels: c, data }
}

/// Reverses each spatial axis independently with probability 1/2.
pub fn random_flip<R: Rng + ?Sized>(r: &Raster, rng: &mut R) -> Raster {
    flip(r, Flips::sample(rng))
}
