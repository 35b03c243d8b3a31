//! Model checkpoints: an ASCII header describing the architecture, closed
//! by an `end` line, then parameters followed by batch-norm running
//! statistics as little-endian `f32`.
//!
//! ```text
//! PROPENSITY 1
//! input 32 32 1
//! layers 1
//! layer 1x9:linear
//! batch_norm 0
//! projection 0
//! head_norm 1
//! params 84
//! state 2
//! end
//! ```

use std::fs;
use std::path::Path;

use super::model::PropensityModel;
use super::spec::{ConvLayerSpec, ConvNetSpec};
use crate::error::{Error, Result};
use crate::raster::io::{decode_f32s, parse_dim};

const MAGIC: &str = "PROPENSITY 1";
const MAX_HEADER: usize = 4096;
const MAX_LAYERS: usize = 64;
const MAX_SPATIAL: usize = 1 << 16;
const MAX_FILTERS: usize = 4096;
const MAX_KERNEL: usize = 255;

pub fn encode_checkpoint(model: &PropensityModel) -> Result<Vec<u8>> {
    let spec = model.spec();
    let (h, w, c) = model.input_shape();
    let mut header = format!("{MAGIC}\ninput {h} {w} {c}\nlayers {}\n", spec.layers.len());
    for layer in &spec.layers {
        header.push_str(&format!("layer {layer}\n"));
    }
    header.push_str(&format!(
        "batch_norm {}\nprojection {}\nhead_norm {}\nparams {}\nstate {}\nend\n",
        u8::from(spec.batch_norm),
        spec.projection_dim,
        u8::from(spec.head_norm),
        model.params().len(),
        model.state().len()
    ));
    let mut out = header.into_bytes();
    for (i, &v) in model.params().iter().chain(model.state()).enumerate() {
        let x = v as f32;
        if !x.is_finite() {
            return Err(Error::format("payload", format!("value at index {i} overflows f32")));
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn flag(field: &str, text: &str) -> Result<bool> {
    match text {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::format(field, format!("expected 0 or 1, got `{other}`"))),
    }
}

struct Lines<'a> {
    lines: std::str::Split<'a, char>,
}

impl<'a> Lines<'a> {
    /// Next line, which must start with `key`; returns the remainder.
    fn expect(&mut self, key: &str) -> Result<&'a str> {
        let line = self.lines.next().ok_or_else(|| Error::format(key, "missing line"))?;
        let (k, rest) = line.split_once(' ').unwrap_or((line, ""));
        if k != key {
            return Err(Error::format(key, format!("expected `{key}`, found `{line}`")));
        }
        Ok(rest)
    }
}

fn bounded(field: &str, value: usize, max: usize) -> Result<usize> {
    if value > max {
        return Err(Error::format(field, format!("{value} exceeds the limit of {max}")));
    }
    Ok(value)
}

fn parse_count(field: &str, text: &str) -> Result<usize> {
    if text.is_empty() || !text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::format(field, format!("`{text}` is not a non-negative integer")));
    }
    text.parse().map_err(|_| Error::format(field, format!("`{text}` is out of range")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PropensityModel> {
    let end_marker = b"\nend\n";
    let limit = bytes.len().min(MAX_HEADER);
    let split = bytes[..limit]
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| Error::format("header", "no `end` line within the header limit"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::format("header", "header is not ASCII"))?;
    let payload = &bytes[split + end_marker.len()..];

    let mut lines = Lines { lines: header.split('\n') };
    match lines.lines.next() {
        Some(MAGIC) => {}
        other => return Err(Error::format("magic", format!("expected `{MAGIC}`, got {other:?}"))),
    }
    let mut dims = lines.expect("input")?.split(' ');
    let h = bounded("input", parse_dim("input", dims.next())?, MAX_SPATIAL)?;
    let w = bounded("input", parse_dim("input", dims.next())?, MAX_SPATIAL)?;
    let c = bounded("input", parse_dim("input", dims.next())?, MAX_FILTERS)?;
    if dims.next().is_some() {
        return Err(Error::format("input", "expected three dimensions"));
    }
    let n_layers = bounded("layers", parse_count("layers", lines.expect("layers")?)?, MAX_LAYERS)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let layer: ConvLayerSpec =
            lines.expect("layer")?.parse().map_err(|e: Error| Error::format("layer", e.to_string()))?;
        bounded("layer", layer.filter_count, MAX_FILTERS)?;
        bounded("layer", layer.kernel_width, MAX_KERNEL)?;
        layers.push(layer);
    }
    let batch_norm = flag("batch_norm", lines.expect("batch_norm")?)?;
    let projection_dim = bounded("projection", parse_count("projection", lines.expect("projection")?)?, MAX_FILTERS)?;
    let head_norm = flag("head_norm", lines.expect("head_norm")?)?;
    let n_params = parse_count("params", lines.expect("params")?)?;
    let n_state = parse_count("state", lines.expect("state")?)?;
    if let Some(extra) = lines.lines.next() {
        return Err(Error::format("header", format!("unexpected line `{extra}`")));
    }

    let spec = ConvNetSpec { layers, batch_norm, projection_dim, head_norm };
    let skeleton = super::net::Layout::new(&spec, (h, w, c)).map_err(|e| Error::format("layer", e.to_string()))?;
    if n_params != skeleton.n_params {
        return Err(Error::format(
            "params",
            format!("architecture has {} parameters, header declares {n_params}", skeleton.n_params),
        ));
    }
    if n_state != skeleton.n_state {
        return Err(Error::format(
            "state",
            format!("architecture has {} state values, header declares {n_state}", skeleton.n_state),
        ));
    }
    let mut values = decode_f32s(payload, n_params + n_state, "payload")?;
    let state = values.split_off(n_params);
    PropensityModel::from_parts(spec, (h, w, c), values, state)
}

pub fn save_checkpoint(model: &PropensityModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PropensityModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_model(spec: ConvNetSpec, shape: (usize, usize, usize)) -> PropensityModel {
        let mut m = PropensityModel::initialized(spec, shape, 5).unwrap();
        m.params_mut().iter_mut().for_each(|p| *p = *p as f32 as f64);
        m
    }

    #[test]
    fn roundtrip_is_exact_at_f32() {
        for (spec, shape) in [(ConvNetSpec::single_layer(9), (32, 32, 1)), (ConvNetSpec::application(3), (24, 24, 3))] {
            let m = f32_model(spec, shape);
            let bytes = encode_checkpoint(&m).unwrap();
            assert_eq!(decode_checkpoint(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn header_text_is_stable() {
        let m = PropensityModel::zeroed(ConvNetSpec::single_layer(9), (32, 32, 1)).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        let text = "PROPENSITY 1\ninput 32 32 1\nlayers 1\nlayer 1x9:linear\nbatch_norm 0\n\
                    projection 0\nhead_norm 1\nparams 84\nstate 2\nend\n";
        assert_eq!(&bytes[..text.len()], text.as_bytes());
        assert_eq!(bytes.len(), text.len() + 4 * 86);
    }

    #[test]
    fn rejects_inconsistent_headers() {
        let m = PropensityModel::zeroed(ConvNetSpec::single_layer(3), (8, 8, 1)).unwrap();
        let good = encode_checkpoint(&m).unwrap();
        let text = String::from_utf8_lossy(&good[..good.len() - 4 * 14]).to_string();
        let payload = &good[good.len() - 4 * 14..];
        let cases = [
            ("params 12", "params 13", "params"),
            ("layer 1x3:linear", "layer 1x4:linear", "layer"),
            ("batch_norm 0", "batch_norm 2", "batch_norm"),
            ("head_norm 1", "head_norm yes", "head_norm"),
            ("state 2", "state 0", "state"),
            ("input 8 8 1", "input 8 8", "input"),
            ("PROPENSITY 1", "PROPENSITY 2", "magic"),
        ];
        for (from, to, field) in cases {
            let mut bytes = text.replace(from, to).into_bytes();
            bytes.extend_from_slice(payload);
            match decode_checkpoint(&bytes) {
                Err(Error::Format { field: f, .. }) => assert_eq!(f, field, "{to}"),
                other => panic!("{to}: expected format error, got {other:?}"),
            }
        }
        assert!(decode_checkpoint(&good[..good.len() - 1]).is_err());
    }
}
