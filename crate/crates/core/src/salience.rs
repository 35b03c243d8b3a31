//! Gradient-magnitude salience maps of propensity models.

use crate::error::Result;
use crate::propensity::PropensityModel;
use crate::raster::Raster;

/// `S[h, w] = sqrt(sum_c G[h, w, c]^2)` where `G` is the gradient of the
/// predicted probability with respect to the input raster.
pub fn salience_map(model: &PropensityModel, r: &Raster) -> Result<Raster> {
    let grad = model.gradient_wrt_input(r)?;
    let c = grad.channels();
    let data = grad.data().chunks_exact(c).map(|px| px.iter().map(|g| g * g).sum::<f64>().sqrt()).collect();
    Raster::new(grad.height(), grad.width(), 1, data)
}

/// Rescales a map to `[0, 1]` for display. A constant map becomes all zeros.
pub fn min_max_normalized(map: &Raster) -> Result<Raster> {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    map.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
}
