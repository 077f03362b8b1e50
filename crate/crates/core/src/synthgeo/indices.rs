//! Band-ratio vegetation indices.

use crate::error::{Error, Result};

/// Green chlorophyll index, `nir / green - 1`.
pub fn gci(nir: f64, green: f64) -> Result<f64> {
    if green <= 0.0 || green.is_nan() {
        return Err(Error::Domain(format!("gci needs green > 0, got {green}")));
    }
    Ok(nir / green - 1.0)
}

/// Enhanced vegetation index, `2.5 (nir - red) / (nir + 6 red - 7.5 blue + 1)`.
pub fn evi(nir: f64, red: f64, blue: f64) -> Result<f64> {
    let den = nir + 6.0 * red - 7.5 * blue + 1.0;
    if den.abs() <= 1e-9 || den.is_nan() {
        return Err(Error::Domain(format!("evi denominator is singular ({den})")));
    }
    Ok(2.5 * (nir - red) / den)
}

/// Normalized difference water index, `(nir - swir) / (nir + swir)`.
pub fn ndwi(nir: f64, swir: f64) -> Result<f64> {
    let den = nir + swir;
    if den == 0.0 || den.is_nan() {
        return Err(Error::Domain("ndwi needs nir + swir != 0".into()));
    }
    Ok((nir - swir) / den)
}
