//! Time-gain-attenuation compensation.
//!
//! Each row `d` is scaled by `gamma(d) = 1 - exp(-a d) / max_d exp(-a d)`.
//! The maximum over a column is attained at `d = 0`, so the mask reduces
//! to `1 - exp(-a d)`: the top row is zeroed and deep rows pass through.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Frame, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TgaConfig {
    /// Exponential attenuation per pixel row.
    pub attenuation_a: f64,
}

impl Default for TgaConfig {
    fn default() -> Self {
        Self { attenuation_a: 0.01 }
    }
}

impl TgaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.attenuation_a > 0.0) || !self.attenuation_a.is_finite() {
            return Err(Error::arg(format!(
                "attenuation factor must be positive and finite, got {}",
                self.attenuation_a
            )));
        }
        Ok(())
    }
}

/// Depth mask `gamma(d)` for `d = 0..height`.
pub fn tga_mask(height: usize, cfg: &TgaConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if height == 0 {
        return Err(Error::arg("mask height must be at least 1"));
    }
    let decay: Vec<f64> = (0..height)
        .map(|d| (-cfg.attenuation_a * d as f64).exp())
        .collect();
    let peak = decay.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(decay.into_iter().map(|e| 1.0 - e / peak).collect())
}

pub fn apply_tga(frame: &Frame, cfg: &TgaConfig) -> Result<Frame> {
    let mask = tga_mask(frame.height(), cfg)?;
    let grid = Grid::from_fn(frame.height(), frame.width(), |r, c| mask[r] * frame.get(r, c));
    Frame::try_from_grid(grid)
}
