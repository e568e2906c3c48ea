//! PSNR with border shaving.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the border discarded before measuring.
pub const DEFAULT_SHAVE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrMode {
    /// Values on the 0–255 scale, rounded half away from zero and clamped
    /// to 8-bit before comparison; peak 255.
    #[default]
    Quantized,
    /// Values on the 0–1 scale used as-is; peak 1.
    Continuous,
}

impl PsnrMode {
    pub fn peak(self) -> f64 {
        match self {
            PsnrMode::Quantized => 255.0,
            PsnrMode::Continuous => 1.0,
        }
    }

    fn prepare(self, v: f32) -> f64 {
        match self {
            PsnrMode::Quantized => (v as f64).round().clamp(0.0, 255.0),
            PsnrMode::Continuous => v as f64,
        }
    }
}

/// Mean squared error over the interior left after removing `shave` pixels
/// from every side, all channels jointly.
pub fn shaved_mse(sr: &Tensor, hr: &Tensor, shave: usize, mode: PsnrMode) -> Result<f64> {
    let (a, b) = (sr.shape(), hr.shape());
    if a != b {
        return Err(Error::invalid("psnr", format!("shapes {a} and {b} differ")));
    }
    if a.h <= 2 * shave || a.w <= 2 * shave {
        return Err(Error::invalid(
            "psnr",
            format!("{}x{} image has no interior after shaving {shave} pixels", a.h, a.w),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for n in 0..a.n {
        for c in 0..a.c {
            for y in shave..a.h - shave {
                let row = sr.index(n, c, y, 0);
                for x in shave..a.w - shave {
                    let d = mode.prepare(sr.data()[row + x]) - mode.prepare(hr.data()[row + x]);
                    sum += d * d;
                    count += 1;
                }
            }
        }
    }
    Ok(sum / count as f64)
}

/// `10·log10(peak² / MSE)` over the shaved interior; `f64::INFINITY` when
/// the interiors are identical.
pub fn psnr(sr: &Tensor, hr: &Tensor, shave: usize, mode: PsnrMode) -> Result<f64> {
    let mse = shaved_mse(sr, hr, shave, mode)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = mode.peak();
    Ok(10.0 * (peak * peak / mse).log10())
}
