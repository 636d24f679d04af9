//! Real-camera conversions: CMOS gray level to photons, and the forward model of
//! a multi-bit QIS pixel (gain, quantum efficiency, exposure time, dark signal,
//! response non-uniformity, clipping, ADC and additive noise).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::rng::{self, Substream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmosParams {
    pub gain_ratio: f64,
    pub quantum_efficiency: f64,
}

impl Default for CmosParams {
    fn default() -> Self {
        Self {
            gain_ratio: 1.0,
            quantum_efficiency: 0.68,
        }
    }
}

impl CmosParams {
    pub fn new(gain_ratio: f64, quantum_efficiency: f64) -> Result<Self> {
        check_gain_qe(gain_ratio, quantum_efficiency)?;
        Ok(Self {
            gain_ratio,
            quantum_efficiency,
        })
    }
}

fn check_gain_qe(g: f64, qe: f64) -> Result<()> {
    if !(g.is_finite() && g > 0.0) {
        return Err(domain(format!("gain ratio {g} must be > 0")));
    }
    if !(qe > 0.0 && qe <= 1.0) {
        return Err(domain(format!("quantum efficiency {qe} must lie in (0, 1]")));
    }
    Ok(())
}

/// Writes a decimal quantity such as 0.68 as an exact ratio `n / 10^d`, with `n`
/// an integer-valued float. `None` if no short decimal form exists.
fn decimal_ratio(v: f64) -> Option<(f64, f64)> {
    let mut scale = 1.0;
    for _ in 0..=15 {
        let n = v * scale;
        if n == n.round() && n.abs() < 9.007_199_254_740_992e15 {
            return Some((n, scale));
        }
        scale *= 10.0;
    }
    None
}

/// X = G * I / QE.
///
/// QE is a datasheet decimal; dividing by its integer numerator after scaling
/// by the matching power of ten keeps e.g. 68 / 0.68 at exactly 100.
pub fn cmos_gray_to_photons(gray: f64, p: &CmosParams) -> Result<f64> {
    check_gain_qe(p.gain_ratio, p.quantum_efficiency)?;
    if !(gray.is_finite() && gray >= 0.0) {
        return Err(domain(format!("gray level {gray} must be finite and >= 0")));
    }
    Ok(match decimal_ratio(p.quantum_efficiency) {
        Some((num, scale)) => p.gain_ratio * gray * scale / num,
        None => p.gain_ratio * gray / p.quantum_efficiency,
    })
}

/// Parameters of the QIS pixel forward model. JSON keys follow the symbols of
/// the model (`G`, `QE`, `ET`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QisParams {
    #[serde(rename = "G")]
    pub gain: f64,
    #[serde(rename = "QE")]
    pub quantum_efficiency: f64,
    /// Exposure time in seconds.
    #[serde(rename = "ET")]
    pub exposure_time: f64,
    /// Dark signal in photons per exposure.
    #[serde(default)]
    pub i_dark: f64,
    /// Per-pixel multiplicative response gain; `None` means identity.
    #[serde(default)]
    pub crf: Option<Vec<f64>>,
    #[serde(default)]
    pub sigma_real_noise: f64,
    #[serde(default = "default_adc_bits")]
    pub adc_bits: u32,
    #[serde(default = "default_clip_max")]
    pub clip_max: f64,
}

fn default_adc_bits() -> u32 {
    14
}

fn default_clip_max() -> f64 {
    ((1u64 << 14) - 1) as f64
}

impl Default for QisParams {
    fn default() -> Self {
        Self {
            gain: 1.0,
            quantum_efficiency: 0.68,
            exposure_time: 1.0,
            i_dark: 0.0,
            crf: None,
            sigma_real_noise: 0.0,
            adc_bits: default_adc_bits(),
            clip_max: default_clip_max(),
        }
    }
}

impl QisParams {
    pub fn validate(&self, pixels: usize) -> Result<()> {
        check_gain_qe(self.gain, self.quantum_efficiency)?;
        if !(self.exposure_time.is_finite() && self.exposure_time > 0.0) {
            return Err(domain("exposure time must be > 0"));
        }
        if !(self.i_dark.is_finite() && self.i_dark >= 0.0) {
            return Err(domain("dark signal must be >= 0"));
        }
        if !(self.sigma_real_noise.is_finite() && self.sigma_real_noise >= 0.0) {
            return Err(domain("noise sigma must be >= 0"));
        }
        if !(1..=32).contains(&self.adc_bits) {
            return Err(domain("ADC resolution must be 1..=32 bits"));
        }
        if !(self.clip_max.is_finite() && self.clip_max > 0.0) {
            return Err(domain("clip maximum must be > 0"));
        }
        if let Some(crf) = &self.crf {
            if crf.len() != pixels {
                return Err(shape(format!(
                    "response map has {} entries, image has {pixels}",
                    crf.len()
                )));
            }
            if crf.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
                return Err(domain("response gains must be finite and > 0"));
            }
        }
        Ok(())
    }

    /// Width of one ADC code in output units.
    pub fn adc_step(&self) -> f64 {
        self.clip_max / ((1u64 << self.adc_bits) - 1) as f64
    }

    /// Expected photon-conversion rate for a pixel before gain.
    pub fn rate(&self, photons: f64, crf: f64) -> f64 {
        self.exposure_time * self.quantum_efficiency * (crf * photons + self.i_dark)
    }
}

/// I = ADC{Clip{G * Poisson(ET * QE * (CRF(X) + I_dark))}} + N(0, sigma^2).
///
/// The ADC rounds half up onto `2^adc_bits` uniform levels over `[0, clip_max]`
/// and reports the level value. Noise is added after the ADC.
pub fn qis_forward(photons: &[f64], p: &QisParams, seed: u64) -> Result<Vec<f64>> {
    p.validate(photons.len())?;
    if let Some((i, v)) = photons.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(domain(format!("photon count at {i} is {v}; must be finite and >= 0")));
    }
    let step = p.adc_step();
    let out = photons
        .par_iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut stream = Substream::new(seed, rng::domain::QIS, i as u64);
            let crf = p.crf.as_ref().map_or(1.0, |c| c[i]);
            let counts = stream.poisson(p.rate(x, crf)) as f64;
            let clipped = (p.gain * counts).clamp(0.0, p.clip_max);
            let level = (clipped / step + 0.5).floor() * step;
            let noise = if p.sigma_real_noise > 0.0 {
                p.sigma_real_noise * stream.gaussian()
            } else {
                0.0
            };
            level + noise
        })
        .collect();
    Ok(out)
}
