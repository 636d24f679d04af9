//! Synthetic exposure bracketing: scene exposure extraction, division by a set of
//! bracketing divisors, and burst sampling with continuous exposure labels.

use rayon::prelude::*;

use crate::error::{domain, shape, Result};
use crate::sensor_model::{sample_frame_keyed, BinaryFrame, ExposureMap, SensorConfig};

/// Ordered bracketing divisors; exposure i is theta / alphas[i].
#[derive(Debug, Clone, PartialEq)]
pub struct BracketSpec {
    alphas: Vec<f64>,
}

impl BracketSpec {
    pub const DEFAULT_ALPHAS: [f64; 15] = [
        1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0, 7.5, 8.0,
    ];

    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(domain("bracket spec needs at least one divisor"));
        }
        if alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(domain("bracket divisors must be finite and > 0"));
        }
        if alphas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(domain("bracket divisors must be strictly increasing"));
        }
        Ok(Self { alphas })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

impl Default for BracketSpec {
    fn default() -> Self {
        Self {
            alphas: Self::DEFAULT_ALPHAS.to_vec(),
        }
    }
}

/// Label for burst index `tau` out of `k` frames: (tau + 1) / (k + 1).
pub fn theta_tilde_label(tau: usize, k: usize) -> f64 {
    (tau + 1) as f64 / (k + 1) as f64
}

/// K binary frames ordered from over- to under-exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureBurst {
    frames: Vec<BinaryFrame>,
    alphas: Vec<f64>,
    theta_tilde: Vec<f64>,
}

impl ExposureBurst {
    pub fn new(frames: Vec<BinaryFrame>, alphas: Vec<f64>, theta_tilde: Vec<f64>) -> Result<Self> {
        let k = frames.len();
        if k == 0 {
            return Err(shape("burst must contain at least one frame"));
        }
        if alphas.len() != k || theta_tilde.len() != k {
            return Err(shape(format!(
                "burst has {k} frames, {} alphas and {} labels",
                alphas.len(),
                theta_tilde.len()
            )));
        }
        let (w, h) = (frames[0].width(), frames[0].height());
        if frames.iter().any(|f| f.width() != w || f.height() != h) {
            return Err(shape("burst frames differ in size"));
        }
        if theta_tilde.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(domain("burst labels must lie in (0, 1)"));
        }
        if theta_tilde.windows(2).any(|p| p[1] <= p[0]) {
            return Err(domain("burst labels must be strictly increasing"));
        }
        Ok(Self {
            frames,
            alphas,
            theta_tilde,
        })
    }

    pub fn frames(&self) -> &[BinaryFrame] {
        &self.frames
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn theta_tilde(&self) -> &[f64] {
        &self.theta_tilde
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
}

pub const DEFAULT_THETA_MAX: f64 = 25.0;
pub const DEFAULT_GAMMA: f64 = 1.0;

/// Rec. 601 luma.
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// theta(u) = theta_max * gray(u)^gamma for a grayscale image in [0, 1].
pub fn extract_exposure(width: usize, height: usize, gray: &[f64], theta_max: f64, gamma: f64) -> Result<ExposureMap> {
    if !(theta_max.is_finite() && theta_max > 0.0) {
        return Err(domain(format!("theta_max = {theta_max}; must be > 0")));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(domain(format!("gamma = {gamma}; must be > 0")));
    }
    if let Some((i, v)) = gray.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(domain(format!("pixel {i} = {v} lies outside [0, 1]")));
    }
    let theta = gray.iter().map(|g| theta_max * g.powf(gamma)).collect();
    ExposureMap::new(width, height, theta)
}

/// RGB variant: interleaved RGB triples reduced to luma first.
pub fn extract_exposure_rgb(
    width: usize,
    height: usize,
    rgb: &[f64],
    theta_max: f64,
    gamma: f64,
) -> Result<ExposureMap> {
    if rgb.len() != 3 * width * height {
        return Err(shape(format!(
            "expected {} RGB values, got {}",
            3 * width * height,
            rgb.len()
        )));
    }
    if let Some((i, v)) = rgb.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(domain(format!("channel value {i} = {v} lies outside [0, 1]")));
    }
    let gray: Vec<f64> = rgb.chunks_exact(3).map(|c| luma(c[0], c[1], c[2]).min(1.0)).collect();
    extract_exposure(width, height, &gray, theta_max, gamma)
}

/// One scaled copy of the exposure map per divisor, in spec order.
pub fn bracket(map: &ExposureMap, spec: &BracketSpec) -> Vec<ExposureMap> {
    spec.alphas.iter().map(|a| map.scaled(1.0 / a)).collect()
}

/// Seed for frame `tau` of a burst.
pub fn frame_seed(seed: u64, tau: usize) -> u64 {
    seed ^ ((tau as u64) << 32)
}

/// Samples one frame per bracketed exposure and labels frame tau with
/// (tau + 1) / (K + 1). Frame 0 is the brightest.
pub fn generate_burst(map: &ExposureMap, spec: &BracketSpec, cfg: &SensorConfig) -> ExposureBurst {
    let k = spec.len();
    let frames: Vec<BinaryFrame> = bracket(map, spec)
        .par_iter()
        .enumerate()
        .map(|(tau, m)| sample_frame_keyed(m, cfg.q, cfg.sigma_r, frame_seed(cfg.seed, tau)))
        .collect();
    let theta_tilde = (0..k).map(|tau| theta_tilde_label(tau, k)).collect();
    ExposureBurst {
        frames,
        alphas: spec.alphas.clone(),
        theta_tilde,
    }
}

/// Mean over frames of the per-pixel mean squared bit difference.
pub fn burst_mse(a: &ExposureBurst, b: &ExposureBurst) -> Result<f64> {
    if a.len() != b.len() || a.width() != b.width() || a.height() != b.height() {
        return Err(shape(format!(
            "bursts differ: {}x{}x{} vs {}x{}x{}",
            a.len(),
            a.width(),
            a.height(),
            b.len(),
            b.width(),
            b.height()
        )));
    }
    let pixels = (a.width() * a.height()) as f64;
    let total: f64 = a
        .frames
        .iter()
        .zip(&b.frames)
        .map(|(fa, fb)| {
            let diff: u64 = fa
                .packed()
                .iter()
                .zip(fb.packed())
                .map(|(x, y)| (x ^ y).count_ones() as u64)
                .sum();
            diff as f64 / pixels
        })
        .sum();
    Ok(total / a.len() as f64)
}
