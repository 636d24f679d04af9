//! One-bit image formation: Poisson photon arrivals, Gaussian read noise and a
//! threshold ADC, plus the exact bit-density series and its inverse.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::rng::{self, Substream};

/// Per-pixel quanta exposure (expected photons per pixel per exposure period).
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureMap {
    width: usize,
    height: usize,
    theta: Vec<f64>,
}

impl ExposureMap {
    pub fn new(width: usize, height: usize, theta: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(shape("exposure map dimensions must be positive"));
        }
        if theta.len() != width * height {
            return Err(shape(format!(
                "exposure map has {} values, expected {}x{}",
                theta.len(),
                width,
                height
            )));
        }
        if let Some((i, v)) = theta.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(domain(format!("exposure at index {i} is {v}; must be finite and >= 0")));
        }
        Ok(Self { width, height, theta })
    }

    pub fn constant(width: usize, height: usize, theta: f64) -> Result<Self> {
        Self::new(width, height, vec![theta; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Multiplies every exposure by `factor` (> 0).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            theta: self.theta.iter().map(|t| t * factor).collect(),
        }
    }
}

/// ADC threshold, read noise and RNG seed for the 1-bit sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub q: f64,
    pub sigma_r: f64,
    pub seed: u64,
}

impl SensorConfig {
    /// Read noise used when none is given.
    pub const DEFAULT_SIGMA_R: f64 = 0.25;
    pub const DEFAULT_Q: f64 = 0.5;

    pub fn new(q: f64, sigma_r: f64, seed: u64) -> Result<Self> {
        validate_sensor(q, sigma_r)?;
        Ok(Self { q, sigma_r, seed })
    }
}

fn validate_sensor(q: f64, sigma_r: f64) -> Result<()> {
    if !(q.is_finite() && q > 0.0) {
        return Err(domain(format!("ADC threshold q = {q}; must be finite and > 0")));
    }
    if !(sigma_r.is_finite() && sigma_r >= 0.0) {
        return Err(domain(format!(
            "read noise sigma_r = {sigma_r}; must be finite and >= 0"
        )));
    }
    Ok(())
}

/// Bit-packed 1-bit observation. Rows are byte aligned, MSB first, padding zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryFrame {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryFrame {
    pub fn row_bytes(width: usize) -> usize {
        width.div_ceil(8)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; Self::row_bytes(width) * height],
        }
    }

    /// Builds a frame from packed rows, rejecting nonzero padding bits.
    pub fn from_packed(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        let rb = Self::row_bytes(width);
        if width == 0 || height == 0 {
            return Err(shape("frame dimensions must be positive"));
        }
        if bits.len() != rb * height {
            return Err(shape(format!(
                "packed frame has {} bytes, expected {}",
                bits.len(),
                rb * height
            )));
        }
        let pad = rb * 8 - width;
        if pad > 0 {
            let mask = (1u8 << pad) - 1;
            if let Some(y) = (0..height).find(|y| bits[y * rb + rb - 1] & mask != 0) {
                return Err(domain(format!("nonzero padding bits in row {y}")));
            }
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut frame = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    frame.set(x, y, true);
                }
            }
        }
        frame
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        let byte = self.bits[y * Self::row_bytes(self.width) + x / 8];
        byte & (0x80 >> (x % 8)) != 0
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        let idx = y * Self::row_bytes(self.width) + x / 8;
        let mask = 0x80 >> (x % 8);
        if value {
            self.bits[idx] |= mask;
        } else {
            self.bits[idx] &= !mask;
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().map(|b| b.count_ones() as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    ZeroPad,
    Clamp,
}

/// Square (2r+1)x(2r+1) neighborhood centered on each pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborhoodSpec {
    pub radius: usize,
    pub boundary: Boundary,
}

impl NeighborhoodSpec {
    pub fn new(radius: usize, boundary: Boundary) -> Self {
        Self { radius, boundary }
    }

    /// |N_u|, the same for every pixel under both boundary rules.
    pub fn size(&self) -> u32 {
        let side = 2 * self.radius as u32 + 1;
        side * side
    }
}

/// Local bit density together with the integer ones-count it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    width: usize,
    height: usize,
    window: u32,
    counts: Vec<u32>,
    mu: Vec<f64>,
}

impl DensityMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Ones in each pixel's neighborhood, i.e. the squared neighborhood L2 norm.
    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn window_size(&self) -> u32 {
        self.window
    }

    /// ||Y||_{2,N_u} at pixel index `i`.
    pub fn neighborhood_norm(&self, i: usize) -> f64 {
        (self.counts[i] as f64).sqrt()
    }
}

/// Standard normal CDF, Phi(z) = erfc(-z / sqrt 2) / 2.
///
/// `libm::erfc` is accurate to a few ulp over the whole line, well inside the
/// 1e-9 absolute budget.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Upper summation index for the Poisson series: the tail beyond it is below 1e-12.
pub fn series_cutoff(theta: f64) -> usize {
    let k = (theta + 12.0 * theta.sqrt() + 12.0).ceil();
    (k as usize).max(30)
}

fn series_start(theta: f64) -> usize {
    let lo = theta - 12.0 * theta.sqrt() - 12.0;
    if lo <= 0.0 {
        0
    } else {
        lo.floor() as usize
    }
}

/// Iterates (k, P[Poisson(theta) = k]) over the non-negligible support.
///
/// When the left tail is cut off the weights are renormalized; the dropped
/// mass is far below f64 resolution while the lgamma seed term is not.
fn poisson_terms(theta: f64) -> impl Iterator<Item = (usize, f64)> {
    let start = series_start(theta);
    let end = series_cutoff(theta);
    let first = if theta == 0.0 {
        if start == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        let k = start as f64;
        (-theta + k * theta.ln() - libm::lgamma(k + 1.0)).exp()
    };
    let raw = move || {
        (start..=end).scan(first, move |pmf, k| {
            let current = *pmf;
            *pmf *= theta / (k + 1) as f64;
            Some((k, current))
        })
    };
    let scale = if start > 0 {
        1.0 / raw().map(|(_, p)| p).sum::<f64>()
    } else {
        1.0
    };
    raw().map(move |(k, p)| (k, p * scale))
}

/// Probability that the ADC fires for a photon count `k`.
fn fire_probability(k: usize, q: f64, sigma_r: f64) -> f64 {
    if sigma_r == 0.0 {
        // ADC(x) = 1 iff x >= q; ties fire.
        if k as f64 >= q {
            1.0
        } else {
            0.0
        }
    } else {
        std_normal_cdf((k as f64 - q) / sigma_r)
    }
}

fn validate_theta(theta: f64) -> Result<()> {
    if !(theta.is_finite() && theta >= 0.0) {
        return Err(domain(format!("exposure theta = {theta}; must be finite and >= 0")));
    }
    Ok(())
}

/// p_Y(1) = sum_k e^-theta theta^k / k! * Phi((k - q) / sigma_r).
///
/// With `sigma_r = 0` this is P[Poisson(theta) >= ceil(q)], evaluated as an upper
/// tail so that q <= 1 gives exactly `1 - exp(-theta)`.
pub fn bit_probability(theta: f64, q: f64, sigma_r: f64) -> Result<f64> {
    validate_theta(theta)?;
    validate_sensor(q, sigma_r)?;
    Ok(bit_probability_unchecked(theta, q, sigma_r))
}

fn bit_probability_unchecked(theta: f64, q: f64, sigma_r: f64) -> f64 {
    if sigma_r == 0.0 {
        let threshold = q.ceil() as usize;
        return poisson_upper_tail(theta, threshold);
    }
    let sum: f64 = poisson_terms(theta)
        .map(|(k, pmf)| pmf * fire_probability(k, q, sigma_r))
        .sum();
    sum.clamp(0.0, 1.0)
}

/// P[Poisson(theta) >= n].
fn poisson_upper_tail(theta: f64, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    if n == 1 {
        return -(-theta).exp_m1();
    }
    if theta == 0.0 {
        return 0.0;
    }
    if (n as f64) > theta {
        // Upper tail is the small side: sum it directly.
        poisson_terms(theta)
            .filter(|(k, _)| *k >= n)
            .map(|(_, p)| p)
            .sum::<f64>()
            .clamp(0.0, 1.0)
    } else {
        let lower: f64 = poisson_terms(theta).filter(|(k, _)| *k < n).map(|(_, p)| p).sum();
        (1.0 - lower).clamp(0.0, 1.0)
    }
}

/// d p_Y(1) / d theta = sum_k pmf(k) (F(k+1) - F(k)) with F the firing probability.
fn bit_probability_derivative(theta: f64, q: f64, sigma_r: f64) -> f64 {
    poisson_terms(theta)
        .map(|(k, pmf)| pmf * (fire_probability(k + 1, q, sigma_r) - fire_probability(k, q, sigma_r)))
        .sum()
}

/// Checks that p_Y(1) increases strictly along `thetas` (ascending).
pub fn is_monotone_in_theta(q: f64, sigma_r: f64, thetas: &[f64]) -> Result<bool> {
    let mut prev = None;
    for &t in thetas {
        let p = bit_probability(t, q, sigma_r)?;
        if let Some(pp) = prev {
            if p <= pp {
                return Ok(false);
            }
        }
        prev = Some(p);
    }
    Ok(true)
}

/// Largest bracket endpoint tried before giving up on inversion.
const THETA_SEARCH_LIMIT: f64 = 1e7;

/// Exposure estimate from a bit density: solves p_Y(1)(theta) = mu.
///
/// Closed form for the ideal sensor (sigma_r = 0, q <= 1); otherwise an expanding
/// bracket followed by bisection-safeguarded Newton. The bracket keeps the
/// iteration correct even if p were not monotone.
pub fn invert_bit_density(mu: f64, q: f64, sigma_r: f64) -> Result<f64> {
    validate_sensor(q, sigma_r)?;
    if !(mu.is_finite() && mu > 0.0 && mu < 1.0) {
        return Err(domain(format!(
            "bit density {mu} must lie strictly inside (0, 1); saturated densities have no finite estimate"
        )));
    }
    let floor = bit_probability_unchecked(0.0, q, sigma_r);
    if mu <= floor {
        return Err(Error::Unidentifiable { mu, floor });
    }
    if sigma_r == 0.0 && q <= 1.0 {
        return Ok(-(-mu).ln_1p());
    }

    let f = |t: f64| bit_probability_unchecked(t, q, sigma_r) - mu;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > THETA_SEARCH_LIMIT {
            return Err(domain(format!(
                "bit density {mu} requires exposure beyond {THETA_SEARCH_LIMIT}"
            )));
        }
    }

    let mut theta = 0.5 * (lo + hi);
    for _ in 0..200 {
        let r = f(theta);
        if r.abs() <= 1e-14 {
            break;
        }
        if r < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        let d = bit_probability_derivative(theta, q, sigma_r);
        let newton = theta - r / d;
        theta = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * hi.max(1e-300) {
            break;
        }
    }
    Ok(theta)
}

/// Draws one binary frame: per pixel k ~ Poisson(theta), n ~ N(0, sigma_r^2),
/// bit = [k + n >= q]. Pixel `i` draws only from substream `i` of `cfg.seed`.
pub fn sample_frame(map: &ExposureMap, cfg: &SensorConfig) -> BinaryFrame {
    sample_frame_keyed(map, cfg.q, cfg.sigma_r, cfg.seed)
}

pub(crate) fn sample_frame_keyed(map: &ExposureMap, q: f64, sigma_r: f64, seed: u64) -> BinaryFrame {
    let w = map.width;
    let rb = BinaryFrame::row_bytes(w);
    let mut bits = vec![0u8; rb * map.height];
    bits.par_chunks_mut(rb).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let idx = (y * w + x) as u64;
            let mut stream = Substream::new(seed, rng::domain::SENSOR, idx);
            let k = stream.poisson(map.theta[y * w + x]) as f64;
            let noise = if sigma_r > 0.0 {
                sigma_r * stream.gaussian()
            } else {
                0.0
            };
            if k + noise >= q {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
    });
    BinaryFrame {
        width: w,
        height: map.height,
        bits,
    }
}

pub fn mean_bit_density(frame: &BinaryFrame) -> f64 {
    frame.count_ones() as f64 / (frame.width * frame.height) as f64
}

/// Windowed sums along one axis. `line` holds per-position counts; positions
/// outside `[0, len)` contribute zero (ZeroPad) or the edge value (Clamp).
fn box_sum_1d(line: &[u32], radius: usize, boundary: Boundary, out: &mut [u32]) {
    let n = line.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0u32);
    for &v in line {
        prefix.push(prefix.last().unwrap() + v);
    }
    for (i, o) in out.iter_mut().enumerate() {
        let lo = i as isize - radius as isize;
        let hi = i as isize + radius as isize;
        let a = lo.max(0) as usize;
        let b = (hi.min(n as isize - 1)) as usize;
        let mut s = prefix[b + 1] - prefix[a];
        if boundary == Boundary::Clamp {
            if lo < 0 {
                s += (-lo) as u32 * line[0];
            }
            if hi > n as isize - 1 {
                s += (hi - (n as isize - 1)) as u32 * line[n - 1];
            }
        }
        *o = s;
    }
}

/// Local bit density mu(u) = ones(N_u) / |N_u|. The ones-count is kept as the
/// squared neighborhood norm, since Y^2 = Y for binary data.
pub fn local_bit_density(frame: &BinaryFrame, nb: &NeighborhoodSpec) -> DensityMap {
    let (w, h) = (frame.width, frame.height);
    let mut horiz = vec![0u32; w * h];
    horiz.par_chunks_mut(w).enumerate().for_each(|(y, out)| {
        let line: Vec<u32> = (0..w).map(|x| frame.get(x, y) as u32).collect();
        box_sum_1d(&line, nb.radius, nb.boundary, out);
    });
    let columns: Vec<Vec<u32>> = (0..w)
        .into_par_iter()
        .map(|x| {
            let line: Vec<u32> = (0..h).map(|y| horiz[y * w + x]).collect();
            let mut out = vec![0u32; h];
            box_sum_1d(&line, nb.radius, nb.boundary, &mut out);
            out
        })
        .collect();
    let mut counts = vec![0u32; w * h];
    for (x, col) in columns.iter().enumerate() {
        for (y, &c) in col.iter().enumerate() {
            counts[y * w + x] = c;
        }
    }
    let window = nb.size();
    let mu = counts.iter().map(|&c| c as f64 / window as f64).collect();
    DensityMap {
        width: w,
        height: h,
        window,
        counts,
        mu,
    }
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    // Reference values: mpmath at 50 digits, series summed to k = 60.
    const PHI_MINUS_ONE: f64 = 0.158_655_253_931_457_05;
    const P_THETA1_Q05_S025: f64 = 0.632_120_558_647_085_02;
    const P_THETA2_Q05_S025: f64 = 0.861_585_820_945_469_93;
    const P_THETA025_Q15_S05: f64 = 0.054_576_517_878_856_662;
    const P_THETA4_Q15_S05: f64 = 0.896_559_259_164_810_37;

    #[test]
    fn normal_cdf_against_table() {
        let table = [
            (-5.0, 2.866_515_718_791_939_1e-7),
            (-3.0, 0.001_349_898_031_630_094_5),
            (-2.0, 0.022_750_131_948_179_207),
            (-1.0, PHI_MINUS_ONE),
            (-0.5, 0.308_537_538_725_986_9),
            (0.0, 0.5),
            (0.5, 0.691_462_461_274_013_1),
            (1.0, 0.841_344_746_068_542_9),
            (2.0, 0.977_249_868_051_820_8),
            (3.0, 0.998_650_101_968_369_9),
            (5.0, 0.999_999_713_348_428_1),
        ];
        for (z, expected) in table {
            assert!((std_normal_cdf(z) - expected).abs() < 1e-9, "Phi({z})");
        }
    }

    #[test]
    fn bit_probability_examples() {
        assert_eq!(bit_probability(0.0, 0.5, 0.0).unwrap(), 0.0);
        assert!((bit_probability(LN2, 0.5, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((bit_probability(0.0, 0.5, 0.5).unwrap() - PHI_MINUS_ONE).abs() < 1e-12);
        assert!((bit_probability(1.0, 0.5, 0.25).unwrap() - P_THETA1_Q05_S025).abs() < 1e-12);
        assert!((bit_probability(2.0, 0.5, 0.25).unwrap() - P_THETA2_Q05_S025).abs() < 1e-12);
        assert!((bit_probability(0.25, 1.5, 0.5).unwrap() - P_THETA025_Q15_S05).abs() < 1e-12);
        assert!((bit_probability(4.0, 1.5, 0.5).unwrap() - P_THETA4_Q15_S05).abs() < 1e-12);
    }

    #[test]
    fn ideal_sensor_ties_fire() {
        // q = 2 exactly: k = 2 fires, so p = P[Poisson >= 2].
        let theta: f64 = 1.3;
        let expected = 1.0 - (-theta).exp() * (1.0 + theta);
        assert!((bit_probability(theta, 2.0, 0.0).unwrap() - expected).abs() < 1e-14);
        // q = 1.5 rounds up to the same threshold.
        assert!((bit_probability(theta, 1.5, 0.0).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn huge_exposure_saturates() {
        assert!((bit_probability(1e6, 0.5, 0.25).unwrap() - 1.0).abs() < 1e-12);
        assert!((bit_probability(1e6, 0.5, 0.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bit_probability_rejects_bad_inputs() {
        assert!(matches!(bit_probability(-1.0, 0.5, 0.0), Err(Error::Domain(_))));
        assert!(matches!(bit_probability(f64::NAN, 0.5, 0.0), Err(Error::Domain(_))));
        assert!(matches!(
            bit_probability(f64::INFINITY, 0.5, 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(bit_probability(1.0, 0.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(bit_probability(1.0, 0.5, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn inversion_examples() {
        let mu = 1.0 - (-1.0f64).exp();
        assert!((invert_bit_density(mu, 0.5, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((invert_bit_density(0.5, 0.5, 0.0).unwrap() - LN2).abs() < 1e-12);
        let mu = bit_probability(2.0, 0.5, 0.25).unwrap();
        assert!((invert_bit_density(mu, 0.5, 0.25).unwrap() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn inversion_error_paths() {
        assert!(matches!(invert_bit_density(0.0, 0.5, 0.0), Err(Error::Domain(_))));
        assert!(matches!(invert_bit_density(1.0, 0.5, 0.0), Err(Error::Domain(_))));
        assert!(matches!(invert_bit_density(1.2, 0.5, 0.0), Err(Error::Domain(_))));
        // Phi(-1) is the floor at q = 0.5, sigma = 0.5.
        assert!(matches!(
            invert_bit_density(0.1, 0.5, 0.5),
            Err(Error::Unidentifiable { .. })
        ));
        assert!(matches!(
            invert_bit_density(PHI_MINUS_ONE, 0.5, 0.5),
            Err(Error::Unidentifiable { .. })
        ));
        assert!(invert_bit_density(0.2, 0.5, 0.5).is_ok());
    }

    #[test]
    fn inversion_meets_residual_tolerance() {
        for &(q, s) in &[(0.5, 0.25), (1.5, 0.0), (1.5, 0.5), (2.0, 0.0), (3.5, 0.1)] {
            for &mu in &[0.3, 0.5, 0.9, 0.999] {
                let floor = bit_probability(0.0, q, s).unwrap();
                if mu <= floor {
                    continue;
                }
                let t = invert_bit_density(mu, q, s).unwrap();
                assert!(
                    (bit_probability(t, q, s).unwrap() - mu).abs() <= 1e-10,
                    "q={q} s={s} mu={mu}"
                );
            }
        }
    }

    #[test]
    fn monotone_on_grid() {
        let thetas: Vec<f64> = (0..=200).map(|i| i as f64 * 0.05).collect();
        for &q in &[0.25, 0.5, 1.0, 1.5, 2.5] {
            for &s in &[0.0, 0.1, 0.25, 0.5, 1.0] {
                let grid: Vec<f64> = if s == 0.0 && q > 1.0 {
                    // P[Poisson >= n] is flat at zero only for theta = 0.
                    thetas[1..].to_vec()
                } else {
                    thetas.clone()
                };
                assert!(is_monotone_in_theta(q, s, &grid).unwrap(), "q={q} s={s}");
            }
        }
    }

    #[test]
    fn decreasing_in_threshold() {
        for &theta in &[0.3, 1.0, 4.0] {
            for &s in &[0.1, 0.25, 0.5] {
                let ps: Vec<f64> = [0.25, 0.5, 1.0, 1.5, 2.5]
                    .iter()
                    .map(|&q| bit_probability(theta, q, s).unwrap())
                    .collect();
                assert!(ps.windows(2).all(|w| w[1] < w[0]));
            }
        }
    }

    #[test]
    fn sample_frame_extremes() {
        let zero = ExposureMap::constant(37, 11, 0.0).unwrap();
        let cfg = SensorConfig::new(0.5, 0.0, 3).unwrap();
        let f = sample_frame(&zero, &cfg);
        assert_eq!(f.count_ones(), 0);

        let bright = ExposureMap::constant(256, 256, 1e6).unwrap();
        let f = sample_frame(&bright, &SensorConfig::new(0.5, 0.0, 99).unwrap());
        assert!(mean_bit_density(&f) > 0.9999);
    }

    #[test]
    fn sample_frame_ideal_density() {
        let map = ExposureMap::constant(1024, 1024, 1.0).unwrap();
        let f = sample_frame(&map, &SensorConfig::new(0.5, 0.0, 2024).unwrap());
        let p = 1.0 - (-1.0f64).exp();
        let se = (p * (1.0 - p) / (1024.0 * 1024.0)).sqrt();
        assert!((mean_bit_density(&f) - p).abs() < 4.0 * se);
    }

    #[test]
    fn sample_frame_padding_stays_zero() {
        let map = ExposureMap::constant(13, 5, 50.0).unwrap();
        let f = sample_frame(&map, &SensorConfig::new(0.5, 0.25, 1).unwrap());
        assert!(BinaryFrame::from_packed(13, 5, f.packed().to_vec()).is_ok());
        assert_eq!(f.count_ones(), 65);
    }

    #[test]
    fn mean_density_examples() {
        assert_eq!(mean_bit_density(&BinaryFrame::zeros(9, 3)), 0.0);
        assert_eq!(mean_bit_density(&BinaryFrame::from_fn(9, 3, |_, _| true)), 1.0);
        let f = BinaryFrame::from_fn(2, 2, |x, y| x == y);
        assert_eq!(mean_bit_density(&f), 0.5);
    }

    #[test]
    fn local_density_examples() {
        let ones = BinaryFrame::from_fn(6, 5, |_, _| true);
        let d = local_bit_density(&ones, &NeighborhoodSpec::new(1, Boundary::ZeroPad));
        assert_eq!(d.mu()[0], 4.0 / 9.0);
        assert_eq!(d.mu()[6 * 5 - 1], 4.0 / 9.0);
        assert_eq!(d.mu()[6 + 1], 1.0);
        assert_eq!(d.mu()[1], 6.0 / 9.0);
        let d = local_bit_density(&ones, &NeighborhoodSpec::new(1, Boundary::Clamp));
        assert!(d.mu().iter().all(|&m| m == 1.0));

        let zeros = BinaryFrame::zeros(6, 5);
        let d = local_bit_density(&zeros, &NeighborhoodSpec::new(2, Boundary::Clamp));
        assert!(d.mu().iter().all(|&m| m == 0.0));

        let dot = BinaryFrame::from_fn(5, 5, |x, y| x == 2 && y == 2);
        let d = local_bit_density(&dot, &NeighborhoodSpec::new(1, Boundary::ZeroPad));
        for y in 0..5usize {
            for x in 0..5usize {
                let near = x.abs_diff(2) <= 1 && y.abs_diff(2) <= 1;
                let expected = if near { 1.0 / 9.0 } else { 0.0 };
                assert_eq!(d.mu()[y * 5 + x], expected);
            }
        }
    }

    #[test]
    fn clamp_boundary_replicates_edges() {
        // Single lit corner: with clamping, pixel (0,0) sees it (r+1)^2 times.
        let f = BinaryFrame::from_fn(4, 4, |x, y| x == 0 && y == 0);
        let d = local_bit_density(&f, &NeighborhoodSpec::new(1, Boundary::Clamp));
        assert_eq!(d.counts()[0], 4);
        assert_eq!(d.counts()[1], 2);
        assert_eq!(d.counts()[5], 1);
        assert_eq!(d.counts()[2], 0);
    }

    #[test]
    fn from_packed_rejects_padding() {
        assert!(BinaryFrame::from_packed(3, 1, vec![0b1110_0000]).is_ok());
        assert!(BinaryFrame::from_packed(3, 1, vec![0b1111_0000]).is_err());
        assert!(BinaryFrame::from_packed(3, 2, vec![0]).is_err());
    }

    #[test]
    fn exposure_map_invariants() {
        assert!(ExposureMap::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ExposureMap::new(2, 1, vec![0.0, -1.0]).is_err());
        assert!(ExposureMap::new(2, 1, vec![0.0, f64::NAN]).is_err());
        assert!(ExposureMap::new(0, 1, vec![]).is_err());
    }
}
