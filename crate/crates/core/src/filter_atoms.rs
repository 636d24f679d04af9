//! Atom-coefficient filter decomposition F = phi * Lambda and the
//! exposure-adaptive convolutional layer built on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::sensor_model::BinaryFrame;

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(domain(format!("{what} contains non-finite entries")))
    }
}

/// m spatial atoms of size k x k, stored atom-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterAtoms {
    m: usize,
    k: usize,
    data: Vec<f64>,
}

impl FilterAtoms {
    pub fn new(m: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if m == 0 || k == 0 {
            return Err(shape("atom count and size must be >= 1"));
        }
        if data.len() != m * k * k {
            return Err(shape(format!("atoms: {} values for {m}x{k}x{k}", data.len())));
        }
        check_finite(&data, "atoms")?;
        Ok(Self { m, k, data })
    }

    pub fn zeros(m: usize, k: usize) -> Self {
        Self {
            m,
            k,
            data: vec![0.0; m * k * k],
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        let n = self.k * self.k;
        &self.data[j * n..(j + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.m == other.m && self.k == other.k
    }

    /// Flattened L2 distance ||self - other||_2.
    pub fn distance(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.data)
    }

    pub(crate) fn from_raw(m: usize, k: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), m * k * k);
        Self { m, k, data }
    }
}

/// Mixing coefficients phi[o, i, j], c_out x c_in x m.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    c_out: usize,
    c_in: usize,
    m: usize,
    data: Vec<f64>,
}

impl Coefficients {
    pub fn new(c_out: usize, c_in: usize, m: usize, data: Vec<f64>) -> Result<Self> {
        if c_out == 0 || c_in == 0 || m == 0 {
            return Err(shape("coefficient dimensions must be >= 1"));
        }
        if data.len() != c_out * c_in * m {
            return Err(shape(format!(
                "coefficients: {} values for {c_out}x{c_in}x{m}",
                data.len()
            )));
        }
        check_finite(&data, "coefficients")?;
        Ok(Self { c_out, c_in, m, data })
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, j: usize) -> f64 {
        self.data[(o * self.c_in + i) * self.m + j]
    }

    /// Coefficients feeding output channel `o`, laid out [i][j].
    pub fn output_slice(&self, o: usize) -> &[f64] {
        let n = self.c_in * self.m;
        &self.data[o * n..(o + 1) * n]
    }

    pub fn norm(&self) -> f64 {
        l2(&self.data)
    }
}

/// Full filter bank c_out x c_in x k x k.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub data: Vec<f64>,
}

impl FilterBank {
    pub fn kernel(&self, o: usize, i: usize) -> &[f64] {
        let n = self.k * self.k;
        let start = (o * self.c_in + i) * n;
        &self.data[start..start + n]
    }
}

/// Channel-major feature map [c][y][x].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(shape("feature map dimensions must be >= 1"));
        }
        if data.len() != channels * width * height {
            return Err(shape(format!(
                "feature map: {} values for {channels}x{height}x{width}",
                data.len()
            )));
        }
        check_finite(&data, "feature map")?;
        Ok(Self {
            channels,
            width,
            height,
            data,
        })
    }

    /// Single-channel map holding the bits of a binary frame as 0.0 / 1.0.
    pub fn from_frame(frame: &BinaryFrame) -> Self {
        let (w, h) = (frame.width(), frame.height());
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(if frame.get(x, y) { 1.0 } else { 0.0 });
            }
        }
        Self {
            channels: 1,
            width: w,
            height: h,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// |U|, the number of spatial sites.
    pub fn domain_size(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// ||x||_{2,N_u} over all channels of the (2r+1)^2 window at every site,
    /// with zero padding outside the domain.
    pub fn neighborhood_norms(&self, radius: usize) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let r = radius as isize;
        (0..w * h)
            .map(|u| {
                let (x, y) = ((u % w) as isize, (u / w) as isize);
                let mut s = 0.0;
                for c in 0..self.channels {
                    let ch = self.channel(c);
                    for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                        for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                            let v = ch[yy as usize * w + xx as usize];
                            s += v * v;
                        }
                    }
                }
                s.sqrt()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Tanh => a.tanh(),
            Activation::Identity => a,
            Activation::Sigmoid => 1.0 / (1.0 + (-a).exp()),
        }
    }

    /// Lipschitz constant of the activation.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
            _ => 1.0,
        }
    }

    pub fn is_non_expansive(self) -> bool {
        self.lipschitz() <= 1.0
    }
}

/// Per-output-channel bias and activation. Zero padding and stride 1 are fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct EaclConfig {
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl EaclConfig {
    pub fn unbiased(c_out: usize, activation: Activation) -> Self {
        Self {
            bias: vec![0.0; c_out],
            activation,
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// F[o, i] = sum_j phi[o, i, j] * Lambda[j].
pub fn compose_filters(phi: &Coefficients, atoms: &FilterAtoms) -> Result<FilterBank> {
    if phi.m != atoms.m {
        return Err(shape(format!(
            "coefficients use {} atoms, atom set has {}",
            phi.m, atoms.m
        )));
    }
    let n = atoms.k * atoms.k;
    let mut data = vec![0.0; phi.c_out * phi.c_in * n];
    for o in 0..phi.c_out {
        for i in 0..phi.c_in {
            let dst = &mut data[(o * phi.c_in + i) * n..][..n];
            for j in 0..atoms.m {
                let c = phi.get(o, i, j);
                for (d, a) in dst.iter_mut().zip(atoms.atom(j)) {
                    *d += c * a;
                }
            }
        }
    }
    Ok(FilterBank {
        c_out: phi.c_out,
        c_in: phi.c_in,
        k: atoms.k,
        data,
    })
}

/// Zero-padded, stride-1 cross-correlation of one channel with one k x k kernel,
/// accumulated into `out`.
fn correlate_into(channel: &[f64], w: usize, h: usize, kernel: &[f64], k: usize, out: &mut [f64]) {
    let r = (k / 2) as isize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in 0..k as isize {
                let yy = y + dy - r;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                let row = &channel[yy as usize * w..][..w];
                let krow = &kernel[dy as usize * k..][..k];
                for dx in 0..k as isize {
                    let xx = x + dx - r;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += row[xx as usize] * krow[dx as usize];
                }
            }
            out[y as usize * w + x as usize] += acc;
        }
    }
}

fn check_layer(input: &FeatureMap, phi: &Coefficients, atoms: &FilterAtoms) -> Result<()> {
    if input.channels != phi.c_in {
        return Err(shape(format!(
            "input has {} channels, coefficients expect {}",
            input.channels, phi.c_in
        )));
    }
    if phi.m != atoms.m {
        return Err(shape(format!(
            "coefficients use {} atoms, atom set has {}",
            phi.m, atoms.m
        )));
    }
    if atoms.k.is_multiple_of(2) {
        return Err(domain(format!(
            "atom size {} is even; centered windows need odd k",
            atoms.k
        )));
    }
    Ok(())
}

/// Pre-activation output computed by composing the filters first.
pub fn pre_activation(input: &FeatureMap, phi: &Coefficients, atoms: &FilterAtoms) -> Result<FeatureMap> {
    check_layer(input, phi, atoms)?;
    let bank = compose_filters(phi, atoms)?;
    let (w, h) = (input.width, input.height);
    let data: Vec<f64> = (0..phi.c_out)
        .into_par_iter()
        .flat_map_iter(|o| {
            let mut out = vec![0.0; w * h];
            for i in 0..phi.c_in {
                correlate_into(input.channel(i), w, h, bank.kernel(o, i), bank.k, &mut out);
            }
            out
        })
        .collect();
    Ok(FeatureMap {
        channels: phi.c_out,
        width: w,
        height: h,
        data,
    })
}

/// Responses <x_i, Lambda_j>_{N_u} for every input channel i and atom j,
/// laid out [i][j][site].
pub fn atom_responses(input: &FeatureMap, atoms: &FilterAtoms) -> Vec<f64> {
    let (w, h) = (input.width, input.height);
    let n = w * h;
    (0..input.channels * atoms.m)
        .into_par_iter()
        .flat_map_iter(|ij| {
            let (i, j) = (ij / atoms.m, ij % atoms.m);
            let mut out = vec![0.0; n];
            correlate_into(input.channel(i), w, h, atoms.atom(j), atoms.k, &mut out);
            out
        })
        .collect()
}

/// Pre-activation output computed in atom space: correlate with every atom, then
/// mix the responses with phi.
pub fn pre_activation_atom_space(input: &FeatureMap, phi: &Coefficients, atoms: &FilterAtoms) -> Result<FeatureMap> {
    check_layer(input, phi, atoms)?;
    let n = input.width * input.height;
    let responses = atom_responses(input, atoms);
    let data: Vec<f64> = (0..phi.c_out)
        .into_par_iter()
        .flat_map_iter(|o| {
            let mut out = vec![0.0; n];
            for i in 0..phi.c_in {
                for j in 0..phi.m {
                    let c = phi.get(o, i, j);
                    let resp = &responses[(i * phi.m + j) * n..][..n];
                    for (d, r) in out.iter_mut().zip(resp) {
                        *d += c * r;
                    }
                }
            }
            out
        })
        .collect();
    Ok(FeatureMap {
        channels: phi.c_out,
        width: input.width,
        height: input.height,
        data,
    })
}

fn activate(mut pre: FeatureMap, cfg: &EaclConfig) -> Result<FeatureMap> {
    if cfg.bias.len() != pre.channels {
        return Err(shape(format!(
            "bias has {} entries, layer has {} outputs",
            cfg.bias.len(),
            pre.channels
        )));
    }
    let n = pre.width * pre.height;
    for (o, chunk) in pre.data.chunks_mut(n).enumerate() {
        let b = cfg.bias[o];
        for v in chunk {
            *v = cfg.activation.apply(*v + b);
        }
    }
    Ok(pre)
}

/// Y(u) = act(sum_j phi_j <x, Lambda_j>_{N_u} + b).
pub fn eacl_forward(
    input: &FeatureMap,
    phi: &Coefficients,
    atoms: &FilterAtoms,
    cfg: &EaclConfig,
) -> Result<FeatureMap> {
    activate(pre_activation(input, phi, atoms)?, cfg)
}

/// Same layer evaluated through [`pre_activation_atom_space`].
pub fn eacl_forward_atom_space(
    input: &FeatureMap,
    phi: &Coefficients,
    atoms: &FilterAtoms,
    cfg: &EaclConfig,
) -> Result<FeatureMap> {
    activate(pre_activation_atom_space(input, phi, atoms)?, cfg)
}
