//! Numerical checks of the exposure-continuity bound for exposure-adaptive layers.
//!
//! For a layer Y = act(sum phi <x, Lambda>_{N_u}) with a non-expansive activation,
//!
//! ```text
//! ||Y1 - Y2||_2 <= ||phi||_2 * max_u ||x||_{2,N_u} * sqrt(|U|) * ||Lambda1 - Lambda2||_2
//! ```
//!
//! The chain is verified stage by stage: activation contraction, Hölder on the
//! coefficient sum, Cauchy-Schwarz on each windowed inner product, then the
//! aggregate over sites.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atom_ode::{integrate_atoms, AtomVectorField, SolverConfig};
use crate::error::{domain, shape, Result};
use crate::filter_atoms::{
    atom_responses, eacl_forward, pre_activation, Activation, Coefficients, EaclConfig, FeatureMap, FilterAtoms,
};
use crate::rng::{self, Substream};
use crate::sensor_model::{
    local_bit_density, sample_frame, BinaryFrame, Boundary, ExposureMap, NeighborhoodSpec, SensorConfig,
};

/// Absolute slack allowed on every inequality.
pub const SLACK: f64 = 1e-9;

/// Outcome of one family of inequalities, reported at its tightest site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub checked: usize,
}

impl StageCheck {
    fn new() -> Self {
        Self {
            lhs: 0.0,
            rhs: 0.0,
            holds: true,
            checked: 0,
        }
    }

    fn record(&mut self, lhs: f64, rhs: f64) {
        if self.checked == 0 || lhs - rhs > self.lhs - self.rhs {
            self.lhs = lhs;
            self.rhs = rhs;
        }
        self.holds &= lhs <= rhs + SLACK;
        self.checked += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub slack: f64,
    pub instance_seed: u64,
    pub activation_stage: StageCheck,
    pub holder_stage: StageCheck,
    pub cauchy_schwarz_stage: StageCheck,
    /// Per-site form |dY(o,u)| <= ||phi_o|| ||x||_{N_u} ||dLambda||.
    pub site_stage: StageCheck,
    /// Right-hand side scaled by sqrt(m); computed only when the main bound fails.
    pub m_factor_rhs: Option<f64>,
}

impl BoundReport {
    pub fn all_hold(&self) -> bool {
        self.holds
            && self.activation_stage.holds
            && self.holder_stage.holds
            && self.cauchy_schwarz_stage.holds
            && self.site_stage.holds
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-channel squared window norms with zero padding, laid out [c][site].
fn channel_window_sq(input: &FeatureMap, radius: usize) -> Vec<f64> {
    let (w, h) = (input.width(), input.height());
    let r = radius as isize;
    let mut out = Vec::with_capacity(input.channels() * w * h);
    for c in 0..input.channels() {
        let ch = input.channel(c);
        for u in 0..w * h {
            let (x, y) = ((u % w) as isize, (u / w) as isize);
            let mut s = 0.0;
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    let v = ch[yy as usize * w + xx as usize];
                    s += v * v;
                }
            }
            out.push(s);
        }
    }
    out
}

/// Checks the layer bound for two atom sets sharing coefficients and input.
/// Bias is dropped; only the activation of `cfg` is used.
pub fn verify_layer_bound(
    input: &FeatureMap,
    phi: &Coefficients,
    atoms1: &FilterAtoms,
    atoms2: &FilterAtoms,
    cfg: &EaclConfig,
) -> Result<BoundReport> {
    if !cfg.activation.is_non_expansive() {
        return Err(domain(format!("activation {:?} is expansive", cfg.activation)));
    }
    if !atoms1.same_shape(atoms2) {
        return Err(shape("atom sets differ in shape"));
    }
    let unbiased = EaclConfig::unbiased(phi.c_out(), cfg.activation);
    let y1 = eacl_forward(input, phi, atoms1, &unbiased)?;
    let y2 = eacl_forward(input, phi, atoms2, &unbiased)?;
    let p1 = pre_activation(input, phi, atoms1)?;
    let p2 = pre_activation(input, phi, atoms2)?;

    let (m, k) = (atoms1.m(), atoms1.k());
    let diff_data: Vec<f64> = atoms1.data().iter().zip(atoms2.data()).map(|(a, b)| a - b).collect();
    let diff = FilterAtoms::new(m, k, diff_data)?;
    let atom_dist = diff.norm();
    let atom_norms: Vec<f64> = (0..m).map(|j| l2(diff.atom(j))).collect();

    let n = input.domain_size();
    let c_in = input.channels();
    let responses = atom_responses(input, &diff);
    let window_sq = channel_window_sq(input, k / 2);
    let site_norm: Vec<f64> = (0..n)
        .map(|u| (0..c_in).map(|i| window_sq[i * n + u]).sum::<f64>().sqrt())
        .collect();
    let max_norm = site_norm.iter().cloned().fold(0.0, f64::max);

    let mut activation_stage = StageCheck::new();
    let mut holder_stage = StageCheck::new();
    let mut cs_stage = StageCheck::new();
    let mut site_stage = StageCheck::new();

    for i in 0..c_in {
        for j in 0..m {
            let resp = &responses[(i * m + j) * n..][..n];
            for u in 0..n {
                cs_stage.record(resp[u].abs(), window_sq[i * n + u].sqrt() * atom_norms[j]);
            }
        }
    }

    let mut b = vec![0.0; c_in * m];
    for o in 0..phi.c_out() {
        let phi_o = phi.output_slice(o);
        let phi_o_norm = l2(phi_o);
        for u in 0..n {
            for (ij, bv) in b.iter_mut().enumerate() {
                *bv = responses[ij * n + u];
            }
            let mixed: f64 = phi_o.iter().zip(&b).map(|(p, r)| p * r).sum();
            holder_stage.record(mixed.abs(), phi_o_norm * l2(&b));

            let idx = o * n + u;
            let dy = (y1.data()[idx] - y2.data()[idx]).abs();
            let dpre = (p1.data()[idx] - p2.data()[idx]).abs();
            activation_stage.record(dy, dpre);
            site_stage.record(dy, phi_o_norm * site_norm[u] * atom_dist);
        }
    }

    let lhs = y1.distance(&y2);
    let rhs = phi.norm() * max_norm * (n as f64).sqrt() * atom_dist;
    let holds = lhs <= rhs + SLACK;
    Ok(BoundReport {
        lhs,
        rhs,
        holds,
        slack: rhs - lhs,
        instance_seed: 0,
        activation_stage,
        holder_stage,
        cauchy_schwarz_stage: cs_stage,
        site_stage,
        m_factor_rhs: if holds { None } else { Some(rhs * (m as f64).sqrt()) },
    })
}

/// Brute-force check that the squared window norm of a binary frame equals the
/// ones-count behind its local density, at every pixel.
pub fn verify_density_identity(frame: &BinaryFrame, nb: &NeighborhoodSpec) -> bool {
    let density = local_bit_density(frame, nb);
    let (w, h) = (frame.width() as isize, frame.height() as isize);
    let r = nb.radius as isize;
    let window = nb.size();
    for y in 0..h {
        for x in 0..w {
            let mut sum_sq = 0.0f64;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (mut xx, mut yy) = (x + dx, y + dy);
                    match nb.boundary {
                        Boundary::ZeroPad => {
                            if xx < 0 || yy < 0 || xx >= w || yy >= h {
                                continue;
                            }
                        }
                        Boundary::Clamp => {
                            xx = xx.clamp(0, w - 1);
                            yy = yy.clamp(0, h - 1);
                        }
                    }
                    let v = if frame.get(xx as usize, yy as usize) { 1.0 } else { 0.0 };
                    sum_sq += v * v;
                }
            }
            let i = (y * w + x) as usize;
            let count = density.counts()[i];
            if sum_sq != count as f64 {
                return false;
            }
            if ((density.mu()[i] * window as f64).round() as u32) != count {
                return false;
            }
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuityEntry {
    pub delta: f64,
    pub output_distance: f64,
    pub atom_distance: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub instance_seed: u64,
    pub entries: Vec<ContinuityEntry>,
    /// Bound holds at every delta.
    pub bound_holds: bool,
    /// Output distance shrinks as delta shrinks (strictly, wherever it is nonzero).
    pub shrinks: bool,
}

impl ContinuityReport {
    pub fn all_hold(&self) -> bool {
        self.bound_holds && self.shrinks
    }
}

/// Compares the layer with atoms at theta0 + delta against the atoms at theta0,
/// for each delta in decreasing order.
pub fn verify_exposure_continuity(
    field: &AtomVectorField,
    phi: &Coefficients,
    input: &FeatureMap,
    theta0: f64,
    deltas: &[f64],
    cfg: &EaclConfig,
    solver: &SolverConfig,
) -> Result<ContinuityReport> {
    if deltas.iter().any(|d| d.is_nan() || *d < 0.0) {
        return Err(domain("deltas must be non-negative"));
    }
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(domain("deltas must be strictly decreasing"));
    }
    let unbiased = EaclConfig::unbiased(phi.c_out(), cfg.activation);
    let base_atoms = integrate_atoms(field, theta0, theta0, solver)?;
    let base = eacl_forward(input, phi, &base_atoms, &unbiased)?;
    let max_norm = input.neighborhood_norms(field.k() / 2).into_iter().fold(0.0, f64::max);
    let constant = phi.norm() * max_norm * (input.domain_size() as f64).sqrt();

    let mut entries = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let atoms = integrate_atoms(field, theta0, theta0 + delta, solver)?;
        let out = eacl_forward(input, phi, &atoms, &unbiased)?;
        let output_distance = out.distance(&base);
        let atom_distance = atoms.distance(&base_atoms);
        let bound = constant * atom_distance;
        entries.push(ContinuityEntry {
            delta,
            output_distance,
            atom_distance,
            bound,
            holds: output_distance <= bound + SLACK,
        });
    }
    let bound_holds = entries.iter().all(|e| e.holds);
    let shrinks = entries.windows(2).all(|w| {
        let (prev, next) = (w[0].output_distance, w[1].output_distance);
        if prev > 0.0 {
            next < prev
        } else {
            next == 0.0
        }
    });
    Ok(ContinuityReport {
        instance_seed: 0,
        entries,
        bound_holds,
        shrinks,
    })
}

fn random_vec(stream: &mut Substream, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| stream.uniform_in(lo, hi)).collect()
}

/// Shape of the randomized layer-bound instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerInstanceShape {
    pub channels: usize,
    pub atoms: usize,
    pub kernel: usize,
    pub size: usize,
}

impl Default for LayerInstanceShape {
    fn default() -> Self {
        Self {
            channels: 4,
            atoms: 3,
            kernel: 3,
            size: 16,
        }
    }
}

/// Seed of the `i`-th instance of a suite run with `seed`.
pub fn instance_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// One randomized layer-bound instance: random input, coefficients and atoms,
/// with the second atom set a perturbation of the first at a random scale.
pub fn random_layer_instance(seed: u64, shape: LayerInstanceShape, activation: Activation) -> Result<BoundReport> {
    let LayerInstanceShape {
        channels: c,
        atoms: m,
        kernel: k,
        size,
    } = shape;
    let mut s = Substream::new(seed, rng::domain::INSTANCE, 0);
    let input = FeatureMap::new(c, size, size, random_vec(&mut s, c * size * size, -1.0, 1.0))?;
    let phi = Coefficients::new(c, c, m, random_vec(&mut s, c * c * m, -1.0, 1.0))?;
    let a1 = random_vec(&mut s, m * k * k, -1.0, 1.0);
    let scale = 10f64.powf(-4.0 * s.uniform());
    let a2: Vec<f64> = a1.iter().map(|v| v + scale * s.uniform_in(-1.0, 1.0)).collect();
    let mut report = verify_layer_bound(
        &input,
        &phi,
        &FilterAtoms::new(m, k, a1)?,
        &FilterAtoms::new(m, k, a2)?,
        &EaclConfig::unbiased(c, activation),
    )?;
    report.instance_seed = seed;
    Ok(report)
}

pub fn layer_bound_suite(instances: usize, seed: u64, activation: Activation) -> Result<Vec<BoundReport>> {
    (0..instances)
        .into_par_iter()
        .map(|i| random_layer_instance(instance_seed(seed, i), LayerInstanceShape::default(), activation))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityCheck {
    pub instance_seed: u64,
    pub radius: usize,
    pub boundary: Boundary,
    pub holds: bool,
}

/// Random frame for the density identity: side 8..=40, exposure uniform in [0, 3].
pub fn random_density_frame(seed: u64) -> BinaryFrame {
    let mut s = Substream::new(seed, rng::domain::INSTANCE, 1);
    let w = 8 + (s.next_u64() % 33) as usize;
    let h = 8 + (s.next_u64() % 33) as usize;
    let theta = random_vec(&mut s, w * h, 0.0, 3.0);
    let map = ExposureMap::new(w, h, theta).expect("valid random exposure");
    sample_frame(
        &map,
        &SensorConfig {
            q: 0.5,
            sigma_r: 0.25,
            seed,
        },
    )
}

pub fn density_suite(instances: usize, seed: u64, radii: &[usize]) -> Vec<DensityCheck> {
    (0..instances)
        .into_par_iter()
        .flat_map_iter(|i| {
            let seed = instance_seed(seed, i);
            let frame = random_density_frame(seed);
            radii
                .iter()
                .flat_map(|&radius| [Boundary::ZeroPad, Boundary::Clamp].map(|b| (radius, b)))
                .map(|(radius, boundary)| DensityCheck {
                    instance_seed: seed,
                    radius,
                    boundary,
                    holds: verify_density_identity(&frame, &NeighborhoodSpec::new(radius, boundary)),
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

pub const CONTINUITY_THETA0: f64 = 0.25;
pub const CONTINUITY_DELTAS: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// Seeded field, coefficients and a 16x16 binary input frame, checked at the
/// default deltas with ReLU.
pub fn random_continuity_instance(seed: u64, solver: &SolverConfig) -> Result<ContinuityReport> {
    let field = AtomVectorField::random(6, 3, seed)?;
    let mut s = Substream::new(seed, rng::domain::INSTANCE, 2);
    let phi = Coefficients::new(4, 1, 6, random_vec(&mut s, 24, -1.0, 1.0))?;
    let frame = sample_frame(
        &ExposureMap::constant(16, 16, 1.0)?,
        &SensorConfig {
            q: 0.5,
            sigma_r: 0.0,
            seed,
        },
    );
    let input = FeatureMap::from_frame(&frame);
    let mut report = verify_exposure_continuity(
        &field,
        &phi,
        &input,
        CONTINUITY_THETA0,
        &CONTINUITY_DELTAS,
        &EaclConfig::unbiased(4, Activation::Relu),
        solver,
    )?;
    report.instance_seed = seed;
    Ok(report)
}

pub fn continuity_suite(instances: usize, seed: u64, solver: &SolverConfig) -> Result<Vec<ContinuityReport>> {
    (0..instances)
        .into_par_iter()
        .map(|i| random_continuity_instance(instance_seed(seed, i), solver))
        .collect()
}
