//! Filter atoms as the solution of an ODE in the continuous exposure label.
//!
//! dLambda/dtheta~ = g(theta~, Lambda; W), with g a six-stage network
//! (per-atom normalization, tanh, linear mix of the state plus theta~),
//! integrated by fixed-step RK4 or adaptive Dormand-Prince 5(4).

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::filter_atoms::{compose_filters, Coefficients, FilterAtoms, FilterBank};
use crate::rng::{self, Substream};

/// Right-hand side of an autonomous-or-not ODE system y' = f(t, y).
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]);
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> VectorField for FnField<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        (self.f)(t, y, dy)
    }
}

pub const STAGE_COUNT: usize = 6;
pub const NORM_EPS: f64 = 1e-5;
pub const DEFAULT_ATOMS: usize = 6;
pub const DEFAULT_ATOM_SIZE: usize = 3;
const OUTPUT_GAIN: f64 = 0.25;

/// Parameters of the atom vector field and the initial atoms.
///
/// Stage weights are row-major `n x (n + 1)` blocks with `n = m * k * k`; the
/// last column multiplies theta~.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomVectorField {
    m: usize,
    k: usize,
    stages: Vec<Vec<f64>>,
    lambda_init: FilterAtoms,
}

impl AtomVectorField {
    pub fn new(stages: Vec<Vec<f64>>, lambda_init: FilterAtoms) -> Result<Self> {
        let (m, k) = (lambda_init.m(), lambda_init.k());
        let n = m * k * k;
        if stages.len() != STAGE_COUNT {
            return Err(shape(format!(
                "field has {} stages, expected {STAGE_COUNT}",
                stages.len()
            )));
        }
        for (s, w) in stages.iter().enumerate() {
            if w.len() != n * (n + 1) {
                return Err(shape(format!(
                    "stage {s} has {} weights, expected {}",
                    w.len(),
                    n * (n + 1)
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(domain(format!("stage {s} has non-finite weights")));
            }
        }
        Ok(Self {
            m,
            k,
            stages,
            lambda_init,
        })
    }

    /// All-zero weights: the field vanishes everywhere.
    pub fn zeros(lambda_init: FilterAtoms) -> Self {
        let n = lambda_init.m() * lambda_init.k() * lambda_init.k();
        Self {
            m: lambda_init.m(),
            k: lambda_init.k(),
            stages: vec![vec![0.0; n * (n + 1)]; STAGE_COUNT],
            lambda_init,
        }
    }

    /// Seeded initialization: weights ~ U(-s, s) with s = 1/sqrt(n + 1), the
    /// last stage scaled by 1/4, and initial atoms ~ U(-1/k, 1/k). Values are
    /// rounded to f32 so the field survives a trip through its file format
    /// unchanged.
    pub fn random(m: usize, k: usize, seed: u64) -> Result<Self> {
        if m == 0 || k == 0 {
            return Err(shape("atom count and size must be >= 1"));
        }
        let n = m * k * k;
        let s = 1.0 / ((n + 1) as f64).sqrt();
        let stages = (0..STAGE_COUNT)
            .map(|st| {
                let mut stream = Substream::new(seed, rng::domain::FIELD, st as u64);
                let s = if st + 1 == STAGE_COUNT { s * OUTPUT_GAIN } else { s };
                (0..n * (n + 1))
                    .map(|_| stream.uniform_in(-s, s) as f32 as f64)
                    .collect()
            })
            .collect();
        let mut stream = Substream::new(seed, rng::domain::FIELD, STAGE_COUNT as u64);
        let a = 1.0 / k as f64;
        let init = (0..n).map(|_| stream.uniform_in(-a, a) as f32 as f64).collect();
        Self::new(stages, FilterAtoms::new(m, k, init)?)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn state_len(&self) -> usize {
        self.m * self.k * self.k
    }

    pub fn stages(&self) -> &[Vec<f64>] {
        &self.stages
    }

    pub fn lambda_init(&self) -> &FilterAtoms {
        &self.lambda_init
    }

    /// Upper bound on the field's Lipschitz constant in the state: per stage,
    /// the normalization contributes at most 1/sqrt(eps), tanh 1, and the mix
    /// its Frobenius norm (which dominates the spectral norm).
    pub fn lipschitz_bound(&self) -> f64 {
        let n = self.state_len();
        let norm_lip = 1.0 / NORM_EPS.sqrt();
        self.stages
            .iter()
            .map(|w| {
                let fro: f64 = (0..n)
                    .flat_map(|r| w[r * (n + 1)..r * (n + 1) + n].iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                norm_lip * fro
            })
            .product()
    }

    fn normalize_tanh(&self, h: &mut [f64]) {
        let kk = self.k * self.k;
        for atom in h.chunks_mut(kk) {
            let mean = atom.iter().sum::<f64>() / kk as f64;
            let var = atom.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / kk as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for v in atom.iter_mut() {
                *v = ((*v - mean) * inv).tanh();
            }
        }
    }
}

impl VectorField for AtomVectorField {
    fn dim(&self) -> usize {
        self.state_len()
    }

    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.state_len();
        let mut h = y.to_vec();
        for w in &self.stages {
            self.normalize_tanh(&mut h);
            for (r, out) in dy.iter_mut().enumerate() {
                let row = &w[r * (n + 1)..(r + 1) * (n + 1)];
                *out = row[..n].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + row[n] * t;
            }
            h.copy_from_slice(dy);
        }
    }
}

/// dLambda/dtheta~ at (theta~, state).
pub fn eval_field(field: &AtomVectorField, theta_tilde: f64, state: &FilterAtoms) -> Result<FilterAtoms> {
    if state.m() != field.m || state.k() != field.k {
        return Err(shape(format!(
            "state is {}x{}x{}, field expects {}x{}x{}",
            state.m(),
            state.k(),
            state.k(),
            field.m,
            field.k,
            field.k
        )));
    }
    let mut out = vec![0.0; field.state_len()];
    field.eval(theta_tilde, state.data(), &mut out);
    Ok(FilterAtoms::from_raw(field.m, field.k, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rk4Fixed,
    Dopri45,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub fixed_steps: usize,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri45,
            rtol: 1e-3,
            atol: 1e-3,
            fixed_steps: 64,
            max_steps: 10_000,
        }
    }
}

impl SolverConfig {
    pub fn rk4(steps: usize) -> Self {
        Self {
            method: Method::Rk4Fixed,
            fixed_steps: steps,
            ..Self::default()
        }
    }

    pub fn dopri(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Dopri45,
            rtol,
            atol,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(domain("solver tolerances must be > 0"));
        }
        if self.fixed_steps == 0 || self.max_steps == 0 {
            return Err(domain("solver step counts must be >= 1"));
        }
        Ok(())
    }
}

fn axpy(out: &mut [f64], y: &[f64], h: f64, terms: &[(f64, &[f64])]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        *o = y[i] + h * acc;
    }
}

fn rk4<F: VectorField + ?Sized>(field: &F, t0: f64, t1: f64, mut y: Vec<f64>, steps: usize) -> Vec<f64> {
    let n = y.len();
    let h = (t1 - t0) / steps as f64;
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        field.eval(t, &y, &mut k1);
        axpy(&mut tmp, &y, 0.5 * h, &[(1.0, &k1)]);
        field.eval(t + 0.5 * h, &tmp, &mut k2);
        axpy(&mut tmp, &y, 0.5 * h, &[(1.0, &k2)]);
        field.eval(t + 0.5 * h, &tmp, &mut k3);
        axpy(&mut tmp, &y, h, &[(1.0, &k3)]);
        field.eval(t + h, &tmp, &mut k4);
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    y
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
// Fifth-order weights; also the last row of the tableau (first same as last).
const B5: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
// B5 - B4 for the seven stages.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

fn dopri45<F: VectorField + ?Sized>(field: &F, t0: f64, t1: f64, y0: Vec<f64>, cfg: &SolverConfig) -> Result<Vec<f64>> {
    let n = y0.len();
    let span = t1 - t0;
    let dir = span.signum();
    let mut h = span / 100.0;
    let mut t = t0;
    let mut y = y0;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    field.eval(t, &y, &mut k[0]);

    let mut attempts = 0usize;
    let done = |t: f64| (t1 - t) * dir <= 1e-14 * t1.abs().max(1.0);
    while !done(t) {
        if attempts >= cfg.max_steps {
            return Err(Error::Integration {
                steps: attempts,
                last_theta: t,
            });
        }
        attempts += 1;
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }

        let (k0, rest) = k.split_at_mut(1);
        let k0 = &k0[0];
        axpy(&mut tmp, &y, h, &[(A2[0], k0)]);
        field.eval(t + C[1] * h, &tmp, &mut rest[0]);
        axpy(&mut tmp, &y, h, &[(A3[0], k0), (A3[1], &rest[0])]);
        field.eval(t + C[2] * h, &tmp, &mut rest[1]);
        axpy(&mut tmp, &y, h, &[(A4[0], k0), (A4[1], &rest[0]), (A4[2], &rest[1])]);
        field.eval(t + C[3] * h, &tmp, &mut rest[2]);
        axpy(
            &mut tmp,
            &y,
            h,
            &[(A5[0], k0), (A5[1], &rest[0]), (A5[2], &rest[1]), (A5[3], &rest[2])],
        );
        field.eval(t + C[4] * h, &tmp, &mut rest[3]);
        axpy(
            &mut tmp,
            &y,
            h,
            &[
                (A6[0], k0),
                (A6[1], &rest[0]),
                (A6[2], &rest[1]),
                (A6[3], &rest[2]),
                (A6[4], &rest[3]),
            ],
        );
        field.eval(t + C[5] * h, &tmp, &mut rest[4]);
        axpy(
            &mut y_new,
            &y,
            h,
            &[
                (B5[0], k0),
                (B5[2], &rest[1]),
                (B5[3], &rest[2]),
                (B5[4], &rest[3]),
                (B5[5], &rest[4]),
            ],
        );
        field.eval(t + h, &y_new, &mut rest[5]);

        let mut sum_sq = 0.0;
        for i in 0..n {
            let err = h * (0..7).map(|s| E[s] * k[s][i]).sum::<f64>();
            let scale = cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs());
            sum_sq += (err / scale).powi(2);
        }
        let err_norm = if n == 0 { 0.0 } else { (sum_sq / n as f64).sqrt() };

        let factor = if err_norm == 0.0 {
            MAX_FACTOR
        } else {
            (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
        };
        if err_norm <= 1.0 {
            t += h;
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
        }
        h *= factor;
    }
    Ok(y)
}

/// Integrates `field` from `(t0, y0)` to `t1`. Backward when `t1 < t0`.
pub fn flow<F: VectorField + ?Sized>(
    field: &F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    solver: &SolverConfig,
) -> Result<Vec<f64>> {
    solver.validate()?;
    if y0.len() != field.dim() {
        return Err(shape(format!(
            "state has {} entries, field expects {}",
            y0.len(),
            field.dim()
        )));
    }
    if !(t0.is_finite() && t1.is_finite()) {
        return Err(domain("integration bounds must be finite"));
    }
    if t0 == t1 {
        return Ok(y0.to_vec());
    }
    match solver.method {
        Method::Rk4Fixed => Ok(rk4(field, t0, t1, y0.to_vec(), solver.fixed_steps)),
        Method::Dopri45 => dopri45(field, t0, t1, y0.to_vec(), solver),
    }
}

fn check_label(t: f64, name: &str) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(domain(format!("{name} = {t}; exposure labels lie in (0, 1)")))
    }
}

/// Lambda(theta_target) given Lambda(theta_in) = Lambda_init.
pub fn integrate_atoms(
    field: &AtomVectorField,
    theta_in: f64,
    theta_target: f64,
    solver: &SolverConfig,
) -> Result<FilterAtoms> {
    check_label(theta_in, "theta_in")?;
    check_label(theta_target, "theta_target")?;
    integrate_atoms_from(field, &field.lambda_init, theta_in, theta_target, solver)
}

/// Continues a trajectory: the atoms at `to` given `state` at `from`.
pub fn integrate_atoms_from(
    field: &AtomVectorField,
    state: &FilterAtoms,
    from: f64,
    to: f64,
    solver: &SolverConfig,
) -> Result<FilterAtoms> {
    if !state.same_shape(&field.lambda_init) {
        return Err(shape("state shape differs from the field's atoms"));
    }
    let y = flow(field, state.data(), from, to, solver)?;
    Ok(FilterAtoms::from_raw(field.m, field.k, y))
}

/// Integrates the atoms for an exposure pair and composes them with `phi`.
pub fn atoms_for_pair(
    field: &AtomVectorField,
    theta_in: f64,
    theta_target: f64,
    phi: &Coefficients,
    solver: &SolverConfig,
) -> Result<FilterBank> {
    let atoms = integrate_atoms(field, theta_in, theta_target, solver)?;
    compose_filters(phi, &atoms)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub epsilon: f64,
    pub theta_a: f64,
    pub theta_b: f64,
}

/// Sample points used by [`estimate_lipschitz`]: `samples` labels evenly spaced
/// in [0.05, 0.95 - max delta].
pub fn lipschitz_sample_points(samples: usize, max_delta: f64) -> Vec<f64> {
    let (lo, hi) = (0.05, 0.95 - max_delta);
    (0..samples)
        .map(|i| lo + (hi - lo) * i as f64 / (samples - 1) as f64)
        .collect()
}

/// Largest observed ||Lambda(a) - Lambda(b)|| / |a - b| over sample points `a`
/// and `b = a + delta`, along the trajectory through `(theta0, init)`.
pub fn estimate_lipschitz<F: VectorField + ?Sized>(
    field: &F,
    init: &[f64],
    theta0: f64,
    samples: usize,
    delta_grid: &[f64],
    solver: &SolverConfig,
) -> Result<LipschitzEstimate> {
    if samples < 2 {
        return Err(domain("need at least two sample points"));
    }
    if delta_grid.is_empty() || delta_grid.iter().any(|d| d.is_nan() || *d <= 0.0) {
        return Err(domain("deltas must be positive"));
    }
    let max_delta = delta_grid.iter().cloned().fold(0.0, f64::max);
    if max_delta >= 0.9 {
        return Err(domain("largest delta must stay below 0.9"));
    }
    let mut best = LipschitzEstimate {
        epsilon: 0.0,
        theta_a: f64::NAN,
        theta_b: f64::NAN,
    };
    for a in lipschitz_sample_points(samples, max_delta) {
        let at_a = flow(field, init, theta0, a, solver)?;
        for &d in delta_grid {
            let at_b = flow(field, &at_a, a, a + d, solver)?;
            let dist = at_a
                .iter()
                .zip(&at_b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let ratio = dist / d;
            if ratio > best.epsilon || best.theta_a.is_nan() {
                best = LipschitzEstimate {
                    epsilon: ratio,
                    theta_a: a,
                    theta_b: a + d,
                };
            }
        }
    }
    Ok(best)
}
