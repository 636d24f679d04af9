//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 domain/IO/verification failure, 2 usage error.
//! `QF_THREADS` caps the worker count; results do not depend on it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::atom_ode::{integrate_atoms, AtomVectorField, Method, SolverConfig, DEFAULT_ATOMS, DEFAULT_ATOM_SIZE};
use crate::bracketing::{generate_burst, BracketSpec};
use crate::calibration::{cmos_gray_to_photons, qis_forward, CmosParams, QisParams};
use crate::filter_atoms::Activation;
use crate::io::formats::{self, Grid, Tensor};
use crate::io::manifest::RunManifest;
use crate::io::pgm;
use crate::io::FormatError;
use crate::sensor_model::{
    bit_probability, invert_bit_density, local_bit_density, mean_bit_density, sample_frame, Boundary, ExposureMap,
    NeighborhoodSpec, SensorConfig,
};
use crate::theorem;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Domain(#[from] crate::error::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "qflow",
    version,
    about = "1-bit quanta image sensor simulation and exposure-conditioned filter atoms"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a binary frame from an exposure map or a constant exposure.
    Simulate(SimulateArgs),
    /// Generate an exposure-bracketed binary burst.
    Bracket(BracketArgs),
    /// Local bit density of a binary frame.
    Density(DensityArgs),
    /// Estimate exposure from the bit density of a binary frame.
    Estimate(EstimateArgs),
    /// Initialize an atom vector field or integrate its atoms between exposure labels.
    Atoms(AtomsArgs),
    /// Run numerical verification suites.
    Verify(VerifyArgs),
    /// Camera calibration conversions.
    #[command(subcommand)]
    Calibrate(CalibrateCommand),
    /// Export a frame, burst frame or real map as 8-bit PGM.
    ExportPgm(ExportArgs),
}

#[derive(Debug, Args)]
struct SensorArgs {
    /// ADC threshold.
    #[arg(long, default_value_t = SensorConfig::DEFAULT_Q)]
    q: f64,
    /// Read-noise standard deviation.
    #[arg(long = "sigma-r", default_value_t = SensorConfig::DEFAULT_SIGMA_R)]
    sigma_r: f64,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Exposure map (QEX1).
    #[arg(long = "in", conflicts_with = "theta_const", required_unless_present = "theta_const")]
    input: Option<PathBuf>,
    /// Constant exposure for every pixel (requires --size).
    #[arg(long = "theta-const", requires = "size")]
    theta_const: Option<f64>,
    /// Frame size as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[command(flatten)]
    sensor: SensorArgs,
    #[arg(long, required = true)]
    seed: Option<u64>,
    /// Output frame (QBF1).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BracketArgs {
    /// Scene exposure map (QEX1).
    #[arg(long = "in")]
    input: PathBuf,
    /// `default` or a comma-separated increasing list of divisors.
    #[arg(long, default_value = "default")]
    alphas: String,
    #[command(flatten)]
    sensor: SensorArgs,
    #[arg(long, required = true)]
    seed: Option<u64>,
    /// Output burst (QBB1).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BoundaryArg {
    ZeroPad,
    Clamp,
}

impl From<BoundaryArg> for Boundary {
    fn from(b: BoundaryArg) -> Self {
        match b {
            BoundaryArg::ZeroPad => Boundary::ZeroPad,
            BoundaryArg::Clamp => Boundary::Clamp,
        }
    }
}

#[derive(Debug, Args)]
struct DensityArgs {
    /// Binary frame (QBF1).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 1)]
    radius: usize,
    #[arg(long, value_enum, default_value = "zero-pad")]
    boundary: BoundaryArg,
    /// Optional density map output (QEX1).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Binary frame (QBF1).
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    sensor: SensorArgs,
    /// Window radius for a per-pixel exposure map (requires --out).
    #[arg(long, requires = "out")]
    radius: Option<usize>,
    /// Per-pixel exposure map output (QEX1).
    #[arg(long, requires = "radius")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SolverArg {
    Dopri45,
    Rk4,
}

#[derive(Debug, Args)]
struct AtomsArgs {
    /// Create a seeded field instead of integrating one.
    #[arg(long, conflicts_with_all = ["field", "from", "to"], requires = "seed")]
    init: bool,
    #[arg(long, default_value_t = DEFAULT_ATOMS)]
    m: usize,
    #[arg(long, default_value_t = DEFAULT_ATOM_SIZE)]
    k: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Field parameters (QVF1).
    #[arg(long, required_unless_present = "init")]
    field: Option<PathBuf>,
    #[arg(long, required_unless_present = "init")]
    from: Option<f64>,
    #[arg(long, required_unless_present = "init")]
    to: Option<f64>,
    #[arg(long, value_enum, default_value = "dopri45")]
    solver: SolverArg,
    #[arg(long, default_value_t = 1e-3)]
    rtol: f64,
    #[arg(long, default_value_t = 1e-3)]
    atol: f64,
    /// Step count for the fixed-step solver.
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[arg(long = "max-steps", default_value_t = 10_000)]
    max_steps: usize,
    /// Output: atoms (QTN1) or, with --init, the field (QVF1).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    LayerBound,
    Density,
    Continuity,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
    Identity,
    All,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: Suite,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, required = true)]
    seed: Option<u64>,
    /// Activations for the layer-bound suite.
    #[arg(long, value_enum, default_value = "all")]
    activation: ActivationArg,
    /// JSON report.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Subcommand)]
enum CalibrateCommand {
    /// Convert CMOS gray levels to photon counts.
    Cmos {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        gain: f64,
        #[arg(long, default_value_t = 0.68)]
        qe: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate QIS pixel values from photon counts.
    QisForward {
        #[arg(long = "in")]
        input: PathBuf,
        /// JSON with keys G, QE, ET, i_dark, crf, sigma_real_noise, adc_bits, clip_max.
        #[arg(long)]
        params: PathBuf,
        #[arg(long, required = true)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// QBF1, QBB1 or QEX1 input (detected from the magic bytes).
    #[arg(long = "in")]
    input: PathBuf,
    /// Frame index for bursts.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in `{s}`"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in `{s}`"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

fn parse_alphas(s: &str) -> CliResult<BracketSpec> {
    if s == "default" {
        return Ok(BracketSpec::default());
    }
    let alphas = s
        .split(',')
        .map(|a| {
            a.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad alpha `{a}`")))
        })
        .collect::<CliResult<Vec<f64>>>()?;
    Ok(BracketSpec::new(alphas)?)
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match pool.install(|| dispatch(cli.command, &argv)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("QF_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Usage(format!("QF_THREADS must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Failed(e.to_string()))
}

struct Run {
    manifest: RunManifest,
    start: Instant,
}

impl Run {
    fn new(argv: &[String], seed: Option<u64>) -> Self {
        Self {
            manifest: RunManifest::new(argv.to_vec(), seed),
            start: Instant::now(),
        }
    }

    fn input(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = formats::read_file(path)?;
        self.manifest.add_input(path)?;
        Ok(bytes)
    }

    fn output(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        formats::write_file(path, bytes)?;
        self.manifest.add_output(path);
        Ok(())
    }

    /// Writes the manifest next to `primary`.
    fn finish(mut self, primary: &Path) -> CliResult<()> {
        self.manifest.duration_seconds = self.start.elapsed().as_secs_f64();
        self.manifest.write(&RunManifest::path_for(primary))?;
        Ok(())
    }
}

fn dispatch(command: Command, argv: &[String]) -> CliResult<()> {
    match command {
        Command::Simulate(a) => simulate(a, argv),
        Command::Bracket(a) => bracket(a, argv),
        Command::Density(a) => density(a),
        Command::Estimate(a) => estimate(a),
        Command::Atoms(a) => atoms(a, argv),
        Command::Verify(a) => verify(a, argv),
        Command::Calibrate(c) => calibrate(c, argv),
        Command::ExportPgm(a) => export_pgm(a),
    }
}

fn simulate(a: SimulateArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::new(argv, a.seed);
    let map = match (a.input.as_deref(), a.theta_const, a.size) {
        (Some(path), _, _) => formats::decode_qex(&run.input(path)?)?.into_exposure()?,
        (None, Some(theta), Some((w, h))) => ExposureMap::constant(w, h, theta)?,
        _ => return Err(CliError::Usage("need --in or --theta-const with --size".into())),
    };
    let cfg = SensorConfig::new(a.sensor.q, a.sensor.sigma_r, a.seed.expect("required by parser"))?;
    let frame = sample_frame(&map, &cfg);
    run.output(&a.out, &formats::encode_qbf(&frame))?;
    println!("mean_density {}", mean_bit_density(&frame));
    run.finish(&a.out)
}

fn bracket(a: BracketArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::new(argv, a.seed);
    let map = formats::decode_qex(&run.input(&a.input)?)?.into_exposure()?;
    let spec = parse_alphas(&a.alphas)?;
    let cfg = SensorConfig::new(a.sensor.q, a.sensor.sigma_r, a.seed.expect("required by parser"))?;
    let burst = generate_burst(&map, &spec, &cfg);
    run.output(&a.out, &formats::encode_qbb(&burst))?;
    for (tau, f) in burst.frames().iter().enumerate() {
        println!(
            "tau {tau} alpha {} theta_tilde {} density {}",
            burst.alphas()[tau],
            burst.theta_tilde()[tau],
            mean_bit_density(f)
        );
    }
    run.finish(&a.out)
}

fn density(a: DensityArgs) -> CliResult<()> {
    let frame = formats::decode_qbf(&formats::read_file(&a.input)?)?;
    let d = local_bit_density(&frame, &NeighborhoodSpec::new(a.radius, a.boundary.into()));
    println!("mean_density {}", mean_bit_density(&frame));
    if let Some(out) = a.out {
        let grid = Grid {
            width: d.width(),
            height: d.height(),
            data: d.mu().to_vec(),
        };
        formats::write_file(out, &formats::encode_qex(&grid))?;
    }
    Ok(())
}

fn estimate(a: EstimateArgs) -> CliResult<()> {
    let frame = formats::decode_qbf(&formats::read_file(&a.input)?)?;
    let (q, s) = (a.sensor.q, a.sensor.sigma_r);
    let mu = mean_bit_density(&frame);
    let theta = invert_bit_density(mu, q, s)?;
    // delta method: se(theta) = se(mu) / p'(theta)
    let n = (frame.width() * frame.height()) as f64;
    let h = 1e-6 * theta.max(1e-3);
    let slope = (bit_probability(theta + h, q, s)? - bit_probability((theta - h).max(0.0), q, s)?)
        / (theta + h - (theta - h).max(0.0));
    let stderr = (mu * (1.0 - mu) / n).sqrt() / slope;
    println!("mean_density {mu}");
    println!("theta_hat {theta}");
    println!("theta_stderr {stderr}");

    if let (Some(radius), Some(out)) = (a.radius, a.out) {
        let nb = NeighborhoodSpec::new(radius, Boundary::Clamp);
        let d = local_bit_density(&frame, &nb);
        let floor = bit_probability(0.0, q, s)?;
        // Saturated windows are pulled half a count inside (0, 1).
        let half = 0.5 / nb.size() as f64;
        let data = d
            .mu()
            .iter()
            .map(|&m| {
                let m = m.clamp(half, 1.0 - half);
                if m <= floor {
                    Ok(0.0)
                } else {
                    invert_bit_density(m, q, s)
                }
            })
            .collect::<crate::Result<Vec<f64>>>()?;
        let grid = Grid {
            width: d.width(),
            height: d.height(),
            data,
        };
        formats::write_file(out, &formats::encode_qex(&grid))?;
    }
    Ok(())
}

fn atoms(a: AtomsArgs, argv: &[String]) -> CliResult<()> {
    if a.init {
        let mut run = Run::new(argv, a.seed);
        let field = AtomVectorField::random(a.m, a.k, a.seed.expect("required by parser"))?;
        run.output(&a.out, &formats::encode_qvf(&field))?;
        return run.finish(&a.out);
    }
    let (Some(path), Some(from), Some(to)) = (a.field, a.from, a.to) else {
        return Err(CliError::Usage("need --field, --from and --to".into()));
    };
    let field = formats::decode_qvf(&formats::read_file(&path)?)?;
    let solver = SolverConfig {
        method: match a.solver {
            SolverArg::Dopri45 => Method::Dopri45,
            SolverArg::Rk4 => Method::Rk4Fixed,
        },
        rtol: a.rtol,
        atol: a.atol,
        fixed_steps: a.steps,
        max_steps: a.max_steps,
    };
    let atoms = integrate_atoms(&field, from, to, &solver)?;
    formats::write_file(&a.out, &formats::encode_qtn(&Tensor::from(&atoms)))?;
    println!("atom_norm {}", atoms.norm());
    Ok(())
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    seed: u64,
    instances: usize,
    passed: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    layer_bound: Vec<LayerBoundGroup>,
    #[serde(skip_serializing_if = "Option::is_none")]
    density: Option<Vec<theorem::DensityCheck>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    continuity: Option<Vec<theorem::ContinuityReport>>,
}

#[derive(Debug, Serialize)]
struct LayerBoundGroup {
    activation: Activation,
    violations: usize,
    reports: Vec<theorem::BoundReport>,
}

fn verify(a: VerifyArgs, argv: &[String]) -> CliResult<()> {
    let seed = a.seed.expect("required by parser");
    let run = Run::new(argv, Some(seed));
    let wants = |s: Suite| a.suite == s || a.suite == Suite::All;
    let mut report = VerifyReport {
        seed,
        instances: a.instances,
        passed: true,
        layer_bound: Vec::new(),
        density: None,
        continuity: None,
    };

    if wants(Suite::LayerBound) {
        let acts = match a.activation {
            ActivationArg::Relu => vec![Activation::Relu],
            ActivationArg::Tanh => vec![Activation::Tanh],
            ActivationArg::Identity => vec![Activation::Identity],
            ActivationArg::All => vec![Activation::Relu, Activation::Tanh, Activation::Identity],
        };
        for act in acts {
            let reports = theorem::layer_bound_suite(a.instances, seed, act)?;
            let violations = reports.iter().filter(|r| !r.all_hold()).count();
            println!(
                "layer-bound {act:?}: {violations} violations in {} instances",
                reports.len()
            );
            report.passed &= violations == 0;
            report.layer_bound.push(LayerBoundGroup {
                activation: act,
                violations,
                reports,
            });
        }
    }
    if wants(Suite::Density) {
        let checks = theorem::density_suite(a.instances, seed, &[0, 1, 2]);
        let failures = checks.iter().filter(|c| !c.holds).count();
        println!("density: {failures} failures in {} checks", checks.len());
        report.passed &= failures == 0;
        report.density = Some(checks);
    }
    if wants(Suite::Continuity) {
        let reports = theorem::continuity_suite(a.instances, seed, &SolverConfig::default())?;
        let failures = reports.iter().filter(|r| !r.all_hold()).count();
        println!("continuity: {failures} failures in {} instances", reports.len());
        report.passed &= failures == 0;
        report.continuity = Some(reports);
    }

    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Failed(e.to_string()))?;
    let mut run = run;
    run.output(&a.report, json.as_bytes())?;
    run.finish(&a.report)?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Failed("verification found violations".into()))
    }
}

fn calibrate(c: CalibrateCommand, argv: &[String]) -> CliResult<()> {
    match c {
        CalibrateCommand::Cmos { input, gain, qe, out } => {
            let grid = formats::decode_qex(&formats::read_file(&input)?)?;
            let p = CmosParams::new(gain, qe)?;
            let data = grid
                .data
                .iter()
                .map(|&i| cmos_gray_to_photons(i, &p))
                .collect::<crate::Result<Vec<_>>>()?;
            formats::write_file(out, &formats::encode_qex(&Grid { data, ..grid }))?;
            Ok(())
        }
        CalibrateCommand::QisForward {
            input,
            params,
            seed,
            out,
        } => {
            let mut run = Run::new(argv, seed);
            let grid = formats::decode_qex(&run.input(&input)?)?;
            let text = run.input(&params)?;
            let p: QisParams =
                serde_json::from_slice(&text).map_err(|e| CliError::Failed(format!("{}: {e}", params.display())))?;
            let data = qis_forward(&grid.data, &p, seed.expect("required by parser"))?;
            run.output(&out, &formats::encode_qex(&Grid { data, ..grid }))?;
            run.finish(&out)
        }
    }
}

fn export_pgm(a: ExportArgs) -> CliResult<()> {
    let bytes = formats::read_file(&a.input)?;
    let out = match bytes.get(..4) {
        Some(m) if m == formats::QBF_MAGIC => pgm::frame_to_pgm(&formats::decode_qbf(&bytes)?),
        Some(m) if m == formats::QBB_MAGIC => {
            let burst = formats::decode_qbb(&bytes)?;
            let frame = burst
                .frames()
                .get(a.frame)
                .ok_or_else(|| CliError::Usage(format!("burst has {} frames, asked for {}", burst.len(), a.frame)))?;
            pgm::frame_to_pgm(frame)
        }
        Some(m) if m == formats::QEX_MAGIC => {
            let g = formats::decode_qex(&bytes)?;
            pgm::grid_to_pgm(g.width, g.height, &g.data)
        }
        _ => {
            return Err(CliError::Failed(format!(
                "{}: unrecognized file type",
                a.input.display()
            )))
        }
    };
    formats::write_file(&a.out, &out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("256x128"), Ok((256, 128)));
        assert!(parse_size("256").is_err());
        assert!(parse_size("0x4").is_err());
    }

    #[test]
    fn alpha_parsing() {
        assert_eq!(parse_alphas("default").unwrap(), BracketSpec::default());
        assert_eq!(parse_alphas("1,2.5,4").unwrap().alphas(), &[1.0, 2.5, 4.0]);
        assert!(matches!(parse_alphas("1,x"), Err(CliError::Usage(_))));
        assert!(matches!(parse_alphas("2,1"), Err(CliError::Domain(_))));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(
            run(argv("qflow simulate --theta-const 1 --size 4x4 --out /tmp/never.qbf")),
            2
        );
        assert_eq!(run(argv("qflow simulate --thetaconst 1 --seed 1 --out x")), 2);
        assert_eq!(run(argv("qflow frobnicate")), 2);
    }

    #[test]
    fn domain_errors_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("f.qbf");
        let cmd = format!(
            "qflow simulate --theta-const=-1 --size 4x4 --seed 1 --out {}",
            out.display()
        );
        assert_eq!(run(argv(&cmd)), 1);
    }
}
