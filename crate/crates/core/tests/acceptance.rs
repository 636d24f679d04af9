//! Acceptance suite. Criteria run one after another so that the runtime limits
//! are measured without interference; each prints a PASS/FAIL line.
//!
//! cargo test -p qflow --test acceptance -- --nocapture

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use qflow::atom_ode::{flow, integrate_atoms, integrate_atoms_from, AtomVectorField, FnField, SolverConfig};
use qflow::bracketing::{generate_burst, BracketSpec, ExposureBurst};
use qflow::calibration::{cmos_gray_to_photons, qis_forward, CmosParams, QisParams};
use qflow::filter_atoms::{Activation, FilterAtoms};
use qflow::io::formats::{self, Grid, Tensor};
use qflow::rng::Substream;
use qflow::sensor_model::{
    bit_probability, invert_bit_density, mean_bit_density, sample_frame, BinaryFrame, ExposureMap, SensorConfig,
};
use qflow::theorem::{continuity_suite, density_suite, layer_bound_suite};
use qflow::Error;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

const THETAS: [f64; 3] = [0.25, 1.0, 4.0];
const QS: [f64; 2] = [0.5, 1.5];
const SIGMAS: [f64; 3] = [0.0, 0.25, 0.5];

fn forward_model_consistency() -> Outcome {
    let start = Instant::now();
    let n = 1024 * 1024;
    let mut worst: f64 = 0.0;
    let mut seed = 100;
    for &theta in &THETAS {
        for &q in &QS {
            for &s in &SIGMAS {
                let p = bit_probability(theta, q, s).map_err(|e| e.to_string())?;
                let frame = sample_frame(
                    &ExposureMap::constant(1024, 1024, theta).unwrap(),
                    &SensorConfig::new(q, s, seed).unwrap(),
                );
                seed += 1;
                let se = (p * (1.0 - p) / n as f64).sqrt();
                let z = (mean_bit_density(&frame) - p).abs() / se;
                worst = worst.max(z);
                check(z <= 4.0, || {
                    format!("theta={theta} q={q} sigma_r={s}: {z:.2} standard errors off")
                })?;
            }
        }
    }
    within_time(start.elapsed(), 10.0)?;
    Ok(format!(
        "18 frames, worst {worst:.2} sigma, {:.2} s",
        start.elapsed().as_secs_f64()
    ))
}

#[allow(clippy::approx_constant)]
fn ideal_closed_form() -> Outcome {
    let mut worst: f64 = 0.0;
    for theta in [0.1, 0.693147, 1.0, 2.0, 5.0] {
        let p = bit_probability(theta, 0.5, 0.0).map_err(|e| e.to_string())?;
        let err = (p - (1.0 - (-theta).exp())).abs();
        worst = worst.max(err);
        check(err <= 1e-12, || format!("theta={theta}: error {err:e}"))?;
    }
    Ok(format!("max error {worst:e}"))
}

fn inversion_round_trip() -> Outcome {
    let mut worst: f64 = 0.0;
    let points = 200;
    for &q in &QS {
        for &s in &SIGMAS {
            for i in 0..points {
                let theta = 0.05 * (100f64).powf(i as f64 / (points - 1) as f64);
                let mu = bit_probability(theta, q, s).unwrap();
                let back = invert_bit_density(mu, q, s).map_err(|e| format!("theta={theta} q={q} s={s}: {e}"))?;
                let rel = (back - theta).abs() / theta;
                worst = worst.max(rel);
                check(rel <= 1e-6, || {
                    format!("theta={theta} q={q} sigma_r={s}: relative error {rel:e}")
                })?;
            }
            for mu in [0.0, 1.0] {
                check(matches!(invert_bit_density(mu, q, s), Err(Error::Domain(_))), || {
                    format!("mu={mu} q={q} sigma_r={s} did not raise a domain error")
                })?;
            }
        }
    }
    Ok(format!(
        "{} points, max relative error {worst:e}; saturated inputs rejected",
        points * 6
    ))
}

fn burst_generation() -> Outcome {
    let start = Instant::now();
    let spec = BracketSpec::default();
    let theta = 16.0;
    let map = ExposureMap::constant(512, 512, theta).unwrap();
    let burst = generate_burst(&map, &spec, &SensorConfig::new(0.5, 0.0, 4242).unwrap());
    check(burst.len() == 15, || format!("{} frames", burst.len()))?;
    let expected: Vec<f64> = (1..=15).map(|i| i as f64 * 0.0625).collect();
    check(burst.theta_tilde() == expected.as_slice(), || {
        format!("labels {:?}", burst.theta_tilde())
    })?;
    let analytic: Vec<f64> = spec
        .alphas()
        .iter()
        .map(|a| bit_probability(theta / a, 0.5, 0.0).unwrap())
        .collect();
    check(analytic.windows(2).all(|w| w[1] < w[0]), || {
        "analytic densities not strictly decreasing".into()
    })?;
    let n = (512 * 512) as f64;
    let mut worst: f64 = 0.0;
    for (tau, (frame, p)) in burst.frames().iter().zip(&analytic).enumerate() {
        let z = (mean_bit_density(frame) - p).abs() / (p * (1.0 - p) / n).sqrt();
        worst = worst.max(z);
        check(z <= 4.0, || format!("frame {tau}: {z:.2} standard errors off"))?;
    }
    within_time(start.elapsed(), 30.0)?;
    Ok(format!(
        "15 frames, worst {worst:.2} sigma, {:.2} s",
        start.elapsed().as_secs_f64()
    ))
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn ode_accuracy() -> Outcome {
    let init = [0.8, -0.3, 0.5, 1.2, -0.9, 0.1];
    let decay = FnField {
        dim: init.len(),
        f: |_t: f64, y: &[f64], dy: &mut [f64]| {
            for (d, v) in dy.iter_mut().zip(y) {
                *d = -v;
            }
        },
    };
    let exact: Vec<f64> = init.iter().map(|v| v * (-0.8f64).exp()).collect();
    let norm = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dopri = flow(&decay, &init, 0.1, 0.9, &SolverConfig::dopri(1e-3, 1e-3)).map_err(|e| e.to_string())?;
    let dopri_rel = l2(&dopri, &exact) / norm;
    check(dopri_rel <= 5e-3, || format!("dopri45 relative error {dopri_rel:e}"))?;
    let rk4 = flow(&decay, &init, 0.1, 0.9, &SolverConfig::rk4(256)).map_err(|e| e.to_string())?;
    let rk4_rel = l2(&rk4, &exact) / norm;
    check(rk4_rel <= 1e-8, || format!("rk4 relative error {rk4_rel:e}"))?;

    let s = SolverConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let field = AtomVectorField::random(6, 3, seed).map_err(|e| e.to_string())?;
        let tol = |state: &FilterAtoms| 10.0 * (s.atol + s.rtol * state.norm());
        let direct = integrate_atoms(&field, 0.25, 0.75, &s).map_err(|e| e.to_string())?;
        let mid = integrate_atoms(&field, 0.25, 0.5, &s).map_err(|e| e.to_string())?;
        let chained = integrate_atoms_from(&field, &mid, 0.5, 0.75, &s).map_err(|e| e.to_string())?;
        let back = integrate_atoms_from(&field, &direct, 0.75, 0.25, &s).map_err(|e| e.to_string())?;
        let fine = integrate_atoms(&field, 0.25, 0.75, &SolverConfig::rk4(256)).map_err(|e| e.to_string())?;
        for (what, d, t) in [
            ("semigroup", direct.distance(&chained), tol(&direct)),
            (
                "reversibility",
                back.distance(field.lambda_init()),
                tol(field.lambda_init()),
            ),
            ("rk4 agreement", direct.distance(&fine), tol(&fine)),
        ] {
            worst = worst.max(d / t);
            check(d <= t, || format!("seed {seed} {what}: {d:e} > {t:e}"))?;
        }
    }
    Ok(format!(
        "decay dopri45 {dopri_rel:.1e}, rk4 {rk4_rel:.1e}; 50 fields, worst {worst:.3} of allowed"
    ))
}

fn layer_bound() -> Outcome {
    let start = Instant::now();
    let mut summary = Vec::new();
    for act in [Activation::Relu, Activation::Tanh, Activation::Identity] {
        let reports = layer_bound_suite(1000, 31_000, act).map_err(|e| e.to_string())?;
        check(reports.len() == 1000, || {
            format!("{act:?}: {} instances", reports.len())
        })?;
        let bad: Vec<u64> = reports
            .iter()
            .filter(|r| !r.all_hold())
            .map(|r| r.instance_seed)
            .collect();
        check(bad.is_empty(), || format!("{act:?}: violations at seeds {bad:?}"))?;
        let tightest = reports.iter().map(|r| r.lhs / r.rhs).fold(0.0, f64::max);
        summary.push(format!("{act:?} max lhs/rhs {tightest:.3}"));
    }
    let cont = continuity_suite(100, 77_000, &SolverConfig::default()).map_err(|e| e.to_string())?;
    for r in &cont {
        let d: Vec<f64> = r.entries.iter().map(|e| e.output_distance).collect();
        check(r.all_hold() && d.len() == 3 && d[2] < d[1] && d[1] < d[0], || {
            format!("continuity seed {}: distances {d:?}", r.instance_seed)
        })?;
    }
    within_time(start.elapsed(), 120.0)?;
    Ok(format!(
        "3000 instances, 0 violations ({}); 100 continuity fields; {:.1} s",
        summary.join(", "),
        start.elapsed().as_secs_f64()
    ))
}

fn density_identity() -> Outcome {
    let checks = density_suite(100, 9_000, &[0, 1, 2]);
    check(checks.len() == 600, || format!("{} checks", checks.len()))?;
    let bad = checks.iter().filter(|c| !c.holds).count();
    check(bad == 0, || format!("{bad} failures"))?;
    Ok("100 frames x radii {0,1,2} x both boundaries, exact".into())
}

fn calibration() -> Outcome {
    let x = cmos_gray_to_photons(68.0, &CmosParams::new(1.0, 0.68).unwrap()).map_err(|e| e.to_string())?;
    check(x == 100.0, || format!("cmos gave {x:?}"))?;
    let n = 1_000_000;
    let p = QisParams {
        gain: 1.0,
        quantum_efficiency: 0.68,
        exposure_time: 1.0,
        ..QisParams::default()
    };
    let photons = vec![10.0; n];
    let out = qis_forward(&photons, &p, 8).map_err(|e| e.to_string())?;
    let rate = p.rate(10.0, 1.0);
    let mean = out.iter().sum::<f64>() / n as f64;
    let z = (mean - rate).abs() / (rate / n as f64).sqrt();
    check(z <= 4.0, || format!("qis mean {mean} vs rate {rate}: {z:.2} sigma"))?;
    Ok(format!("cmos 68 -> {x}; qis mean {mean:.5} vs {rate}, {z:.2} sigma"))
}

fn qflow(dir: &Path, threads: usize, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_qflow"))
        .args(args)
        .current_dir(dir)
        .env("QF_THREADS", threads.to_string())
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!(
            "qflow {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn reproducibility() -> Outcome {
    let setup = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut s = Substream::new(5, 0, 0);
    let scene: Vec<f64> = (0..96 * 64).map(|_| s.uniform_in(0.0, 20.0) as f32 as f64).collect();
    let scene_path = setup.path().join("scene.qex");
    formats::write_file(
        &scene_path,
        &formats::encode_qex(&Grid {
            width: 96,
            height: 64,
            data: scene,
        }),
    )
    .unwrap();
    let params_path = setup.path().join("params.json");
    std::fs::write(
        &params_path,
        r#"{"G": 2.0, "QE": 0.68, "ET": 1.0, "i_dark": 0.5, "sigma_real_noise": 1.5}"#,
    )
    .unwrap();
    let (scene_s, params_s) = (scene_path.to_str().unwrap(), params_path.to_str().unwrap());

    let commands: Vec<(Vec<&str>, &str)> = vec![
        (
            vec![
                "simulate",
                "--theta-const",
                "1.0",
                "--size",
                "256x256",
                "--seed",
                "7",
                "--out",
                "f.qbf",
            ],
            "f.qbf",
        ),
        (
            vec![
                "simulate",
                "--in",
                scene_s,
                "--sigma-r",
                "0.5",
                "--seed",
                "8",
                "--out",
                "s.qbf",
            ],
            "s.qbf",
        ),
        (
            vec!["bracket", "--in", scene_s, "--seed", "9", "--out", "b.qbb"],
            "b.qbb",
        ),
        (
            vec![
                "calibrate",
                "qis-forward",
                "--in",
                scene_s,
                "--params",
                params_s,
                "--seed",
                "10",
                "--out",
                "p.qex",
            ],
            "p.qex",
        ),
        (
            vec!["atoms", "--init", "--seed", "11", "--out", "field.qvf"],
            "field.qvf",
        ),
        (
            vec![
                "verify",
                "--suite",
                "all",
                "--instances",
                "4",
                "--seed",
                "12",
                "--report",
                "r.json",
            ],
            "r.json",
        ),
    ];
    let mut reference: Vec<Vec<u8>> = Vec::new();
    for threads in [1, 4, 16] {
        for rerun in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            for (i, (args, out)) in commands.iter().enumerate() {
                qflow(dir.path(), threads, args)?;
                check(dir.path().join(format!("{out}.manifest.json")).exists(), || {
                    format!("{out}: no manifest")
                })?;
                let bytes = std::fs::read(dir.path().join(out)).map_err(|e| e.to_string())?;
                if reference.len() <= i {
                    reference.push(bytes);
                } else {
                    check(bytes == reference[i], || {
                        format!("{out} differs (threads={threads}, rerun {rerun})")
                    })?;
                }
            }
            qflow(
                dir.path(),
                threads,
                &[
                    "atoms",
                    "--field",
                    "field.qvf",
                    "--from",
                    "0.2",
                    "--to",
                    "0.8",
                    "--out",
                    "a.qtn",
                ],
            )?;
            let atoms = std::fs::read(dir.path().join("a.qtn")).map_err(|e| e.to_string())?;
            if reference.len() == commands.len() {
                reference.push(atoms);
            } else {
                check(atoms == reference[commands.len()], || {
                    format!("a.qtn differs (threads={threads})")
                })?;
            }
        }
    }
    Ok(format!(
        "{} outputs identical over threads {{1, 4, 16}} x 2 runs",
        reference.len()
    ))
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("payload");
    let through_file = |bytes: &[u8]| -> Vec<u8> {
        formats::write_file(&path, bytes).unwrap();
        formats::read_file(&path).unwrap()
    };
    for seed in 0..20u64 {
        let mut s = Substream::new(seed, 0, 0);
        let mut dim = |lo: u64, hi: u64| (lo + s.next_u64() % (hi - lo + 1)) as usize;
        let (w, h) = (dim(1, 70), dim(1, 50));
        let mut s = Substream::new(seed, 0, 1);
        let mut real = |n: usize| {
            (0..n)
                .map(|_| (s.uniform() * 200.0 - 100.0) as f32 as f64)
                .collect::<Vec<f64>>()
        };

        let qex = formats::encode_qex(&Grid {
            width: w,
            height: h,
            data: real(w * h),
        });
        let again = formats::encode_qex(&formats::decode_qex(&through_file(&qex)).map_err(|e| e.to_string())?);
        check(again == qex, || format!("QEX1 seed {seed}"))?;

        let map = ExposureMap::constant(w, h, 0.7).unwrap();
        let frame: BinaryFrame = sample_frame(&map, &SensorConfig::new(0.5, 0.25, seed).unwrap());
        let qbf = formats::encode_qbf(&frame);
        let again = formats::encode_qbf(&formats::decode_qbf(&through_file(&qbf)).map_err(|e| e.to_string())?);
        check(again == qbf, || format!("QBF1 seed {seed}"))?;

        let spec = BracketSpec::new(vec![1.0, 2.0, 3.5]).unwrap();
        let burst: ExposureBurst = generate_burst(&map, &spec, &SensorConfig::new(0.5, 0.25, seed).unwrap());
        let qbb = formats::encode_qbb(&burst);
        let again = formats::encode_qbb(&formats::decode_qbb(&through_file(&qbb)).map_err(|e| e.to_string())?);
        check(again == qbb, || format!("QBB1 seed {seed}"))?;

        let dims = vec![1 + seed as usize % 3, 2, 1 + seed as usize % 5];
        let count = dims.iter().product();
        let qtn = formats::encode_qtn(&Tensor::new(dims, real(count)));
        let again = formats::encode_qtn(&formats::decode_qtn(&through_file(&qtn)).map_err(|e| e.to_string())?);
        check(again == qtn, || format!("QTN1 seed {seed}"))?;

        let field = AtomVectorField::random(1 + seed as usize % 3, [1, 3, 5][seed as usize % 3], seed).unwrap();
        let qvf = formats::encode_qvf(&field);
        let again = formats::encode_qvf(&formats::decode_qvf(&through_file(&qvf)).map_err(|e| e.to_string())?);
        check(again == qvf, || format!("QVF1 seed {seed}"))?;
    }
    Ok("QEX1, QBF1, QBB1, QTN1, QVF1 byte-identical on 20 random payloads each".into())
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("1 forward-model consistency", forward_model_consistency),
        ("2 ideal-sensor closed form", ideal_closed_form),
        ("3 exposure inversion round trip", inversion_round_trip),
        ("4 burst generation", burst_generation),
        ("5 ODE solver accuracy", ode_accuracy),
        ("6 layer bound and continuity", layer_bound),
        ("7 binary norm identity", density_identity),
        ("8 calibration", calibration),
        ("9 CLI reproducibility", reproducibility),
        ("10 format round trips", format_round_trips),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                println!("FAIL  {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
