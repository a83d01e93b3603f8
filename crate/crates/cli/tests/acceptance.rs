//! Acceptance suite. Prints one line per criterion and exits nonzero if any fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kvnsim::dynamics::{
    exponential, free_particle, harmonic_oscillator, integrate_characteristics, lagrange_multiplier_flow,
    make_builtin_system, DynamicalSystem, SystemParams,
};
use kvnsim::grid::{build_grid, AxisSpec, PhaseSpaceGrid};
use kvnsim::observables::{conservation_report, gaussian_state, ConservationTolerances};
use kvnsim::operator::{
    build_kvn_operator, classical_mc_cost, hermiticity_defect, quantum_scaling_cost, resource_estimate,
    trajectories_for, trotter_split, PhaseGenerator, ResourceInputs, Scheme,
};
use kvnsim::propagation::{propagate_cayley, propagate_trotter, ExactPropagator, SubStep, WaveFunction};
use kvnsim::semiclassical::{accumulate_phase, branch_factor, hamilton_jacobi_residual, maslov_count};
use kvnsim::stats::log_log_slope;
use kvnsim::C64;
use kvnsim_cli::config::validate;
use kvnsim_cli::{parse_scenario, run, RunOptions, RunReport, Scenario};

type Outcome = Result<String, String>;

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"))
}

fn run_quiet(s: &Scenario, out: &Path) -> RunReport {
    let opts = RunOptions {
        out: Some(out.to_path_buf()),
        seed: None,
        quiet: true,
    };
    run(s, &opts).expect("scenario runs")
}

fn grid2(n: usize, extent_q: f64, extent_p: f64) -> PhaseSpaceGrid {
    build_grid(vec![AxisSpec::centered("q", n, extent_q), AxisSpec::centered("p", n, extent_p)], 1.0).unwrap()
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// splitmix64, enough for drawing test cases.
struct Draw(u64);

impl Draw {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    fn pick(&mut self, n: usize) -> usize {
        (self.next() % n as u64) as usize
    }
}

fn hermiticity() -> Outcome {
    let mut rng = Draw(0x5eed);
    let families = [
        "exponential",
        "scalar_autonomous",
        "linear",
        "harmonic_oscillator",
        "pendulum",
        "duffing",
        "action_angle",
        "free_particle",
    ];
    let draws = 120;
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let name = families[i % families.len()];
        let mut p = SystemParams::default();
        match name {
            "exponential" => {
                p.scalars.insert("gamma".into(), rng.range(-2.0, 2.0));
            }
            "scalar_autonomous" => {
                p.expression = Some(format!("{:.3}*sin(x) + {:.3}*x", rng.range(-2.0, 2.0), rng.range(-1.0, 1.0)));
            }
            "linear" => {
                p.matrix = Some((0..2).map(|_| (0..2).map(|_| rng.range(-1.5, 1.5)).collect()).collect());
            }
            "harmonic_oscillator" | "pendulum" => {
                p.scalars.insert("omega".into(), rng.range(0.2, 3.0));
            }
            "duffing" => {
                p.scalars.insert("alpha".into(), rng.range(-1.0, 1.0));
                p.scalars.insert("beta".into(), rng.range(0.0, 1.0));
                p.scalars.insert("delta".into(), if rng.unit() < 0.5 { 0.0 } else { rng.range(0.0, 0.5) });
            }
            "action_angle" => {
                p.scalars.insert("omega".into(), rng.range(0.2, 2.0));
                p.scalars.insert("anharmonicity".into(), rng.range(-0.5, 0.5));
            }
            "free_particle" => {
                p.scalars.insert("mass".into(), rng.range(0.5, 3.0));
            }
            _ => unreachable!(),
        }
        let sys = make_builtin_system(name, &p).map_err(|e| format!("{name}: {e}"))?;
        let axes: Vec<AxisSpec> = (0..sys.dim())
            .map(|j| {
                let levels = if sys.dim() == 1 { 4 + rng.pick(4093) } else { 4 + rng.pick(61) };
                AxisSpec::centered(format!("x{j}"), levels, rng.range(2.0, 20.0))
            })
            .collect();
        let g = build_grid(axes, rng.range(0.5, 2.0)).unwrap();
        let scheme = if rng.unit() < 0.5 { Scheme::CentralFd2 } else { Scheme::CentralFd4 };
        let w = if sys.canonical().is_some() && rng.unit() < 0.5 {
            PhaseGenerator::Lagrangian
        } else {
            PhaseGenerator::Zero
        };
        let op = build_kvn_operator(&g, &sys, &w, scheme, 0.0).map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(hermiticity_defect(&op));
    }
    verdict(worst == 0.0, format!("{draws} draws, max |K - K^H| = {worst:e}"))
}

fn oscillator_blob(n: usize) -> (PhaseSpaceGrid, DynamicalSystem, WaveFunction) {
    let g = grid2(n, 12.0, 12.0);
    let psi = gaussian_state(&g, &[1.0, 0.0], &[0.8, 0.8], None).unwrap();
    (g, harmonic_oscillator(1.0), psi)
}

fn unitarity() -> Outcome {
    let (g, sys, psi) = oscillator_blob(64);
    let op = build_kvn_operator(&g, &sys, &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0).unwrap();
    let (out, rec) = propagate_cayley(&op, &psi, 0.01, 1000).map_err(|e| e.to_string())?;
    let end = (out.norm() - psi.norm()).abs();
    let total = rec.total_drift();
    verdict(
        rec.steps == 1000 && total <= 1e-9,
        format!("1000 steps, summed drift {total:.3e}, end-to-end {end:.3e} (limit 1e-9)"),
    )
}

fn correspondence() -> Outcome {
    let s = parse_scenario(&scenario_path("exponential_1d")).map_err(|e| e.to_string())?;
    let dx = s.grid.spacing(0);
    let tmp = tempfile::tempdir().unwrap();
    let report = run_quiet(&s, tmp.path());
    let gate = report
        .gates
        .iter()
        .find(|g| g.name == "mean_x_mean")
        .ok_or("mean gate missing")?;
    let sigma_ok = (s.config.t_final <= 0.5) && s.grid.levels(0) == 256;
    verdict(
        sigma_ok && gate.value <= 0.02 && report.passed(),
        format!("L=256, sigma={}dx, max |<x>/e^t - 1| = {:.3e} (limit 0.02)", 0.25 / dx, gate.value),
    )
}

fn oracle_error(s: &Scenario) -> Result<f64, String> {
    let tmp = tempfile::tempdir().unwrap();
    let report = run_quiet(s, tmp.path());
    report.oracle_relative_l2.ok_or_else(|| "oracle not computed".to_string())
}

fn oracle() -> Outcome {
    let base = parse_scenario(&scenario_path("harmonic_rotation")).map_err(|e| e.to_string())?;
    let mut errs = Vec::new();
    for n in [32usize, 64, 128] {
        let mut cfg = base.config.clone();
        for a in &mut cfg.grid.axes {
            a.levels = n;
        }
        let s = validate(cfg).map_err(|e| e.to_string())?;
        errs.push(oracle_error(&s)?);
    }
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    verdict(
        errs[1] <= 0.05 && monotone,
        format!(
            "relative L2 at L=32/64/128: {:.3e} / {:.3e} / {:.3e} (64^2 limit 0.05, monotone {monotone})",
            errs[0], errs[1], errs[2]
        ),
    )
}

fn multipliers() -> Outcome {
    let gamma = 0.7;
    let (x0, p0) = (1.3, 2.0);
    let sys = exponential(gamma);
    let b = lagrange_multiplier_flow(&sys, &PhaseGenerator::Zero, &[x0], &[p0], 0.0, 1.0, 1e-3)
        .map_err(|e| e.to_string())?;
    let ps = b.multipliers.as_ref().ok_or("no multipliers")?;
    let (mut worst_t, mut worst_x): (f64, f64) = (0.0, 0.0);
    for ((t, x), p) in b.times.iter().zip(&b.states).zip(ps) {
        let by_time = p0 * (-gamma * t).exp();
        let by_state = p0 * (gamma * x0) / (gamma * x[0]);
        worst_t = worst_t.max((p[0] - by_time).abs() / by_time.abs());
        worst_x = worst_x.max((p[0] - by_state).abs() / by_state.abs());
    }
    let reached = (b.times.last().unwrap() - 1.0).abs() < 1e-12;
    verdict(
        reached && worst_t <= 1e-8 && worst_x <= 1e-8,
        format!("max rel err vs P0 e^(-gt) {worst_t:.2e}, vs P0 v0/v(x) {worst_x:.2e} (limit 1e-8)"),
    )
}

fn maslov() -> Outcome {
    let sys = harmonic_oscillator(1.0);
    let one = integrate_characteristics(&sys, &[1.0, 0.0], 0.0, 2.0 * PI, 1e-3).map_err(|e| e.to_string())?;
    let j1 = one.jacobian_config.as_ref().ok_or("no configuration Jacobian")?;
    let m1 = maslov_count(&one.times, j1).map_err(|e| e.to_string())?;
    let factor = branch_factor(m1.nu);
    let two = integrate_characteristics(&sys, &[1.0, 0.0], 0.0, 4.0 * PI, 1e-3).map_err(|e| e.to_string())?;
    let m2 = maslov_count(&two.times, two.jacobian_config.as_ref().unwrap()).map_err(|e| e.to_string())?;
    let mut seq: Vec<C64> = Vec::new();
    for b in &m2.branches {
        if seq.last().is_none_or(|l| (l - b).norm() > 1e-12) {
            seq.push(*b);
        }
    }
    let expected = [
        C64::new(1.0, 0.0),
        C64::new(0.0, -1.0),
        C64::new(-1.0, 0.0),
        C64::new(0.0, 1.0),
        C64::new(1.0, 0.0),
    ];
    let cycle_ok = seq.len() == expected.len() && seq.iter().zip(&expected).all(|(a, b)| (a - b).norm() < 1e-12);
    let factor_ok = (factor - C64::new(-1.0, 0.0)).norm() < 1e-12;
    verdict(
        m1.nu == 2 && factor_ok && cycle_ok && m2.nu == 4,
        format!(
            "one period nu={} factor={:.0}{:+.0}i, two periods nu={} branches {}",
            m1.nu,
            factor.re,
            factor.im,
            m2.nu,
            seq.iter().map(|c| format!("({:.0},{:.0})", c.re, c.im)).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn hamilton_jacobi() -> Outcome {
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for (label, sys, x0, t1) in [
        ("free particle", free_particle(1.0), [0.3, 1.2], 2.0),
        ("oscillator", harmonic_oscillator(1.0), [1.0, 0.5], 2.0 * PI),
    ] {
        let b = integrate_characteristics(&sys, &x0, 0.0, t1, 1e-3).map_err(|e| e.to_string())?;
        let ledger = accumulate_phase(&b, &sys, &PhaseGenerator::Lagrangian, 1.0).map_err(|e| e.to_string())?;
        let r = hamilton_jacobi_residual(&sys, &b, &ledger).map_err(|e| e.to_string())?;
        worst = worst.max(r);
        parts.push(format!("{label} {r:.2e}"));
    }
    verdict(worst <= 1e-5, format!("residual {} (limit 1e-5)", parts.join(", ")))
}

/// Norm and relative `<H f>` drift over one oscillator period.
fn period_drift(n: usize) -> Result<(f64, f64), String> {
    let (g, sys, psi) = oscillator_blob(n);
    let op = build_kvn_operator(&g, &sys, &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0).unwrap();
    let steps = 400;
    let chunk = 20;
    let dt = 2.0 * PI / steps as f64;
    let mut snaps = vec![psi.clone()];
    let mut cur = psi;
    for _ in 0..steps / chunk {
        let (next, _) = propagate_cayley(&op, &cur, dt, chunk).map_err(|e| e.to_string())?;
        snaps.push(next.clone());
        cur = next;
    }
    let rep = conservation_report(&snaps, &sys, None, ConservationTolerances::default()).map_err(|e| e.to_string())?;
    Ok((rep.get("norm").unwrap().drift, rep.get("energy_density").unwrap().drift))
}

fn conservation() -> Outcome {
    let (norm64, e64) = period_drift(64)?;
    let (norm128, e128) = period_drift(128)?;
    let g = grid2(64, 16.0, 8.0);
    let sys = free_particle(1.0);
    let psi = gaussian_state(&g, &[-2.0, 0.5], &[0.8, 0.6], None).unwrap();
    let op = build_kvn_operator(&g, &sys, &PhaseGenerator::Lagrangian, Scheme::CentralFd4, 0.0).unwrap();
    let mut snaps = vec![psi.clone()];
    let mut cur = psi;
    for _ in 0..4 {
        let (next, _) = propagate_cayley(&op, &cur, 0.01, 50).map_err(|e| e.to_string())?;
        snaps.push(next.clone());
        cur = next;
    }
    let rep = conservation_report(&snaps, &sys, None, ConservationTolerances::default()).map_err(|e| e.to_string())?;
    let mom = rep.get("momentum_p").ok_or("momentum not tracked")?.drift;
    let norm = norm64.max(norm128).max(rep.get("norm").unwrap().drift);
    verdict(
        norm <= 1e-10 && e64 <= 0.01 && e128 * 2.0 <= e64 && mom <= 1e-10,
        format!(
            "norm {norm:.2e}, <Hf> 64^2 {e64:.2e} 128^2 {e128:.2e} (ratio {:.1}), <pf> {mom:.2e}",
            e64 / e128
        ),
    )
}

fn trotter() -> Outcome {
    let g = grid2(32, 8.0, 8.0);
    let sys = harmonic_oscillator(1.0);
    let op = build_kvn_operator(&g, &sys, &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0).unwrap();
    let parts = trotter_split(&op).map_err(|e| e.to_string())?;
    let psi = gaussian_state(&g, &[1.0, 0.0], &[1.0, 1.0], None).unwrap();
    let t = 1.0;
    let exact = ExactPropagator::new(&op).map_err(|e| e.to_string())?.evolve(&psi, t).unwrap();
    let mut slopes = Vec::new();
    for order in [1u8, 2] {
        let (mut dts, mut errs) = (Vec::new(), Vec::new());
        for steps in [20usize, 40, 80, 160] {
            let dt = t / steps as f64;
            let (out, _) = propagate_trotter(&parts, &psi, dt, steps, order, SubStep::Exact).map_err(|e| e.to_string())?;
            dts.push(dt);
            errs.push(out.max_abs_diff(&exact));
        }
        slopes.push(log_log_slope(&dts, &errs));
    }
    verdict(
        (slopes[0] - 1.0).abs() <= 0.2 && (slopes[1] - 2.0).abs() <= 0.2,
        format!("order 1 slope {:.3}, order 2 slope {:.3}", slopes[0], slopes[1]),
    )
}

fn sampling() -> Outcome {
    let s = parse_scenario(&scenario_path("sampling_scaling")).map_err(|e| e.to_string())?;
    let sc = s.config.sampling.as_ref().ok_or("no sampling section")?;
    let lo = sc.epsilons.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sc.epsilons.iter().copied().fold(0.0, f64::max);
    let reps = sc.repetitions;
    let tmp = tempfile::tempdir().unwrap();
    let report = run_quiet(&s, tmp.path());
    let summary = report.scaling.as_ref().ok_or("no scaling summary")?;
    let per_step = summary.kvn_invocations_per_grover_step;
    let ok = lo <= 1e-3
        && hi >= 1e-1
        && reps >= 20
        && (summary.mc_slope + 2.0).abs() <= 0.3
        && (summary.ae_slope + 1.0).abs() <= 0.3
        && per_step == Some(4.0);
    verdict(
        ok,
        format!(
            "eps [{lo}, {hi}], {reps} reps, MC slope {:.3}, AE slope {:.3}, KvN per Grover step {:?}",
            summary.mc_slope, summary.ae_slope, per_step
        ),
    )
}

fn resource_formulas() -> Outcome {
    let g = grid2(64, 12.0, 12.0);
    let op = build_kvn_operator(&g, &harmonic_oscillator(1.0), &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0).unwrap();
    let inputs = ResourceInputs {
        particles: 1,
        dims_per_particle: 1,
        bits: 6,
        interactions: 3,
        epsilon: 0.01,
    };
    let r = resource_estimate(&op, 2.5, inputs).map_err(|e| e.to_string())?;
    let s = r.sparsity as u128;
    let l = 64u128;
    let quantum = 2 * s * 6 * l * l;
    let mc = 10_000.0 * 3.0 * 2.0 * r.time_steps;
    let mut checks = vec![
        r.sparsity == 4,
        r.quantum_scaling == quantum,
        r.trajectories == 10_000,
        r.classical_mc == mc,
        quantum_scaling_cost(13, 10, 5, 3) == 2 * 13 * 10 * 5 * 9 * (1u128 << 20),
        classical_mc_cost(0.01, 3, 6, 250.0).map_err(|e| e.to_string())? == 45_000_000.0,
        trajectories_for(0.1).map_err(|e| e.to_string())? == 100,
    ];
    let mut draw = Draw(11);
    for _ in 0..200 {
        let (sp, bits, m, d) = (1 + draw.pick(20) as u64, 1 + draw.pick(12) as u32, 1 + draw.pick(8) as u64, 1 + draw.pick(3) as u64);
        let want = 2 * sp as u128 * bits as u128 * m as u128 * (d * d) as u128 * (1u128 << (2 * bits));
        checks.push(quantum_scaling_cost(sp, bits, m, d) == want);
        let (k, rr, dd, t) = (1 + draw.pick(100) as u64, 1 + draw.pick(10) as u64, 2 * (1 + draw.pick(6) as u64), 1 + draw.pick(1000) as u64);
        let eps = 1.0 / (k as f64).sqrt();
        let cost = classical_mc_cost(eps, rr, dd, t as f64).map_err(|e| e.to_string())?;
        checks.push(cost == (k * rr * dd * t) as f64);
    }
    let failed = checks.iter().filter(|c| !**c).count();
    verdict(
        failed == 0,
        format!("{} exact integer checks, {failed} mismatches; 64^2 oscillator s={} 2sLMd^2L^2={}", checks.len(), r.sparsity, r.quantum_scaling),
    )
}

const LIGHT_SAMPLING: &str = r#"{
  "name": "determinism",
  "grid": {"axes": [{"label": "q", "levels": 32, "extent": 12.0}, {"label": "p", "levels": 32, "extent": 12.0}]},
  "system": {"builtin": "harmonic_oscillator"},
  "dt": 0.05,
  "t_final": 1.0,
  "snapshot_stride": 5,
  "initial_state": {"kind": "gaussian", "center": [1.0, 0.0], "sigmas": [0.8, 0.8]},
  "observables": [
    {"kind": "moment", "name": "q", "axis": "q"},
    {"kind": "expression", "name": "smooth_step", "source": "0.5*(1 + tanh(q))", "bounds": [0.0, 1.0]}
  ],
  "sampling": {"observable": "smooth_step", "epsilons": [0.1, 0.01, 0.001], "repetitions": 5, "mc_dt": 0.1},
  "gates": {"norm_drift": 1e-9, "oracle_relative_l2": 0.5}
}"#;

fn output_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "report.json") {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("config.json");
    std::fs::write(&cfg, LIGHT_SAMPLING).unwrap();
    let mut runs = Vec::new();
    for (i, threads) in ["1", "2"].iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        let st = std::process::Command::new(env!("CARGO_BIN_EXE_kvnsim"))
            .args(["run", "--quiet", "--seed", "5", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .env("KVNSIM_THREADS", threads)
            .output()
            .unwrap();
        if !st.status.success() {
            return Err(format!("run {i} exited with {:?}", st.status.code()));
        }
        runs.push(output_files(&out));
    }
    let files = runs[0].len();
    let same = runs[0] == runs[1];
    let sampled = runs[0].contains_key("scaling.csv");
    verdict(
        same && sampled && files > 3,
        format!("{files} output files compared byte for byte across two seeded runs, identical {same}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("hermiticity", hermiticity),
        ("unitarity", unitarity),
        ("classical correspondence", correspondence),
        ("oracle equivalence", oracle),
        ("lagrange multipliers", multipliers),
        ("maslov branches", maslov),
        ("hamilton-jacobi", hamilton_jacobi),
        ("conservation", conservation),
        ("trotter orders", trotter),
        ("sampling laws", sampling),
        ("resource formulas", resource_formulas),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    let stdout = std::io::stdout();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        let mut h = stdout.lock();
        writeln!(h, "[{tag}] {} {name}: {detail} [{secs:.1} s]", i + 1).unwrap();
        h.flush().unwrap();
    }
    let mut h = stdout.lock();
    writeln!(h, "acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len()).unwrap();
    if failures > 0 {
        std::process::exit(1);
    }
}
