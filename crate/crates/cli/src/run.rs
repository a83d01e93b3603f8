//! The pipeline behind each subcommand.

use std::path::PathBuf;
use std::time::Instant;

use kvnsim::dynamics::liouville_oracle;
use kvnsim::observables::{
    conservation_report, expectation, gaussian_state, maxwellian_state, ConservationTolerances, MaxwellianPhase,
};
use kvnsim::operator::{resource_estimate, trotter_split, KvNOperator, OperatorBuilder, ResourceInputs};
use kvnsim::propagation::{
    propagate_cayley, propagate_cayley_time_dependent, propagate_trotter, ExactPropagator, PropagationRecord,
    SubStep, WaveFunction,
};
use kvnsim::sampling::{build_ancilla_split, gaussian_reference, scaling_study, GaussianSampler, ScalingConfig, ScalingProblem};
use kvnsim::KvnError;
use serde::Serialize;

use crate::config::{InitialStateConfig, PropagatorKind, Scenario, ScenarioConfig};
use crate::output::{density_csv, table_csv, wavefunction_csv, ManifestEntry, OutputDir};
use crate::{CliError, GATES_FAILED};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub quiet: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct UnitaritySummary {
    pub propagator: String,
    pub dt: f64,
    pub steps: usize,
    /// `max_t |‖ψ(t)‖ − ‖ψ(0)‖| / ‖ψ(0)‖`.
    pub norm_drift: f64,
    pub max_step_drift: f64,
    pub max_solver_iterations: usize,
    pub max_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConservationSummary {
    pub name: String,
    pub drift: f64,
    pub tolerance: f64,
    pub expected_conserved: bool,
    pub passes: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingSummary {
    pub mc_slope: f64,
    pub ae_slope: f64,
    pub mc_reference: f64,
    pub ae_reference: f64,
    pub mc_max_trajectories: u64,
    pub ae_max_power: u32,
    /// `(ε, MC queries / AE queries)` where both succeeded.
    pub speedups: Vec<(f64, f64)>,
    pub kvn_invocations_per_grover_step: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResourceSummary {
    pub sparsity: u64,
    pub qubits: u64,
    pub phase_dimension: u64,
    pub bits: u32,
    pub particles: u64,
    pub dims_per_particle: u64,
    pub interactions: u64,
    pub epsilon: f64,
    pub time_steps: f64,
    pub quantum_measured: f64,
    pub quantum_scaling: u128,
    pub trajectories: u64,
    pub classical_mc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GateResult {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub kvnsim_version: String,
    pub command: String,
    pub config_sha256: String,
    pub scenario: ScenarioConfig,
    /// `passed`, `gates_failed` or `aborted`.
    pub status: String,
    pub error: Option<StageFailure>,
    pub stage_times: Vec<StageTime>,
    pub unitarity: Option<UnitaritySummary>,
    pub conservation: Vec<ConservationSummary>,
    pub oracle_relative_l2: Option<f64>,
    pub scaling: Option<ScalingSummary>,
    pub resources: Option<ResourceSummary>,
    pub gates: Vec<GateResult>,
    pub manifest: Vec<ManifestEntry>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            GATES_FAILED
        }
    }
}

/// Output of the propagation stage.
struct Evolution {
    snapshots: Vec<WaveFunction>,
    unitarity: UnitaritySummary,
}

struct Runner<'a> {
    scenario: &'a Scenario,
    hash: String,
    report: RunReport,
    out: Option<OutputDir>,
    quiet: bool,
}

impl<'a> Runner<'a> {
    fn new(scenario: &'a Scenario, command: &str, quiet: bool) -> Self {
        let hash = scenario.config_hash();
        Self {
            scenario,
            report: RunReport {
                kvnsim_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                config_sha256: hash.clone(),
                scenario: scenario.config.clone(),
                status: "passed".into(),
                error: None,
                stage_times: Vec::new(),
                unitarity: None,
                conservation: Vec::new(),
                oracle_relative_l2: None,
                scaling: None,
                resources: None,
                gates: Vec::new(),
                manifest: Vec::new(),
            },
            hash,
            out: None,
            quiet,
        }
    }

    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<T, KvnError>) -> Result<T, CliError> {
        let start = Instant::now();
        let r = f(self);
        let seconds = start.elapsed().as_secs_f64();
        self.report.stage_times.push(StageTime {
            stage: name.to_string(),
            seconds,
        });
        if !self.quiet {
            eprintln!("[{name}] {seconds:.3} s");
        }
        r.map_err(|source| CliError::Stage { stage: name, source })
    }

    fn write(&mut self, rel: &str, contents: &str) -> Result<(), CliError> {
        match &mut self.out {
            Some(o) => o.write(rel, contents),
            None => Ok(()),
        }
    }

    fn gate(&mut self, name: impl Into<String>, value: f64, threshold: String, passed: bool) {
        let name = name.into();
        if !self.quiet {
            eprintln!("gate {name}: {value:.6e} ({threshold}) {}", if passed { "pass" } else { "FAIL" });
        }
        self.report.gates.push(GateResult {
            name,
            value,
            threshold,
            passed,
        });
    }

    /// Records the failure, writes what exists and returns the error.
    fn abort(mut self, err: CliError) -> CliError {
        let stage = match &err {
            CliError::Stage { stage, .. } => stage.to_string(),
            _ => "output".to_string(),
        };
        self.report.status = "aborted".into();
        self.report.error = Some(StageFailure {
            stage,
            message: err.to_string(),
        });
        if let Some(o) = &mut self.out {
            o.mark_partial();
            self.report.manifest = o.manifest.clone();
            let json = serde_json::to_string_pretty(&self.report).expect("report serializes");
            let _ = std::fs::write(o.root().join("report.json"), json + "\n");
        }
        err
    }

    fn finish(mut self) -> Result<RunReport, CliError> {
        self.report.status = if self.report.passed() { "passed" } else { "gates_failed" }.into();
        if let Some(o) = &self.out {
            self.report.manifest = o.manifest.clone();
            let json = serde_json::to_string_pretty(&self.report).expect("report serializes");
            let path = o.root().join("report.json");
            std::fs::write(&path, json + "\n").map_err(|source| CliError::Write {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(self.report)
    }

    fn open_output(&mut self, opts: &RunOptions) -> Result<(), CliError> {
        let root = opts
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(&self.scenario.config.output_dir));
        self.out = Some(OutputDir::create(&root)?);
        Ok(())
    }
}

fn with_options(scenario: &Scenario, opts: &RunOptions) -> Scenario {
    let mut config = scenario.config.clone();
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    if let Some(out) = &opts.out {
        config.output_dir = out.display().to_string();
    }
    Scenario {
        config,
        grid: scenario.grid.clone(),
        system: scenario.system.clone(),
        w: scenario.w.clone(),
        scheme: scenario.scheme,
        dt: scenario.dt,
        steps: scenario.steps,
        observables: scenario.observables.clone(),
        mean_gates: scenario.mean_gates.clone(),
    }
}

fn initial_state(s: &Scenario) -> Result<WaveFunction, KvnError> {
    let labels = s.labels();
    let idx = |name: &str| labels.iter().position(|l| *l == name).expect("validated axis");
    match &s.config.initial_state {
        InitialStateConfig::Gaussian { center, sigmas, tilt } => {
            let sigmas = sigmas.as_ref().expect("resolved widths");
            gaussian_state(&s.grid, center, sigmas, tilt.as_deref())
        }
        InitialStateConfig::Maxwellian {
            q_axes,
            p_axes,
            mass,
            temperature,
            conjugate,
        } => {
            let q: Vec<usize> = q_axes.iter().map(|a| idx(a)).collect();
            let p: Vec<usize> = p_axes.iter().map(|a| idx(a)).collect();
            let phase = match conjugate {
                Some(k) => MaxwellianPhase::Conjugate(k.clone()),
                None => MaxwellianPhase::None,
            };
            maxwellian_state(&s.grid, &q, &p, *mass, *temperature, &phase)
        }
    }
}

fn builder(s: &Scenario) -> OperatorBuilder {
    OperatorBuilder::new(s.grid.clone(), s.system.clone(), s.w.clone(), s.scheme)
}

#[derive(Default)]
struct Tally {
    step_drift: f64,
    iterations: usize,
    residual: f64,
}

impl Tally {
    fn absorb(&mut self, rec: &PropagationRecord) {
        self.step_drift = rec.norm_drift.iter().copied().fold(self.step_drift, f64::max);
        self.iterations = rec.solver_iterations.iter().copied().fold(self.iterations, usize::max);
        self.residual = self.residual.max(rec.max_residual);
    }
}

/// Propagates `psi0` to `t_final`, keeping a snapshot every `stride` steps (all when `keep`).
fn evolve(s: &Scenario, b: &OperatorBuilder, op0: &KvNOperator, psi0: &WaveFunction, keep: bool) -> Result<Evolution, KvnError> {
    let steps = s.steps;
    let dt = s.config.t_final / steps as f64;
    let stride = match s.config.snapshot_stride {
        0 => steps,
        k => k.min(steps),
    };
    let exact = match s.config.propagator {
        PropagatorKind::Exact => Some(ExactPropagator::new(op0)?),
        _ => None,
    };
    let parts = match s.config.propagator {
        PropagatorKind::Trotter1 | PropagatorKind::Trotter2 => Some(trotter_split(op0)?),
        _ => None,
    };
    let n0 = psi0.norm();
    let mut snapshots = vec![psi0.clone()];
    let mut current = psi0.clone();
    let mut tally = Tally::default();
    let mut done = 0;
    let mut worst = 0.0f64;
    while done < steps {
        let n = stride.min(steps - done);
        let next = match s.config.propagator {
            PropagatorKind::Cayley => {
                let (next, rec) = if b.is_time_dependent() {
                    propagate_cayley_time_dependent(b, &current, dt, n)?
                } else {
                    propagate_cayley(op0, &current, dt, n)?
                };
                tally.absorb(&rec);
                next
            }
            PropagatorKind::Exact => {
                let out = exact.as_ref().expect("built above").evolve(&current, dt * n as f64)?;
                tally.step_drift = tally.step_drift.max((out.norm() - current.norm()).abs());
                out
            }
            PropagatorKind::Trotter1 | PropagatorKind::Trotter2 => {
                let order = if s.config.propagator == PropagatorKind::Trotter1 { 1 } else { 2 };
                let (next, rec) =
                    propagate_trotter(parts.as_ref().expect("built above"), &current, dt, n, order, SubStep::Exact)?;
                tally.absorb(&rec);
                next
            }
        };
        done += n;
        // Pin the clock to the step count so times do not accumulate rounding.
        current = WaveFunction::new(next.grid().clone(), next.amplitudes, done as f64 * dt)?;
        worst = worst.max((current.norm() - n0).abs() / n0);
        if keep || done == steps {
            snapshots.push(current.clone());
        }
    }
    let unitarity = UnitaritySummary {
        propagator: match s.config.propagator {
            PropagatorKind::Cayley => "cayley",
            PropagatorKind::Exact => "exact",
            PropagatorKind::Trotter1 => "trotter1",
            PropagatorKind::Trotter2 => "trotter2",
        }
        .into(),
        dt,
        steps,
        norm_drift: worst,
        max_step_drift: tally.step_drift,
        max_solver_iterations: tally.iterations,
        max_residual: tally.residual,
    };
    Ok(Evolution { snapshots, unitarity })
}

/// Parses and validates only; returns the scenario with defaults resolved.
pub fn check(path: &std::path::Path) -> Result<Scenario, CliError> {
    crate::parse_scenario(path)
}

/// Runs the whole pipeline and writes every output under the output directory.
pub fn run(scenario: &Scenario, opts: &RunOptions) -> Result<RunReport, CliError> {
    let scenario = with_options(scenario, opts);
    let mut r = Runner::new(&scenario, "run", opts.quiet);
    match run_inner(&mut r, opts) {
        Ok(()) => r.finish(),
        Err(e) => Err(r.abort(e)),
    }
}

fn run_inner(r: &mut Runner, opts: &RunOptions) -> Result<(), CliError> {
    r.open_output(opts)?;
    let s = r.scenario;
    let b = builder(s);
    let op0 = r.stage("operator", |_| b.build(0.0))?;
    let psi0 = r.stage("initial_state", |_| initial_state(s))?;
    let evo = r.stage("propagate", |_| evolve(s, &b, &op0, &psi0, true))?;

    // Snapshots.
    for (i, snap) in evo.snapshots.iter().enumerate() {
        r.write(&format!("snapshots/psi_{i:05}.csv"), &wavefunction_csv(snap, &r.hash))?;
        r.write(&format!("snapshots/density_{i:05}.csv"), &density_csv(&snap.density(), snap.time, &r.hash))?;
    }

    // Observables and conservation.
    let time_dependent = b.is_time_dependent();
    let rows = r.stage("observe", |_| {
        evo.snapshots
            .iter()
            .map(|snap| {
                let op_t = if time_dependent { Some(b.build(snap.time)?) } else { None };
                let op = op_t.as_ref().unwrap_or(&op0);
                let mut row = vec![snap.time];
                for o in &s.observables {
                    row.push(expectation(snap, o, Some(op))?);
                }
                Ok(row)
            })
            .collect::<Result<Vec<Vec<f64>>, KvnError>>()
    })?;
    let mut cols = vec!["t".to_string()];
    cols.extend(s.observables.iter().map(|o| o.name.clone()));
    r.write("observables.csv", &table_csv(&r.hash, &cols, &rows))?;

    let cons = r.stage("conservation", |_| {
        conservation_report(
            &evo.snapshots,
            &s.system,
            if time_dependent { None } else { Some(&op0) },
            ConservationTolerances::default(),
        )
    })?;
    let mut cols = vec!["t".to_string()];
    cols.extend(cons.quantities.iter().map(|q| q.name.clone()));
    let crow: Vec<Vec<f64>> = cons
        .times
        .iter()
        .enumerate()
        .map(|(i, t)| std::iter::once(*t).chain(cons.quantities.iter().map(|q| q.values[i])).collect())
        .collect();
    r.write("conservation.csv", &table_csv(&r.hash, &cols, &crow))?;
    r.report.conservation = cons
        .quantities
        .iter()
        .map(|q| ConservationSummary {
            name: q.name.clone(),
            drift: q.drift,
            tolerance: q.tolerance,
            expected_conserved: q.expected_conserved,
            passes: q.passes(),
        })
        .collect();

    let gates = s.config.gates.clone();
    if let Some(tol) = gates.norm_drift {
        let v = evo.unitarity.norm_drift;
        r.gate("norm_drift", v, format!("<= {tol:e}"), v <= tol);
    }
    if gates.conservation {
        for q in cons.quantities.iter().filter(|q| q.expected_conserved) {
            r.gate(format!("conserved_{}", q.name), q.drift, format!("<= {:e}", q.tolerance), q.passes());
        }
    }
    for (g, (idx, expected)) in gates.mean_tracks.iter().zip(&s.mean_gates) {
        let worst = rows
            .iter()
            .map(|row| {
                let e = expected.eval(&[row[0]]);
                (row[idx + 1] - e).abs() / e.abs()
            })
            .fold(0.0, f64::max);
        r.gate(format!("mean_{}", g.observable), worst, format!("<= {:e} relative", g.relative), worst <= g.relative);
    }
    r.report.unitarity = Some(evo.unitarity.clone());

    // Oracle comparison at the final time.
    if let Some(tol) = gates.oracle_relative_l2 {
        let last = evo.snapshots.last().expect("at least the initial snapshot");
        let oracle = r.stage("oracle", |_| {
            liouville_oracle(&s.system, &psi0.density(), last.time, gates.oracle_substeps)
        })?;
        let err = last.density().l2_distance(&oracle.density) / oracle.density.l2_norm();
        r.write("oracle_density.csv", &density_csv(&oracle.density, last.time, &r.hash))?;
        r.report.oracle_relative_l2 = Some(err);
        r.gate("oracle_relative_l2", err, format!("<= {tol:e}"), err <= tol);
    }

    if s.config.sampling.is_some() {
        let last = evo.snapshots.last().expect("final snapshot").clone();
        sampling_stage(r, &last)?;
    }
    if s.config.resources.is_some() {
        let summary = r.stage("resources", |_| resource_summary(s, &op0))?;
        r.report.resources = Some(summary);
    }
    Ok(())
}

fn sampling_stage(r: &mut Runner, last: &WaveFunction) -> Result<(), CliError> {
    let s = r.scenario;
    let cfg = s.config.sampling.clone().expect("checked by caller");
    let InitialStateConfig::Gaussian { center, sigmas, .. } = &s.config.initial_state else {
        unreachable!("validated")
    };
    let sigmas = sigmas.clone().expect("resolved widths");
    let obs_idx = s.observables.iter().position(|o| o.name == cfg.observable).expect("validated");
    let obs = &s.observables[obs_idx];
    let mc_dt = cfg.mc_dt.unwrap_or(s.dt);
    let t = last.time;
    let table = r.stage("sampling", |_| {
        let ancilla = build_ancilla_split(last, obs)?;
        let sampler = GaussianSampler::new(center, &sigmas)?;
        let reference = gaussian_reference(&s.system, obs, center, &sigmas, t, mc_dt, cfg.reference_nodes)?;
        let problem = ScalingProblem {
            system: &s.system,
            sampler: &sampler,
            observable: obs,
            t,
            dt: mc_dt,
            mc_reference: reference,
            ancilla: &ancilla,
        };
        let mut sc = ScalingConfig::new(cfg.epsilons.clone(), cfg.repetitions, s.config.seed);
        sc.ae_shots = cfg.ae_shots;
        sc.ae_batch = cfg.ae_batch;
        sc.success_fraction = cfg.success_fraction;
        sc.mc_ratio = cfg.mc_ratio;
        sc.mc_pilot = cfg.mc_pilot;
        scaling_study(&problem, &sc)
    })?;
    let csv = format!("# config_sha256={}\n{}", r.hash, table.to_csv());
    r.write("scaling.csv", &csv)?;

    let per_step: Vec<f64> = table
        .rows
        .iter()
        .filter_map(|row| match (row.ae_kvn_invocations, row.ae_grover_steps) {
            (Some(k), Some(g)) if g > 0 => Some(k as f64 / g as f64),
            _ => None,
        })
        .collect();
    let ratio = per_step.first().copied().filter(|f| per_step.iter().all(|x| x == f));
    r.report.scaling = Some(ScalingSummary {
        mc_slope: table.mc_slope,
        ae_slope: table.ae_slope,
        mc_reference: table.mc_reference,
        ae_reference: table.ae_reference,
        mc_max_trajectories: table.mc_max_trajectories,
        ae_max_power: table.ae_max_power,
        speedups: table.speedups(),
        kvn_invocations_per_grover_step: ratio,
    });
    let gates = s.config.gates.clone();
    for (name, gate, value) in [("mc_slope", gates.mc_slope, table.mc_slope), ("ae_slope", gates.ae_slope, table.ae_slope)] {
        if let Some(g) = gate {
            let ok = (value - g.target).abs() <= g.tolerance;
            r.gate(name, value, format!("{} ± {}", g.target, g.tolerance), ok);
        }
    }
    if gates.kvn_per_grover {
        let v = ratio.unwrap_or(f64::NAN);
        r.gate("kvn_per_grover", v, "== 4".into(), v == 4.0 && !per_step.is_empty());
    }
    Ok(())
}

fn resource_summary(s: &Scenario, op: &KvNOperator) -> Result<ResourceSummary, KvnError> {
    let rc = s.config.resources.clone().unwrap_or(crate::config::ResourcesConfig {
        particles: 1,
        dims_per_particle: None,
        bits: None,
        interactions: 1,
        epsilon: 0.01,
    });
    let d = s.grid.dim() as u64;
    let bits = match rc.bits {
        Some(b) => b,
        None => {
            let l = s.grid.levels(0);
            if !(0..s.grid.dim()).all(|j| s.grid.levels(j) == l) || !l.is_power_of_two() {
                return Err(KvnError::InvalidParameter(
                    "bits can only be inferred when every axis has the same power-of-two levels".into(),
                ));
            }
            l.trailing_zeros()
        }
    };
    let dims = match rc.dims_per_particle {
        Some(v) => v,
        None => {
            if d % (2 * rc.particles) != 0 {
                return Err(KvnError::InvalidParameter(
                    "dims_per_particle can only be inferred when the phase-space dimension is 2·d·M".into(),
                ));
            }
            d / (2 * rc.particles)
        }
    };
    let inputs = ResourceInputs {
        particles: rc.particles,
        dims_per_particle: dims,
        bits,
        interactions: rc.interactions,
        epsilon: rc.epsilon,
    };
    let rep = resource_estimate(op, s.config.t_final, inputs)?;
    Ok(ResourceSummary {
        sparsity: rep.sparsity,
        qubits: rep.qubits,
        phase_dimension: rep.phase_dimension,
        bits,
        particles: rc.particles,
        dims_per_particle: dims,
        interactions: rc.interactions,
        epsilon: rc.epsilon,
        time_steps: rep.time_steps,
        quantum_measured: rep.quantum_measured,
        quantum_scaling: rep.quantum_scaling,
        trajectories: rep.trajectories,
        classical_mc: rep.classical_mc,
    })
}

/// Both complexity formulas for the scenario's operator, without propagating.
pub fn resources(scenario: &Scenario, opts: &RunOptions) -> Result<RunReport, CliError> {
    let scenario = with_options(scenario, opts);
    let mut r = Runner::new(&scenario, "resources", opts.quiet);
    let s = r.scenario;
    let result = (|| {
        if opts.out.is_some() {
            r.open_output(opts)?;
        }
        let op = r.stage("operator", |_| builder(s).build(0.0))?;
        let summary = r.stage("resources", |_| resource_summary(s, &op))?;
        r.report.resources = Some(summary);
        Ok(())
    })();
    match result {
        Ok(()) => r.finish(),
        Err(e) => Err(r.abort(e)),
    }
}

/// Only the sampling study: propagate to `t_final`, then compare estimators.
pub fn scaling(scenario: &Scenario, opts: &RunOptions) -> Result<RunReport, CliError> {
    if scenario.config.sampling.is_none() {
        return Err(CliError::Invalid {
            key: "sampling".into(),
            message: "the scaling command needs a `sampling` section".into(),
        });
    }
    let scenario = with_options(scenario, opts);
    let mut r = Runner::new(&scenario, "scaling", opts.quiet);
    let result = (|| {
        r.open_output(opts)?;
        let s = r.scenario;
        let b = builder(s);
        let op0 = r.stage("operator", |_| b.build(0.0))?;
        let psi0 = r.stage("initial_state", |_| initial_state(s))?;
        let evo = r.stage("propagate", |_| evolve(s, &b, &op0, &psi0, false))?;
        r.report.unitarity = Some(evo.unitarity.clone());
        let last = evo.snapshots.last().expect("final snapshot").clone();
        sampling_stage(&mut r, &last)
    })();
    match result {
        Ok(()) => r.finish(),
        Err(e) => Err(r.abort(e)),
    }
}
