//! Scenario files: strict JSON, validated and compiled up front.

use std::collections::BTreeMap;
use std::path::Path;

use kvnsim::dynamics::{make_builtin_system, DynamicalSystem, SystemParams};
use kvnsim::expr::Expr;
use kvnsim::grid::{build_grid, AxisSpec, PhaseSpaceGrid};
use kvnsim::observables::{coherent_width, ObservableSpec};
use kvnsim::operator::{build_kvn_operator, PhaseGenerator, Scheme};
use kvnsim::propagation::default_dt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub grid: GridConfig,
    pub system: SystemConfig,
    #[serde(default)]
    pub w_mode: WMode,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default)]
    pub propagator: PropagatorKind,
    /// Resolved from the operator norm when absent.
    #[serde(default)]
    pub dt: Option<f64>,
    pub t_final: f64,
    /// Steps between stored snapshots; 0 keeps only the endpoints.
    #[serde(default = "default_stride")]
    pub snapshot_stride: usize,
    pub initial_state: InitialStateConfig,
    #[serde(default)]
    pub observables: Vec<ObservableConfig>,
    #[serde(default)]
    pub gates: GatesConfig,
    #[serde(default)]
    pub sampling: Option<SamplingConfig>,
    #[serde(default)]
    pub resources: Option<ResourcesConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_scheme() -> String {
    Scheme::CentralFd2.name().to_string()
}

fn default_stride() -> usize {
    0
}

fn default_output_dir() -> String {
    "out".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "one")]
    pub hbar: f64,
    pub axes: Vec<AxisConfig>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub label: String,
    pub levels: usize,
    pub extent: f64,
    /// Lower edge; the axis is centered on zero when absent.
    #[serde(default)]
    pub min: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default)]
    pub builtin: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub matrix: Option<Vec<Vec<f64>>>,
    /// `v(x)` for `scalar_autonomous`.
    #[serde(default)]
    pub expression: Option<String>,
    /// One velocity component per axis, over the axis labels, `x1..xd` and `t`.
    #[serde(default)]
    pub expressions: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WMode {
    #[default]
    Zero,
    Lagrangian,
    Custom(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum PropagatorKind {
    #[default]
    Cayley,
    Exact,
    Trotter1,
    Trotter2,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialStateConfig {
    Gaussian {
        center: Vec<f64>,
        /// Coherent widths when absent.
        #[serde(default)]
        sigmas: Option<Vec<f64>>,
        #[serde(default)]
        tilt: Option<Vec<f64>>,
    },
    Maxwellian {
        q_axes: Vec<String>,
        p_axes: Vec<String>,
        mass: f64,
        temperature: f64,
        #[serde(default)]
        conjugate: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservableConfig {
    Moment {
        name: String,
        axis: String,
        #[serde(default = "one_u32")]
        power: u32,
    },
    Expression {
        name: String,
        source: String,
        #[serde(default)]
        bounds: Option<[f64; 2]>,
    },
    Indicator {
        name: String,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    KvnEnergy {
        name: String,
    },
}

fn one_u32() -> u32 {
    1
}

impl ObservableConfig {
    pub fn name(&self) -> &str {
        match self {
            ObservableConfig::Moment { name, .. }
            | ObservableConfig::Expression { name, .. }
            | ObservableConfig::Indicator { name, .. }
            | ObservableConfig::KvnEnergy { name } => name,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct GatesConfig {
    /// Largest relative change of `‖ψ‖` over the run.
    #[serde(default)]
    pub norm_drift: Option<f64>,
    /// Largest `L2(|ψ|² − f_oracle)/L2(f_oracle)` at `t_final`.
    #[serde(default)]
    pub oracle_relative_l2: Option<f64>,
    #[serde(default = "default_oracle_substeps")]
    pub oracle_substeps: usize,
    /// Require every expected conservation law to hold.
    #[serde(default)]
    pub conservation: bool,
    #[serde(default)]
    pub mean_tracks: Vec<MeanGate>,
    #[serde(default)]
    pub mc_slope: Option<SlopeGate>,
    #[serde(default)]
    pub ae_slope: Option<SlopeGate>,
    /// Require exactly four KvN invocations per Grover step.
    #[serde(default)]
    pub kvn_per_grover: bool,
}

fn default_oracle_substeps() -> usize {
    200
}

/// `|⟨O⟩(t) − expected(t)| ≤ relative·|expected(t)|` at every snapshot.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MeanGate {
    pub observable: String,
    pub expected: String,
    pub relative: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SlopeGate {
    pub target: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Name of a bounded observable from `observables`.
    pub observable: String,
    pub epsilons: Vec<f64>,
    pub repetitions: usize,
    #[serde(default = "default_shots")]
    pub ae_shots: u32,
    #[serde(default = "default_batch")]
    pub ae_batch: u32,
    #[serde(default = "default_success")]
    pub success_fraction: f64,
    #[serde(default = "default_ratio")]
    pub mc_ratio: f64,
    #[serde(default = "default_pilot")]
    pub mc_pilot: usize,
    /// RK4 step for trajectories; the run's `dt` when absent.
    #[serde(default)]
    pub mc_dt: Option<f64>,
    #[serde(default = "default_nodes")]
    pub reference_nodes: usize,
}

fn default_shots() -> u32 {
    32
}
fn default_batch() -> u32 {
    8
}
fn default_success() -> f64 {
    0.9
}
fn default_ratio() -> f64 {
    1.25
}
fn default_pilot() -> usize {
    2000
}
fn default_nodes() -> usize {
    24
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ResourcesConfig {
    #[serde(default = "one_u64")]
    pub particles: u64,
    /// Half the phase-space dimension when absent.
    #[serde(default)]
    pub dims_per_particle: Option<u64>,
    /// `log2` of the axis levels when absent.
    #[serde(default)]
    pub bits: Option<u32>,
    #[serde(default = "one_u64")]
    pub interactions: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn one_u64() -> u64 {
    1
}
fn default_epsilon() -> f64 {
    0.01
}

/// A validated scenario with everything compiled.
pub struct Scenario {
    /// Configuration with defaults resolved.
    pub config: ScenarioConfig,
    pub grid: PhaseSpaceGrid,
    pub system: DynamicalSystem,
    pub w: PhaseGenerator,
    pub scheme: Scheme,
    pub dt: f64,
    pub steps: usize,
    pub observables: Vec<ObservableSpec>,
    pub mean_gates: Vec<(usize, Expr)>,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Scenario {
    /// SHA-256 of the resolved configuration, independent of the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.config.clone();
        c.output_dir = String::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn labels(&self) -> Vec<&str> {
        self.config.grid.axes.iter().map(|a| a.label.as_str()).collect()
    }

    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(&self.config).expect("config serializes")
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

fn invalid_from(key: &str) -> impl Fn(kvnsim::KvnError) -> CliError + '_ {
    move |e| invalid(key, e.to_string())
}

pub fn parse_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario_str(&text)
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario, CliError> {
    validate(parse_config(text)?)
}

fn finite(key: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, "must be finite"))
    }
}

fn axis_index(labels: &[&str], key: &str, label: &str) -> Result<usize, CliError> {
    labels
        .iter()
        .position(|l| *l == label)
        .ok_or_else(|| invalid(key, format!("unknown axis `{label}`")))
}

/// Checks a configuration and compiles it into a [`Scenario`].
pub fn validate(mut config: ScenarioConfig) -> Result<Scenario, CliError> {
    if config.name.trim().is_empty() {
        return Err(invalid("name", "must not be empty"));
    }

    // Grid.
    if config.grid.axes.is_empty() {
        return Err(invalid("grid.axes", "at least one axis is required"));
    }
    if !(config.grid.hbar > 0.0 && config.grid.hbar.is_finite()) {
        return Err(invalid("grid.hbar", "must be positive"));
    }
    let mut axes = Vec::new();
    for (i, a) in config.grid.axes.iter().enumerate() {
        let key = format!("grid.axes[{i}]");
        if a.levels < 4 {
            return Err(invalid(format!("{key}.levels"), "levels must be ≥ 4"));
        }
        if !(a.extent > 0.0 && a.extent.is_finite()) {
            return Err(invalid(format!("{key}.extent"), "must be positive"));
        }
        if config.grid.axes[..i].iter().any(|b| b.label == a.label) {
            return Err(invalid(format!("{key}.label"), format!("duplicate axis `{}`", a.label)));
        }
        axes.push(match a.min {
            Some(m) => {
                finite(&format!("{key}.min"), m)?;
                AxisSpec::new(a.label.clone(), a.levels, m, a.extent)
            }
            None => AxisSpec::centered(a.label.clone(), a.levels, a.extent),
        });
    }
    let grid = build_grid(axes, config.grid.hbar).map_err(invalid_from("grid"))?;
    let labels: Vec<String> = config.grid.axes.iter().map(|a| a.label.clone()).collect();
    let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
    let d = grid.dim();

    // System.
    let sys_cfg = &config.system;
    let system = match (&sys_cfg.builtin, &sys_cfg.expressions) {
        (Some(_), Some(_)) => {
            return Err(invalid("system", "give either `builtin` or `expressions`, not both"))
        }
        (None, None) => return Err(invalid("system", "one of `builtin` or `expressions` is required")),
        (Some(name), None) => {
            let params = SystemParams {
                scalars: sys_cfg.params.clone(),
                matrix: sys_cfg.matrix.clone(),
                expression: sys_cfg.expression.clone(),
            };
            make_builtin_system(name, &params).map_err(invalid_from("system"))?
        }
        (None, Some(components)) => {
            if !sys_cfg.params.is_empty() || sys_cfg.matrix.is_some() || sys_cfg.expression.is_some() {
                return Err(invalid("system", "`expressions` takes no other fields"));
            }
            let comps: Vec<&str> = components.iter().map(String::as_str).collect();
            if comps.len() != d {
                return Err(invalid(
                    "system.expressions",
                    format!("{} components for a {d}-dimensional grid", comps.len()),
                ));
            }
            DynamicalSystem::from_expressions(&comps, &labels).map_err(invalid_from("system.expressions"))?
        }
    };
    if system.dim() != d {
        return Err(invalid(
            "system",
            format!("dimension mismatch: system has {} axes, grid has {d}", system.dim()),
        ));
    }

    // Phase generator and scheme.
    let w = match &config.w_mode {
        WMode::Zero => PhaseGenerator::Zero,
        WMode::Lagrangian => PhaseGenerator::Lagrangian,
        WMode::Custom(src) => PhaseGenerator::from_expression(src, d, &labels).map_err(invalid_from("w_mode.custom"))?,
    };
    w.validate(&system).map_err(|e| invalid("w_mode", e.to_string()))?;
    let scheme = Scheme::parse(&config.scheme).map_err(invalid_from("scheme"))?;
    match config.propagator {
        PropagatorKind::Trotter1 | PropagatorKind::Trotter2 if scheme == Scheme::Spectral => {
            return Err(invalid("propagator", "Trotter splitting needs a central-difference scheme"))
        }
        PropagatorKind::Exact | PropagatorKind::Trotter1 | PropagatorKind::Trotter2
            if system.is_time_dependent() =>
        {
            return Err(invalid("propagator", "time-dependent systems need the cayley propagator"))
        }
        PropagatorKind::Exact if grid.len() > kvnsim::propagation::MAX_EXACT_N => {
            return Err(invalid(
                "propagator",
                format!("exact propagation is limited to {} nodes", kvnsim::propagation::MAX_EXACT_N),
            ))
        }
        _ => {}
    }

    // Time stepping.
    finite("t_final", config.t_final)?;
    let dt = match config.dt {
        Some(dt) => dt,
        None => {
            let op = build_kvn_operator(&grid, &system, &w, scheme, 0.0).map_err(invalid_from("system"))?;
            default_dt(&op, config.t_final)
        }
    };
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", "dt must be > 0"));
    }
    if !(config.t_final >= dt * (1.0 - 1e-12)) {
        return Err(invalid("t_final", "t_final must be ≥ dt"));
    }
    let steps = ((config.t_final / dt) - 1e-9).ceil().max(1.0) as usize;
    config.dt = Some(dt);

    // Initial state.
    match &config.initial_state {
        InitialStateConfig::Gaussian { center, sigmas, tilt } => {
            let check_len = |key: &str, n: usize| {
                if n == d {
                    Ok(())
                } else {
                    Err(invalid(key, format!("{n} entries for a {d}-dimensional grid")))
                }
            };
            check_len("initial_state.center", center.len())?;
            if !grid.contains(center) {
                return Err(invalid("initial_state.center", "lies outside the grid"));
            }
            if let Some(s) = sigmas {
                check_len("initial_state.sigmas", s.len())?;
                for (j, &sj) in s.iter().enumerate() {
                    if !(sj >= grid.spacing(j)) {
                        return Err(invalid(
                            format!("initial_state.sigmas[{j}]"),
                            format!("{sj} is below the grid spacing {}", grid.spacing(j)),
                        ));
                    }
                }
            }
            if let Some(k) = tilt {
                check_len("initial_state.tilt", k.len())?;
            }
        }
        _ => {}
    }
    if let InitialStateConfig::Gaussian { sigmas: sigmas @ None, .. } = &mut config.initial_state {
        *sigmas = Some((0..d).map(|j| coherent_width(&grid, j)).collect());
    }
    match &config.initial_state {
        InitialStateConfig::Gaussian { .. } => {}
        InitialStateConfig::Maxwellian {
            q_axes,
            p_axes,
            mass,
            temperature,
            conjugate,
        } => {
            if q_axes.len() != p_axes.len() || q_axes.is_empty() {
                return Err(invalid("initial_state.p_axes", "needs one momentum axis per coordinate axis"));
            }
            for a in q_axes.iter().chain(p_axes) {
                axis_index(&labels, "initial_state", a)?;
            }
            if !(*mass > 0.0 && *temperature > 0.0) {
                return Err(invalid("initial_state", "mass and temperature must be positive"));
            }
            if let Some(k) = conjugate {
                if k.len() != q_axes.len() {
                    return Err(invalid("initial_state.conjugate", "needs one entry per coordinate axis"));
                }
            }
        }
    }

    // Observables.
    let mut observables = Vec::new();
    for (i, o) in config.observables.iter().enumerate() {
        let key = format!("observables[{i}]");
        if config.observables[..i].iter().any(|p| p.name() == o.name()) {
            return Err(invalid(format!("{key}.name"), format!("duplicate observable `{}`", o.name())));
        }
        let spec = match o {
            ObservableConfig::Moment { name, axis, power } => {
                ObservableSpec::moment(name.clone(), axis_index(&labels, &format!("{key}.axis"), axis)?, *power)
            }
            ObservableConfig::Expression { name, source, bounds } => {
                if let Some([lo, hi]) = bounds {
                    if !(lo < hi) {
                        return Err(invalid(format!("{key}.bounds"), "need lower < upper"));
                    }
                }
                ObservableSpec::expression(name.clone(), source, &labels, bounds.map(|[a, b]| (a, b)))
                    .map_err(invalid_from(&format!("{key}.source")))?
            }
            ObservableConfig::Indicator { name, lower, upper } => {
                if lower.len() != d || upper.len() != d {
                    return Err(invalid(key, "box corners need one entry per axis"));
                }
                ObservableSpec::indicator(name.clone(), lower.clone(), upper.clone())
            }
            ObservableConfig::KvnEnergy { name } => ObservableSpec::kvn_energy(name.clone()),
        };
        if !matches!(o, ObservableConfig::KvnEnergy { .. }) {
            spec.validate(&grid).map_err(|e| invalid(&key, e.to_string()))?;
        }
        observables.push(spec);
    }

    // Gates.
    let g = &config.gates;
    for (key, v) in [("gates.norm_drift", g.norm_drift), ("gates.oracle_relative_l2", g.oracle_relative_l2)] {
        if let Some(v) = v {
            if !(v >= 0.0) {
                return Err(invalid(key, "must be nonnegative"));
            }
        }
    }
    let mut mean_gates = Vec::new();
    for (i, m) in g.mean_tracks.iter().enumerate() {
        let key = format!("gates.mean_tracks[{i}]");
        let idx = config
            .observables
            .iter()
            .position(|o| o.name() == m.observable)
            .ok_or_else(|| invalid(format!("{key}.observable"), format!("unknown observable `{}`", m.observable)))?;
        let e = Expr::compile(&m.expected, &["t"]).map_err(invalid_from(&format!("{key}.expected")))?;
        if !(m.relative > 0.0) {
            return Err(invalid(format!("{key}.relative"), "must be positive"));
        }
        mean_gates.push((idx, e));
    }

    // Sampling.
    if let Some(s) = &config.sampling {
        let obs = config
            .observables
            .iter()
            .find(|o| o.name() == s.observable)
            .ok_or_else(|| invalid("sampling.observable", format!("unknown observable `{}`", s.observable)))?;
        match obs {
            ObservableConfig::Expression { bounds: Some(_), .. } | ObservableConfig::Indicator { .. } => {}
            _ => return Err(invalid("sampling.observable", "needs a bounded pointwise observable")),
        }
        if !matches!(config.initial_state, InitialStateConfig::Gaussian { .. }) {
            return Err(invalid("sampling", "the sampling study needs a gaussian initial_state"));
        }
        if s.epsilons.len() < 2 || s.epsilons.iter().any(|e| !(*e > 0.0 && *e < 0.5)) {
            return Err(invalid("sampling.epsilons", "need at least two values in (0, 0.5)"));
        }
        if s.repetitions < 2 {
            return Err(invalid("sampling.repetitions", "need at least two"));
        }
        if !(s.success_fraction > 0.0 && s.success_fraction <= 1.0) {
            return Err(invalid("sampling.success_fraction", "must lie in (0, 1]"));
        }
        if !(s.mc_ratio > 1.0) {
            return Err(invalid("sampling.mc_ratio", "must exceed 1"));
        }
        if s.ae_shots == 0 || s.ae_batch == 0 {
            return Err(invalid("sampling.ae_shots", "shots and batch must be positive"));
        }
        if let Some(h) = s.mc_dt {
            if !(h > 0.0) {
                return Err(invalid("sampling.mc_dt", "must be positive"));
            }
        }
    } else if g.mc_slope.is_some() || g.ae_slope.is_some() || g.kvn_per_grover {
        return Err(invalid("gates", "sampling gates need a `sampling` section"));
    }

    if let Some(r) = &config.resources {
        if r.particles == 0 || r.interactions == 0 || r.dims_per_particle == Some(0) || r.bits == Some(0) {
            return Err(invalid("resources", "counts must be positive"));
        }
        if !(r.epsilon > 0.0 && r.epsilon <= 1.0) {
            return Err(invalid("resources.epsilon", "must lie in (0, 1]"));
        }
    }

    Ok(Scenario {
        config,
        grid,
        system,
        w,
        scheme,
        dt,
        steps,
        observables,
        mean_gates,
    })
}
