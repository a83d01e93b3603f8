//! Initial states, expectation values, uncertainties and conservation diagnostics.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rustfft::FftPlanner;
use statrs::function::erf::erfc;

use crate::dynamics::DynamicalSystem;
use crate::error::{KvnError, Result};
use crate::expr::Expr;
use crate::grid::PhaseSpaceGrid;
use crate::linalg::dot;
use crate::operator::KvNOperator;
use crate::propagation::WaveFunction;

/// Probability allowed outside the momentum box for a Maxwellian.
pub const MAXWELLIAN_TRUNCATION: f64 = 1e-6;

/// Width of a coherent Gaussian on axis `j`: `σ/Δx = (L/4π)^{1/2}`.
pub fn coherent_width(grid: &PhaseSpaceGrid, j: usize) -> f64 {
    grid.spacing(j) * (grid.levels(j) as f64 / (4.0 * PI)).sqrt()
}

/// `ψ ∝ Π_j exp(−Δ_j²/4σ_j²)` with minimal-image displacements `Δ_j` from
/// `center`, times `e^{ik·Δ}` when a tilt is given; normalized.
pub fn gaussian_state(
    grid: &PhaseSpaceGrid,
    center: &[f64],
    sigmas: &[f64],
    tilt: Option<&[f64]>,
) -> Result<WaveFunction> {
    let d = grid.dim();
    for (what, len) in [("center", center.len()), ("sigmas", sigmas.len())] {
        if len != d {
            return Err(KvnError::InvalidParameter(format!("{what} has {len} entries for a {d}-dimensional grid")));
        }
    }
    if let Some(k) = tilt {
        if k.len() != d {
            return Err(KvnError::DimensionMismatch {
                expected: d,
                found: k.len(),
            });
        }
    }
    if !grid.contains(center) {
        return Err(KvnError::InvalidParameter(format!("center {center:?} lies outside the grid")));
    }
    for j in 0..d {
        if !(sigmas[j] >= grid.spacing(j)) {
            return Err(KvnError::Unresolvable(format!(
                "sigma {} on axis {j} is below the spacing {}",
                sigmas[j],
                grid.spacing(j)
            )));
        }
    }
    let amps = grid
        .points()
        .iter()
        .map(|x| {
            let mut e = 0.0;
            let mut phase = 0.0;
            for j in 0..d {
                let dx = grid.periodic_delta(j, x[j], center[j]);
                e -= dx * dx / (4.0 * sigmas[j] * sigmas[j]);
                if let Some(k) = tilt {
                    phase += k[j] * dx;
                }
            }
            C64::from_polar(e.exp(), phase)
        })
        .collect();
    let mut psi = WaveFunction::new(grid.clone(), amps, 0.0)?;
    psi.normalize()?;
    Ok(psi)
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaxwellianPhase {
    None,
    /// `ħφ = (k·q / k·v) T` with `v = p/m`; zero where `k·v = 0`.
    Conjugate(Vec<f64>),
}

/// Maxwellian in the momenta, uniform in the coordinates.
pub fn maxwellian_state(
    grid: &PhaseSpaceGrid,
    q_axes: &[usize],
    p_axes: &[usize],
    mass: f64,
    temperature: f64,
    phase: &MaxwellianPhase,
) -> Result<WaveFunction> {
    if q_axes.len() != p_axes.len() {
        return Err(KvnError::DimensionMismatch {
            expected: q_axes.len(),
            found: p_axes.len(),
        });
    }
    if let Some(&j) = q_axes.iter().chain(p_axes).find(|&&j| j >= grid.dim()) {
        return Err(KvnError::InvalidAxis { axis: j, dim: grid.dim() });
    }
    if !(mass > 0.0 && temperature > 0.0) {
        return Err(KvnError::InvalidParameter("mass and temperature must be positive".into()));
    }
    if let MaxwellianPhase::Conjugate(k) = phase {
        if k.len() != q_axes.len() {
            return Err(KvnError::DimensionMismatch {
                expected: q_axes.len(),
                found: k.len(),
            });
        }
    }
    let s = (mass * temperature).sqrt();
    let mut lost = 0.0;
    for &j in p_axes {
        let a = grid.axis(j)?;
        let (lo, hi) = (a.min, a.min + a.extent);
        lost += 0.5 * erfc(-lo / (s * 2f64.sqrt())) + 0.5 * erfc(hi / (s * 2f64.sqrt()));
    }
    if lost > MAXWELLIAN_TRUNCATION {
        return Err(KvnError::InvalidParameter(format!(
            "momentum box truncates {lost:e} of the Maxwellian (limit {MAXWELLIAN_TRUNCATION:e})"
        )));
    }
    let hbar = grid.hbar();
    let amps = grid
        .points()
        .iter()
        .map(|x| {
            let p2: f64 = p_axes.iter().map(|&j| x[j] * x[j]).sum();
            let modulus = (-p2 / (4.0 * mass * temperature)).exp();
            let arg = match phase {
                MaxwellianPhase::None => 0.0,
                MaxwellianPhase::Conjugate(k) => {
                    let kq: f64 = k.iter().zip(q_axes).map(|(kj, &j)| kj * x[j]).sum();
                    let kv: f64 = k.iter().zip(p_axes).map(|(kj, &j)| kj * x[j] / mass).sum();
                    if kv == 0.0 {
                        0.0
                    } else {
                        kq / kv * temperature / hbar
                    }
                }
            };
            C64::from_polar(modulus, arg)
        })
        .collect();
    let mut psi = WaveFunction::new(grid.clone(), amps, 0.0)?;
    psi.normalize()?;
    Ok(psi)
}

#[derive(Clone)]
pub enum ObservableKind {
    /// `O(x)` sampled at nodes.
    GridFunction(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
    /// 1 inside the half-open box `[lower, upper)`, 0 outside.
    Indicator { lower: Vec<f64>, upper: Vec<f64> },
    /// `⟨x_axis^power⟩`.
    Moment { axis: usize, power: u32 },
    /// `⟨ψ|K̂ψ⟩`.
    KvnEnergy,
}

#[derive(Clone)]
pub struct ObservableSpec {
    pub name: String,
    pub kind: ObservableKind,
    /// Declared `[O_min, O_max]`.
    pub bounds: Option<(f64, f64)>,
}

impl fmt::Debug for ObservableSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            ObservableKind::GridFunction(_) => "grid_function".to_string(),
            ObservableKind::Indicator { lower, upper } => format!("indicator {lower:?}..{upper:?}"),
            ObservableKind::Moment { axis, power } => format!("moment axis {axis} power {power}"),
            ObservableKind::KvnEnergy => "kvn_energy".to_string(),
        };
        f.debug_struct("ObservableSpec")
            .field("name", &self.name)
            .field("kind", &kind)
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl ObservableSpec {
    pub fn function(
        name: impl Into<String>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        bounds: Option<(f64, f64)>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: ObservableKind::GridFunction(Arc::new(f)),
            bounds,
        }
    }

    /// `O` from an expression over `x1..xd` and the axis labels.
    pub fn expression(
        name: impl Into<String>,
        source: &str,
        labels: &[&str],
        bounds: Option<(f64, f64)>,
    ) -> Result<Self> {
        let d = labels.len();
        let numbered: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        let mut names: Vec<&str> = numbered.iter().map(String::as_str).collect();
        names.extend(labels.iter().copied());
        let e = Expr::compile(source, &names)?;
        Ok(Self::function(
            name,
            move |x| {
                let mut v = Vec::with_capacity(2 * d);
                v.extend_from_slice(x);
                v.extend_from_slice(x);
                e.eval(&v)
            },
            bounds,
        ))
    }

    pub fn indicator(name: impl Into<String>, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            kind: ObservableKind::Indicator { lower, upper },
            bounds: Some((0.0, 1.0)),
        }
    }

    pub fn moment(name: impl Into<String>, axis: usize, power: u32) -> Self {
        Self {
            name: name.into(),
            kind: ObservableKind::Moment { axis, power },
            bounds: None,
        }
    }

    pub fn kvn_energy(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ObservableKind::KvnEnergy,
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = Some((lo, hi));
        self
    }

    /// Pointwise value; `None` for the operator-valued KvN energy.
    pub fn evaluate_at(&self, x: &[f64]) -> Option<f64> {
        match &self.kind {
            ObservableKind::GridFunction(f) => Some(f(x)),
            ObservableKind::Indicator { lower, upper } => Some(
                if x.iter().zip(lower).zip(upper).all(|((v, lo), hi)| v >= lo && v < hi) {
                    1.0
                } else {
                    0.0
                },
            ),
            ObservableKind::Moment { axis, power } => Some(x[*axis].powi(*power as i32)),
            ObservableKind::KvnEnergy => None,
        }
    }

    /// Checks the observable against the grid and its declared bounds.
    pub fn validate(&self, grid: &PhaseSpaceGrid) -> Result<()> {
        match &self.kind {
            ObservableKind::Indicator { lower, upper } => {
                if lower.len() != grid.dim() || upper.len() != grid.dim() {
                    return Err(KvnError::Observable(format!(
                        "indicator `{}` needs {} lower and upper bounds",
                        self.name,
                        grid.dim()
                    )));
                }
            }
            ObservableKind::Moment { axis, .. } => {
                grid.axis(*axis)?;
            }
            _ => {}
        }
        if let ObservableKind::KvnEnergy = self.kind {
            return Ok(());
        }
        let mut x = vec![0.0; grid.dim()];
        for i in 0..grid.len() {
            grid.coordinates_into(i, &mut x);
            let v = self.evaluate_at(&x).unwrap();
            if !v.is_finite() {
                return Err(KvnError::Observable(format!("`{}` is not finite at {x:?}", self.name)));
            }
            if let Some((lo, hi)) = self.bounds {
                if v < lo || v > hi {
                    return Err(KvnError::Observable(format!(
                        "`{}` = {v} at {x:?} lies outside its declared bounds [{lo}, {hi}]",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `(Re, |Im|)` of `⟨ψ|K̂ψ⟩ ΠΔx`.
pub fn kvn_energy(psi: &WaveFunction, op: &KvNOperator) -> (f64, f64) {
    let k = op.apply_vec(&psi.amplitudes);
    let e = dot(&psi.amplitudes, &k) * psi.grid().cell_volume();
    (e.re, e.im.abs())
}

/// Mean along axis `j` with automatic switch to circular statistics when
/// the plain spread exceeds a quarter of the box.
pub fn axis_mean(psi: &WaveFunction, j: usize) -> Result<f64> {
    Ok(axis_statistics(psi, j)?.0)
}

/// `(mean, standard deviation, circular)` along axis `j`.
fn axis_statistics(psi: &WaveFunction, j: usize) -> Result<(f64, f64, bool)> {
    let grid = psi.grid();
    let axis = grid.axis(j)?;
    let cell = grid.cell_volume();
    let mut marginal = vec![0.0; axis.levels];
    let stride = grid.stride(j);
    for (i, a) in psi.amplitudes.iter().enumerate() {
        marginal[(i / stride) % axis.levels] += a.norm_sqr() * cell;
    }
    let total: f64 = marginal.iter().sum();
    if !(total > 0.0) {
        return Err(KvnError::Observable("wavefunction carries no probability".into()));
    }
    let nodes = grid.nodes(j);
    let m1: f64 = nodes.iter().zip(&marginal).map(|(x, w)| x * w).sum::<f64>() / total;
    let m2: f64 = nodes.iter().zip(&marginal).map(|(x, w)| x * x * w).sum::<f64>() / total;
    let plain_sd = (m2 - m1 * m1).max(0.0).sqrt();
    if plain_sd <= 0.25 * axis.extent {
        return Ok((m1, plain_sd, false));
    }
    let z: C64 = nodes
        .iter()
        .zip(&marginal)
        .map(|(x, w)| C64::from_polar(*w, 2.0 * PI * (x - axis.min) / axis.extent))
        .sum::<C64>()
        / total;
    if z.norm() < 1e-3 {
        return Ok((m1, plain_sd, false));
    }
    let mean = grid.wrap(j, axis.min + z.arg() * axis.extent / (2.0 * PI));
    let var: f64 = nodes
        .iter()
        .zip(&marginal)
        .map(|(x, w)| grid.periodic_delta(j, *x, mean).powi(2) * w)
        .sum::<f64>()
        / total;
    Ok((mean, var.sqrt(), true))
}

/// `Σ O |ψ|² ΠΔx`; the KvN energy requires `op`.
pub fn expectation(psi: &WaveFunction, obs: &ObservableSpec, op: Option<&KvNOperator>) -> Result<f64> {
    let grid = psi.grid();
    let cell = grid.cell_volume();
    match &obs.kind {
        ObservableKind::KvnEnergy => {
            let op = op.ok_or_else(|| KvnError::Observable("kvn_energy needs the operator".into()))?;
            Ok(kvn_energy(psi, op).0)
        }
        ObservableKind::Moment { axis, power } => {
            let (mean, _, circular) = axis_statistics(psi, *axis)?;
            if *power == 1 {
                return Ok(mean);
            }
            let stride = grid.stride(*axis);
            let levels = grid.levels(*axis);
            let mut acc = 0.0;
            for (i, a) in psi.amplitudes.iter().enumerate() {
                let x = grid.node(*axis, (i / stride) % levels);
                let x = if circular { mean + grid.periodic_delta(*axis, x, mean) } else { x };
                acc += x.powi(*power as i32) * a.norm_sqr();
            }
            Ok(acc * cell)
        }
        _ => {
            let mut x = vec![0.0; grid.dim()];
            let mut acc = 0.0;
            for (i, a) in psi.amplitudes.iter().enumerate() {
                grid.coordinates_into(i, &mut x);
                let v = obs.evaluate_at(&x).unwrap();
                if !v.is_finite() {
                    return Err(KvnError::Observable(format!("`{}` is not finite at {x:?}", obs.name)));
                }
                acc += v * a.norm_sqr();
            }
            Ok(acc * cell)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Position(usize),
    /// Conjugate momentum `P̂_j` of axis `j`.
    Momentum(usize),
}

/// `σ = (⟨A²⟩ − ⟨A⟩²)^{1/2}`; momenta are measured from Fourier-space `|ψ̃|²`.
pub fn uncertainty(psi: &WaveFunction, q: Quantity) -> Result<f64> {
    match q {
        Quantity::Position(j) => Ok(axis_statistics(psi, j)?.1),
        Quantity::Momentum(j) => {
            let grid = psi.grid();
            let p = grid.momentum_grid(j)?;
            let l = grid.levels(j);
            let stride = grid.stride(j);
            let fft = FftPlanner::new().plan_fft_forward(l);
            let mut weights = vec![0.0; l];
            let mut line = vec![C64::new(0.0, 0.0); l];
            for start in grid.line_starts(j) {
                for k in 0..l {
                    line[k] = psi.amplitudes[start + k * stride];
                }
                fft.process(&mut line);
                for (w, c) in weights.iter_mut().zip(&line) {
                    *w += c.norm_sqr();
                }
            }
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                return Err(KvnError::Observable("wavefunction carries no probability".into()));
            }
            let m1: f64 = p.iter().zip(&weights).map(|(p, w)| p * w).sum::<f64>() / total;
            let m2: f64 = p.iter().zip(&weights).map(|(p, w)| p * p * w).sum::<f64>() / total;
            Ok((m2 - m1 * m1).max(0.0).sqrt())
        }
    }
}

/// Probability within `margin` nodes of any box face.
pub fn boundary_leakage(psi: &WaveFunction, margin: usize) -> f64 {
    let grid = psi.grid();
    let cell = grid.cell_volume();
    psi.amplitudes
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            let m = grid.multi_index_unchecked(*i);
            m.iter()
                .enumerate()
                .any(|(j, &k)| k < margin || k + margin >= grid.levels(j))
        })
        .map(|(_, a)| a.norm_sqr() * cell)
        .sum()
}

/// Tolerances against which conservation is flagged.
#[derive(Debug, Clone, Copy)]
pub struct ConservationTolerances {
    pub norm: f64,
    pub kvn_energy: f64,
    pub energy_density: f64,
    pub momentum: f64,
}

impl Default for ConservationTolerances {
    fn default() -> Self {
        Self {
            norm: 1e-10,
            kvn_energy: 1e-8,
            energy_density: 1e-2,
            momentum: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftMeasure {
    Absolute,
    /// Relative to the initial value.
    Relative,
}

#[derive(Debug, Clone)]
pub struct TrackedQuantity {
    pub name: String,
    pub values: Vec<f64>,
    /// Whether the conservation condition holds for this system.
    pub expected_conserved: bool,
    pub measure: DriftMeasure,
    pub tolerance: f64,
    /// `max_t |v(t) − v(0)|`, divided by `|v(0)|` for relative measures.
    pub drift: f64,
}

impl TrackedQuantity {
    fn new(name: String, values: Vec<f64>, expected: bool, measure: DriftMeasure, tolerance: f64) -> Self {
        let v0 = values.first().copied().unwrap_or(0.0);
        let abs = values.iter().map(|v| (v - v0).abs()).fold(0.0, f64::max);
        let drift = match measure {
            DriftMeasure::Absolute => abs,
            DriftMeasure::Relative => {
                if v0 != 0.0 {
                    abs / v0.abs()
                } else {
                    abs
                }
            }
        };
        Self {
            name,
            values,
            expected_conserved: expected,
            measure,
            tolerance,
            drift,
        }
    }

    /// `true` unless the quantity should be conserved and drifted too far.
    pub fn passes(&self) -> bool {
        !self.expected_conserved || self.drift <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct ConservationReport {
    pub times: Vec<f64>,
    pub quantities: Vec<TrackedQuantity>,
}

impl ConservationReport {
    pub fn get(&self, name: &str) -> Option<&TrackedQuantity> {
        self.quantities.iter().find(|q| q.name == name)
    }

    pub fn all_pass(&self) -> bool {
        self.quantities.iter().all(TrackedQuantity::passes)
    }
}

/// Tracks the norm, the KvN energy (with `op`), `⟨Hf⟩` and `⟨p_j f⟩` for
/// cyclic coordinates across `snapshots`.
pub fn conservation_report(
    snapshots: &[WaveFunction],
    system: &DynamicalSystem,
    op: Option<&KvNOperator>,
    tol: ConservationTolerances,
) -> Result<ConservationReport> {
    if snapshots.is_empty() {
        return Err(KvnError::InvalidParameter("no snapshots".into()));
    }
    let times = snapshots.iter().map(|s| s.time).collect();
    let mut quantities = vec![TrackedQuantity::new(
        "norm".into(),
        snapshots.iter().map(WaveFunction::norm_sqr).collect(),
        true,
        DriftMeasure::Absolute,
        tol.norm,
    )];
    if let Some(op) = op {
        quantities.push(TrackedQuantity::new(
            "kvn_energy".into(),
            snapshots.iter().map(|s| kvn_energy(s, op).0).collect(),
            !system.is_time_dependent(),
            DriftMeasure::Absolute,
            tol.kvn_energy,
        ));
    }
    if let Some(c) = system.canonical() {
        let grid = snapshots[0].grid();
        let pts = grid.points();
        let cell = grid.cell_volume();
        let weighted = |g: &dyn Fn(&[f64], f64) -> f64| -> Vec<f64> {
            snapshots
                .iter()
                .map(|s| {
                    s.amplitudes
                        .iter()
                        .zip(&pts)
                        .map(|(a, x)| g(x, s.time) * a.norm_sqr())
                        .sum::<f64>()
                        * cell
                })
                .collect()
        };
        quantities.push(TrackedQuantity::new(
            "energy_density".into(),
            weighted(&|x, t| c.hamiltonian(x, t)),
            !c.time_dependent,
            DriftMeasure::Relative,
            tol.energy_density,
        ));
        for (i, &pa) in c.p_axes.iter().enumerate() {
            if c.cyclic.get(i).copied().unwrap_or(false) {
                quantities.push(TrackedQuantity::new(
                    format!("momentum_{}", grid.axes()[pa].label),
                    weighted(&|x, _| x[pa]),
                    true,
                    DriftMeasure::Absolute,
                    tol.momentum,
                ));
            }
        }
    }
    Ok(ConservationReport { times, quantities })
}
