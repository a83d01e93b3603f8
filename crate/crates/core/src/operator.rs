//! Discrete KvN Hamiltonian `K̂ = ½(P̂·v̂ + v̂·P̂) + Ŵ` on a periodic grid.
//!
//! Central schemes assemble, per axis `j`, the sparse block
//! `−(iħ/2)(V_j D_j + D_j V_j)` where `D_j` is the periodic central
//! difference stencil and `V_j` is `v_j` sampled at nodes. Because `D_j` is
//! exactly antisymmetric and the entry `(a, b)` is built from `v_a + v_b`,
//! the assembled matrix is Hermitian bit-for-bit. The spectral scheme
//! applies the same symmetrized product with `P̂_j` diagonal in Fourier
//! space.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::dynamics::DynamicalSystem;
use crate::error::{KvnError, Result};
use crate::expr::Expr;
use crate::grid::PhaseSpaceGrid;
use crate::linalg::{materialize, CsrMatrix, LinearOperator};

/// Power iterations used for the operator-norm estimate.
pub const NORM_POWER_ITERATIONS: usize = 20;

/// Generator `W` of the phase, `ħφ̇ = −W`.
#[derive(Clone, Default)]
pub enum PhaseGenerator {
    #[default]
    Zero,
    /// `W = −L`, the negative classical Lagrangian; canonical systems only.
    Lagrangian,
    Custom(CustomPhase),
}

#[derive(Clone)]
pub struct CustomPhase {
    pub label: String,
    pub time_dependent: bool,
    func: Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for PhaseGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseGenerator::Zero => write!(f, "Zero"),
            PhaseGenerator::Lagrangian => write!(f, "Lagrangian"),
            PhaseGenerator::Custom(c) => write!(f, "Custom({})", c.label),
        }
    }
}

impl PhaseGenerator {
    pub fn custom(
        label: impl Into<String>,
        time_dependent: bool,
        func: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        PhaseGenerator::Custom(CustomPhase {
            label: label.into(),
            time_dependent,
            func: Arc::new(func),
        })
    }

    /// `W` from an expression over `x1..xd`, optional axis `labels`, and `t`.
    pub fn from_expression(source: &str, dim: usize, labels: &[&str]) -> Result<Self> {
        let numbered: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
        let mut names: Vec<&str> = numbered.iter().map(String::as_str).collect();
        names.extend(labels.iter().copied());
        names.push("t");
        let e = Expr::compile(source, &names)?;
        let td = e.depends_on("t");
        let aliases = !labels.is_empty();
        Ok(Self::custom(source, td, move |x, t| {
            let mut vals = Vec::with_capacity(2 * x.len() + 1);
            vals.extend_from_slice(x);
            if aliases {
                vals.extend_from_slice(x);
            }
            vals.push(t);
            e.eval(&vals)
        }))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, PhaseGenerator::Zero)
    }

    pub fn validate(&self, system: &DynamicalSystem) -> Result<()> {
        match self {
            PhaseGenerator::Lagrangian if system.canonical().is_none() => Err(KvnError::NotCanonical),
            _ => Ok(()),
        }
    }

    pub fn value(&self, system: &DynamicalSystem, x: &[f64], t: f64) -> Result<f64> {
        let w = match self {
            PhaseGenerator::Zero => 0.0,
            PhaseGenerator::Lagrangian => {
                -system.canonical().ok_or(KvnError::NotCanonical)?.lagrangian(x, t)
            }
            PhaseGenerator::Custom(c) => (c.func)(x, t),
        };
        if !w.is_finite() {
            return Err(KvnError::NonFinite(format!("W at {x:?}, t = {t}")));
        }
        Ok(w)
    }

    /// Central-difference gradient `∇W` with the system's step sizes.
    pub fn gradient(&self, system: &DynamicalSystem, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let d = x.len();
        if self.is_zero() {
            return Ok(vec![0.0; d]);
        }
        let mut xp = x.to_vec();
        let mut g = vec![0.0; d];
        for k in 0..d {
            let h = system.fd_steps()[k];
            xp[k] = x[k] + h;
            let fp = self.value(system, &xp, t)?;
            xp[k] = x[k] - h;
            let fm = self.value(system, &xp, t)?;
            xp[k] = x[k];
            g[k] = (fp - fm) / (2.0 * h);
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    CentralFd2,
    CentralFd4,
    Spectral,
}

impl Scheme {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "central_fd2" => Ok(Scheme::CentralFd2),
            "central_fd4" => Ok(Scheme::CentralFd4),
            "spectral" => Ok(Scheme::Spectral),
            other => Err(KvnError::UnsupportedScheme(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::CentralFd2 => "central_fd2",
            Scheme::CentralFd4 => "central_fd4",
            Scheme::Spectral => "spectral",
        }
    }

    /// Antisymmetric first-derivative stencil as `(offset, coefficient)` for `offset > 0`;
    /// the coefficient at `-offset` is the negation.
    fn stencil(self) -> &'static [(i64, f64)] {
        match self {
            Scheme::CentralFd2 => &[(1, 0.5)],
            Scheme::CentralFd4 => &[(1, 2.0 / 3.0), (2, -1.0 / 12.0)],
            Scheme::Spectral => &[],
        }
    }
}

/// Which piece of `K̂` an operator represents after splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartKind {
    Full,
    /// Advection along one axis.
    Advection(usize),
    /// Diagonal `Ŵ`.
    Potential,
}

#[derive(Clone)]
enum Repr {
    Sparse(CsrMatrix),
    Spectral(Arc<SpectralApply>),
}

/// Matrix-free `½(v·P̂ + P̂·v) + W` with `P̂` applied by FFT along each axis.
struct SpectralApply {
    grid: PhaseSpaceGrid,
    velocities: Vec<Option<Vec<f64>>>,
    potential: Vec<f64>,
    momenta: Vec<Vec<f64>>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl SpectralApply {
    /// `out = P̂_j x`.
    fn momentum(&self, j: usize, x: &[C64], out: &mut [C64]) {
        let g = &self.grid;
        let l = g.levels(j);
        let stride = g.stride(j);
        let scale = 1.0 / l as f64;
        let mut line = vec![C64::new(0.0, 0.0); l];
        let mut fft_scratch =
            vec![C64::new(0.0, 0.0); self.forward[j].get_inplace_scratch_len().max(self.inverse[j].get_inplace_scratch_len())];
        for start in g.line_starts(j) {
            for k in 0..l {
                line[k] = x[start + k * stride];
            }
            self.forward[j].process_with_scratch(&mut line, &mut fft_scratch);
            for (c, p) in line.iter_mut().zip(&self.momenta[j]) {
                *c *= p * scale;
            }
            self.inverse[j].process_with_scratch(&mut line, &mut fft_scratch);
            for k in 0..l {
                out[start + k * stride] = line[k];
            }
        }
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        let n = x.len();
        for i in 0..n {
            y[i] = x[i] * self.potential[i];
        }
        let mut px = vec![C64::new(0.0, 0.0); n];
        let mut vx = vec![C64::new(0.0, 0.0); n];
        let mut pvx = vec![C64::new(0.0, 0.0); n];
        for (j, v) in self.velocities.iter().enumerate() {
            let Some(v) = v else { continue };
            self.momentum(j, x, &mut px);
            for i in 0..n {
                vx[i] = x[i] * v[i];
            }
            self.momentum(j, &vx, &mut pvx);
            for i in 0..n {
                y[i] += 0.5 * (px[i] * v[i] + pvx[i]);
            }
        }
    }
}

/// Discrete KvN Hamiltonian.
#[derive(Clone)]
pub struct KvNOperator {
    grid: PhaseSpaceGrid,
    scheme: Scheme,
    time: f64,
    kind: PartKind,
    repr: Repr,
    /// Per-axis advection blocks for central schemes.
    advection_parts: Vec<CsrMatrix>,
    potential: Vec<f64>,
    sparsity: usize,
    norm_bound: f64,
}

impl fmt::Debug for KvNOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KvNOperator")
            .field("scheme", &self.scheme)
            .field("kind", &self.kind)
            .field("time", &self.time)
            .field("n", &self.grid.len())
            .field("sparsity", &self.sparsity)
            .field("norm_bound", &self.norm_bound)
            .finish()
    }
}

impl LinearOperator for KvNOperator {
    fn dim(&self) -> usize {
        self.grid.len()
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        match &self.repr {
            Repr::Sparse(m) => m.matvec(x, y),
            Repr::Spectral(s) => s.apply(x, y),
        }
    }

    fn diagonal(&self) -> Option<Vec<C64>> {
        match &self.repr {
            Repr::Sparse(m) => Some(m.diagonal_entries()),
            Repr::Spectral(_) => None,
        }
    }
}

fn sample_velocities(
    grid: &PhaseSpaceGrid,
    system: &DynamicalSystem,
    time: f64,
) -> Result<Vec<Vec<f64>>> {
    let d = grid.dim();
    let per_node: Vec<Vec<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut x = vec![0.0; d];
            grid.coordinates_into(i, &mut x);
            let v = system.velocity_vec(&x, time);
            if v.iter().any(|c| !c.is_finite()) {
                return Err(KvnError::NonFinite(format!("velocity at node {i}")));
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    Ok((0..d)
        .map(|j| per_node.iter().map(|v| v[j]).collect())
        .collect())
}

fn sample_potential(
    grid: &PhaseSpaceGrid,
    system: &DynamicalSystem,
    w: &PhaseGenerator,
    time: f64,
) -> Result<Vec<f64>> {
    if w.is_zero() {
        return Ok(vec![0.0; grid.len()]);
    }
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut x = vec![0.0; grid.dim()];
            grid.coordinates_into(i, &mut x);
            w.value(system, &x, time)
        })
        .collect()
}

/// Sparse block `−(iħ/2)(V D + D V)` along axis `j`.
fn advection_block(grid: &PhaseSpaceGrid, scheme: Scheme, j: usize, v: &[f64]) -> CsrMatrix {
    let n = grid.len();
    let l = grid.levels(j) as i64;
    let stride = grid.stride(j);
    let dx = grid.spacing(j);
    let half_hbar = 0.5 * grid.hbar();
    let stencil = scheme.stencil();
    let rows = (0..n)
        .into_par_iter()
        .map(|a| {
            let k = ((a / stride) as i64) % l;
            let base = a - k as usize * stride;
            let mut row = Vec::with_capacity(2 * stencil.len());
            for &(off, coef) in stencil {
                for (o, c) in [(off, coef), (-off, -coef)] {
                    let kb = (k + o).rem_euclid(l) as usize;
                    let b = base + kb * stride;
                    let s = v[a] + v[b];
                    if s == 0.0 {
                        continue;
                    }
                    row.push((b, C64::new(0.0, -half_hbar * c * s / dx)));
                }
            }
            row
        })
        .collect();
    CsrMatrix::from_rows(n, rows)
}

/// Deterministic start vector for power iteration.
fn probe_vector(n: usize) -> Vec<C64> {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let a = (state >> 11) as f64 / (1u64 << 53) as f64;
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let b = (state >> 11) as f64 / (1u64 << 53) as f64;
            C64::new(a - 0.5, b - 0.5)
        })
        .collect()
}

/// Spectral-norm estimate of a Hermitian operator by power iteration.
pub fn estimate_norm(op: &dyn LinearOperator, iterations: usize) -> f64 {
    let n = op.dim();
    let mut x = probe_vector(n);
    let mut y = vec![C64::new(0.0, 0.0); n];
    let mut est = 0.0;
    let nrm = crate::linalg::norm2(&x);
    x.iter_mut().for_each(|v| *v /= nrm);
    for _ in 0..iterations {
        op.apply(&x, &mut y);
        est = crate::linalg::norm2(&y);
        if est == 0.0 {
            return 0.0;
        }
        for i in 0..n {
            x[i] = y[i] / est;
        }
    }
    est
}

/// Assembles `K̂` for `system` on `grid` at `time`.
pub fn build_kvn_operator(
    grid: &PhaseSpaceGrid,
    system: &DynamicalSystem,
    w: &PhaseGenerator,
    scheme: Scheme,
    time: f64,
) -> Result<KvNOperator> {
    if grid.dim() != system.dim() {
        return Err(KvnError::DimensionMismatch {
            expected: grid.dim(),
            found: system.dim(),
        });
    }
    w.validate(system)?;
    let velocities = sample_velocities(grid, system, time)?;
    let potential = sample_potential(grid, system, w, time)?;
    let d = grid.dim();

    let (repr, advection_parts, sparsity) = match scheme {
        Scheme::CentralFd2 | Scheme::CentralFd4 => {
            let parts: Vec<CsrMatrix> = (0..d)
                .map(|j| advection_block(grid, scheme, j, &velocities[j]))
                .collect();
            let mut total = if potential.iter().any(|&w| w != 0.0) {
                CsrMatrix::from_diagonal(&potential.iter().map(|&w| C64::new(w, 0.0)).collect::<Vec<_>>())
            } else {
                CsrMatrix::zeros(grid.len())
            };
            for p in &parts {
                total = total.add(p);
            }
            let s = total.max_row_nnz();
            (Repr::Sparse(total), parts, s)
        }
        Scheme::Spectral => {
            let mut planner = FftPlanner::new();
            let forward = (0..d).map(|j| planner.plan_fft_forward(grid.levels(j))).collect();
            let inverse = (0..d).map(|j| planner.plan_fft_inverse(grid.levels(j))).collect();
            let momenta = (0..d)
                .map(|j| grid.momentum_grid(j))
                .collect::<Result<Vec<_>>>()?;
            let s: usize = 1 + (0..d).map(|j| grid.levels(j) - 1).sum::<usize>();
            let spectral = SpectralApply {
                grid: grid.clone(),
                velocities: velocities
                    .into_iter()
                    .map(|v| if v.iter().all(|&c| c == 0.0) { None } else { Some(v) })
                    .collect(),
                potential: potential.clone(),
                momenta,
                forward,
                inverse,
            };
            (Repr::Spectral(Arc::new(spectral)), Vec::new(), s)
        }
    };

    let mut op = KvNOperator {
        grid: grid.clone(),
        scheme,
        time,
        kind: PartKind::Full,
        repr,
        advection_parts,
        potential,
        sparsity,
        norm_bound: 0.0,
    };
    op.norm_bound = estimate_norm(&op, NORM_POWER_ITERATIONS);
    Ok(op)
}

/// Captures everything needed to rebuild `K̂` at any time.
#[derive(Clone)]
pub struct OperatorBuilder {
    pub grid: PhaseSpaceGrid,
    pub system: DynamicalSystem,
    pub w: PhaseGenerator,
    pub scheme: Scheme,
}

impl OperatorBuilder {
    pub fn new(grid: PhaseSpaceGrid, system: DynamicalSystem, w: PhaseGenerator, scheme: Scheme) -> Self {
        Self {
            grid,
            system,
            w,
            scheme,
        }
    }

    pub fn build(&self, time: f64) -> Result<KvNOperator> {
        build_kvn_operator(&self.grid, &self.system, &self.w, self.scheme, time)
    }

    /// True when `K̂` must be rebuilt as time advances.
    pub fn is_time_dependent(&self) -> bool {
        let w_td = match &self.w {
            PhaseGenerator::Zero => false,
            PhaseGenerator::Lagrangian => self
                .system
                .canonical()
                .map(|c| c.time_dependent)
                .unwrap_or(false),
            PhaseGenerator::Custom(c) => c.time_dependent,
        };
        self.system.is_time_dependent() || w_td
    }
}

impl KvNOperator {
    pub fn grid(&self) -> &PhaseSpaceGrid {
        &self.grid
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn kind(&self) -> PartKind {
        self.kind
    }

    /// Maximum nonzeros per row.
    pub fn sparsity(&self) -> usize {
        self.sparsity
    }

    /// Power-iteration estimate of `‖K̂‖`.
    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    pub fn matrix(&self) -> Option<&CsrMatrix> {
        match &self.repr {
            Repr::Sparse(m) => Some(m),
            Repr::Spectral(_) => None,
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.repr, Repr::Sparse(_))
    }

    pub fn apply_vec(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); x.len()];
        self.apply(x, &mut y);
        y
    }

    /// Dense `N×N` matrix of the operator.
    pub fn to_dense(&self) -> nalgebra::DMatrix<C64> {
        match &self.repr {
            Repr::Sparse(m) => m.to_dense(),
            Repr::Spectral(_) => materialize(self),
        }
    }

    /// Zero operator on `grid`.
    pub fn zero(grid: &PhaseSpaceGrid) -> Self {
        KvNOperator {
            grid: grid.clone(),
            scheme: Scheme::CentralFd2,
            time: 0.0,
            kind: PartKind::Full,
            repr: Repr::Sparse(CsrMatrix::zeros(grid.len())),
            advection_parts: vec![CsrMatrix::zeros(grid.len()); grid.dim()],
            potential: vec![0.0; grid.len()],
            sparsity: 0,
            norm_bound: 0.0,
        }
    }

    fn from_part(&self, kind: PartKind, m: CsrMatrix) -> KvNOperator {
        let mut part = KvNOperator {
            grid: self.grid.clone(),
            scheme: self.scheme,
            time: self.time,
            kind,
            sparsity: m.max_row_nnz(),
            repr: Repr::Sparse(m),
            advection_parts: Vec::new(),
            potential: match kind {
                PartKind::Potential => self.potential.clone(),
                _ => vec![0.0; self.grid.len()],
            },
            norm_bound: 0.0,
        };
        part.norm_bound = estimate_norm(&part, NORM_POWER_ITERATIONS);
        part
    }
}

/// `max |K − K†|`; central schemes compare stored entries, the spectral
/// scheme is materialized on basis vectors.
pub fn hermiticity_defect(op: &KvNOperator) -> f64 {
    match &op.repr {
        Repr::Sparse(m) => m.hermiticity_defect(),
        Repr::Spectral(_) => {
            let m = materialize(op);
            let n = m.nrows();
            let mut worst: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
                }
            }
            worst
        }
    }
}

/// Splits a central-scheme operator into one advection part per axis plus
/// the diagonal `Ŵ` part when `W ≢ 0`.
pub fn trotter_split(op: &KvNOperator) -> Result<Vec<KvNOperator>> {
    if !op.is_sparse() {
        return Err(KvnError::UnsupportedScheme(
            "spectral operators cannot be split into sparse parts".into(),
        ));
    }
    if op.kind != PartKind::Full {
        return Err(KvnError::InvalidParameter("operator is already a split part".into()));
    }
    let mut parts: Vec<KvNOperator> = op
        .advection_parts
        .iter()
        .enumerate()
        .map(|(j, m)| op.from_part(PartKind::Advection(j), m.clone()))
        .collect();
    if op.potential.iter().any(|&w| w != 0.0) {
        let diag: Vec<C64> = op.potential.iter().map(|&w| C64::new(w, 0.0)).collect();
        parts.push(op.from_part(PartKind::Potential, CsrMatrix::from_diagonal(&diag)));
    }
    Ok(parts)
}

/// `max |(Σ parts) − K|` over stored entries.
pub fn reassembly_defect(op: &KvNOperator, parts: &[KvNOperator]) -> Result<f64> {
    let full = op
        .matrix()
        .ok_or_else(|| KvnError::UnsupportedScheme("spectral".into()))?;
    let mut sum = CsrMatrix::zeros(full.n());
    for p in parts {
        let m = p
            .matrix()
            .ok_or_else(|| KvnError::UnsupportedScheme("spectral".into()))?;
        sum = sum.add(m);
    }
    Ok(sum.max_abs_diff(full))
}

/// Max-entry norm of the commutator `[A, B]`.
pub fn commutator_norm(a: &KvNOperator, b: &KvNOperator) -> Result<f64> {
    let (ma, mb) = match (a.matrix(), b.matrix()) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(KvnError::UnsupportedScheme("commutator requires sparse parts".into())),
    };
    Ok(ma.matmul(mb).max_abs_diff(&mb.matmul(ma)))
}

/// Inputs of the complexity comparison between KvN simulation and Monte Carlo.
#[derive(Debug, Clone, Copy)]
pub struct ResourceInputs {
    /// Number of particles `M`.
    pub particles: u64,
    /// Configuration dimensions per particle `d`; phase-space dimension is `D = 2dM`.
    pub dims_per_particle: u64,
    /// Bits per axis `ℓ`, so `L = 2^ℓ`.
    pub bits: u32,
    /// Sparsity of the interactions in the classical equations of motion `r`.
    pub interactions: u64,
    /// Target accuracy `ε ∈ (0, 1]`.
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceReport {
    /// Operator sparsity `s`.
    pub sparsity: u64,
    /// Qubits `n = ℓD`.
    pub qubits: u64,
    /// Phase-space dimension `D = 2dM`.
    pub phase_dimension: u64,
    /// `T = ‖K̂ t‖` estimate.
    pub time_steps: f64,
    /// `s·n·T` with the measured `T`.
    pub quantum_measured: f64,
    /// `2 s ℓ M d² L²`.
    pub quantum_scaling: u128,
    /// `K = ⌈1/ε²⌉`.
    pub trajectories: u64,
    /// `K·r·D·T`.
    pub classical_mc: f64,
}

/// `2 s ℓ M d² L²` with `L = 2^ℓ`.
pub fn quantum_scaling_cost(sparsity: u64, bits: u32, particles: u64, dims: u64) -> u128 {
    let l = 1u128 << bits;
    2 * sparsity as u128 * bits as u128 * particles as u128 * (dims as u128).pow(2) * l * l
}

/// `K = ⌈1/ε²⌉`, tolerant of representation error in `ε`.
pub fn trajectories_for(epsilon: f64) -> Result<u64> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(KvnError::InvalidParameter(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    let k = 1.0 / (epsilon * epsilon);
    let r = k.round();
    Ok(if (k - r).abs() <= 1e-9 * r { r } else { k.ceil() } as u64)
}

/// `K·r·D·T`.
pub fn classical_mc_cost(epsilon: f64, interactions: u64, phase_dimension: u64, time_steps: f64) -> Result<f64> {
    Ok(trajectories_for(epsilon)? as f64 * interactions as f64 * phase_dimension as f64 * time_steps)
}

/// Reports both complexity formulas for `op` evolved to time `t`.
pub fn resource_estimate(op: &KvNOperator, t: f64, inputs: ResourceInputs) -> Result<ResourceReport> {
    let ResourceInputs {
        particles,
        dims_per_particle,
        bits,
        interactions,
        epsilon,
    } = inputs;
    if particles == 0 || dims_per_particle == 0 || bits == 0 || interactions == 0 {
        return Err(KvnError::InvalidParameter("resource inputs must be positive".into()));
    }
    let phase_dimension = 2 * dims_per_particle * particles;
    let sparsity = op.sparsity() as u64;
    let qubits = bits as u64 * phase_dimension;
    let time_steps = op.norm_bound() * t.abs();
    Ok(ResourceReport {
        sparsity,
        qubits,
        phase_dimension,
        time_steps,
        quantum_measured: sparsity as f64 * qubits as f64 * time_steps,
        quantum_scaling: quantum_scaling_cost(sparsity, bits, particles, dims_per_particle),
        trajectories: trajectories_for(epsilon)?,
        classical_mc: classical_mc_cost(epsilon, interactions, phase_dimension, time_steps)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{exponential, free_particle, harmonic_oscillator, linear};
    use crate::grid::{build_grid, AxisSpec};

    fn grid1(levels: usize, extent: f64) -> PhaseSpaceGrid {
        build_grid(vec![AxisSpec::centered("x", levels, extent)], 1.0).unwrap()
    }

    fn grid2(levels: usize, extent: f64) -> PhaseSpaceGrid {
        build_grid(
            vec![
                AxisSpec::centered("q", levels, extent),
                AxisSpec::centered("p", levels, extent),
            ],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn null_field_gives_zero_matrix() {
        let g = grid1(16, 4.0);
        let zero = linear(vec![vec![0.0]]).unwrap();
        for scheme in [Scheme::CentralFd2, Scheme::CentralFd4] {
            let op = build_kvn_operator(&g, &zero, &PhaseGenerator::Zero, scheme, 0.0).unwrap();
            assert_eq!(op.matrix().unwrap().max_abs_entry(), 0.0);
            assert_eq!(op.norm_bound(), 0.0);
        }
        let op = build_kvn_operator(&g, &zero, &PhaseGenerator::Zero, Scheme::Spectral, 0.0).unwrap();
        assert!(op.to_dense().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn central_schemes_exactly_hermitian() {
        let g = grid2(16, 6.0);
        for scheme in [Scheme::CentralFd2, Scheme::CentralFd4] {
            let op = build_kvn_operator(&g, &harmonic_oscillator(1.3), &PhaseGenerator::Lagrangian, scheme, 0.0)
                .unwrap();
            assert_eq!(hermiticity_defect(&op), 0.0);
        }
        // Four levels with the fourth-order stencil wraps ±2 onto the same node.
        let g4 = grid1(4, 2.0);
        let op = build_kvn_operator(&g4, &exponential(0.7), &PhaseGenerator::Zero, Scheme::CentralFd4, 0.0).unwrap();
        assert_eq!(hermiticity_defect(&op), 0.0);
    }

    #[test]
    fn spectral_hermitian_to_rounding() {
        let g = grid2(8, 6.0);
        let op = build_kvn_operator(&g, &harmonic_oscillator(1.0), &PhaseGenerator::Zero, Scheme::Spectral, 0.0)
            .unwrap();
        assert!(hermiticity_defect(&op) <= 1e-12);
        let g1 = grid1(64, 6.0);
        let op = build_kvn_operator(&g1, &exponential(1.0), &PhaseGenerator::Zero, Scheme::Spectral, 0.0).unwrap();
        assert!(hermiticity_defect(&op) <= 1e-12);
    }

    #[test]
    fn plane_wave_symbol_for_linear_growth() {
        // K = −iħ(x∂ₓ + ½) on e^{ikx}: K ψ = (ħ k x − iħ/2) ψ.
        let l = 256;
        let ext = 20.0;
        let g = grid1(l, ext);
        let op = build_kvn_operator(&g, &exponential(1.0), &PhaseGenerator::Zero, Scheme::CentralFd4, 0.0).unwrap();
        let k = 2.0 * std::f64::consts::PI * 3.0 / ext;
        let psi: Vec<C64> = g.nodes(0).iter().map(|&x| C64::new(0.0, k * x).exp()).collect();
        let kpsi = op.apply_vec(&psi);
        let xs = g.nodes(0);
        for i in l / 4..3 * l / 4 {
            let expect = C64::new(k * xs[i], -0.5) * psi[i];
            assert!((kpsi[i] - expect).norm() < 1e-3 * (1.0 + xs[i].abs()), "i={i}");
        }
    }

    #[test]
    fn zero_diagonal_for_fd2_advection() {
        let g = grid2(12, 5.0);
        let op = build_kvn_operator(&g, &harmonic_oscillator(1.0), &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0)
            .unwrap();
        assert!(op.matrix().unwrap().diagonal_entries().iter().all(|d| d.norm() == 0.0));
    }

    #[test]
    fn split_reassembles_exactly() {
        let g = grid2(16, 6.0);
        let op = build_kvn_operator(&g, &harmonic_oscillator(1.0), &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0)
            .unwrap();
        let parts = trotter_split(&op).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(reassembly_defect(&op, &parts).unwrap(), 0.0);
        for p in &parts {
            assert_eq!(hermiticity_defect(p), 0.0);
        }
        assert!(commutator_norm(&parts[0], &parts[1]).unwrap() > 0.0);
    }

    #[test]
    fn split_with_potential() {
        let g = grid1(16, 4.0);
        let w = PhaseGenerator::custom("x^2", false, |x, _| x[0] * x[0]);
        let op = build_kvn_operator(&g, &exponential(0.5), &w, Scheme::CentralFd2, 0.0).unwrap();
        let parts = trotter_split(&op).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[1].kind(), PartKind::Potential);
        assert_eq!(reassembly_defect(&op, &parts).unwrap(), 0.0);

        let spectral = build_kvn_operator(&g, &exponential(0.5), &w, Scheme::Spectral, 0.0).unwrap();
        assert!(trotter_split(&spectral).is_err());
    }

    #[test]
    fn rejects_mismatch_and_noncanonical_lagrangian() {
        let g = grid2(8, 4.0);
        assert!(matches!(
            build_kvn_operator(&g, &exponential(1.0), &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0),
            Err(KvnError::DimensionMismatch { .. })
        ));
        let g1 = grid1(8, 4.0);
        assert!(matches!(
            build_kvn_operator(&g1, &exponential(1.0), &PhaseGenerator::Lagrangian, Scheme::CentralFd2, 0.0),
            Err(KvnError::NotCanonical)
        ));
    }

    #[test]
    fn free_particle_sparsity() {
        let g = grid2(8, 4.0);
        let op = build_kvn_operator(&g, &free_particle(1.0), &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0).unwrap();
        // Only the q stencil survives since v_p = 0.
        assert_eq!(op.sparsity(), 2);
        let fd4 = build_kvn_operator(&g, &free_particle(1.0), &PhaseGenerator::Zero, Scheme::CentralFd4, 0.0).unwrap();
        assert_eq!(fd4.sparsity(), 4);
    }

    #[test]
    fn resource_formulas() {
        assert_eq!(quantum_scaling_cost(2, 5, 1, 1), 20480);
        assert_eq!(trajectories_for(0.1).unwrap(), 100);
        assert_eq!(classical_mc_cost(0.1, 2, 2, 100.0).unwrap(), 40000.0);
        assert_eq!(trajectories_for(1.0).unwrap(), 1);
        assert!(trajectories_for(0.0).is_err());
    }

    #[test]
    fn norm_estimate_bounds_spectrum() {
        let g = grid1(32, 6.0);
        let op = build_kvn_operator(&g, &exponential(1.0), &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0).unwrap();
        let eig = crate::linalg::hermitian_eigen(op.to_dense()).unwrap();
        let max = eig.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(op.norm_bound() <= max * (1.0 + 1e-12));
        assert!(op.norm_bound() >= 0.5 * max);
    }
}
