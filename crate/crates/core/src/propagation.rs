//! Time evolution of KvN wavefunctions: a dense eigendecomposition oracle,
//! Cayley (Crank-Nicolson) stepping, and Trotter products of split parts.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

use crate::dynamics::GridDensity;
use crate::error::{KvnError, Result};
use crate::grid::PhaseSpaceGrid;
use crate::linalg::{bicgstab, hermitian_eigen, HermitianEigen, LinearOperator, SolveStats};
use crate::operator::{KvNOperator, OperatorBuilder};

/// Largest state space accepted by the dense oracle.
pub const MAX_EXACT_N: usize = 4096;
/// Relative residual targeted by each Cayley solve.
pub const CAYLEY_TOLERANCE: f64 = 1e-14;
/// Iteration cap for each Cayley solve.
pub const CAYLEY_MAX_ITER: usize = 2000;

/// Complex amplitude on grid nodes with `|ψ|²` the phase-space density.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction {
    grid: PhaseSpaceGrid,
    pub amplitudes: Vec<C64>,
    pub time: f64,
}

impl WaveFunction {
    pub fn new(grid: PhaseSpaceGrid, amplitudes: Vec<C64>, time: f64) -> Result<Self> {
        if amplitudes.len() != grid.len() {
            return Err(KvnError::DimensionMismatch {
                expected: grid.len(),
                found: amplitudes.len(),
            });
        }
        if amplitudes.iter().any(|a| !(a.re.is_finite() && a.im.is_finite())) {
            return Err(KvnError::NonFinite("wavefunction amplitude".into()));
        }
        Ok(Self {
            grid,
            amplitudes,
            time,
        })
    }

    pub fn from_fn(grid: PhaseSpaceGrid, f: impl Fn(&[f64]) -> C64) -> Result<Self> {
        let amps = grid.points().iter().map(|x| f(x)).collect();
        Self::new(grid, amps, 0.0)
    }

    /// `√f` with zero phase.
    pub fn from_density(density: &GridDensity) -> Result<Self> {
        let amps = density.values.iter().map(|v| C64::new(v.sqrt(), 0.0)).collect();
        Self::new(density.grid.clone(), amps, 0.0)
    }

    pub fn grid(&self) -> &PhaseSpaceGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    /// `Σ|ψ|² ΠΔx`.
    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Rescales to unit norm and returns the previous norm.
    pub fn normalize(&mut self) -> Result<f64> {
        let n = self.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(KvnError::InvalidParameter("cannot normalize a zero wavefunction".into()));
        }
        let s = 1.0 / n;
        self.amplitudes.iter_mut().for_each(|a| *a *= s);
        Ok(n)
    }

    /// `|ψ|²` on the grid.
    pub fn density(&self) -> GridDensity {
        GridDensity {
            grid: self.grid.clone(),
            values: self.amplitudes.iter().map(|a| a.norm_sqr()).collect(),
        }
    }

    /// `max |ψ − χ|` over nodes.
    pub fn max_abs_diff(&self, other: &WaveFunction) -> f64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationScheme {
    ExactEigen,
    Cayley,
    Trotter1,
    Trotter2,
}

impl PropagationScheme {
    pub fn name(self) -> &'static str {
        match self {
            PropagationScheme::ExactEigen => "exact_eigen",
            PropagationScheme::Cayley => "cayley",
            PropagationScheme::Trotter1 => "trotter1",
            PropagationScheme::Trotter2 => "trotter2",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropagationRecord {
    pub scheme: PropagationScheme,
    pub dt: f64,
    pub steps: usize,
    /// `|‖ψ_{n+1}‖ − ‖ψ_n‖|` for each step.
    pub norm_drift: Vec<f64>,
    pub wall_time: f64,
    /// Linear-solver iterations per step (summed over sub-steps).
    pub solver_iterations: Vec<usize>,
    /// Worst relative residual of any linear solve.
    pub max_residual: f64,
}

impl PropagationRecord {
    fn new(scheme: PropagationScheme, dt: f64) -> Self {
        Self {
            scheme,
            dt,
            steps: 0,
            norm_drift: Vec::new(),
            wall_time: 0.0,
            solver_iterations: Vec::new(),
            max_residual: 0.0,
        }
    }

    /// `|‖ψ_end‖ − ‖ψ_0‖|` bound by the summed per-step drift.
    pub fn total_drift(&self) -> f64 {
        self.norm_drift.iter().sum()
    }
}

/// Largest per-step norm change.
pub fn unitarity_defect(record: &PropagationRecord) -> f64 {
    record.norm_drift.iter().copied().fold(0.0, f64::max)
}

/// Step size with `dt·‖K̂‖/ħ = 0.5`, or `span` when `K̂ = 0`.
pub fn default_dt(op: &KvNOperator, span: f64) -> f64 {
    let nb = op.norm_bound();
    if nb > 0.0 {
        (0.5 * op.grid().hbar() / nb).min(span.abs().max(f64::MIN_POSITIVE))
    } else {
        span.abs()
    }
}

fn check_grid(op: &KvNOperator, psi: &WaveFunction) -> Result<()> {
    if op.grid() != psi.grid() {
        return Err(KvnError::DimensionMismatch {
            expected: op.grid().len(),
            found: psi.len(),
        });
    }
    Ok(())
}

/// Dense eigendecomposition of `K̂`, reusable for many evolution times.
#[derive(Debug, Clone)]
pub struct ExactPropagator {
    grid: PhaseSpaceGrid,
    hbar: f64,
    eigen: HermitianEigen,
}

impl ExactPropagator {
    pub fn new(op: &KvNOperator) -> Result<Self> {
        let n = op.grid().len();
        if n > MAX_EXACT_N {
            return Err(KvnError::TooLarge { n, limit: MAX_EXACT_N });
        }
        Ok(Self {
            grid: op.grid().clone(),
            hbar: op.grid().hbar(),
            eigen: hermitian_eigen(op.to_dense())?,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigen.values
    }

    /// `ψ(t₀ + t) = V e^{−iΛt/ħ} V† ψ(t₀)`.
    pub fn evolve(&self, psi: &WaveFunction, t: f64) -> Result<WaveFunction> {
        if psi.grid() != &self.grid {
            return Err(KvnError::DimensionMismatch {
                expected: self.grid.len(),
                found: psi.len(),
            });
        }
        let s = t / self.hbar;
        let amps = self
            .eigen
            .apply_function(&psi.amplitudes, |l| C64::from_polar(1.0, -l * s));
        WaveFunction::new(self.grid.clone(), amps, psi.time + t)
    }
}

/// Evolves by `t_span` with the exact propagator of a time-independent `K̂`.
pub fn propagate_exact(
    op: &KvNOperator,
    psi: &WaveFunction,
    t_span: f64,
) -> Result<(WaveFunction, PropagationRecord)> {
    check_grid(op, psi)?;
    let start = Instant::now();
    let exact = ExactPropagator::new(op)?;
    let out = exact.evolve(psi, t_span)?;
    let mut rec = PropagationRecord::new(PropagationScheme::ExactEigen, t_span);
    rec.steps = 1;
    rec.norm_drift.push((out.norm() - psi.norm()).abs());
    rec.solver_iterations.push(0);
    rec.wall_time = start.elapsed().as_secs_f64();
    Ok((out, rec))
}

/// `I + αK̂`.
struct Shifted<'a> {
    k: &'a dyn LinearOperator,
    alpha: C64,
}

impl LinearOperator for Shifted<'_> {
    fn dim(&self) -> usize {
        self.k.dim()
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        self.k.apply(x, y);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = *xi + self.alpha * *yi;
        }
    }

    fn diagonal(&self) -> Option<Vec<C64>> {
        self.k
            .diagonal()
            .map(|d| d.into_iter().map(|v| C64::new(1.0, 0.0) + self.alpha * v).collect())
    }
}

/// One Cayley step `ψ ← (1 + iK̂dt/2ħ)⁻¹(1 − iK̂dt/2ħ)ψ` in place.
pub fn cayley_step(k: &dyn LinearOperator, hbar: f64, dt: f64, psi: &mut [C64]) -> Result<SolveStats> {
    let tau = C64::new(0.0, 0.5 * dt / hbar);
    let n = psi.len();
    let mut kpsi = vec![C64::new(0.0, 0.0); n];
    k.apply(psi, &mut kpsi);
    let rhs: Vec<C64> = psi.iter().zip(&kpsi).map(|(p, kp)| p - tau * kp).collect();
    // Second-order predictor as the initial guess.
    for i in 0..n {
        psi[i] = rhs[i] - tau * kpsi[i];
    }
    let a = Shifted { k, alpha: tau };
    bicgstab(&a, &rhs, psi, CAYLEY_TOLERANCE, CAYLEY_MAX_ITER)
}

fn l2(a: &[C64], cell: f64) -> f64 {
    (a.iter().map(|v| v.norm_sqr()).sum::<f64>() * cell).sqrt()
}

/// `steps` Cayley steps of size `dt` (negative `dt` runs backward).
pub fn propagate_cayley(
    op: &KvNOperator,
    psi: &WaveFunction,
    dt: f64,
    steps: usize,
) -> Result<(WaveFunction, PropagationRecord)> {
    check_grid(op, psi)?;
    if !(dt.is_finite() && dt != 0.0) {
        return Err(KvnError::InvalidParameter(format!("dt must be finite and nonzero, got {dt}")));
    }
    let start = Instant::now();
    let hbar = op.grid().hbar();
    let cell = op.grid().cell_volume();
    let mut rec = PropagationRecord::new(PropagationScheme::Cayley, dt);
    let mut amps = psi.amplitudes.clone();
    let mut prev = l2(&amps, cell);
    for _ in 0..steps {
        let stats = cayley_step(op, hbar, dt, &mut amps)?;
        let now = l2(&amps, cell);
        rec.norm_drift.push((now - prev).abs());
        rec.solver_iterations.push(stats.iterations);
        rec.max_residual = rec.max_residual.max(stats.relative_residual);
        prev = now;
    }
    rec.steps = steps;
    rec.wall_time = start.elapsed().as_secs_f64();
    let out = WaveFunction::new(psi.grid().clone(), amps, psi.time + dt * steps as f64)?;
    Ok((out, rec))
}

/// Cayley stepping with `K̂` rebuilt at each step's midpoint time.
pub fn propagate_cayley_time_dependent(
    builder: &OperatorBuilder,
    psi: &WaveFunction,
    dt: f64,
    steps: usize,
) -> Result<(WaveFunction, PropagationRecord)> {
    if !builder.is_time_dependent() {
        let op = builder.build(psi.time)?;
        return propagate_cayley(&op, psi, dt, steps);
    }
    if !(dt.is_finite() && dt != 0.0) {
        return Err(KvnError::InvalidParameter(format!("dt must be finite and nonzero, got {dt}")));
    }
    let start = Instant::now();
    let hbar = builder.grid.hbar();
    let cell = builder.grid.cell_volume();
    let mut rec = PropagationRecord::new(PropagationScheme::Cayley, dt);
    let mut amps = psi.amplitudes.clone();
    let mut prev = l2(&amps, cell);
    for s in 0..steps {
        let op = builder.build(psi.time + (s as f64 + 0.5) * dt)?;
        let stats = cayley_step(&op, hbar, dt, &mut amps)?;
        let now = l2(&amps, cell);
        rec.norm_drift.push((now - prev).abs());
        rec.solver_iterations.push(stats.iterations);
        rec.max_residual = rec.max_residual.max(stats.relative_residual);
        prev = now;
    }
    rec.steps = steps;
    rec.wall_time = start.elapsed().as_secs_f64();
    let out = WaveFunction::new(psi.grid().clone(), amps, psi.time + dt * steps as f64)?;
    Ok((out, rec))
}

/// How each split part is exponentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubStep {
    Cayley,
    /// Exact exponential of each connected block of the part's sparsity graph.
    Exact,
}

/// Largest connected block accepted for exact sub-steps.
pub const MAX_EXACT_BLOCK: usize = 1024;

/// `e^{−iK̂τ/ħ}` for a sparse part, stored block by block.
struct BlockExponential {
    blocks: Vec<(Vec<usize>, DMatrix<C64>)>,
}

impl BlockExponential {
    fn new(part: &KvNOperator, tau: f64) -> Result<Self> {
        let m = part
            .matrix()
            .ok_or_else(|| KvnError::UnsupportedScheme("exact sub-steps need a sparse part".into()))?;
        let n = m.n();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for i in 0..n {
            for (j, _) in m.row(i) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..n {
            let r = find(&mut parent, i);
            members.entry(r).or_default().push(i);
        }
        let s = tau / part.grid().hbar();
        let mut blocks = Vec::with_capacity(members.len());
        for (_, idx) in members {
            let k = idx.len();
            if k > MAX_EXACT_BLOCK {
                return Err(KvnError::TooLarge {
                    n: k,
                    limit: MAX_EXACT_BLOCK,
                });
            }
            let mut h = DMatrix::<C64>::zeros(k, k);
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    h[(a, b)] = m.get(i, j);
                }
            }
            let u = if h.iter().all(|v| v.norm() == 0.0) {
                DMatrix::identity(k, k)
            } else if k == 1 {
                DMatrix::from_element(1, 1, C64::from_polar(1.0, -h[(0, 0)].re * s))
            } else {
                let e = hermitian_eigen(h)?;
                let phases = DVector::from_iterator(k, e.values.iter().map(|l| C64::from_polar(1.0, -l * s)));
                let scaled = DMatrix::from_fn(k, k, |r, c| e.vectors[(r, c)] * phases[c]);
                scaled * e.vectors.adjoint()
            };
            blocks.push((idx, u));
        }
        Ok(Self { blocks })
    }

    fn apply(&self, psi: &mut [C64]) {
        for (idx, u) in &self.blocks {
            if idx.len() == 1 {
                psi[idx[0]] *= u[(0, 0)];
                continue;
            }
            let x = DVector::from_iterator(idx.len(), idx.iter().map(|&i| psi[i]));
            let y = u * x;
            for (a, &i) in idx.iter().enumerate() {
                psi[i] = y[a];
            }
        }
    }
}

enum StepFactor<'a> {
    Exact(BlockExponential),
    Cayley(&'a KvNOperator, f64),
}

/// Trotter product of `parts`; order 1 applies `U_m ⋯ U_1`, order 2 the
/// symmetric Strang sequence.
pub fn propagate_trotter(
    parts: &[KvNOperator],
    psi: &WaveFunction,
    dt: f64,
    steps: usize,
    order: u8,
    substep: SubStep,
) -> Result<(WaveFunction, PropagationRecord)> {
    if parts.is_empty() {
        return Err(KvnError::InvalidParameter("no operator parts".into()));
    }
    for p in parts {
        check_grid(p, psi)?;
    }
    if !(dt.is_finite() && dt != 0.0) {
        return Err(KvnError::InvalidParameter(format!("dt must be finite and nonzero, got {dt}")));
    }
    let scheme = match order {
        1 => PropagationScheme::Trotter1,
        2 => PropagationScheme::Trotter2,
        _ => return Err(KvnError::InvalidParameter(format!("Trotter order must be 1 or 2, got {order}"))),
    };
    let start = Instant::now();
    let m = parts.len();
    // (part index, time fraction) in application order.
    let sequence: Vec<(usize, f64)> = if order == 1 || m == 1 {
        (0..m).map(|j| (j, dt)).collect()
    } else {
        let mut s: Vec<(usize, f64)> = (0..m - 1).map(|j| (j, 0.5 * dt)).collect();
        s.push((m - 1, dt));
        s.extend((0..m - 1).rev().map(|j| (j, 0.5 * dt)));
        s
    };
    let factors: Vec<StepFactor> = sequence
        .iter()
        .map(|&(j, tau)| match substep {
            SubStep::Exact => BlockExponential::new(&parts[j], tau).map(StepFactor::Exact),
            SubStep::Cayley => Ok(StepFactor::Cayley(&parts[j], tau)),
        })
        .collect::<Result<_>>()?;

    let hbar = psi.grid().hbar();
    let cell = psi.grid().cell_volume();
    let mut rec = PropagationRecord::new(scheme, dt);
    let mut amps = psi.amplitudes.clone();
    let mut prev = l2(&amps, cell);
    for _ in 0..steps {
        let mut iters = 0;
        for f in &factors {
            match f {
                StepFactor::Exact(b) => b.apply(&mut amps),
                StepFactor::Cayley(op, tau) => {
                    let st = cayley_step(*op, hbar, *tau, &mut amps)?;
                    iters += st.iterations;
                    rec.max_residual = rec.max_residual.max(st.relative_residual);
                }
            }
        }
        let now = l2(&amps, cell);
        rec.norm_drift.push((now - prev).abs());
        rec.solver_iterations.push(iters);
        prev = now;
    }
    rec.steps = steps;
    rec.wall_time = start.elapsed().as_secs_f64();
    let out = WaveFunction::new(psi.grid().clone(), amps, psi.time + dt * steps as f64)?;
    Ok((out, rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{exponential, harmonic_oscillator, linear};
    use crate::grid::{build_grid, AxisSpec};
    use crate::operator::{build_kvn_operator, trotter_split, PhaseGenerator, Scheme};

    fn blob(grid: &PhaseSpaceGrid, c: &[f64], s: f64) -> WaveFunction {
        let mut w = WaveFunction::from_fn(grid.clone(), |x| {
            let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            C64::new((-r2 / (4.0 * s * s)).exp(), 0.0)
        })
        .unwrap();
        w.normalize().unwrap();
        w
    }

    #[test]
    fn zero_operator_is_identity() {
        let g = build_grid(vec![AxisSpec::centered("x", 16, 4.0)], 1.0).unwrap();
        let op = build_kvn_operator(&g, &linear(vec![vec![0.0]]).unwrap(), &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0)
            .unwrap();
        let psi = blob(&g, &[0.3], 0.5);
        let (e, _) = propagate_exact(&op, &psi, 1.7).unwrap();
        assert!(e.max_abs_diff(&psi) < 1e-13);
        let (c, rec) = propagate_cayley(&op, &psi, 0.37, 5).unwrap();
        assert_eq!(c.amplitudes, psi.amplitudes);
        assert_eq!(unitarity_defect(&rec), 0.0);
    }

    #[test]
    fn too_large_for_exact() {
        let g = build_grid(
            vec![AxisSpec::centered("q", 128, 4.0), AxisSpec::centered("p", 64, 4.0)],
            1.0,
        )
        .unwrap();
        let op = build_kvn_operator(&g, &harmonic_oscillator(1.0), &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0)
            .unwrap();
        assert!(matches!(ExactPropagator::new(&op), Err(KvnError::TooLarge { .. })));
    }

    #[test]
    fn cayley_converges_to_exact_at_second_order() {
        let g = build_grid(vec![AxisSpec::centered("x", 64, 16.0)], 1.0).unwrap();
        let op = build_kvn_operator(&g, &exponential(1.0), &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0).unwrap();
        let psi = blob(&g, &[1.0], 1.0);
        let t = 0.5;
        let (exact, rec) = propagate_exact(&op, &psi, t).unwrap();
        assert!(unitarity_defect(&rec) <= 1e-10);
        let mut dts = Vec::new();
        let mut errs = Vec::new();
        for steps in [10usize, 20, 40, 80] {
            let dt = t / steps as f64;
            let (c, rec) = propagate_cayley(&op, &psi, dt, steps).unwrap();
            assert!(unitarity_defect(&rec) <= 1e-12);
            dts.push(dt);
            errs.push(c.max_abs_diff(&exact));
        }
        let slope = crate::stats::log_log_slope(&dts, &errs);
        assert!((slope - 2.0).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn time_reversal() {
        let g = build_grid(
            vec![AxisSpec::centered("q", 24, 8.0), AxisSpec::centered("p", 24, 8.0)],
            1.0,
        )
        .unwrap();
        let op = build_kvn_operator(&g, &harmonic_oscillator(1.0), &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0)
            .unwrap();
        let psi = blob(&g, &[1.0, 0.0], 0.8);
        let (fwd, _) = propagate_cayley(&op, &psi, 0.05, 40).unwrap();
        let (back, _) = propagate_cayley(&op, &fwd, -0.05, 40).unwrap();
        assert!(back.max_abs_diff(&psi) < 1e-11);
        assert!(back.time.abs() < 1e-15);
    }

    #[test]
    fn single_part_trotter_is_exact() {
        let g = build_grid(vec![AxisSpec::centered("x", 32, 10.0)], 1.0).unwrap();
        let op = build_kvn_operator(&g, &exponential(0.8), &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0).unwrap();
        let parts = trotter_split(&op).unwrap();
        assert_eq!(parts.len(), 1);
        let psi = blob(&g, &[0.5], 1.0);
        let (exact, _) = propagate_exact(&op, &psi, 0.6).unwrap();
        for order in [1, 2] {
            let (tr, rec) = propagate_trotter(&parts, &psi, 0.1, 6, order, SubStep::Exact).unwrap();
            assert!(tr.max_abs_diff(&exact) <= 1e-12);
            assert!(rec.total_drift() <= 6e-12);
        }
    }

    #[test]
    fn trotter_orders_on_oscillator() {
        let g = build_grid(
            vec![AxisSpec::centered("q", 16, 8.0), AxisSpec::centered("p", 16, 8.0)],
            1.0,
        )
        .unwrap();
        let op = build_kvn_operator(&g, &harmonic_oscillator(1.0), &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0)
            .unwrap();
        let parts = trotter_split(&op).unwrap();
        let psi = blob(&g, &[1.0, 0.0], 1.0);
        let t = 1.0;
        let exact = ExactPropagator::new(&op).unwrap().evolve(&psi, t).unwrap();
        for (order, expect) in [(1u8, 1.0), (2, 2.0)] {
            let mut dts = Vec::new();
            let mut errs = Vec::new();
            for steps in [20usize, 40, 80, 160] {
                let dt = t / steps as f64;
                let (tr, _) = propagate_trotter(&parts, &psi, dt, steps, order, SubStep::Exact).unwrap();
                dts.push(dt);
                errs.push(tr.max_abs_diff(&exact));
            }
            let slope = crate::stats::log_log_slope(&dts, &errs);
            assert!((slope - expect).abs() < 0.2, "order {order}: slope {slope}");
        }
    }

    #[test]
    fn trotter_cayley_substeps_unitary() {
        let g = build_grid(
            vec![AxisSpec::centered("q", 12, 8.0), AxisSpec::centered("p", 12, 8.0)],
            1.0,
        )
        .unwrap();
        let op = build_kvn_operator(&g, &harmonic_oscillator(1.0), &PhaseGenerator::Lagrangian, Scheme::CentralFd2, 0.0)
            .unwrap();
        let parts = trotter_split(&op).unwrap();
        assert_eq!(parts.len(), 3);
        let psi = blob(&g, &[1.0, 0.0], 1.0);
        let (_, rec) = propagate_trotter(&parts, &psi, 0.05, 20, 2, SubStep::Cayley).unwrap();
        assert!(rec.total_drift() <= 20.0 * 1e-12);
    }

    #[test]
    fn exact_preserves_kvn_energy() {
        let g = build_grid(
            vec![AxisSpec::centered("q", 12, 8.0), AxisSpec::centered("p", 12, 8.0)],
            1.0,
        )
        .unwrap();
        let op = build_kvn_operator(&g, &harmonic_oscillator(1.0), &PhaseGenerator::Zero, Scheme::CentralFd2, 0.0)
            .unwrap();
        let psi = blob(&g, &[1.0, 0.5], 1.0);
        let energy = |w: &WaveFunction| -> f64 {
            let k = op.apply_vec(&w.amplitudes);
            crate::linalg::dot(&w.amplitudes, &k).re * g.cell_volume()
        };
        let ex = ExactPropagator::new(&op).unwrap();
        let e0 = energy(&psi);
        for t in [0.5, 1.0, 3.0] {
            assert!((energy(&ex.evolve(&psi, t).unwrap()) - e0).abs() < 1e-10);
        }
    }
}
