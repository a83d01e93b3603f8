//! Classical dynamical systems `ẋ = v(x, t)`, characteristics, and the
//! backward-characteristics Liouville oracle.
//!
//! Characteristics are integrated with fixed-step classical RK4 together
//! with the variational equation `d(∂x/∂x₀)/dt = (∇v)·(∂x/∂x₀)`, so the
//! Jacobian `J₀ = det(∂x₀/∂x)` is a smooth function of time.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{KvnError, Result};
use crate::expr::Expr;
use crate::grid::PhaseSpaceGrid;
use crate::operator::PhaseGenerator;
use crate::semiclassical;

/// `v(x, t)` written into the output slice.
pub type VelocityFn = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;
/// Scalar field over phase space.
pub type ScalarFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
/// Row-major `d×d` matrix `J[j][k] = ∂v^j/∂x^k` written into the output slice.
pub type JacobianFn = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;
/// `H(q, p, t)`.
pub type HamiltonianFn = Arc<dyn Fn(&[f64], &[f64], f64) -> f64 + Send + Sync>;
/// Gradient of `H` with respect to `q` or `p`, written into the output slice.
pub type HamiltonianGradFn = Arc<dyn Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync>;

/// Relative finite-difference step used when an analytic derivative is missing.
pub const FD_RELATIVE_STEP: f64 = 1e-5;

/// Canonical Hamiltonian structure `q̇ = ∂H/∂p`, `ṗ = −∂H/∂q`.
#[derive(Clone)]
pub struct CanonicalStructure {
    /// Axis index of each configuration coordinate.
    pub q_axes: Vec<usize>,
    /// Axis index of each conjugate momentum, paired with `q_axes`.
    pub p_axes: Vec<usize>,
    hamiltonian: HamiltonianFn,
    grad_q: HamiltonianGradFn,
    grad_p: HamiltonianGradFn,
    /// `∂H/∂t ≠ 0`.
    pub time_dependent: bool,
    /// Per pair: `∂H/∂q_j ≡ 0`.
    pub cyclic: Vec<bool>,
}

impl fmt::Debug for CanonicalStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CanonicalStructure")
            .field("q_axes", &self.q_axes)
            .field("p_axes", &self.p_axes)
            .field("time_dependent", &self.time_dependent)
            .field("cyclic", &self.cyclic)
            .finish()
    }
}

impl CanonicalStructure {
    pub fn new(
        q_axes: Vec<usize>,
        p_axes: Vec<usize>,
        hamiltonian: HamiltonianFn,
        grad_q: HamiltonianGradFn,
        grad_p: HamiltonianGradFn,
    ) -> Self {
        let n = q_axes.len();
        Self {
            q_axes,
            p_axes,
            hamiltonian,
            grad_q,
            grad_p,
            time_dependent: false,
            cyclic: vec![false; n],
        }
    }

    pub fn with_cyclic(mut self, cyclic: Vec<bool>) -> Self {
        self.cyclic = cyclic;
        self
    }

    pub fn with_time_dependence(mut self, time_dependent: bool) -> Self {
        self.time_dependent = time_dependent;
        self
    }

    pub fn pairs(&self) -> usize {
        self.q_axes.len()
    }

    /// Splits a phase-space point into `(q, p)`.
    pub fn split(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            self.q_axes.iter().map(|&j| x[j]).collect(),
            self.p_axes.iter().map(|&j| x[j]).collect(),
        )
    }

    pub fn hamiltonian(&self, x: &[f64], t: f64) -> f64 {
        let (q, p) = self.split(x);
        (self.hamiltonian)(&q, &p, t)
    }

    pub fn grad_q(&self, x: &[f64], t: f64) -> Vec<f64> {
        let (q, p) = self.split(x);
        let mut out = vec![0.0; q.len()];
        (self.grad_q)(&q, &p, t, &mut out);
        out
    }

    pub fn grad_p(&self, x: &[f64], t: f64) -> Vec<f64> {
        let (q, p) = self.split(x);
        let mut out = vec![0.0; q.len()];
        (self.grad_p)(&q, &p, t, &mut out);
        out
    }

    /// Classical Lagrangian `L = p·∂H/∂p − H`.
    pub fn lagrangian(&self, x: &[f64], t: f64) -> f64 {
        let (q, p) = self.split(x);
        let mut gp = vec![0.0; q.len()];
        (self.grad_p)(&q, &p, t, &mut gp);
        let h = (self.hamiltonian)(&q, &p, t);
        p.iter().zip(&gp).map(|(a, b)| a * b).sum::<f64>() - h
    }

    /// Hamilton's equations evaluated at `x`, written on the full axis layout.
    pub fn induced_velocity(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let gq = self.grad_q(x, t);
        let gp = self.grad_p(x, t);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, (&qa, &pa)) in self.q_axes.iter().zip(&self.p_axes).enumerate() {
            out[qa] = gp[i];
            out[pa] = -gq[i];
        }
    }
}

/// A vector field together with its divergence and velocity Jacobian.
#[derive(Clone)]
pub struct DynamicalSystem {
    name: String,
    dim: usize,
    velocity: VelocityFn,
    divergence: Option<ScalarFn>,
    jacobian: Option<JacobianFn>,
    divergence_free: bool,
    time_dependent: bool,
    canonical: Option<CanonicalStructure>,
    fd_steps: Vec<f64>,
}

impl fmt::Debug for DynamicalSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicalSystem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("analytic_divergence", &self.divergence.is_some())
            .field("analytic_jacobian", &self.jacobian.is_some())
            .field("divergence_free", &self.divergence_free)
            .field("time_dependent", &self.time_dependent)
            .field("canonical", &self.canonical)
            .finish()
    }
}

impl DynamicalSystem {
    pub fn new(name: impl Into<String>, dim: usize, velocity: VelocityFn) -> Self {
        Self {
            name: name.into(),
            dim,
            velocity,
            divergence: None,
            jacobian: None,
            divergence_free: false,
            time_dependent: false,
            canonical: None,
            fd_steps: vec![FD_RELATIVE_STEP; dim],
        }
    }

    pub fn with_divergence(mut self, f: ScalarFn) -> Self {
        self.divergence = Some(f);
        self
    }

    pub fn with_jacobian(mut self, f: JacobianFn) -> Self {
        self.jacobian = Some(f);
        self
    }

    pub fn with_divergence_free(mut self, flag: bool) -> Self {
        self.divergence_free = flag;
        self
    }

    pub fn with_time_dependence(mut self, flag: bool) -> Self {
        self.time_dependent = flag;
        self
    }

    pub fn with_canonical(mut self, c: CanonicalStructure) -> Self {
        self.canonical = Some(c);
        self
    }

    /// Scales finite-difference steps to `1e-5 × extent` per axis.
    pub fn with_length_scales(mut self, extents: &[f64]) -> Self {
        assert_eq!(extents.len(), self.dim);
        self.fd_steps = extents.iter().map(|e| FD_RELATIVE_STEP * e).collect();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_divergence_free(&self) -> bool {
        self.divergence_free
    }

    pub fn is_time_dependent(&self) -> bool {
        self.time_dependent
    }

    pub fn canonical(&self) -> Option<&CanonicalStructure> {
        self.canonical.as_ref()
    }

    pub fn has_analytic_divergence(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    pub fn fd_steps(&self) -> &[f64] {
        &self.fd_steps
    }

    pub fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.velocity)(x, t, out)
    }

    pub fn velocity_vec(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.velocity(x, t, &mut v);
        v
    }

    /// Analytic divergence, or the trace of the (possibly finite-difference) Jacobian.
    pub fn divergence(&self, x: &[f64], t: f64) -> f64 {
        if self.divergence_free {
            return 0.0;
        }
        match &self.divergence {
            Some(f) => f(x, t),
            None => {
                let mut jac = vec![0.0; self.dim * self.dim];
                self.jacobian(x, t, &mut jac);
                (0..self.dim).map(|j| jac[j * self.dim + j]).sum()
            }
        }
    }

    /// Velocity Jacobian, falling back to central differences.
    pub fn jacobian(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match &self.jacobian {
            Some(f) => f(x, t, out),
            None => self.fd_jacobian(x, t, out),
        }
    }

    pub fn jacobian_vec(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut jac = vec![0.0; self.dim * self.dim];
        self.jacobian(x, t, &mut jac);
        jac
    }

    fn fd_jacobian(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let d = self.dim;
        let mut xp = x.to_vec();
        let mut vp = vec![0.0; d];
        let mut vm = vec![0.0; d];
        for k in 0..d {
            let h = self.fd_steps[k];
            xp[k] = x[k] + h;
            self.velocity(&xp, t, &mut vp);
            xp[k] = x[k] - h;
            self.velocity(&xp, t, &mut vm);
            xp[k] = x[k];
            for j in 0..d {
                out[j * d + k] = (vp[j] - vm[j]) / (2.0 * h);
            }
        }
    }

    /// Builds a field from one expression per component over
    /// `x1..xd`, the optional axis `labels`, and `t`.
    pub fn from_expressions(components: &[&str], labels: &[&str]) -> Result<Self> {
        let d = components.len();
        if d == 0 {
            return Err(KvnError::InvalidParameter("at least one velocity component is required".into()));
        }
        if !labels.is_empty() && labels.len() != d {
            return Err(KvnError::DimensionMismatch {
                expected: d,
                found: labels.len(),
            });
        }
        let numbered: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        let mut names: Vec<&str> = numbered.iter().map(String::as_str).collect();
        names.extend(labels.iter().copied());
        names.push("t");
        let exprs = components
            .iter()
            .map(|c| Expr::compile(c, &names))
            .collect::<Result<Vec<_>>>()?;
        let time_dependent = exprs.iter().any(|e| e.depends_on("t"));
        let n_alias = labels.len();
        let exprs = Arc::new(exprs);
        let velocity: VelocityFn = Arc::new(move |x, t, out| {
            let mut vals = Vec::with_capacity(2 * x.len() + 1);
            vals.extend_from_slice(x);
            if n_alias > 0 {
                vals.extend_from_slice(x);
            }
            vals.push(t);
            for (o, e) in out.iter_mut().zip(exprs.iter()) {
                *o = e.eval(&vals);
            }
        });
        Ok(DynamicalSystem::new("expression", d, velocity).with_time_dependence(time_dependent))
    }
}

/// Parameters for [`make_builtin_system`] when selecting a system by name.
#[derive(Debug, Clone, Default)]
pub struct SystemParams {
    pub scalars: BTreeMap<String, f64>,
    pub matrix: Option<Vec<Vec<f64>>>,
    pub expression: Option<String>,
}

impl SystemParams {
    fn get(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.scalars.get(key).copied().unwrap_or(default);
        if !v.is_finite() {
            return Err(KvnError::InvalidParameter(format!("`{key}` must be finite")));
        }
        Ok(v)
    }
}

/// Names accepted by [`make_builtin_system`].
pub const BUILTIN_NAMES: &[&str] = &[
    "scalar_autonomous",
    "exponential",
    "linear",
    "harmonic_oscillator",
    "pendulum",
    "duffing",
    "action_angle",
    "free_particle",
];

/// Selects a builtin system by name.
pub fn make_builtin_system(name: &str, params: &SystemParams) -> Result<DynamicalSystem> {
    let allowed: &[&str] = match name {
        "scalar_autonomous" => &[],
        "exponential" => &["gamma"],
        "linear" => &[],
        "harmonic_oscillator" => &["omega"],
        "pendulum" => &["omega"],
        "duffing" => &["alpha", "beta", "delta"],
        "action_angle" => &["omega", "anharmonicity"],
        "free_particle" => &["mass"],
        other => return Err(KvnError::UnknownSystem(other.to_string())),
    };
    if let Some(k) = params.scalars.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(KvnError::InvalidParameter(format!(
            "`{k}` is not a parameter of `{name}`"
        )));
    }
    match name {
        "scalar_autonomous" => {
            let src = params.expression.as_deref().ok_or_else(|| {
                KvnError::InvalidParameter("scalar_autonomous requires an expression for v(x)".into())
            })?;
            scalar_autonomous(src)
        }
        "exponential" => Ok(exponential(params.get("gamma", 1.0)?)),
        "linear" => {
            let a = params.matrix.as_ref().ok_or_else(|| {
                KvnError::InvalidParameter("linear requires a matrix".into())
            })?;
            linear(a.clone())
        }
        "harmonic_oscillator" => Ok(harmonic_oscillator(params.get("omega", 1.0)?)),
        "pendulum" => Ok(pendulum(params.get("omega", 1.0)?)),
        "duffing" => Ok(duffing(
            params.get("alpha", 1.0)?,
            params.get("beta", 1.0)?,
            params.get("delta", 0.0)?,
        )),
        "action_angle" => Ok(action_angle(
            params.get("omega", 1.0)?,
            params.get("anharmonicity", 0.0)?,
        )),
        "free_particle" => {
            let m = params.get("mass", 1.0)?;
            if m <= 0.0 {
                return Err(KvnError::InvalidParameter("mass must be positive".into()));
            }
            Ok(free_particle(m))
        }
        _ => unreachable!(),
    }
}

/// `ẋ = v(x)` in one dimension, `v` given as an expression in `x` (or `x1`).
pub fn scalar_autonomous(velocity: &str) -> Result<DynamicalSystem> {
    let e = Expr::compile(velocity, &["x", "x1"])?;
    if e.depends_on("t") {
        return Err(KvnError::InvalidParameter("scalar_autonomous field must not depend on t".into()));
    }
    let e = Arc::new(e);
    let f: VelocityFn = Arc::new(move |x, _t, out| out[0] = e.eval(&[x[0], x[0]]));
    Ok(DynamicalSystem::new("scalar_autonomous", 1, f))
}

/// `ẋ = γx`.
pub fn exponential(gamma: f64) -> DynamicalSystem {
    DynamicalSystem::new(
        "exponential",
        1,
        Arc::new(move |x, _t, out| out[0] = gamma * x[0]),
    )
    .with_divergence(Arc::new(move |_x, _t| gamma))
    .with_jacobian(Arc::new(move |_x, _t, out| out[0] = gamma))
    .with_divergence_free(gamma == 0.0)
}

/// `ẋ = A·x` for a square matrix `A`.
pub fn linear(a: Vec<Vec<f64>>) -> Result<DynamicalSystem> {
    let d = a.len();
    if d == 0 {
        return Err(KvnError::InvalidParameter("linear matrix must be non-empty".into()));
    }
    if let Some(row) = a.iter().find(|r| r.len() != d) {
        return Err(KvnError::DimensionMismatch {
            expected: d,
            found: row.len(),
        });
    }
    if a.iter().flatten().any(|v| !v.is_finite()) {
        return Err(KvnError::InvalidParameter("linear matrix entries must be finite".into()));
    }
    let flat: Arc<[f64]> = a.iter().flatten().copied().collect();
    let trace: f64 = (0..d).map(|j| a[j][j]).sum();
    let m = flat.clone();
    Ok(DynamicalSystem::new(
        "linear",
        d,
        Arc::new(move |x, _t, out| {
            for j in 0..d {
                out[j] = (0..d).map(|k| m[j * d + k] * x[k]).sum();
            }
        }),
    )
    .with_divergence(Arc::new(move |_x, _t| trace))
    .with_jacobian(Arc::new(move |_x, _t, out| out.copy_from_slice(&flat)))
    .with_divergence_free(trace == 0.0))
}

fn one_pair_canonical(
    h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    dh_dq: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    dh_dp: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> CanonicalStructure {
    CanonicalStructure::new(
        vec![0],
        vec![1],
        Arc::new(move |q, p, _t| h(q[0], p[0])),
        Arc::new(move |q, p, _t, out| out[0] = dh_dq(q[0], p[0])),
        Arc::new(move |q, p, _t, out| out[0] = dh_dp(q[0], p[0])),
    )
}

/// `H = ω₀(q² + p²)/2` on axes `(q, p)`.
pub fn harmonic_oscillator(omega: f64) -> DynamicalSystem {
    DynamicalSystem::new(
        "harmonic_oscillator",
        2,
        Arc::new(move |x, _t, out| {
            out[0] = omega * x[1];
            out[1] = -omega * x[0];
        }),
    )
    .with_divergence(Arc::new(|_x, _t| 0.0))
    .with_jacobian(Arc::new(move |_x, _t, out| {
        out.copy_from_slice(&[0.0, omega, -omega, 0.0]);
    }))
    .with_divergence_free(true)
    .with_canonical(one_pair_canonical(
        move |q, p| 0.5 * omega * (q * q + p * p),
        move |q, _p| omega * q,
        move |_q, p| omega * p,
    ))
}

/// `H = p²/2 − ω² cos q`.
pub fn pendulum(omega: f64) -> DynamicalSystem {
    let w2 = omega * omega;
    DynamicalSystem::new(
        "pendulum",
        2,
        Arc::new(move |x, _t, out| {
            out[0] = x[1];
            out[1] = -w2 * x[0].sin();
        }),
    )
    .with_divergence(Arc::new(|_x, _t| 0.0))
    .with_jacobian(Arc::new(move |x, _t, out| {
        out.copy_from_slice(&[0.0, 1.0, -w2 * x[0].cos(), 0.0]);
    }))
    .with_divergence_free(true)
    .with_canonical(one_pair_canonical(
        move |q, p| 0.5 * p * p - w2 * q.cos(),
        move |q, _p| w2 * q.sin(),
        move |_q, p| p,
    ))
}

/// `q̈ + δq̇ + αq + βq³ = 0`; canonical with `H = p²/2 + αq²/2 + βq⁴/4` when `δ = 0`.
pub fn duffing(alpha: f64, beta: f64, delta: f64) -> DynamicalSystem {
    let sys = DynamicalSystem::new(
        "duffing",
        2,
        Arc::new(move |x, _t, out| {
            out[0] = x[1];
            out[1] = -delta * x[1] - alpha * x[0] - beta * x[0].powi(3);
        }),
    )
    .with_divergence(Arc::new(move |_x, _t| -delta))
    .with_jacobian(Arc::new(move |x, _t, out| {
        out.copy_from_slice(&[0.0, 1.0, -alpha - 3.0 * beta * x[0] * x[0], -delta]);
    }))
    .with_divergence_free(delta == 0.0);
    if delta == 0.0 {
        sys.with_canonical(one_pair_canonical(
            move |q, p| 0.5 * p * p + 0.5 * alpha * q * q + 0.25 * beta * q.powi(4),
            move |q, _p| alpha * q + beta * q.powi(3),
            move |_q, p| p,
        ))
    } else {
        sys
    }
}

/// Action-angle system on axes `(θ, J)` with `H₀(J) = ωJ + κJ²/2`.
pub fn action_angle(omega: f64, anharmonicity: f64) -> DynamicalSystem {
    let k = anharmonicity;
    DynamicalSystem::new(
        "action_angle",
        2,
        Arc::new(move |x, _t, out| {
            out[0] = omega + k * x[1];
            out[1] = 0.0;
        }),
    )
    .with_divergence(Arc::new(|_x, _t| 0.0))
    .with_jacobian(Arc::new(move |_x, _t, out| out.copy_from_slice(&[0.0, k, 0.0, 0.0])))
    .with_divergence_free(true)
    .with_canonical(
        one_pair_canonical(
            move |_q, p| omega * p + 0.5 * k * p * p,
            |_q, _p| 0.0,
            move |_q, p| omega + k * p,
        )
        .with_cyclic(vec![true]),
    )
}

/// `H = p²/2m` on axes `(q, p)`.
pub fn free_particle(mass: f64) -> DynamicalSystem {
    DynamicalSystem::new(
        "free_particle",
        2,
        Arc::new(move |x, _t, out| {
            out[0] = x[1] / mass;
            out[1] = 0.0;
        }),
    )
    .with_divergence(Arc::new(|_x, _t| 0.0))
    .with_jacobian(Arc::new(move |_x, _t, out| {
        out.copy_from_slice(&[0.0, 1.0 / mass, 0.0, 0.0])
    }))
    .with_divergence_free(true)
    .with_canonical(
        one_pair_canonical(
            move |_q, p| 0.5 * p * p / mass,
            |_q, _p| 0.0,
            move |_q, p| p / mass,
        )
        .with_cyclic(vec![true]),
    )
}

/// Trajectory, tangent map and derived Jacobians along one characteristic.
#[derive(Debug, Clone)]
pub struct CharacteristicsBundle {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Lagrange multipliers `P(t)`, present for [`lagrange_multiplier_flow`].
    pub multipliers: Option<Vec<Vec<f64>>>,
    /// Row-major tangent map `∂x/∂x₀` at every sample.
    pub tangent: Vec<Vec<f64>>,
    /// `J₀ = det(∂x₀/∂x)` along the trajectory.
    pub jacobian_full: Vec<f64>,
    /// `det(∂q/∂q₀)|_{p₀}` for canonical systems.
    pub jacobian_config: Option<Vec<f64>>,
    /// Zeros of the monitored Jacobian; `None` if a zero is not simple.
    pub maslov: Option<u32>,
    /// Phase `φ(t)` in units with ħ = 1; identically zero unless a phase generator was supplied.
    pub phase: Vec<f64>,
    /// `∫ W dt` along the trajectory.
    pub w_integral: Vec<f64>,
}

impl CharacteristicsBundle {
    /// Series monitored for caustics: configuration-space Jacobian for
    /// canonical systems, the full `J₀` otherwise.
    pub fn monitored_jacobian(&self) -> &[f64] {
        self.jacobian_config.as_deref().unwrap_or(&self.jacobian_full)
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("bundle has at least one sample")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Fixed-step count and signed step for `[t0, t1]` with nominal step `dt`.
pub(crate) fn step_plan(t0: f64, t1: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(KvnError::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if !(t0.is_finite() && t1.is_finite()) {
        return Err(KvnError::InvalidParameter("time span must be finite".into()));
    }
    let span = t1 - t0;
    if span == 0.0 {
        return Ok((0, 0.0));
    }
    let n = ((span.abs() / dt) - 1e-9).ceil().max(1.0) as usize;
    Ok((n, span / n as f64))
}

/// One classical RK4 step of `ẏ = f(t, y)`.
fn rk4_step<F>(f: &F, t: f64, y: &mut [f64], h: f64, k: &mut [Vec<f64>; 5])
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let [k1, k2, k3, k4, tmp] = k;
    f(t, y, k1);
    for i in 0..y.len() {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(t + 0.5 * h, tmp, k2);
    for i in 0..y.len() {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(t + 0.5 * h, tmp, k3);
    for i in 0..y.len() {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, tmp, k4);
    for i in 0..y.len() {
        y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn scratch(n: usize) -> [Vec<f64>; 5] {
    std::array::from_fn(|_| vec![0.0; n])
}

/// Determinant by partial-pivot LU of a row-major `d×d` matrix.
pub fn determinant(m: &[f64], d: usize) -> f64 {
    match d {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        _ => {
            let mut a = m.to_vec();
            let mut det = 1.0;
            for c in 0..d {
                let piv = (c..d)
                    .max_by(|&i, &j| a[i * d + c].abs().total_cmp(&a[j * d + c].abs()))
                    .unwrap();
                if a[piv * d + c] == 0.0 {
                    return 0.0;
                }
                if piv != c {
                    for k in 0..d {
                        a.swap(c * d + k, piv * d + k);
                    }
                    det = -det;
                }
                let p = a[c * d + c];
                det *= p;
                for r in c + 1..d {
                    let f = a[r * d + c] / p;
                    for k in c..d {
                        a[r * d + k] -= f * a[c * d + k];
                    }
                }
            }
            det
        }
    }
}

fn config_block(system: &DynamicalSystem, tangent: &[f64]) -> Option<f64> {
    let c = system.canonical()?;
    let d = system.dim();
    let n = c.pairs();
    let mut block = vec![0.0; n * n];
    for (i, &qi) in c.q_axes.iter().enumerate() {
        for (k, &qk) in c.q_axes.iter().enumerate() {
            block[i * n + k] = tangent[qi * d + qk];
        }
    }
    Some(determinant(&block, n))
}

/// Variational right-hand side for the state `[x, M]` (and `P` when `w` is given).
fn flow_rhs<'a>(
    system: &'a DynamicalSystem,
    w: Option<&'a PhaseGenerator>,
) -> impl Fn(f64, &[f64], &mut [f64]) + 'a {
    let d = system.dim();
    move |t, y, dy| {
        let (x, rest) = y.split_at(d);
        let (m, p) = rest.split_at(d * d);
        let (dx, drest) = dy.split_at_mut(d);
        let (dm, dp) = drest.split_at_mut(d * d);
        system.velocity(x, t, dx);
        let mut jac = vec![0.0; d * d];
        system.jacobian(x, t, &mut jac);
        for j in 0..d {
            for k in 0..d {
                dm[j * d + k] = (0..d).map(|l| jac[j * d + l] * m[l * d + k]).sum();
            }
        }
        if let Some(w) = w {
            // Ṗ = −(∇v)ᵀ·P − ∇W
            let grad_w = w.gradient(system, x, t).unwrap_or_else(|_| vec![f64::NAN; d]);
            for j in 0..d {
                dp[j] = -(0..d).map(|k| jac[k * d + j] * p[k]).sum::<f64>() - grad_w[j];
            }
        }
    }
}

fn integrate(
    system: &DynamicalSystem,
    multipliers: Option<(&PhaseGenerator, &[f64])>,
    x0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<CharacteristicsBundle> {
    let d = system.dim();
    if x0.len() != d {
        return Err(KvnError::DimensionMismatch {
            expected: d,
            found: x0.len(),
        });
    }
    if let Some((_, p0)) = multipliers {
        if p0.len() != d {
            return Err(KvnError::DimensionMismatch {
                expected: d,
                found: p0.len(),
            });
        }
    }
    let (n, h) = step_plan(t0, t1, dt)?;
    let with_p = multipliers.is_some();
    let size = d + d * d + if with_p { d } else { 0 };
    let mut y = vec![0.0; size];
    y[..d].copy_from_slice(x0);
    for j in 0..d {
        y[d + j * d + j] = 1.0;
    }
    if let Some((_, p0)) = multipliers {
        y[d + d * d..].copy_from_slice(p0);
    }
    let rhs = flow_rhs(system, multipliers.map(|(w, _)| w));
    let mut k = scratch(size);

    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut tangent = Vec::with_capacity(n + 1);
    let mut ps = Vec::with_capacity(if with_p { n + 1 } else { 0 });
    let mut record = |t: f64, y: &[f64]| {
        times.push(t);
        states.push(y[..d].to_vec());
        tangent.push(y[d..d + d * d].to_vec());
        if with_p {
            ps.push(y[d + d * d..].to_vec());
        }
    };
    record(t0, &y);
    for s in 0..n {
        let t = t0 + s as f64 * h;
        rk4_step(&rhs, t, &mut y, h, &mut k);
        let t_next = if s + 1 == n { t1 } else { t0 + (s + 1) as f64 * h };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(KvnError::BlowUp { time: t_next });
        }
        record(t_next, &y);
    }

    let jacobian_full: Vec<f64> = tangent.iter().map(|m| 1.0 / determinant(m, d)).collect();
    let jacobian_config = system
        .canonical()
        .map(|_| tangent.iter().map(|m| config_block(system, m).unwrap()).collect::<Vec<_>>());
    let monitored = jacobian_config.as_deref().unwrap_or(&jacobian_full);
    let maslov = semiclassical::maslov_count(&times, monitored).ok().map(|m| m.nu);
    let samples = times.len();
    Ok(CharacteristicsBundle {
        times,
        states,
        multipliers: with_p.then_some(ps),
        tangent,
        jacobian_full,
        jacobian_config,
        maslov,
        phase: vec![0.0; samples],
        w_integral: vec![0.0; samples],
    })
}

/// Integrates `ẋ = v(x, t)` from `x0` over `[t0, t1]` with the variational
/// equation. The phase is left at zero (`W = 0`).
pub fn integrate_characteristics(
    system: &DynamicalSystem,
    x0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<CharacteristicsBundle> {
    integrate(system, None, x0, t0, t1, dt)
}

/// As [`integrate_characteristics`], then accumulates `φ` and `∫W dt` for `w`.
pub fn integrate_characteristics_with_phase(
    system: &DynamicalSystem,
    w: &PhaseGenerator,
    x0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<CharacteristicsBundle> {
    let mut bundle = integrate(system, None, x0, t0, t1, dt)?;
    let ledger = semiclassical::accumulate_phase(&bundle, system, w, 1.0)?;
    bundle.w_integral = ledger.w_integral.clone();
    bundle.phase = ledger.phase;
    Ok(bundle)
}

/// Characteristics extended with Lagrange multipliers
/// `Ṗ = −(∇v)ᵀ·P − ∇W`.
pub fn lagrange_multiplier_flow(
    system: &DynamicalSystem,
    w: &PhaseGenerator,
    x0: &[f64],
    p0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<CharacteristicsBundle> {
    w.validate(system)?;
    let mut bundle = integrate(system, Some((w, p0)), x0, t0, t1, dt)?;
    let ledger = semiclassical::accumulate_phase(&bundle, system, w, 1.0)?;
    bundle.w_integral = ledger.w_integral.clone();
    bundle.phase = ledger.phase;
    Ok(bundle)
}

/// `max_t |P(t)ᵀ·∂x/∂x₀ − P₀ᵀ|`; zero for the exact flow when `W = 0`.
pub fn symplectic_defect(bundle: &CharacteristicsBundle) -> Option<f64> {
    let ps = bundle.multipliers.as_ref()?;
    let d = ps[0].len();
    let p0 = &ps[0];
    let mut worst: f64 = 0.0;
    for (p, m) in ps.iter().zip(&bundle.tangent) {
        for k in 0..d {
            let v: f64 = (0..d).map(|j| p[j] * m[j * d + k]).sum();
            worst = worst.max((v - p0[k]).abs());
        }
    }
    Some(worst)
}

/// Endpoint of one characteristic and `det(∂x_end/∂x_start)`, without recording.
pub fn flow_map(
    system: &DynamicalSystem,
    x: &[f64],
    t_from: f64,
    t_to: f64,
    steps: usize,
) -> Result<(Vec<f64>, f64)> {
    let d = system.dim();
    let size = d + d * d;
    let mut y = vec![0.0; size];
    y[..d].copy_from_slice(x);
    for j in 0..d {
        y[d + j * d + j] = 1.0;
    }
    if steps == 0 || t_from == t_to {
        return Ok((x.to_vec(), 1.0));
    }
    let h = (t_to - t_from) / steps as f64;
    let rhs = flow_rhs(system, None);
    let mut k = scratch(size);
    for s in 0..steps {
        rk4_step(&rhs, t_from + s as f64 * h, &mut y, h, &mut k);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(KvnError::BlowUp { time: t_to });
    }
    let det = determinant(&y[d..], d);
    y.truncate(d);
    Ok((y, det))
}

/// Endpoint of one characteristic with the plain (non-variational) RK4 flow.
pub fn flow_point(system: &DynamicalSystem, x0: &[f64], t0: f64, t1: f64, dt: f64) -> Result<Vec<f64>> {
    let (n, h) = step_plan(t0, t1, dt)?;
    let d = system.dim();
    let mut y = x0.to_vec();
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| system.velocity(y, t, dy);
    let mut k = scratch(d);
    for s in 0..n {
        rk4_step(&rhs, t0 + s as f64 * h, &mut y, h, &mut k);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(KvnError::BlowUp {
                time: t0 + (s + 1) as f64 * h,
            });
        }
    }
    Ok(y)
}

/// Nonnegative density sampled on grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub grid: PhaseSpaceGrid,
    pub values: Vec<f64>,
}

impl GridDensity {
    pub fn new(grid: PhaseSpaceGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(KvnError::DimensionMismatch {
                expected: grid.len(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(KvnError::InvalidParameter("density values must be finite and nonnegative".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: PhaseSpaceGrid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = grid.points().iter().map(|x| f(x)).collect();
        Self::new(grid, values)
    }

    /// `Σ f Π Δx_j`.
    pub fn total(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Rescales to unit total; returns the factor applied.
    pub fn normalize(&mut self) -> Result<f64> {
        let total = self.total();
        if !(total > 0.0 && total.is_finite()) {
            return Err(KvnError::InvalidParameter("density has no mass".into()));
        }
        let factor = 1.0 / total;
        self.values.iter_mut().for_each(|v| *v *= factor);
        Ok(factor)
    }

    /// Periodic multilinear interpolation at an arbitrary point.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let g = &self.grid;
        let d = g.dim();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for j in 0..d {
            let a = g.axis(j).unwrap();
            let s = (x[j] - a.min) / g.spacing(j);
            let fl = s.floor();
            frac[j] = s - fl;
            base[j] = (fl as i64).rem_euclid(a.levels as i64) as usize;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0;
            for j in 0..d {
                let up = (corner >> j) & 1 == 1;
                let k = if up { (base[j] + 1) % g.levels(j) } else { base[j] };
                w *= if up { frac[j] } else { 1.0 - frac[j] };
                flat += k * g.stride(j);
            }
            if w != 0.0 {
                acc += w * self.values[flat];
            }
        }
        acc
    }

    /// Discrete L2 norm `(Σ f² ΠΔx)^{1/2}`.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    /// Discrete L2 distance to another density on the same grid.
    pub fn l2_distance(&self, other: &GridDensity) -> f64 {
        (self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            * self.grid.cell_volume())
        .sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub density: GridDensity,
    /// Total probability before renormalization.
    pub total_before: f64,
    /// Factor applied to reach unit total.
    pub renormalization: f64,
}

/// Exact Liouville evolution by backward characteristics:
/// `f(x, t) = |J₀| f₀(ξ⁻¹(x, t))`, with periodic linear interpolation of `f₀`.
/// `f0` is taken at time 0.
pub fn liouville_oracle(
    system: &DynamicalSystem,
    f0: &GridDensity,
    t: f64,
    substeps: usize,
) -> Result<OracleResult> {
    let grid = &f0.grid;
    if grid.dim() != system.dim() {
        return Err(KvnError::DimensionMismatch {
            expected: system.dim(),
            found: grid.dim(),
        });
    }
    let steps = if t == 0.0 { 0 } else { substeps.max(1) };
    let values = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut x = vec![0.0; grid.dim()];
            grid.coordinates_into(i, &mut x);
            let (x0, det) = flow_map(system, &x, t, 0.0, steps)?;
            Ok(det.abs() * f0.interpolate(&x0))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut density = GridDensity::new(grid.clone(), values)?;
    let total_before = density.total();
    let renormalization = density.normalize()?;
    Ok(OracleResult {
        density,
        total_before,
        renormalization,
    })
}

/// `max |div v − tr(∇v)|` over the sample points.
pub fn divergence_check(system: &DynamicalSystem, samples: &[(Vec<f64>, f64)]) -> f64 {
    let d = system.dim();
    let mut jac = vec![0.0; d * d];
    samples
        .iter()
        .map(|(x, t)| {
            system.jacobian(x, *t, &mut jac);
            let tr: f64 = (0..d).map(|j| jac[j * d + j]).sum();
            (system.divergence(x, *t) - tr).abs()
        })
        .fold(0.0, f64::max)
}
