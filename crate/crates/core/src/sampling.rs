//! Observable estimation: classical Monte Carlo over trajectories against an
//! emulated amplitude-estimation pipeline on the KvN state.
//!
//! The amplitude is `a = ⟨O_s⟩` with `O_s = (O − O_min)/(O_max − O_min)` and
//! `ψ` normalized to one, so `O ≡ O_max` gives `a = 1`. Grover iterates act
//! as rotations by `2θ` in the plane spanned by the good branch `O_s^{1/2}ψ`
//! and the bad branch `(1 − O_s)^{1/2}ψ`, which is all the emulator needs.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dynamics::{flow_point, DynamicalSystem};
use crate::error::{KvnError, Result};
use crate::grid::PhaseSpaceGrid;
use crate::observables::{ObservableKind, ObservableSpec};
use crate::propagation::WaveFunction;
use crate::stats::{log_log_slope, mean, sample_std};

/// Deterministic random stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws initial conditions from `f₀`.
pub trait InitialSampler: Send + Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

/// Independent normals per axis; matches `|ψ|²` of a Gaussian state with the same widths.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    normals: Vec<Normal<f64>>,
}

impl GaussianSampler {
    pub fn new(mean: &[f64], sigmas: &[f64]) -> Result<Self> {
        if mean.len() != sigmas.len() {
            return Err(KvnError::DimensionMismatch {
                expected: mean.len(),
                found: sigmas.len(),
            });
        }
        let normals = mean
            .iter()
            .zip(sigmas)
            .map(|(&m, &s)| {
                Normal::new(m, s).map_err(|e| KvnError::InvalidParameter(format!("normal({m}, {s}): {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { normals })
    }
}

impl InitialSampler for GaussianSampler {
    fn dim(&self) -> usize {
        self.normals.len()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.normals.iter().map(|n| n.sample(rng)).collect()
    }
}

/// Samples nodes with probability `|ψ|² ΠΔx`, jittered uniformly within the cell.
#[derive(Debug, Clone)]
pub struct GridSampler {
    grid: PhaseSpaceGrid,
    cdf: Vec<f64>,
}

impl GridSampler {
    pub fn from_wavefunction(psi: &WaveFunction) -> Result<Self> {
        let mut acc = 0.0;
        let cdf: Vec<f64> = psi
            .amplitudes
            .iter()
            .map(|a| {
                acc += a.norm_sqr();
                acc
            })
            .collect();
        if !(acc > 0.0) {
            return Err(KvnError::InvalidParameter("wavefunction carries no probability".into()));
        }
        Ok(Self {
            grid: psi.grid().clone(),
            cdf: cdf.into_iter().map(|c| c / acc).collect(),
        })
    }
}

impl InitialSampler for GridSampler {
    fn dim(&self) -> usize {
        self.grid.dim()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let i = self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1);
        let mut x = self.grid.coordinates_of(i).expect("index in range");
        for (j, v) in x.iter_mut().enumerate() {
            *v += (rng.random::<f64>() - 0.5) * self.grid.spacing(j);
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimationMethod {
    ClassicalMc,
    AmplitudeEstimation,
    PhaseEstimation,
}

impl EstimationMethod {
    pub fn name(self) -> &'static str {
        match self {
            EstimationMethod::ClassicalMc => "classical_mc",
            EstimationMethod::AmplitudeEstimation => "amplitude_estimation",
            EstimationMethod::PhaseEstimation => "phase_estimation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub method: EstimationMethod,
    /// Estimate of `⟨O⟩` in the observable's own units.
    pub estimate: f64,
    pub target_epsilon: f64,
    /// Standard error for Monte Carlo; `|estimate − ⟨O⟩|` against the exact
    /// amplitude for the quantum emulators.
    pub error: f64,
    /// Trajectories for Monte Carlo; `Σ shots·(2m+1)` oracle calls otherwise.
    pub queries: u64,
    /// `Σ shots·m`.
    pub grover_steps: u64,
    /// Forward/backward KvN simulations, four per Grover step.
    pub kvn_invocations: u64,
}

/// KvN simulations needed per Grover step: forward and backward around each
/// of the two reflections.
pub const KVN_PER_GROVER_STEP: u64 = 4;

fn check_bounded(obs: &ObservableSpec, v: f64, x: &[f64]) -> Result<()> {
    if !v.is_finite() {
        return Err(KvnError::Observable(format!("`{}` is not finite at {x:?}", obs.name)));
    }
    if let Some((lo, hi)) = obs.bounds {
        if v < lo || v > hi {
            return Err(KvnError::Observable(format!(
                "`{}` = {v} at {x:?} lies outside its declared bounds [{lo}, {hi}]",
                obs.name
            )));
        }
    }
    Ok(())
}

/// Trajectory-endpoint values of `obs` for initial points `starts`.
fn evaluate_trajectories(
    system: &DynamicalSystem,
    obs: &ObservableSpec,
    starts: &[Vec<f64>],
    t: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    starts
        .par_iter()
        .map(|x0| {
            let x = if t == 0.0 { x0.clone() } else { flow_point(system, x0, 0.0, t, dt)? };
            let v = obs
                .evaluate_at(&x)
                .ok_or_else(|| KvnError::Observable(format!("`{}` has no pointwise value", obs.name)))?;
            check_bounded(obs, v, &x)?;
            Ok(v)
        })
        .collect()
}

const MC_CHUNK: usize = 4096;

/// Streams `k` trajectory values from `rng`, calling `visit` on each chunk in order.
fn mc_stream(
    system: &DynamicalSystem,
    sampler: &dyn InitialSampler,
    obs: &ObservableSpec,
    t: f64,
    dt: f64,
    k: usize,
    rng: &mut ChaCha8Rng,
    mut visit: impl FnMut(&[f64]),
) -> Result<()> {
    if sampler.dim() != system.dim() {
        return Err(KvnError::DimensionMismatch {
            expected: system.dim(),
            found: sampler.dim(),
        });
    }
    let mut done = 0;
    while done < k {
        let n = MC_CHUNK.min(k - done);
        let starts: Vec<Vec<f64>> = (0..n).map(|_| sampler.sample(rng)).collect();
        let values = evaluate_trajectories(system, obs, &starts, t, dt)?;
        visit(&values);
        done += n;
    }
    Ok(())
}

/// Mean of `O(x_k(t))` over `k` RK4 trajectories from `f₀`.
#[allow(clippy::too_many_arguments)]
pub fn classical_mc_estimate(
    system: &DynamicalSystem,
    sampler: &dyn InitialSampler,
    obs: &ObservableSpec,
    t: f64,
    k: usize,
    seed: u64,
    dt: f64,
) -> Result<EstimationResult> {
    if k < 2 {
        return Err(KvnError::InvalidParameter("need at least two trajectories".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let mut values = Vec::with_capacity(k);
    mc_stream(system, sampler, obs, t, dt, k, &mut rng, |chunk| values.extend_from_slice(chunk))?;
    let est = mean(&values);
    Ok(EstimationResult {
        method: EstimationMethod::ClassicalMc,
        estimate: est,
        target_epsilon: f64::NAN,
        error: sample_std(&values) / (k as f64).sqrt(),
        queries: k as u64,
        grover_steps: 0,
        kvn_invocations: 0,
    })
}

/// Two-branch decomposition `ψ → (1 − O_s)^{1/2}ψ|0⟩ + O_s^{1/2}ψ|1⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct AncillaState {
    /// Base grid size `N`.
    pub n: usize,
    /// Good-branch probability `a = ⟨O_s⟩`.
    pub a: f64,
    /// `sin²θ = a`, `θ ∈ [0, π/2]`.
    pub theta: f64,
    /// `(O_min, O_max)`: `⟨O⟩ = O_min + (O_max − O_min)·a`.
    pub bounds: (f64, f64),
    /// `‖(1 − O_s)^{1/2}ψ‖²`, with the bad-branch phase set to zero.
    pub bad_weight: f64,
}

impl AncillaState {
    pub fn from_amplitude(n: usize, a: f64, bounds: (f64, f64)) -> Result<Self> {
        if !(0.0..=1.0).contains(&a) {
            return Err(KvnError::InvalidParameter(format!("amplitude {a} outside [0, 1]")));
        }
        if !(bounds.1 > bounds.0) {
            return Err(KvnError::InvalidParameter("bounds must satisfy O_min < O_max".into()));
        }
        Ok(Self {
            n,
            a,
            theta: a.sqrt().asin(),
            bounds,
            bad_weight: 1.0 - a,
        })
    }

    pub fn unscale(&self, a: f64) -> f64 {
        self.bounds.0 + (self.bounds.1 - self.bounds.0) * a
    }

    /// Scale factor from `a` to observable units.
    pub fn range(&self) -> f64 {
        self.bounds.1 - self.bounds.0
    }

    pub fn expectation(&self) -> f64 {
        self.unscale(self.a)
    }

    /// Good-state probability after `m` Grover iterates, `sin²((2m+1)θ)`.
    pub fn success_probability(&self, m: u64) -> f64 {
        ((2 * m + 1) as f64 * self.theta).sin().powi(2)
    }

    /// `(bad, good)` amplitudes after `m` iterates, each a reflection about
    /// the bad axis followed by a reflection about the initial state.
    pub fn grover_state(&self, m: u64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (mut b, mut g) = (c, s);
        for _ in 0..m {
            g = -g;
            // 2|χ⟩⟨χ| − 1 with |χ⟩ = (c, s).
            let proj = b * c + g * s;
            b = 2.0 * proj * c - b;
            g = 2.0 * proj * s - g;
        }
        (b, g)
    }
}

/// Builds the ancilla split of `psi` for a bounded pointwise observable.
pub fn build_ancilla_split(psi: &WaveFunction, obs: &ObservableSpec) -> Result<AncillaState> {
    let (lo, hi) = obs
        .bounds
        .ok_or_else(|| KvnError::Observable(format!("`{}` needs declared bounds", obs.name)))?;
    if let ObservableKind::KvnEnergy = obs.kind {
        return Err(KvnError::Observable("kvn_energy has no pointwise value".into()));
    }
    if !(hi > lo) {
        return Err(KvnError::Observable(format!("`{}` bounds must satisfy O_min < O_max", obs.name)));
    }
    let grid = psi.grid();
    let cell = grid.cell_volume();
    let norm = psi.norm_sqr();
    let mut x = vec![0.0; grid.dim()];
    let mut good = 0.0;
    let mut bad = 0.0;
    for (i, amp) in psi.amplitudes.iter().enumerate() {
        grid.coordinates_into(i, &mut x);
        let v = obs.evaluate_at(&x).unwrap();
        check_bounded(obs, v, &x)?;
        let s = (v - lo) / (hi - lo);
        let w = amp.norm_sqr() * cell / norm;
        good += s * w;
        bad += (1.0 - s) * w;
    }
    let a = good.clamp(0.0, 1.0);
    let mut st = AncillaState::from_amplitude(grid.len(), a, (lo, hi))?;
    st.bad_weight = bad;
    Ok(st)
}

/// Iteration schedule `m = 0, 1, 2, 4, …, 2^max_power` with fixed shots per level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AeSchedule {
    pub max_power: u32,
    pub shots: u32,
    /// Shots between likelihood checkpoints inside a level.
    pub batch: u32,
}

impl AeSchedule {
    pub fn new(max_power: u32, shots: u32) -> Self {
        Self {
            max_power,
            shots,
            batch: shots,
        }
    }

    /// Schedule whose final level resolves `a` to about `eps`.
    pub fn for_epsilon(eps: f64, shots: u32) -> Self {
        let need = (0.2 / eps).max(1.0).log2().ceil() as u32;
        Self::new(need, shots)
    }

    pub fn levels(&self) -> Vec<u64> {
        std::iter::once(0)
            .chain((0..=self.max_power).map(|k| 1u64 << k))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct LevelData {
    m: u64,
    shots: u64,
    hits: u64,
}

fn log_likelihood(data: &[LevelData], theta: f64) -> f64 {
    let mut ll = 0.0;
    for d in data {
        let (s, c) = ((2 * d.m + 1) as f64 * theta).sin_cos();
        if d.hits > 0 {
            ll += d.hits as f64 * (s * s).ln();
        }
        if d.shots > d.hits {
            ll += (d.shots - d.hits) as f64 * (c * c).ln();
        }
    }
    if ll.is_nan() {
        f64::NEG_INFINITY
    } else {
        ll
    }
}

/// Maximizes the likelihood over `[lo, hi]` by grid search plus golden-section refinement.
fn maximize(data: &[LevelData], lo: f64, hi: f64) -> f64 {
    const GRID: usize = 64;
    let step = (hi - lo) / GRID as f64;
    let mut best = (lo, log_likelihood(data, lo));
    for i in 1..=GRID {
        let th = if i == GRID { hi } else { lo + i as f64 * step };
        let ll = log_likelihood(data, th);
        if ll > best.1 {
            best = (th, ll);
        }
    }
    let (mut a, mut b) = ((best.0 - step).max(lo), (best.0 + step).min(hi));
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let mut f1 = log_likelihood(data, x1);
    let mut f2 = log_likelihood(data, x2);
    for _ in 0..80 {
        if f1 > f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = log_likelihood(data, x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = log_likelihood(data, x2);
        }
        if b - a < 1e-15 {
            break;
        }
    }
    let mid = 0.5 * (a + b);
    let fm = log_likelihood(data, mid);
    if fm > best.1 {
        mid
    } else {
        best.0
    }
}

/// Checkpoint of a running maximum-likelihood estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeCheckpoint {
    pub queries: u64,
    pub grover_steps: u64,
    pub theta: f64,
    pub a: f64,
}

/// Runs `schedule` on the exact two-branch law and records the estimate after
/// every batch of shots.
pub fn amplitude_estimate_trace(
    ancilla: &AncillaState,
    schedule: AeSchedule,
    rng: &mut ChaCha8Rng,
) -> Vec<AeCheckpoint> {
    let mut data: Vec<LevelData> = Vec::new();
    let mut out = Vec::new();
    let mut queries = 0u64;
    let mut steps = 0u64;
    let mut theta_hat: Option<f64> = None;
    let batch = schedule.batch.clamp(1, schedule.shots.max(1)) as u64;
    for m in schedule.levels() {
        let p = ancilla.success_probability(m).clamp(0.0, 1.0);
        data.push(LevelData { m, shots: 0, hits: 0 });
        let mut remaining = schedule.shots as u64;
        while remaining > 0 {
            let n = batch.min(remaining);
            let hits = (0..n).filter(|_| rng.random_bool(p)).count() as u64;
            let last = data.last_mut().unwrap();
            last.shots += n;
            last.hits += hits;
            remaining -= n;
            queries += n * (2 * m + 1);
            steps += n * m;
            let th = match theta_hat {
                None => maximize(&data, 0.0, FRAC_PI_2),
                Some(prev) => {
                    let w = FRAC_PI_2 / (2 * m + 1) as f64;
                    maximize(&data, (prev - w).max(0.0), (prev + w).min(FRAC_PI_2))
                }
            };
            theta_hat = Some(th);
            out.push(AeCheckpoint {
                queries,
                grover_steps: steps,
                theta: th,
                a: th.sin().powi(2),
            });
        }
    }
    out
}

/// Maximum-likelihood amplitude estimation over an exponential schedule
/// sized for `eps` (in observable units) with 32 shots per level.
pub fn amplitude_estimate(ancilla: &AncillaState, eps: f64, seed: u64) -> Result<EstimationResult> {
    if !(eps > 1e-5 && eps < 0.5) {
        return Err(KvnError::InvalidParameter(format!("epsilon {eps} outside (1e-5, 0.5)")));
    }
    let schedule = AeSchedule::for_epsilon(eps / ancilla.range(), 32);
    let mut r = amplitude_estimate_with(ancilla, schedule, seed)?;
    r.target_epsilon = eps;
    Ok(r)
}

pub fn amplitude_estimate_with(
    ancilla: &AncillaState,
    schedule: AeSchedule,
    seed: u64,
) -> Result<EstimationResult> {
    if schedule.shots == 0 {
        return Err(KvnError::InvalidParameter("schedule needs at least one shot per level".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let sched = AeSchedule {
        batch: schedule.shots,
        ..schedule
    };
    let last = *amplitude_estimate_trace(ancilla, sched, &mut rng)
        .last()
        .expect("schedule has at least one level");
    let estimate = ancilla.unscale(last.a);
    Ok(EstimationResult {
        method: EstimationMethod::AmplitudeEstimation,
        estimate,
        target_epsilon: f64::NAN,
        error: (last.a - ancilla.a).abs() * ancilla.range(),
        queries: last.queries,
        grover_steps: last.grover_steps,
        kvn_invocations: KVN_PER_GROVER_STEP * last.grover_steps,
    })
}

/// Outcome distribution of canonical phase-estimation AE with `2^bits` outcomes.
pub fn phase_estimation_distribution(theta: f64, bits: u32) -> Vec<f64> {
    let m = (1u64 << bits) as f64;
    let f = |delta: f64| {
        let s = (std::f64::consts::PI * delta).sin();
        if s.abs() < 1e-15 {
            1.0
        } else {
            ((m * std::f64::consts::PI * delta).sin() / (m * s)).powi(2)
        }
    };
    let x = theta / std::f64::consts::PI;
    (0..1u64 << bits)
        .map(|y| {
            let y = y as f64 / m;
            0.5 * (f(y - x) + f(y + x))
        })
        .collect()
}

/// Canonical phase-estimation AE: one measurement, estimate `sin²(πy/2^bits)`.
pub fn phase_estimation_estimate(ancilla: &AncillaState, bits: u32, seed: u64) -> Result<EstimationResult> {
    if !(1..=24).contains(&bits) {
        return Err(KvnError::InvalidParameter(format!("bits {bits} outside 1..=24")));
    }
    let probs = phase_estimation_distribution(ancilla.theta, bits);
    let total: f64 = probs.iter().sum();
    let mut rng = stream_rng(seed, 0);
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut y = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            y = i;
            break;
        }
    }
    let m = 1u64 << bits;
    let a_hat = (std::f64::consts::PI * y as f64 / m as f64).sin().powi(2);
    let steps = m - 1;
    Ok(EstimationResult {
        method: EstimationMethod::PhaseEstimation,
        estimate: ancilla.unscale(a_hat),
        target_epsilon: f64::NAN,
        error: (a_hat - ancilla.a).abs() * ancilla.range(),
        queries: 2 * steps + 1,
        grover_steps: steps,
        kvn_invocations: KVN_PER_GROVER_STEP * steps,
    })
}

/// Error bound `2π√(a(1−a))/M + π²/M²` holding with probability at least `8/π²`.
pub fn phase_estimation_bound(a: f64, bits: u32) -> f64 {
    let m = (1u64 << bits) as f64;
    let pi = std::f64::consts::PI;
    2.0 * pi * (a * (1.0 - a)).sqrt() / m + pi * pi / (m * m)
}

/// Everything the scaling study needs about one scenario.
pub struct ScalingProblem<'a> {
    pub system: &'a DynamicalSystem,
    pub sampler: &'a dyn InitialSampler,
    pub observable: &'a ObservableSpec,
    pub t: f64,
    pub dt: f64,
    /// Exact `⟨O⟩(t)` for the continuum flow, the Monte Carlo target.
    pub mc_reference: f64,
    /// Split of the propagated KvN state, the amplitude-estimation target.
    pub ancilla: &'a AncillaState,
}

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub epsilons: Vec<f64>,
    pub repetitions: usize,
    pub seed: u64,
    /// Fraction of repetitions that must reach `ε`.
    pub success_fraction: f64,
    pub ae_shots: u32,
    pub ae_batch: u32,
    /// Geometric ratio between Monte Carlo checkpoints.
    pub mc_ratio: f64,
    /// Trajectories used to size the Monte Carlo runs.
    pub mc_pilot: usize,
}

impl ScalingConfig {
    pub fn new(epsilons: Vec<f64>, repetitions: usize, seed: u64) -> Self {
        Self {
            epsilons,
            repetitions,
            seed,
            success_fraction: 0.9,
            ae_shots: 32,
            ae_batch: 8,
            mc_ratio: 1.25,
            mc_pilot: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub epsilon: f64,
    /// Queries needed by Monte Carlo, `None` if no checkpoint succeeded.
    pub mc_queries: Option<u64>,
    pub mc_success: f64,
    pub ae_queries: Option<u64>,
    pub ae_success: f64,
    /// Grover steps and KvN invocations at the AE checkpoint.
    pub ae_grover_steps: Option<u64>,
    pub ae_kvn_invocations: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    pub mc_slope: f64,
    pub ae_slope: f64,
    pub mc_reference: f64,
    pub ae_reference: f64,
    /// Largest Monte Carlo run per repetition.
    pub mc_max_trajectories: u64,
    pub ae_max_power: u32,
}

impl ScalingTable {
    /// MC/AE query ratio per row where both succeeded.
    pub fn speedups(&self) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| Some((r.epsilon, r.mc_queries? as f64 / r.ae_queries? as f64)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epsilon,mc_queries,mc_success,ae_queries,ae_success,ae_grover_steps,ae_kvn_invocations\n");
        let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_else(|| "nan".into());
        for r in &self.rows {
            writeln!(
                s,
                "{:.16e},{},{:.16e},{},{:.16e},{},{}",
                r.epsilon,
                opt(r.mc_queries),
                r.mc_success,
                opt(r.ae_queries),
                r.ae_success,
                opt(r.ae_grover_steps),
                opt(r.ae_kvn_invocations)
            )
            .unwrap();
        }
        s
    }
}

/// Smallest checkpoint (by position) at which at least `need` repetitions lie within `eps`.
fn first_success(errors: &[Vec<f64>], eps: f64, need: usize) -> Option<(usize, f64)> {
    let checkpoints = errors.first()?.len();
    let reps = errors.len() as f64;
    (0..checkpoints).find_map(|c| {
        let ok = errors.iter().filter(|e| e[c] <= eps).count();
        (ok >= need).then_some((c, ok as f64 / reps))
    })
}

/// Empirical queries needed by Monte Carlo and amplitude estimation to reach
/// each `ε` in the configured fraction of repetitions, with log-log slopes.
pub fn scaling_study(problem: &ScalingProblem, config: &ScalingConfig) -> Result<ScalingTable> {
    let eps = &config.epsilons;
    if eps.len() < 2 || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(KvnError::InvalidParameter("need at least two positive epsilons".into()));
    }
    let e_min = eps.iter().copied().fold(f64::INFINITY, f64::min);
    let e_max = eps.iter().copied().fold(0.0, f64::max);
    if e_max / e_min < 100.0 * (1.0 - 1e-9) {
        return Err(KvnError::InvalidParameter("epsilons must span at least two decades".into()));
    }
    if config.repetitions < 2 {
        return Err(KvnError::InvalidParameter("need at least two repetitions".into()));
    }
    let need = (config.success_fraction * config.repetitions as f64 - 1e-9).ceil() as usize;
    let ancilla = problem.ancilla;

    // Monte Carlo sizing from a pilot run on its own stream.
    let mut pilot_rng = stream_rng(config.seed, u64::MAX);
    let mut pilot = Vec::new();
    mc_stream(
        problem.system,
        problem.sampler,
        problem.observable,
        problem.t,
        problem.dt,
        config.mc_pilot.max(10),
        &mut pilot_rng,
        |c| pilot.extend_from_slice(c),
    )?;
    let sd = sample_std(&pilot).max(1e-12);
    let k_max = ((1.5 * 2.6 * 2.6 * sd * sd / (e_min * e_min)).ceil() as usize).max(16);
    let mut checkpoints: Vec<usize> = Vec::new();
    let mut k = 2.0f64;
    while (k as usize) < k_max {
        let c = k.round() as usize;
        if checkpoints.last() != Some(&c) {
            checkpoints.push(c);
        }
        k *= config.mc_ratio;
    }
    checkpoints.push(k_max);

    let mut mc_errors: Vec<Vec<f64>> = Vec::with_capacity(config.repetitions);
    for rep in 0..config.repetitions {
        let mut rng = stream_rng(config.seed, 2 * rep as u64);
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut next = 0usize;
        let mut errs = Vec::with_capacity(checkpoints.len());
        mc_stream(
            problem.system,
            problem.sampler,
            problem.observable,
            problem.t,
            problem.dt,
            k_max,
            &mut rng,
            |chunk| {
                for v in chunk {
                    sum += v;
                    count += 1;
                    while next < checkpoints.len() && checkpoints[next] == count {
                        errs.push((sum / count as f64 - problem.mc_reference).abs());
                        next += 1;
                    }
                }
            },
        )?;
        mc_errors.push(errs);
    }

    let schedule = AeSchedule {
        batch: config.ae_batch,
        ..AeSchedule::for_epsilon(e_min / ancilla.range(), config.ae_shots)
    };
    let mut ae_traces: Vec<Vec<AeCheckpoint>> = Vec::with_capacity(config.repetitions);
    for rep in 0..config.repetitions {
        let mut rng = stream_rng(config.seed, 2 * rep as u64 + 1);
        ae_traces.push(amplitude_estimate_trace(ancilla, schedule, &mut rng));
    }
    let ae_errors: Vec<Vec<f64>> = ae_traces
        .iter()
        .map(|tr| tr.iter().map(|c| (c.a - ancilla.a).abs() * ancilla.range()).collect())
        .collect();

    let rows: Vec<ScalingRow> = eps
        .iter()
        .map(|&e| {
            let mc = first_success(&mc_errors, e, need);
            let ae = first_success(&ae_errors, e, need);
            let ae_cp = ae.map(|(c, _)| ae_traces[0][c]);
            ScalingRow {
                epsilon: e,
                mc_queries: mc.map(|(c, _)| checkpoints[c] as u64),
                mc_success: mc.map(|(_, f)| f).unwrap_or(0.0),
                ae_queries: ae_cp.map(|c| c.queries),
                ae_success: ae.map(|(_, f)| f).unwrap_or(0.0),
                ae_grover_steps: ae_cp.map(|c| c.grover_steps),
                ae_kvn_invocations: ae_cp.map(|c| KVN_PER_GROVER_STEP * c.grover_steps),
            }
        })
        .collect();

    let fit = |pick: &dyn Fn(&ScalingRow) -> Option<u64>| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter_map(|r| pick(r).map(|q| (r.epsilon, q as f64)))
            .unzip();
        if xs.len() >= 2 {
            log_log_slope(&xs, &ys)
        } else {
            f64::NAN
        }
    };
    let mc_slope = fit(&|r| r.mc_queries);
    let ae_slope = fit(&|r| r.ae_queries);
    Ok(ScalingTable {
        rows,
        mc_slope,
        ae_slope,
        mc_reference: problem.mc_reference,
        ae_reference: ancilla.expectation(),
        mc_max_trajectories: k_max as u64,
        ae_max_power: schedule.max_power,
    })
}

/// Gauss-Hermite nodes and weights for `∫ e^{−z²/2} g(z) dz / √(2π)`.
pub fn gauss_hermite_normal(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(KvnError::InvalidParameter("need at least one node".into()));
    }
    // Golub-Welsch on the probabilists' Hermite recurrence.
    let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pairs.into_iter().unzip())
}

/// `E[O(x(t))]` for Gaussian initial conditions by tensor Gauss-Hermite
/// quadrature through the RK4 flow.
pub fn gaussian_reference(
    system: &DynamicalSystem,
    obs: &ObservableSpec,
    mean_x: &[f64],
    sigmas: &[f64],
    t: f64,
    dt: f64,
    nodes: usize,
) -> Result<f64> {
    let d = system.dim();
    if mean_x.len() != d || sigmas.len() != d {
        return Err(KvnError::DimensionMismatch {
            expected: d,
            found: mean_x.len(),
        });
    }
    let (z, w) = gauss_hermite_normal(nodes)?;
    let total = nodes.pow(d as u32);
    let mut starts = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rest = flat;
        let mut x = vec![0.0; d];
        let mut wt = 1.0;
        for j in 0..d {
            let k = rest % nodes;
            rest /= nodes;
            x[j] = mean_x[j] + sigmas[j] * z[k];
            wt *= w[k];
        }
        starts.push(x);
        weights.push(wt);
    }
    let values = starts
        .par_iter()
        .map(|x0| {
            let x = if t == 0.0 { x0.clone() } else { flow_point(system, x0, 0.0, t, dt)? };
            obs.evaluate_at(&x)
                .ok_or_else(|| KvnError::Observable(format!("`{}` has no pointwise value", obs.name)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().zip(&weights).map(|(v, w)| v * w).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::harmonic_oscillator;
    use crate::grid::{build_grid, AxisSpec};
    use num_complex::Complex64 as C64;
    use std::f64::consts::PI;

    fn anc(a: f64) -> AncillaState {
        AncillaState::from_amplitude(16, a, (0.0, 1.0)).unwrap()
    }

    #[test]
    fn angle_of_quarter() {
        assert!((anc(0.25).theta - PI / 6.0).abs() < 1e-15);
    }

    #[test]
    fn grover_rotation_matches_law() {
        for &a in &[0.0, 0.1, 0.25, 0.7, 1.0] {
            let st = anc(a);
            for m in 0..40 {
                let (b, g) = st.grover_state(m);
                assert!((g * g - st.success_probability(m)).abs() < 1e-12);
                assert!((b * b + g * g - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_degenerate_and_half() {
        let g = build_grid(vec![AxisSpec::centered("x", 16, 4.0)], 1.0).unwrap();
        let mut psi = WaveFunction::from_fn(g.clone(), |_| C64::new(1.0, 0.0)).unwrap();
        psi.normalize().unwrap();
        let one = ObservableSpec::function("one", |_| 1.0, Some((0.0, 1.0)));
        let s = build_ancilla_split(&psi, &one).unwrap();
        assert!((s.a - 1.0).abs() < 1e-14);
        let half = ObservableSpec::indicator("half", vec![-2.0], vec![0.0]);
        let h = build_ancilla_split(&psi, &half).unwrap();
        assert!((h.a - 0.5 * s.a).abs() < 1e-14);
        assert!((h.a + h.bad_weight - 1.0).abs() < 1e-14);
        let unbounded = ObservableSpec::function("x", |x| x[0], None);
        assert!(build_ancilla_split(&psi, &unbounded).is_err());
        let wrong = ObservableSpec::function("x", |x| x[0], Some((0.0, 1.0)));
        assert!(build_ancilla_split(&psi, &wrong).is_err());
    }

    #[test]
    fn ae_endpoints_exact() {
        let z = amplitude_estimate_with(&anc(0.0), AeSchedule::new(6, 32), 1).unwrap();
        assert_eq!(z.estimate, 0.0);
        let o = amplitude_estimate_with(&anc(1.0), AeSchedule::new(6, 32), 1).unwrap();
        assert_eq!(o.estimate, 1.0);
    }

    #[test]
    fn ae_quarter_calibration() {
        let st = anc(0.25);
        let ok = (0..100)
            .filter(|&s| {
                let r = amplitude_estimate_with(&st, AeSchedule::new(6, 32), s).unwrap();
                assert_eq!(r.kvn_invocations, 4 * r.grover_steps);
                (r.estimate - 0.25).abs() <= 0.01
            })
            .count();
        assert!(ok >= 95, "{ok} of 100");
    }

    #[test]
    fn ae_accounting() {
        let r = amplitude_estimate_with(&anc(0.3), AeSchedule::new(3, 10), 7).unwrap();
        // m = 0, 1, 2, 4, 8
        assert_eq!(r.queries, 10 * (1 + 3 + 5 + 9 + 17));
        assert_eq!(r.grover_steps, 10 * (1 + 2 + 4 + 8));
        assert_eq!(r.kvn_invocations, 4 * r.grover_steps);
        assert!(amplitude_estimate(&anc(0.3), 0.7, 1).is_err());
        assert!(amplitude_estimate(&anc(0.3), 1e-6, 1).is_err());
    }

    #[test]
    fn ae_reproducible() {
        let st = anc(0.37);
        let a = amplitude_estimate(&st, 1e-3, 42).unwrap();
        let b = amplitude_estimate(&st, 1e-3, 42).unwrap();
        assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
        assert_eq!(a.queries, b.queries);
        assert!(a.error < 1e-2);
    }

    #[test]
    fn phase_estimation_mode() {
        let st = anc(0.3);
        let p = phase_estimation_distribution(st.theta, 6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let hits = (0..200)
            .filter(|&s| {
                let r = phase_estimation_estimate(&st, 6, s).unwrap();
                r.error <= phase_estimation_bound(0.3, 6)
            })
            .count();
        assert!(hits as f64 >= 0.81 * 200.0 * 0.9);
    }

    #[test]
    fn mc_unit_observable() {
        let sys = harmonic_oscillator(1.0);
        let s = GaussianSampler::new(&[1.0, 0.0], &[0.3, 0.3]).unwrap();
        let one = ObservableSpec::function("one", |_| 1.0, None);
        let r = classical_mc_estimate(&sys, &s, &one, 1.0, 50, 3, 0.01).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert_eq!(r.error, 0.0);
    }

    #[test]
    fn mc_rotation_and_reproducibility() {
        let sys = harmonic_oscillator(1.0);
        let s = GaussianSampler::new(&[1.0, 0.0], &[0.3, 0.3]).unwrap();
        let q = ObservableSpec::function("q", |x| x[0], None);
        let r = classical_mc_estimate(&sys, &s, &q, PI / 2.0, 5000, 11, 0.01).unwrap();
        assert!(r.estimate.abs() <= 3.0 * r.error, "{r:?}");
        let r2 = classical_mc_estimate(&sys, &s, &q, PI / 2.0, 5000, 11, 0.01).unwrap();
        assert_eq!(r.estimate.to_bits(), r2.estimate.to_bits());
        assert_eq!(r.error.to_bits(), r2.error.to_bits());
    }

    #[test]
    fn gauss_hermite_moments() {
        let (z, w) = gauss_hermite_normal(10).unwrap();
        let m = |k: i32| z.iter().zip(&w).map(|(z, w)| w * z.powi(k)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
    }

    #[test]
    fn grid_sampler_mean() {
        let g = build_grid(vec![AxisSpec::centered("x", 64, 10.0)], 1.0).unwrap();
        let psi = crate::observables::gaussian_state(&g, &[1.0], &[0.8], None).unwrap();
        let s = GridSampler::from_wavefunction(&psi).unwrap();
        let mut rng = stream_rng(5, 0);
        let xs: Vec<f64> = (0..20000).map(|_| s.sample(&mut rng)[0]).collect();
        assert!((mean(&xs) - 1.0).abs() < 0.03);
    }
}
