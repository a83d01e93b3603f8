//! Phase bookkeeping along characteristics: `ħφ̇ = −W`, Maslov branch
//! tracking from zeros of a Jacobian series, and the transported amplitude
//! `b·|J₀|^{1/2}·e^{iφ}·ψ₀`.

use std::fmt::Write as _;

use num_complex::Complex64 as C64;

use crate::dynamics::{CharacteristicsBundle, DynamicalSystem};
use crate::error::{KvnError, Result};
use crate::operator::PhaseGenerator;

/// Branch factor after `nu` simple zeros: `exp(−iπν/2)`.
pub fn branch_factor(nu: u32) -> C64 {
    match nu % 4 {
        0 => C64::new(1.0, 0.0),
        1 => C64::new(0.0, -1.0),
        2 => C64::new(-1.0, 0.0),
        _ => C64::new(0.0, 1.0),
    }
}

/// Zeros of a sampled Jacobian series.
#[derive(Debug, Clone, PartialEq)]
pub struct MaslovCount {
    /// Total number of simple zeros.
    pub nu: u32,
    /// Zero times, refined by linear interpolation between bracketing samples.
    pub zero_times: Vec<f64>,
    /// Running count at each sample.
    pub nu_series: Vec<u32>,
    /// Running branch factor at each sample.
    pub branches: Vec<C64>,
}

impl MaslovCount {
    pub fn final_branch(&self) -> C64 {
        branch_factor(self.nu)
    }
}

/// Counts sign changes of `series`. A single exact zero between samples of
/// opposite sign counts once; a run of zeros or a zero touched from one side
/// is a degenerate caustic.
pub fn maslov_count(times: &[f64], series: &[f64]) -> Result<MaslovCount> {
    if times.len() != series.len() {
        return Err(KvnError::DimensionMismatch {
            expected: times.len(),
            found: series.len(),
        });
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(KvnError::NonFinite(format!("Jacobian sample at t = {}", times[i])));
    }
    let n = series.len();
    let mut nu = 0u32;
    let mut zero_times = Vec::new();
    let mut nu_series = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let v = series[i];
        if v == 0.0 {
            let end = (i..n).find(|&k| series[k] != 0.0).unwrap_or(n);
            if end - i > 1 {
                return Err(KvnError::DegenerateCaustic { time: times[i] });
            }
            let before = if i > 0 { Some(series[i - 1].signum()) } else { None };
            let after = if end < n { Some(series[end].signum()) } else { None };
            match (before, after) {
                (Some(a), Some(b)) if a == b => {
                    return Err(KvnError::DegenerateCaustic { time: times[i] })
                }
                (None, _) => return Err(KvnError::DegenerateCaustic { time: times[i] }),
                _ => {
                    nu += 1;
                    zero_times.push(times[i]);
                }
            }
        } else if i > 0 && series[i - 1] != 0.0 && series[i - 1].signum() != v.signum() {
            let (a, b) = (series[i - 1], v);
            let (ta, tb) = (times[i - 1], times[i]);
            nu += 1;
            zero_times.push(ta + (tb - ta) * a / (a - b));
        }
        nu_series.push(nu);
        i += 1;
    }
    let branches = nu_series.iter().map(|&k| branch_factor(k)).collect();
    Ok(MaslovCount {
        nu,
        zero_times,
        nu_series,
        branches,
    })
}

/// Which Jacobian series the Maslov count monitors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MonitoredJacobian {
    /// Configuration-space Jacobian for canonical systems, full `J₀` otherwise.
    #[default]
    Default,
    Full,
    Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseMode {
    Zero,
    Lagrangian,
    Custom,
}

impl PhaseMode {
    fn of(w: &PhaseGenerator) -> Self {
        match w {
            PhaseGenerator::Zero => PhaseMode::Zero,
            PhaseGenerator::Lagrangian => PhaseMode::Lagrangian,
            PhaseGenerator::Custom(_) => PhaseMode::Custom,
        }
    }
}

/// Phase history along one characteristic.
#[derive(Debug, Clone)]
pub struct PhaseLedger {
    pub mode: PhaseMode,
    pub hbar: f64,
    pub times: Vec<f64>,
    pub w_values: Vec<f64>,
    /// `∫ W dt` from the first sample.
    pub w_integral: Vec<f64>,
    /// `φ(t) = φ₀ − ∫W dt / ħ`.
    pub phase: Vec<f64>,
    /// Caustic count on the monitored series, or the degenerate-caustic error.
    pub caustics: Result<MaslovCount>,
}

impl PhaseLedger {
    pub fn maslov(&self) -> Result<&MaslovCount> {
        self.caustics.as_ref().map_err(Clone::clone)
    }

    pub fn final_phase(&self) -> f64 {
        *self.phase.last().expect("ledger has at least one sample")
    }

    /// CSV rows `t,W,phi,nu,branch_re,branch_im` with a column header.
    pub fn to_csv(&self) -> Result<String> {
        let m = self.maslov()?;
        let mut out = String::from("t,W,phi,nu,branch_re,branch_im\n");
        for i in 0..self.times.len() {
            let b = m.branches[i];
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e}",
                self.times[i], self.w_values[i], self.phase[i], m.nu_series[i], b.re, b.im
            )
            .unwrap();
        }
        Ok(out)
    }
}

/// Cumulative fourth-order quadrature of samples `f` at uniformly spaced `times`.
pub fn cumulative_simpson(times: &[f64], f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut acc = vec![0.0; n];
    if n < 2 {
        return acc;
    }
    if n == 2 {
        acc[1] = 0.5 * (times[1] - times[0]) * (f[0] + f[1]);
        return acc;
    }
    for i in 1..n {
        let h = times[i] - times[i - 1];
        acc[i] = if i % 2 == 0 {
            let h2 = times[i] - times[i - 2];
            acc[i - 2] + h2 / 6.0 * (f[i - 2] + 4.0 * f[i - 1] + f[i])
        } else if i == 1 {
            acc[0] + h / 12.0 * (5.0 * f[0] + 8.0 * f[1] - f[2])
        } else {
            acc[i - 1] + h / 12.0 * (-f[i - 2] + 8.0 * f[i - 1] + 5.0 * f[i])
        };
    }
    acc
}

/// Ledger with `φ₀ = 0` on the default monitored series.
pub fn accumulate_phase(
    bundle: &CharacteristicsBundle,
    system: &DynamicalSystem,
    w: &PhaseGenerator,
    hbar: f64,
) -> Result<PhaseLedger> {
    accumulate_phase_with(bundle, system, w, hbar, 0.0, MonitoredJacobian::Default)
}

pub fn accumulate_phase_with(
    bundle: &CharacteristicsBundle,
    system: &DynamicalSystem,
    w: &PhaseGenerator,
    hbar: f64,
    phi0: f64,
    monitored: MonitoredJacobian,
) -> Result<PhaseLedger> {
    if !(hbar > 0.0 && hbar.is_finite()) {
        return Err(KvnError::InvalidParameter(format!("hbar must be positive, got {hbar}")));
    }
    w.validate(system)?;
    let w_values = bundle
        .times
        .iter()
        .zip(&bundle.states)
        .map(|(&t, x)| w.value(system, x, t))
        .collect::<Result<Vec<f64>>>()?;
    let w_integral = if w.is_zero() {
        vec![0.0; w_values.len()]
    } else {
        cumulative_simpson(&bundle.times, &w_values)
    };
    let phase = w_integral.iter().map(|s| phi0 - s / hbar).collect();
    let series = match monitored {
        MonitoredJacobian::Default => bundle.monitored_jacobian(),
        MonitoredJacobian::Full => &bundle.jacobian_full,
        MonitoredJacobian::Config => bundle.jacobian_config.as_deref().ok_or(KvnError::NotCanonical)?,
    };
    Ok(PhaseLedger {
        mode: PhaseMode::of(w),
        hbar,
        times: bundle.times.clone(),
        w_values,
        w_integral,
        phase,
        caustics: maslov_count(&bundle.times, series),
    })
}

/// `b·|J₀|^{1/2}·e^{iφ}·ψ₀` at every sample of the ledger.
pub fn semiclassical_amplitude_series(
    bundle: &CharacteristicsBundle,
    ledger: &PhaseLedger,
    psi0: C64,
) -> Result<Vec<C64>> {
    if ledger.times.len() != bundle.times.len() {
        return Err(KvnError::DimensionMismatch {
            expected: bundle.times.len(),
            found: ledger.times.len(),
        });
    }
    let m = ledger.maslov()?;
    Ok(bundle
        .jacobian_full
        .iter()
        .zip(&ledger.phase)
        .zip(&m.branches)
        .map(|((j, phi), b)| b * j.abs().sqrt() * C64::from_polar(1.0, *phi) * psi0)
        .collect())
}

/// Transported amplitude at the end of the trajectory.
pub fn semiclassical_amplitude(
    bundle: &CharacteristicsBundle,
    ledger: &PhaseLedger,
    psi0: C64,
) -> Result<C64> {
    Ok(*semiclassical_amplitude_series(bundle, ledger, psi0)?
        .last()
        .expect("ledger has at least one sample"))
}

/// Derivative of uniformly sampled `f` by fourth-order finite differences.
fn derivative4(times: &[f64], f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let h = (times[n - 1] - times[0]) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            if i >= 2 && i + 2 < n {
                (f[i - 2] - 8.0 * f[i - 1] + 8.0 * f[i + 1] - f[i + 2]) / (12.0 * h)
            } else {
                let (c, base): ([f64; 5], &[f64]) = match i {
                    0 => ([-25.0, 48.0, -36.0, 16.0, -3.0], &f[..5]),
                    1 => ([-3.0, -10.0, 18.0, -6.0, 1.0], &f[..5]),
                    _ if i == n - 2 => ([-1.0, 6.0, -18.0, 10.0, 3.0], &f[n - 5..]),
                    _ => ([3.0, -16.0, 36.0, -48.0, 25.0], &f[n - 5..]),
                };
                c.iter().zip(base).map(|(a, b)| a * b).sum::<f64>() / (12.0 * h)
            }
        })
        .collect()
}

/// `max_t |ħφ̇ − p·q̇ + H| + |ħφ̇ − L|` with `ħφ̇` differentiated from the ledger.
pub fn hamilton_jacobi_residual(
    system: &DynamicalSystem,
    bundle: &CharacteristicsBundle,
    ledger: &PhaseLedger,
) -> Result<f64> {
    let c = system.canonical().ok_or(KvnError::NotCanonical)?;
    if ledger.mode != PhaseMode::Lagrangian {
        return Err(KvnError::InvalidParameter(
            "Hamilton-Jacobi residual requires the lagrangian phase generator".into(),
        ));
    }
    if ledger.times.len() < 5 {
        return Err(KvnError::InvalidParameter("need at least five samples".into()));
    }
    let action: Vec<f64> = ledger.phase.iter().map(|p| ledger.hbar * p).collect();
    let rate = derivative4(&ledger.times, &action);
    let mut worst: f64 = 0.0;
    let mut v = vec![0.0; system.dim()];
    for (i, x) in bundle.states.iter().enumerate() {
        let t = ledger.times[i];
        system.velocity(x, t, &mut v);
        let p_qdot: f64 = c.q_axes.iter().zip(&c.p_axes).map(|(&q, &p)| x[p] * v[q]).sum();
        let h = c.hamiltonian(x, t);
        let l = c.lagrangian(x, t);
        let r = (rate[i] - p_qdot + h).abs() + (rate[i] - l).abs();
        worst = worst.max(r);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{
        action_angle, exponential, free_particle, harmonic_oscillator, integrate_characteristics, linear,
    };
    use std::f64::consts::PI;

    #[test]
    fn cosine_has_two_zeros() {
        let times: Vec<f64> = (0..6284).map(|i| i as f64 * 1e-3).collect();
        let series: Vec<f64> = times.iter().map(|t| t.cos()).collect();
        let m = maslov_count(&times, &series).unwrap();
        assert_eq!(m.nu, 2);
        assert_eq!(m.final_branch(), C64::new(-1.0, 0.0));
        assert!((m.zero_times[0] - PI / 2.0).abs() < 1e-6);
        assert!((m.zero_times[1] - 1.5 * PI).abs() < 1e-6);
    }

    #[test]
    fn constant_series_has_no_zeros() {
        let m = maslov_count(&[0.0, 1.0, 2.0], &[1.0; 3]).unwrap();
        assert_eq!(m.nu, 0);
        assert_eq!(m.final_branch(), C64::new(1.0, 0.0));
    }

    #[test]
    fn exact_zero_counts_once() {
        let m = maslov_count(&[0.0, 1.0, 2.0], &[1.0, 0.0, -1.0]).unwrap();
        assert_eq!(m.nu, 1);
        assert_eq!(m.zero_times, vec![1.0]);
        assert_eq!(m.nu_series, vec![0, 1, 1]);
    }

    #[test]
    fn degenerate_zeros_rejected() {
        let t = [0.0, 1.0, 2.0, 3.0];
        assert!(matches!(
            maslov_count(&t, &[1.0, 0.0, 0.0, -1.0]),
            Err(KvnError::DegenerateCaustic { time }) if time == 1.0
        ));
        assert!(matches!(
            maslov_count(&t, &[1.0, 0.0, 1.0, 1.0]),
            Err(KvnError::DegenerateCaustic { .. })
        ));
    }

    #[test]
    fn branch_cycle() {
        let seq: Vec<C64> = (0..5).map(branch_factor).collect();
        assert_eq!(
            seq,
            vec![
                C64::new(1.0, 0.0),
                C64::new(0.0, -1.0),
                C64::new(-1.0, 0.0),
                C64::new(0.0, 1.0),
                C64::new(1.0, 0.0)
            ]
        );
    }

    #[test]
    fn zero_generator_keeps_phase() {
        let sys = harmonic_oscillator(1.0);
        let b = integrate_characteristics(&sys, &[1.0, 0.0], 0.0, 1.0, 1e-2).unwrap();
        let l = accumulate_phase_with(&b, &sys, &PhaseGenerator::Zero, 1.0, 0.7, MonitoredJacobian::Default)
            .unwrap();
        assert!(l.phase.iter().all(|&p| p == 0.7));
    }

    #[test]
    fn free_particle_phase() {
        let (m, p0, hbar) = (2.0, 1.5, 0.5);
        let sys = free_particle(m);
        let b = integrate_characteristics(&sys, &[0.3, p0], 0.0, 2.0, 1e-3).unwrap();
        let l = accumulate_phase(&b, &sys, &PhaseGenerator::Lagrangian, hbar).unwrap();
        for (t, phi) in l.times.iter().zip(&l.phase) {
            let expect = p0 * p0 / (2.0 * m) * t / hbar;
            assert!((phi - expect).abs() < 1e-12, "t={t}");
        }
        assert!(hamilton_jacobi_residual(&sys, &b, &l).unwrap() <= 1e-6);
    }

    #[test]
    fn oscillator_action_is_half_qp() {
        let sys = harmonic_oscillator(1.7);
        let x0 = [0.8, -0.4];
        let b = integrate_characteristics(&sys, &x0, 0.0, 2.0 * PI / 1.7, 1e-3).unwrap();
        let l = accumulate_phase(&b, &sys, &PhaseGenerator::Lagrangian, 1.0).unwrap();
        let s0 = x0[0] * x0[1] / 2.0;
        for (x, phi) in b.states.iter().zip(&l.phase) {
            assert!((phi - (x[0] * x[1] / 2.0 - s0)).abs() < 1e-10);
        }
        assert!(hamilton_jacobi_residual(&sys, &b, &l).unwrap() <= 1e-5);
    }

    #[test]
    fn action_angle_phase() {
        let (omega, kappa) = (1.2, 0.3);
        let sys = action_angle(omega, kappa);
        let (th0, j) = (0.1, 0.8);
        let b = integrate_characteristics(&sys, &[th0, j], 0.0, 3.0, 1e-3).unwrap();
        let l = accumulate_phase(&b, &sys, &PhaseGenerator::Lagrangian, 1.0).unwrap();
        let h0 = omega * j + 0.5 * kappa * j * j;
        for ((x, phi), t) in b.states.iter().zip(&l.phase).zip(&l.times) {
            assert!((phi - (j * (x[0] - th0) - h0 * t)).abs() < 1e-10);
        }
    }

    #[test]
    fn simpson_is_fourth_order() {
        let err = |n: usize| {
            let times: Vec<f64> = (0..=n).map(|i| i as f64 * 2.0 / n as f64).collect();
            let f: Vec<f64> = times.iter().map(|t| t.exp() * t.sin()).collect();
            let acc = cumulative_simpson(&times, &f);
            let exact = |t: f64| 0.5 * (t.exp() * (t.sin() - t.cos()) + 1.0);
            times
                .iter()
                .zip(&acc)
                .map(|(t, a)| (a - exact(*t)).abs())
                .fold(0.0, f64::max)
        };
        let ns = [20usize, 40, 80, 160];
        let errs: Vec<f64> = ns.iter().map(|&n| err(n)).collect();
        let hs: Vec<f64> = ns.iter().map(|&n| 1.0 / n as f64).collect();
        let slope = crate::stats::log_log_slope(&hs, &errs);
        assert!((slope - 4.0).abs() < 0.3, "slope {slope}");
    }

    #[test]
    fn amplitudes() {
        let zero = linear(vec![vec![0.0]]).unwrap();
        let b = integrate_characteristics(&zero, &[0.2], 0.0, 1.0, 0.1).unwrap();
        let l = accumulate_phase(&b, &zero, &PhaseGenerator::Zero, 1.0).unwrap();
        let psi0 = C64::new(0.3, -0.4);
        assert_eq!(semiclassical_amplitude(&b, &l, psi0).unwrap(), psi0);

        let e = exponential(1.0);
        let b = integrate_characteristics(&e, &[0.2], 0.0, 1.0, 1e-3).unwrap();
        let l = accumulate_phase(&b, &e, &PhaseGenerator::Zero, 1.0).unwrap();
        let a = semiclassical_amplitude(&b, &l, psi0).unwrap();
        assert!((a - (-0.5f64).exp() * psi0).norm() < 1e-12);

        let ho = harmonic_oscillator(1.0);
        let b = integrate_characteristics(&ho, &[1.0, 0.3], 0.0, 2.0 * PI, 1e-3).unwrap();
        let l = accumulate_phase(&b, &ho, &PhaseGenerator::Zero, 1.0).unwrap();
        assert_eq!(l.maslov().unwrap().nu, 2);
        let a = semiclassical_amplitude(&b, &l, psi0).unwrap();
        assert!((a + psi0).norm() < 1e-10);
    }

    #[test]
    fn gauge_leaves_modulus_unchanged() {
        let ho = harmonic_oscillator(1.0);
        let b = integrate_characteristics(&ho, &[0.5, 0.9], 0.0, 4.0, 1e-3).unwrap();
        let psi0 = C64::new(0.6, 0.2);
        let l0 = accumulate_phase(&b, &ho, &PhaseGenerator::Zero, 1.0).unwrap();
        let l1 = accumulate_phase(&b, &ho, &PhaseGenerator::Lagrangian, 1.0).unwrap();
        let a0 = semiclassical_amplitude_series(&b, &l0, psi0).unwrap();
        let a1 = semiclassical_amplitude_series(&b, &l1, psi0).unwrap();
        for (x, y) in a0.iter().zip(&a1) {
            assert!((x.norm_sqr() - y.norm_sqr()).abs() < 1e-14);
        }
    }

    #[test]
    fn residual_rejects_zero_mode() {
        let sys = free_particle(1.0);
        let b = integrate_characteristics(&sys, &[0.0, 1.0], 0.0, 1.0, 1e-2).unwrap();
        let l = accumulate_phase(&b, &sys, &PhaseGenerator::Zero, 1.0).unwrap();
        assert!(hamilton_jacobi_residual(&sys, &b, &l).is_err());
    }

    #[test]
    fn csv_export() {
        let sys = free_particle(1.0);
        let b = integrate_characteristics(&sys, &[0.0, 1.0], 0.0, 0.2, 0.1).unwrap();
        let l = accumulate_phase(&b, &sys, &PhaseGenerator::Lagrangian, 1.0).unwrap();
        let csv = l.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,W,phi,nu,branch_re,branch_im");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1].split(',').count(), 6);
    }
}
