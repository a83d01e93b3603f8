//! Periodic tensor-product phase-space grids.
//!
//! Each axis is periodic on its extent `X` and holds `L` equally spaced
//! nodes starting at `min`. The conjugate momentum grid is the discrete
//! Fourier dual: spacing `ΔP = 2πħ / X`, values in standard FFT ordering.
//!
//! Flat indices are row-major with axis 0 slowest.

use std::f64::consts::PI;

use crate::error::{KvnError, Result};

/// Smallest number of levels accepted on any axis.
pub const MIN_LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct AxisSpec {
    pub label: String,
    pub levels: usize,
    pub min: f64,
    /// Period length of the axis.
    pub extent: f64,
}

impl AxisSpec {
    pub fn new(label: impl Into<String>, levels: usize, min: f64, extent: f64) -> Self {
        Self {
            label: label.into(),
            levels,
            min,
            extent,
        }
    }

    /// Axis centred on the origin: `[-extent/2, extent/2)`.
    pub fn centered(label: impl Into<String>, levels: usize, extent: f64) -> Self {
        Self::new(label, levels, -0.5 * extent, extent)
    }

    pub fn spacing(&self) -> f64 {
        self.extent / self.levels as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpaceGrid {
    axes: Vec<AxisSpec>,
    hbar: f64,
    spacings: Vec<f64>,
    momentum_spacings: Vec<f64>,
    strides: Vec<usize>,
    len: usize,
}

/// Validates the axes and derives spacings, strides and momentum spacings.
pub fn build_grid(axes: Vec<AxisSpec>, hbar: f64) -> Result<PhaseSpaceGrid> {
    if axes.is_empty() {
        return Err(KvnError::InvalidGrid("at least one axis is required".into()));
    }
    if !(hbar.is_finite() && hbar > 0.0) {
        return Err(KvnError::InvalidGrid(format!("hbar must be positive, got {hbar}")));
    }
    for axis in &axes {
        if axis.levels < MIN_LEVELS {
            return Err(KvnError::InvalidGrid(format!(
                "axis `{}`: levels must be ≥ {MIN_LEVELS}, got {}",
                axis.label, axis.levels
            )));
        }
        if !(axis.extent.is_finite() && axis.extent > 0.0) {
            return Err(KvnError::InvalidGrid(format!(
                "axis `{}`: extent must be positive, got {}",
                axis.label, axis.extent
            )));
        }
        if !axis.min.is_finite() {
            return Err(KvnError::InvalidGrid(format!(
                "axis `{}`: min must be finite",
                axis.label
            )));
        }
    }

    let planck = 2.0 * PI * hbar;
    let spacings = axes.iter().map(AxisSpec::spacing).collect();
    let momentum_spacings = axes.iter().map(|a| planck / a.extent).collect();

    let mut strides = vec![1usize; axes.len()];
    for j in (0..axes.len().saturating_sub(1)).rev() {
        strides[j] = strides[j + 1] * axes[j + 1].levels;
    }
    let len = axes.iter().map(|a| a.levels).product();

    Ok(PhaseSpaceGrid {
        axes,
        hbar,
        spacings,
        momentum_spacings,
        strides,
        len,
    })
}

impl PhaseSpaceGrid {
    pub fn axes(&self) -> &[AxisSpec] {
        &self.axes
    }

    pub fn axis(&self, j: usize) -> Result<&AxisSpec> {
        self.axes.get(j).ok_or(KvnError::InvalidAxis {
            axis: j,
            dim: self.dim(),
        })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    /// Planck's constant `h = 2πħ`.
    pub fn planck(&self) -> f64 {
        2.0 * PI * self.hbar
    }

    /// Total number of grid states `N = Π L_j`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn levels(&self, j: usize) -> usize {
        self.axes[j].levels
    }

    pub fn spacing(&self, j: usize) -> f64 {
        self.spacings[j]
    }

    pub fn spacings(&self) -> &[f64] {
        &self.spacings
    }

    pub fn momentum_spacing(&self, j: usize) -> f64 {
        self.momentum_spacings[j]
    }

    /// Row-major stride of axis `j`.
    pub fn stride(&self, j: usize) -> usize {
        self.strides[j]
    }

    /// Volume element `Π Δx_j` used by every grid quadrature.
    pub fn cell_volume(&self) -> f64 {
        self.spacings.iter().product()
    }

    /// Qubit count `log₂ N`, reported only when every `L_j` is a power of two.
    pub fn qubit_count(&self) -> Option<u32> {
        if self.axes.iter().all(|a| a.levels.is_power_of_two()) {
            Some(self.axes.iter().map(|a| a.levels.trailing_zeros()).sum())
        } else {
            None
        }
    }

    pub fn node(&self, j: usize, k: usize) -> f64 {
        let a = &self.axes[j];
        a.min + k as f64 * self.spacings[j]
    }

    /// Node coordinates along axis `j`.
    pub fn nodes(&self, j: usize) -> Vec<f64> {
        (0..self.axes[j].levels).map(|k| self.node(j, k)).collect()
    }

    pub fn multi_index(&self, flat: usize) -> Result<Vec<usize>> {
        if flat >= self.len {
            return Err(KvnError::IndexOutOfRange {
                index: flat,
                len: self.len,
            });
        }
        Ok(self.multi_index_unchecked(flat))
    }

    pub(crate) fn multi_index_unchecked(&self, flat: usize) -> Vec<usize> {
        let mut rest = flat;
        self.strides
            .iter()
            .map(|&s| {
                let k = rest / s;
                rest %= s;
                k
            })
            .collect()
    }

    pub fn flat_index(&self, multi: &[usize]) -> Result<usize> {
        if multi.len() != self.dim() {
            return Err(KvnError::DimensionMismatch {
                expected: self.dim(),
                found: multi.len(),
            });
        }
        let mut flat = 0;
        for (j, (&k, &s)) in multi.iter().zip(&self.strides).enumerate() {
            if k >= self.axes[j].levels {
                return Err(KvnError::IndexOutOfRange {
                    index: k,
                    len: self.axes[j].levels,
                });
            }
            flat += k * s;
        }
        Ok(flat)
    }

    /// Grid point of a flat index.
    pub fn coordinates_of(&self, flat: usize) -> Result<Vec<f64>> {
        let multi = self.multi_index(flat)?;
        Ok(multi
            .iter()
            .enumerate()
            .map(|(j, &k)| self.node(j, k))
            .collect())
    }

    /// Writes the coordinates of `flat` into `out` without allocating.
    pub(crate) fn coordinates_into(&self, flat: usize, out: &mut [f64]) {
        let mut rest = flat;
        for (j, &s) in self.strides.iter().enumerate() {
            let k = rest / s;
            rest %= s;
            out[j] = self.node(j, k);
        }
    }

    /// Every grid point, in flat-index order.
    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len)
            .map(|i| {
                let mut x = vec![0.0; self.dim()];
                self.coordinates_into(i, &mut x);
                x
            })
            .collect()
    }

    /// Flat index of the node nearest to `point`, wrapping periodically.
    pub fn index_of(&self, point: &[f64]) -> Result<usize> {
        if point.len() != self.dim() {
            return Err(KvnError::DimensionMismatch {
                expected: self.dim(),
                found: point.len(),
            });
        }
        let mut flat = 0;
        for (j, &x) in point.iter().enumerate() {
            if !x.is_finite() {
                return Err(KvnError::NonFinite(format!("coordinate {j} of point")));
            }
            let l = self.axes[j].levels as i64;
            let k = ((x - self.axes[j].min) / self.spacings[j]).round() as i64;
            flat += k.rem_euclid(l) as usize * self.strides[j];
        }
        Ok(flat)
    }

    /// Maps `x` into `[min, min + extent)` along axis `j`.
    pub fn wrap(&self, j: usize, x: f64) -> f64 {
        let a = &self.axes[j];
        a.min + (x - a.min).rem_euclid(a.extent)
    }

    /// Minimal-image displacement `x - c` along axis `j`, in `[-X/2, X/2)`.
    pub fn periodic_delta(&self, j: usize, x: f64, c: f64) -> f64 {
        let ext = self.axes[j].extent;
        (x - c + 0.5 * ext).rem_euclid(ext) - 0.5 * ext
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(&self.axes)
                .all(|(&x, a)| x >= a.min && x < a.min + a.extent)
    }

    /// Conjugate momenta along axis `j` in standard discrete-Fourier order.
    pub fn momentum_grid(&self, j: usize) -> Result<Vec<f64>> {
        let axis = self.axis(j)?;
        let dp = self.momentum_spacings[j];
        Ok(fourier_frequencies(axis.levels)
            .into_iter()
            .map(|f| dp * f as f64)
            .collect())
    }

    /// Lines of nodes along axis `j`: each entry is the flat index of the
    /// line's first node; the line visits `start + k * stride(j)`.
    pub fn line_starts(&self, j: usize) -> Vec<usize> {
        let stride = self.strides[j];
        let block = stride * self.axes[j].levels;
        (0..self.len)
            .filter(|&i| (i % block) < stride)
            .collect()
    }
}

/// Signed DFT frequency of each bin: `0, 1, …, ⌈L/2⌉-1, -⌊L/2⌋, …, -1`.
/// For even `L` the unpaired Nyquist bin carries `-L/2`.
pub fn fourier_frequencies(levels: usize) -> Vec<i64> {
    let l = levels as i64;
    (0..l).map(|k| if k < (l + 1) / 2 { k } else { k - l }).collect()
}
