//! Learnable (T+1)-level quantizer.
//!
//! A quantizer with `T` breakpoints `b_1 < … < b_T` and amplitudes `a_t`
//! maps a scalar to a weighted sum of signs, `Σ_t w_t sgn(z - b_t)` with
//! `w_t = a_t² / Σ a²`. On the interval `[b_{j-1}, b_j)` exactly `j-1` signs
//! are positive, which gives the level table
//! `c_j = Σ_{t<j} w_t - Σ_{t≥j} w_t`, running from `-1` to `+1`.
//!
//! Training uses a smooth arctan surrogate of the sign; inference uses the
//! step function. Given a Gaussian pre-quantization value, the level
//! probabilities follow from the normal CDF at each breakpoint.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::numerics::{normal_cdf, normal_sf};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_2_PI, SQRT_2};

/// Minimum gap between consecutive breakpoints in the trainable
/// parameterization.
pub const BREAKPOINT_GAP: f64 = 1e-4;

/// Soft quantizer codomain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftMode {
    /// `(2/π)·arctan`, so the surrogate approaches the step quantizer's
    /// `[-1, 1]` range as sharpness grows.
    #[default]
    Scaled,
    /// Bare `arctan`, range `(-π/2, π/2)`.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    amplitudes: Vec<f64>,
    breakpoints: Vec<f64>,
    gamma: f64,
    levels: Vec<f64>,
}

/// Level table for the given amplitudes: `T + 1` values from `-1` to `1`.
pub fn derive_levels(amplitudes: &[f64]) -> Result<Vec<f64>> {
    ensure!(!amplitudes.is_empty(), "at least one amplitude is required");
    ensure!(
        amplitudes.iter().all(|&a| a > 0.0 && a.is_finite()),
        "amplitudes must be positive and finite"
    );
    let total: f64 = amplitudes.iter().map(|a| a * a).sum();
    let t = amplitudes.len();
    let mut levels = Vec::with_capacity(t + 1);
    levels.push(-1.0);
    let mut below = 0.0;
    for a in &amplitudes[..t - 1] {
        below += a * a;
        // below - (total - below), normalized
        levels.push((2.0 * below - total) / total);
    }
    levels.push(1.0);
    Ok(levels)
}

impl QuantizerSpec {
    pub fn new(amplitudes: Vec<f64>, breakpoints: Vec<f64>, gamma: f64) -> Result<Self> {
        ensure!(
            amplitudes.len() == breakpoints.len(),
            "need one amplitude per breakpoint ({} vs {})",
            amplitudes.len(),
            breakpoints.len()
        );
        ensure!(
            breakpoints.iter().all(|b| b.is_finite()),
            "breakpoints must be finite"
        );
        ensure!(
            breakpoints.windows(2).all(|w| w[0] < w[1]),
            "breakpoints must be strictly increasing"
        );
        ensure!(gamma > 0.0, "gamma must be positive (got {gamma})");
        let levels = derive_levels(&amplitudes)?;
        Ok(Self {
            amplitudes,
            breakpoints,
            gamma,
            levels,
        })
    }

    /// Equal amplitudes with breakpoints at the interior points
    /// `-1 + 2t/(T+1)` of `[-1, 1]`.
    pub fn uniform(t: usize, gamma: f64) -> Result<Self> {
        ensure!(t >= 1, "need at least one breakpoint");
        let breakpoints = initial_breakpoints(t);
        Self::new(vec![1.0; t], breakpoints, gamma)
    }

    pub fn breakpoint_count(&self) -> usize {
        self.breakpoints.len()
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        ensure!(gamma > 0.0, "gamma must be positive (got {gamma})");
        self.gamma = gamma;
        Ok(self)
    }

    /// Normalized weights `a_t² / Σ a²`.
    pub fn weights(&self) -> Vec<f64> {
        let total: f64 = self.amplitudes.iter().map(|a| a * a).sum();
        self.amplitudes.iter().map(|a| a * a / total).collect()
    }

    /// Index of the level for `z`. A value exactly at a breakpoint goes to
    /// the level above it.
    pub fn level_index(&self, z: f64) -> usize {
        self.breakpoints.partition_point(|&b| b <= z)
    }

    pub fn hard_quantize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&x| self.levels[self.level_index(x)]).collect()
    }

    pub fn soft_quantize(&self, z: &[f64], mode: SoftMode) -> Vec<f64> {
        let weights = self.weights();
        let factor = match mode {
            SoftMode::Scaled => FRAC_2_PI,
            SoftMode::Literal => 1.0,
        };
        z.iter()
            .map(|&x| {
                weights
                    .iter()
                    .zip(&self.breakpoints)
                    .map(|(w, b)| w * (self.gamma * (x - b)).atan())
                    .sum::<f64>()
                    * factor
            })
            .collect()
    }

    /// Level probabilities of the quantized value when the input is
    /// `N(mu_i, theta_i²)` in each dimension.
    pub fn conditional_pmf(&self, mu: &[f64], theta: &[f64]) -> Result<QuantizedPmf> {
        ensure!(
            mu.len() == theta.len(),
            "mu and theta lengths differ ({} vs {})",
            mu.len(),
            theta.len()
        );
        let t = self.breakpoints.len();
        let mut probs = Vec::with_capacity(mu.len() * (t + 1));
        for (&m, &s) in mu.iter().zip(theta) {
            ensure!(s > 0.0, "theta must be positive (got {s})");
            // Differences of the lower tail below the mean and of the upper
            // tail above it, so that no probability is a difference of two
            // numbers close to one.
            let mut prev_cdf = 0.0;
            let mut prev_sf = 1.0;
            for &b in &self.breakpoints {
                let cdf = normal_cdf(b, m, s)?;
                let sf = normal_sf(b, m, s)?;
                let p = if b <= m { cdf - prev_cdf } else { prev_sf - sf };
                probs.push(p.max(0.0));
                prev_cdf = cdf;
                prev_sf = sf;
            }
            probs.push(prev_sf);
        }
        Ok(QuantizedPmf {
            levels: t + 1,
            probs,
        })
    }
}

/// Initial breakpoints, equally spaced inside `[-1, 1]`.
pub fn initial_breakpoints(t: usize) -> Vec<f64> {
    (1..=t).map(|i| -1.0 + 2.0 * i as f64 / (t + 1) as f64).collect()
}

/// Level probabilities, one row of `T + 1` entries per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPmf {
    levels: usize,
    probs: Vec<f64>,
}

impl QuantizedPmf {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "pmf needs at least one row");
        let levels = rows[0].len();
        ensure!(levels >= 2, "pmf rows need at least two levels");
        let mut probs = Vec::with_capacity(rows.len() * levels);
        for row in rows {
            ensure!(row.len() == levels, "pmf rows must have equal length");
            ensure!(
                row.iter().all(|p| (0.0..=1.0).contains(p)),
                "pmf entries must lie in [0, 1]"
            );
            let s: f64 = row.iter().sum();
            ensure!((s - 1.0).abs() < 1e-9, "pmf row sums to {s}, not 1");
            probs.extend_from_slice(row);
        }
        Ok(Self { levels, probs })
    }

    pub fn dims(&self) -> usize {
        self.probs.len() / self.levels
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.levels..(i + 1) * self.levels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.levels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entropy {
    /// Nats, one per dimension.
    pub per_dim: Vec<f64>,
    pub total: f64,
}

/// Shannon entropy in nats of each pmf row, with `0 log 0 = 0`.
pub fn pmf_entropy(pmf: &QuantizedPmf) -> Entropy {
    let per_dim: Vec<f64> = pmf
        .rows()
        .map(|row| {
            -row
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .collect();
    let total = per_dim.iter().sum();
    Entropy { per_dim, total }
}

/// Trainable quantizer parameters recorded on a tape.
///
/// Breakpoints are `b_1 = first` and `b_{j+1} = b_j + softplus(raw_j) + gap`,
/// so they stay sorted under any update. Amplitudes are used squared, so
/// their sign is irrelevant.
#[derive(Debug, Clone, Copy)]
pub struct QuantizerVars {
    /// `1 × T` row of normalized weights `a_t²/Σa²`.
    pub weights: Var,
    /// `1 × T` sorted breakpoints.
    pub breakpoints: Var,
    /// `1 × (T+1)` levels.
    pub levels: Var,
}

impl QuantizerVars {
    /// `amplitudes`: `1 × T`; `first`: `1 × 1`; `raw_gaps`: `1 × (T-1)`
    /// (ignored when `T = 1`).
    pub fn build(tape: &mut Tape, amplitudes: Var, first: Var, raw_gaps: Option<Var>) -> Result<Self> {
        let t = tape.shape(amplitudes).1;
        let sq = tape.square(amplitudes);
        let total = tape.sum(sq);
        let weights = tape.div(sq, total)?;

        let breakpoints = match raw_gaps {
            Some(raw) if t > 1 => {
                let gaps = tape.softplus(raw);
                let gaps = tape.add_const(gaps, BREAKPOINT_GAP);
                let offsets = tape.cumsum(gaps);
                let rest = tape.add(offsets, first)?;
                tape.concat_cols(&[first, rest])?
            }
            _ => first,
        };

        let lo = tape.constant(Tensor::scalar(-1.0));
        let hi = tape.constant(Tensor::scalar(1.0));
        let levels = if t > 1 {
            let head = tape.slice_cols(weights, 0, t - 1)?;
            let below = tape.cumsum(head);
            let below = tape.scale(below, 2.0);
            let inner = tape.add_const(below, -1.0);
            tape.concat_cols(&[lo, inner, hi])?
        } else {
            tape.concat_cols(&[lo, hi])?
        };
        Ok(Self {
            weights,
            breakpoints,
            levels,
        })
    }

    /// Snapshot as a plain [`QuantizerSpec`].
    pub fn to_spec(&self, tape: &Tape, amplitudes: Var, gamma: f64) -> Result<QuantizerSpec> {
        let amps: Vec<f64> = tape.value(amplitudes).data().iter().map(|a| a.abs()).collect();
        QuantizerSpec::new(amps, tape.value(self.breakpoints).data().to_vec(), gamma)
    }

    /// Soft quantization of a `B × d` matrix.
    pub fn soft_quantize(&self, tape: &mut Tape, z: Var, gamma: f64, mode: SoftMode) -> Result<Var> {
        let (b, d) = tape.shape(z);
        let flat = tape.reshape(z, b * d, 1)?;
        let diff = tape.sub(flat, self.breakpoints)?;
        let sharp = tape.scale(diff, gamma);
        let at = tape.atan(sharp);
        let wt = tape.transpose(self.weights);
        let mixed = tape.matmul(at, wt)?;
        let mixed = match mode {
            SoftMode::Scaled => tape.scale(mixed, FRAC_2_PI),
            SoftMode::Literal => mixed,
        };
        tape.reshape(mixed, b, d)
    }

    /// Level probabilities for `B × d` posteriors, as a `(B·d) × (T+1)`
    /// matrix whose rows sum to one.
    pub fn conditional_pmf(&self, tape: &mut Tape, mu: Var, theta: Var) -> Result<Var> {
        let (b, d) = tape.shape(mu);
        let mu = tape.reshape(mu, b * d, 1)?;
        let theta = tape.reshape(theta, b * d, 1)?;
        let diff = tape.sub(self.breakpoints, mu)?;
        let denom = tape.scale(theta, SQRT_2);
        let arg = tape.div(diff, denom)?;
        let e = tape.erf(arg);
        let half = tape.add_const(e, 1.0);
        let cdf = tape.scale(half, 0.5);
        let zeros = tape.constant(Tensor::zeros(b * d, 1));
        let ones = tape.constant(Tensor::filled(b * d, 1, 1.0));
        let t = tape.shape(cdf).1;
        let upper = tape.concat_cols(&[cdf, ones])?;
        let lower = tape.concat_cols(&[zeros, cdf])?;
        debug_assert_eq!(tape.shape(upper).1, t + 1);
        tape.sub(upper, lower)
    }
}
