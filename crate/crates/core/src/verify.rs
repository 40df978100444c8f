//! Numerical certification of the KL upper bound and of its gap bound.
//!
//! The received value of one quantized dimension is a Gaussian mixture
//! `Σ_t P(c_t) N(c_t, σ²)`. Its KL divergence to `N(0, 1)` has no closed
//! form, so it is integrated numerically and compared with the closed-form
//! bound from [`crate::ibloss::dkl_star`].

use crate::error::{ensure, Error, Result};
use crate::ibloss::{dkl_star, KlVariant};
use crate::numerics::{integrate, normal_pdf_unchecked, Rng};
use crate::quantizer::{QuantizedPmf, QuantizerSpec};
use serde::Serialize;
use std::f64::consts::PI;

/// Default absolute tolerance of certification integrals.
pub const QUADRATURE_TOL: f64 = 1e-10;

/// Slack allowed when comparing a bound with its quadrature value.
pub const CHECK_SLACK: f64 = 1e-8;

/// One-dimensional Gaussian mixture with a shared variance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureSpec {
    weights: Vec<f64>,
    means: Vec<f64>,
    variance: f64,
}

impl MixtureSpec {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variance: f64) -> Result<Self> {
        ensure!(!weights.is_empty(), "mixture needs at least one component");
        ensure!(weights.len() == means.len(), "weights and means lengths differ");
        ensure!(variance > 0.0 && variance.is_finite(), "variance must be positive");
        ensure!(
            weights.iter().all(|&w| w >= 0.0),
            "mixture weights must be nonnegative"
        );
        let total: f64 = weights.iter().sum();
        ensure!((total - 1.0).abs() < 1e-9, "mixture weights sum to {total}, not 1");
        Ok(Self {
            weights,
            means,
            variance,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Log density via log-sum-exp, finite far into the tails.
    pub fn log_pdf(&self, x: f64) -> f64 {
        let inv = 0.5 / self.variance;
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, m)| w.ln() - (x - m) * (x - m) * inv)
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        lse - 0.5 * (2.0 * PI * self.variance).ln()
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut pick = self.weights.len() - 1;
        for (t, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = t;
                break;
            }
        }
        self.means[pick] + self.variance.sqrt() * rng.standard_normal()
    }
}

pub fn mixture_pdf(spec: &MixtureSpec, x: f64) -> f64 {
    spec.weights
        .iter()
        .zip(&spec.means)
        .map(|(w, m)| w * normal_pdf_unchecked(x, *m, spec.variance))
        .sum()
}

fn log_std_normal(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * PI).ln()
}

/// `KL(mixture ‖ N(0, 1))` by adaptive quadrature over
/// `[min c - 10σ - 1, max c + 10σ + 1]`. The interval is cut at every
/// component mean and at `±4σ` around it so no narrow peak falls between
/// quadrature nodes.
pub fn true_kl_quadrature(spec: &MixtureSpec, tol: f64) -> Result<f64> {
    ensure!(tol > 0.0, "tolerance must be positive");
    let sd = spec.variance.sqrt();
    let lo = spec.means.iter().copied().fold(f64::INFINITY, f64::min) - 10.0 * sd - 1.0;
    let hi = spec.means.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 10.0 * sd + 1.0;
    let mut cuts = vec![lo, hi];
    for (w, m) in spec.weights.iter().zip(&spec.means) {
        if *w > 0.0 {
            cuts.extend([m - 4.0 * sd, *m, m + 4.0 * sd]);
        }
    }
    cuts.retain(|&c| c >= lo && c <= hi);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let integrand = |x: f64| {
        let lp = spec.log_pdf(x);
        if lp == f64::NEG_INFINITY {
            0.0
        } else {
            lp.exp() * (lp - log_std_normal(x))
        }
    };
    let pieces = (cuts.len() - 1) as f64;
    let mut total = 0.0;
    for w in cuts.windows(2) {
        total += integrate(integrand, w[0], w[1], tol / pieces)?.value;
    }
    Ok(total)
}

/// Monte Carlo estimate of the same KL with its standard error.
pub fn true_kl_monte_carlo(spec: &MixtureSpec, samples: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    ensure!(samples >= 2, "at least two samples are required");
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for n in 1..=samples {
        let x = spec.sample(rng);
        let v = spec.log_pdf(x) - log_std_normal(x);
        let delta = v - mean;
        mean += delta / n as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (samples - 1) as f64;
    Ok((mean, (var / samples as f64).sqrt()))
}

fn mixtures(pmf: &QuantizedPmf, levels: &[f64], sigma2: f64) -> Result<Vec<MixtureSpec>> {
    pmf.rows()
        .map(|row| MixtureSpec::new(row.to_vec(), levels.to_vec(), sigma2))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpperBoundCheck {
    pub bound: Vec<f64>,
    pub true_kl: Vec<f64>,
    /// `bound - true_kl` per dimension.
    pub margins: Vec<f64>,
    pub passed: bool,
}

impl UpperBoundCheck {
    pub fn worst_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Compares the closed-form bound with the quadrature KL in every
/// dimension of a link with posterior `N(mu, theta²)`.
pub fn upper_bound_check(
    mu: &[f64],
    theta: &[f64],
    spec: &QuantizerSpec,
    sigma2: f64,
    variant: KlVariant,
) -> Result<UpperBoundCheck> {
    ensure!(sigma2 > 0.0, "sigma2 must be positive");
    let pmf = spec.conditional_pmf(mu, theta)?;
    let true_kl = true_kl_per_dim(&pmf, spec.levels(), sigma2)?;
    compare_bound(&pmf, spec.levels(), sigma2, variant, true_kl)
}

/// Quadrature KL of every dimension's received mixture.
pub fn true_kl_per_dim(pmf: &QuantizedPmf, levels: &[f64], sigma2: f64) -> Result<Vec<f64>> {
    mixtures(pmf, levels, sigma2)?
        .iter()
        .map(|m| true_kl_quadrature(m, QUADRATURE_TOL))
        .collect()
}

fn compare_bound(
    pmf: &QuantizedPmf,
    levels: &[f64],
    sigma2: f64,
    variant: KlVariant,
    true_kl: Vec<f64>,
) -> Result<UpperBoundCheck> {
    let bound = dkl_star(pmf, levels, sigma2, variant)?.per_dim;
    let margins: Vec<f64> = bound.iter().zip(&true_kl).map(|(b, k)| b - k).collect();
    let passed = margins.iter().all(|&m| m >= -CHECK_SLACK);
    Ok(UpperBoundCheck {
        bound,
        true_kl,
        margins,
        passed,
    })
}

/// Constants of the explicit cap on `bound - true KL` for one link.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapBoundConstants {
    /// `d × (T+1)`; entries with zero probability are `NaN`.
    pub c_it: Vec<Vec<f64>>,
    pub c_max: f64,
    pub c_min: f64,
    pub c0: f64,
    pub eps: f64,
    pub delta: f64,
    pub c: f64,
    pub bound: f64,
    /// Number of zero-probability entries left out of `c_min`/`c_max`.
    pub skipped: usize,
}

/// `C_it = (T+1) P_i(c_t) σ⁻¹ exp(-c_t² / (2(1-σ²)))` and the derived
/// constants, for `0 < σ² < 1`.
pub fn gap_bound_constants(pmf: &QuantizedPmf, levels: &[f64], sigma2: f64) -> Result<GapBoundConstants> {
    if !(sigma2 > 0.0 && sigma2 < 1.0) {
        return Err(Error::OutOfDomain(format!(
            "gap bound requires 0 < sigma2 < 1 (got {sigma2})"
        )));
    }
    ensure!(levels.len() == pmf.levels(), "levels do not match the pmf");
    let n_levels = levels.len();
    let t = n_levels - 1;
    let d = pmf.dims();
    let sigma = sigma2.sqrt();
    let one_minus = 1.0 - sigma2;

    let mut skipped = 0;
    let mut c_max = f64::NEG_INFINITY;
    let mut c_min = f64::INFINITY;
    let c_it: Vec<Vec<f64>> = pmf
        .rows()
        .map(|row| {
            row.iter()
                .zip(levels)
                .map(|(&p, &c)| {
                    if p > 0.0 {
                        let v = n_levels as f64 * p / sigma * (-c * c / (2.0 * one_minus)).exp();
                        c_max = c_max.max(v);
                        c_min = c_min.min(v);
                        v
                    } else {
                        skipped += 1;
                        f64::NAN
                    }
                })
                .collect()
        })
        .collect();
    if skipped > 0 {
        log::warn!("gap bound: {skipped} zero-probability entries excluded from C_min/C_max");
    }
    ensure!(c_max.is_finite() && c_min > 0.0, "pmf has no positive entries");

    let c0 = c_min.ln().abs().max(c_max.ln().abs());
    let eps = (1.0 + 3.0 * sigma + 1.0 / one_minus).powi(2) / (2.0 * sigma2 / one_minus);
    // x ln x at x = C_max e^{-eps}, in log space so tiny x does not underflow
    let log_x = c_max.ln() - eps;
    let delta = (1.0 / std::f64::consts::E).max((log_x.exp() * log_x).abs());
    let c = c0 + eps.ln() + 1.0;
    let bound = (2.0 * (t * d) as f64 / n_levels as f64) * c + 2.0 * d as f64 * delta;
    Ok(GapBoundConstants {
        c_it,
        c_max,
        c_min,
        c0,
        eps,
        delta,
        c,
        bound,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapBoundCheck {
    /// `Σ_i (bound_i - true_kl_i)`.
    pub discrepancy: f64,
    pub bound: f64,
    pub holds: bool,
    pub constants: GapBoundConstants,
}

pub fn gap_bound_check(
    mu: &[f64],
    theta: &[f64],
    spec: &QuantizerSpec,
    sigma2: f64,
    variant: KlVariant,
) -> Result<GapBoundCheck> {
    let pmf = spec.conditional_pmf(mu, theta)?;
    let constants = gap_bound_constants(&pmf, spec.levels(), sigma2)?;
    let check = upper_bound_check(mu, theta, spec, sigma2, variant)?;
    let discrepancy = check.margins.iter().sum();
    Ok(GapBoundCheck {
        discrepancy,
        bound: constants.bound,
        holds: discrepancy <= constants.bound + CHECK_SLACK,
        constants,
    })
}

/// One certification input: a link posterior, its quantizer and channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertCase {
    pub label: String,
    pub mu: Vec<f64>,
    pub theta: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub breakpoints: Vec<f64>,
    pub sigma2: f64,
}

impl CertCase {
    pub fn spec(&self) -> Result<QuantizerSpec> {
        QuantizerSpec::new(self.amplitudes.clone(), self.breakpoints.clone(), 10.0)
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2 = sigma2;
        self
    }
}

/// Random quantizer with `t` breakpoints in `[-1.5, 1.5]`, at least 1e-3
/// apart, and amplitudes in `[0.2, 2]`.
pub fn random_quantizer(rng: &mut Rng, t: usize) -> (Vec<f64>, Vec<f64>) {
    let amps = (0..t).map(|_| rng.uniform_range(0.2, 2.0)).collect();
    let mut b: Vec<f64> = (0..t).map(|_| rng.uniform_range(-1.5, 1.5)).collect();
    b.sort_by(f64::total_cmp);
    for i in 1..t {
        if b[i] - b[i - 1] < 1e-3 {
            b[i] = b[i - 1] + 1e-3;
        }
    }
    (amps, b)
}

/// `μ ∈ [-2, 2]`, `θ ∈ [0.1, 2]`, `T ∈ {1, 3, 7, 15}`, `σ² ∈ [0.0025, 0.9]`,
/// one to four dimensions.
pub fn random_case(rng: &mut Rng, label: String) -> CertCase {
    let t = [1, 3, 7, 15][rng.below(4)];
    let d = 1 + rng.below(4);
    let (amplitudes, breakpoints) = random_quantizer(rng, t);
    let mu = (0..d).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
    let theta = (0..d).map(|_| rng.uniform_range(0.1, 2.0)).collect();
    let sigma2 = rng.uniform_range(0.0025, 0.9);
    CertCase {
        label,
        mu,
        theta,
        amplitudes,
        breakpoints,
        sigma2,
    }
}

/// Fixed edge cases: symmetric one-bit link, degenerate pmf, noise near
/// both ends of the gap-bound domain, fine uniform quantizer.
pub fn edge_corpus() -> Vec<CertCase> {
    let case = |label: &str, mu: Vec<f64>, theta: Vec<f64>, t: usize, sigma2: f64| CertCase {
        label: label.into(),
        mu,
        theta,
        amplitudes: vec![1.0; t],
        breakpoints: crate::quantizer::initial_breakpoints(t),
        sigma2,
    };
    vec![
        case("one-bit-symmetric", vec![0.0], vec![0.8], 1, 0.5),
        case("degenerate-pmf", vec![-60.0, 60.0], vec![0.1, 0.1], 1, 0.5),
        case("near-certain-level", vec![0.9, -0.9], vec![0.1, 0.1], 3, 0.1),
        case("tiny-noise", vec![0.3, -1.2], vec![0.5, 1.5], 3, 0.0025),
        case("noise-near-one", vec![0.3, -1.2], vec![0.5, 1.5], 7, 0.99),
        case("fine-uniform", vec![0.0, 0.5, -1.9], vec![0.1, 1.0, 2.0], 15, 0.1),
    ]
}

/// Result of the gap check on one case.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum GapOutcome {
    Checked {
        variant: KlVariant,
        discrepancy: f64,
        bound: f64,
        holds: bool,
        constants: GapBoundConstants,
    },
    OutOfDomain {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantMargin {
    pub variant: KlVariant,
    pub worst_margin: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseOutcome {
    pub label: String,
    pub breakpoints: usize,
    pub dims: usize,
    pub sigma2: f64,
    pub true_kl: Vec<f64>,
    pub upper: Vec<VariantMargin>,
    pub gap: Vec<GapOutcome>,
    /// Set when the case could not be evaluated (e.g. quadrature failure).
    pub error: Option<String>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none()
            && self.upper.iter().all(|u| u.passed)
            && self.gap.iter().all(|g| match g {
                GapOutcome::Checked { holds, .. } => *holds,
                GapOutcome::OutOfDomain { .. } => true,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertReport {
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    pub out_of_domain: usize,
    /// Smallest `bound - true KL` over all dimensions and variants.
    pub worst_upper_margin: f64,
    /// Smallest `gap bound - discrepancy` over checked cases.
    pub worst_gap_slack: f64,
    pub outcomes: Vec<CaseOutcome>,
}

fn certify_case(case: &CertCase, variants: &[KlVariant]) -> Result<(Vec<f64>, Vec<VariantMargin>, Vec<GapOutcome>)> {
    let spec = case.spec()?;
    let pmf = spec.conditional_pmf(&case.mu, &case.theta)?;
    let levels = spec.levels();
    let true_kl = true_kl_per_dim(&pmf, levels, case.sigma2)?;
    let constants = match gap_bound_constants(&pmf, levels, case.sigma2) {
        Ok(c) => Some(c),
        Err(Error::OutOfDomain(reason)) => {
            log::info!("{}: gap check out of domain: {reason}", case.label);
            None
        }
        Err(e) => return Err(e),
    };
    let mut upper = Vec::new();
    let mut gap = Vec::new();
    for &variant in variants {
        let check = compare_bound(&pmf, levels, case.sigma2, variant, true_kl.clone())?;
        upper.push(VariantMargin {
            variant,
            worst_margin: check.worst_margin(),
            passed: check.passed,
        });
        gap.push(match &constants {
            Some(c) => {
                let discrepancy: f64 = check.margins.iter().sum();
                GapOutcome::Checked {
                    variant,
                    discrepancy,
                    bound: c.bound,
                    holds: discrepancy <= c.bound + CHECK_SLACK,
                    constants: c.clone(),
                }
            }
            None => GapOutcome::OutOfDomain {
                reason: format!("sigma2 = {} outside (0, 1)", case.sigma2),
            },
        });
    }
    Ok((true_kl, upper, gap))
}

fn outcome(case: &CertCase, variants: &[KlVariant]) -> CaseOutcome {
    let mut out = CaseOutcome {
        label: case.label.clone(),
        breakpoints: case.breakpoints.len(),
        dims: case.mu.len(),
        sigma2: case.sigma2,
        true_kl: Vec::new(),
        upper: Vec::new(),
        gap: Vec::new(),
        error: None,
    };
    match certify_case(case, variants) {
        Ok((true_kl, upper, gap)) => {
            out.true_kl = true_kl;
            out.upper = upper;
            out.gap = gap;
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

/// Runs the upper-bound and gap checks on every case. Per-case failures
/// (including quadrature non-convergence) are recorded, not propagated.
pub fn certify(cases: &[CertCase], variants: &[KlVariant]) -> CertReport {
    certify_parallel(cases, variants, 1)
}

/// [`certify`] on up to `jobs` threads; the report does not depend on
/// `jobs`.
pub fn certify_parallel(cases: &[CertCase], variants: &[KlVariant], jobs: usize) -> CertReport {
    let outcomes = crate::runtime::parallel_map(cases, jobs, |case| outcome(case, variants));
    summarize(outcomes)
}

fn summarize(outcomes: Vec<CaseOutcome>) -> CertReport {
    let worst_upper_margin = outcomes
        .iter()
        .flat_map(|o| o.upper.iter().map(|u| u.worst_margin))
        .fold(f64::INFINITY, f64::min);
    let mut worst_gap_slack = f64::INFINITY;
    let mut out_of_domain = 0;
    for o in &outcomes {
        for g in &o.gap {
            match g {
                GapOutcome::Checked { discrepancy, bound, .. } => {
                    worst_gap_slack = worst_gap_slack.min(bound - discrepancy)
                }
                GapOutcome::OutOfDomain { .. } => out_of_domain += 1,
            }
        }
    }
    let failures = outcomes.iter().filter(|o| !o.passed()).count();
    CertReport {
        passed: failures == 0,
        cases: outcomes.len(),
        failures,
        out_of_domain,
        worst_upper_margin,
        worst_gap_slack,
        outcomes,
    }
}

#[cfg(test)]
mod tests;
