//! Training objective: Monte Carlo cross-entropy plus a closed-form upper
//! bound on each link's KL term.
//!
//! For one feature dimension with level pmf `P(c_t)`, channel variance `σ²`
//! and a standard-normal reference, the bound is
//!
//! ```text
//! D*  = -H(P) + ln(T+1) - ½ ln σ² + ½ σ² - ½ + κ Σ_t P(c_t) c_t²
//! ```
//!
//! with `κ = ½` for the tight form and `κ = 1` for the literal form. All
//! logarithms are natural.

use crate::autodiff::{Tape, Var};
use crate::channel::ChannelSpec;
use crate::error::{ensure, Error, Result};
use crate::model::PipelineOutput;
use crate::quantizer::QuantizedPmf;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlVariant {
    /// Second-moment term weighted by ½.
    #[default]
    Tight,
    /// Second-moment term weighted by 1; looser.
    Literal,
}

impl KlVariant {
    pub fn moment_weight(self) -> f64 {
        match self {
            KlVariant::Tight => 0.5,
            KlVariant::Literal => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DklStar {
    pub per_dim: Vec<f64>,
    pub total: f64,
}

/// The part of the bound that depends only on `T` and `σ²`.
fn channel_constant(levels: usize, sigma2: f64) -> f64 {
    (levels as f64).ln() - 0.5 * sigma2.ln() + 0.5 * sigma2 - 0.5
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Per-dimension upper bound for a quantized link.
pub fn dkl_star(pmf: &QuantizedPmf, levels: &[f64], sigma2: f64, variant: KlVariant) -> Result<DklStar> {
    ensure!(sigma2 > 0.0 && sigma2.is_finite(), "sigma2 must be positive (got {sigma2})");
    ensure!(
        levels.len() == pmf.levels(),
        "{} levels for a pmf over {}",
        levels.len(),
        pmf.levels()
    );
    let base = channel_constant(levels.len(), sigma2);
    let kappa = variant.moment_weight();
    let per_dim: Vec<f64> = pmf
        .rows()
        .map(|row| {
            let neg_entropy: f64 = row.iter().map(|&p| xlogx(p)).sum();
            let moment: f64 = row.iter().zip(levels).map(|(p, c)| p * c * c).sum();
            neg_entropy + base + kappa * moment
        })
        .collect();
    let total = per_dim.iter().sum();
    Ok(DklStar { per_dim, total })
}

/// `KL(N(μ, θ² + σ²) ‖ N(0, 1))` per dimension, the unquantized analogue.
pub fn gaussian_kl(mu: &[f64], theta: &[f64], sigma2: f64) -> Result<Vec<f64>> {
    ensure!(sigma2 >= 0.0, "sigma2 must be nonnegative");
    ensure!(mu.len() == theta.len(), "mu and theta lengths differ");
    Ok(mu
        .iter()
        .zip(theta)
        .map(|(m, t)| {
            let v = t * t + sigma2;
            0.5 * (m * m + v - 1.0 - v.ln())
        })
        .collect())
}

/// Tape version of [`dkl_star`]: `pmf` is `R × (T+1)`, `levels` is
/// `1 × (T+1)`; returns the `R × 1` column of per-row bounds.
pub fn dkl_star_tape(tape: &mut Tape, pmf: Var, levels: Var, sigma2: f64, variant: KlVariant) -> Result<Var> {
    ensure!(sigma2 > 0.0 && sigma2.is_finite(), "sigma2 must be positive (got {sigma2})");
    let cols = tape.shape(pmf).1;
    let xl = tape.xlogx(pmf);
    let neg_entropy = tape.sum_rows(xl);
    let c2 = tape.square(levels);
    let pc = tape.mul(pmf, c2)?;
    let moment = tape.sum_rows(pc);
    let moment = tape.scale(moment, variant.moment_weight());
    let row = tape.add(neg_entropy, moment)?;
    Ok(tape.add_const(row, channel_constant(cols, sigma2)))
}

/// Tape version of [`gaussian_kl`] on `B × d` matrices.
pub fn gaussian_kl_tape(tape: &mut Tape, mu: Var, theta: Var, sigma2: f64) -> Result<Var> {
    let m2 = tape.square(mu);
    let t2 = tape.square(theta);
    let v = tape.add_const(t2, sigma2);
    let lv = tape.log(v);
    let s = tape.add(m2, v)?;
    let s = tape.sub(s, lv)?;
    let s = tape.add_const(s, -1.0);
    Ok(tape.scale(s, 0.5))
}

/// Scalar values of one loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_term: f64,
    pub kl_terms: Vec<f64>,
    pub betas: Vec<f64>,
    pub total: f64,
}

/// Tape handles of one loss evaluation; `total` is the root to
/// differentiate.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub ce: Var,
    pub kl: Vec<Var>,
    pub total: Var,
    pub betas: Vec<f64>,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            ce_term: tape.value(self.ce).item(),
            kl_terms: self.kl.iter().map(|&v| tape.value(v).item()).collect(),
            betas: self.betas.clone(),
            total: tape.value(self.total).item(),
        }
    }
}

/// `ce + Σ_k β_k · KL_k`, where `ce` averages `-log p(y|ẑ)` over all
/// samples and noise draws and `KL_k` is the per-sample bound for link `k`
/// (summed over dimensions) averaged over the batch.
pub fn total_loss(
    tape: &mut Tape,
    out: &PipelineOutput,
    labels: &[usize],
    betas: &[f64],
    channels: &[ChannelSpec],
    variant: KlVariant,
) -> Result<LossVars> {
    let k_dev = out.devices.len();
    ensure!(out.batch >= 1 && out.draws >= 1, "empty batch or no noise draws");
    ensure!(labels.len() == out.batch, "{} labels for a batch of {}", labels.len(), out.batch);
    ensure!(
        betas.len() == k_dev && channels.len() == k_dev,
        "need one beta and one channel per device ({k_dev})"
    );
    ensure!(betas.iter().all(|&b| b >= 0.0 && b.is_finite()), "betas must be nonnegative");
    let classes = tape.shape(out.log_probs).1;
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelRange { label, classes });
    }

    let index: Vec<usize> = (0..out.draws).flat_map(|_| labels.iter().copied()).collect();
    let picked = tape.gather(out.log_probs, &index)?;
    let mean = tape.mean(picked);
    let ce = tape.neg(mean);

    let inv_batch = 1.0 / out.batch as f64;
    let mut kl = Vec::with_capacity(k_dev);
    let mut total = ce;
    for (k, dev) in out.devices.iter().enumerate() {
        let sigma2 = channels[k].sigma2();
        let per_row = match dev.quantizer {
            Some(q) => {
                let pmf = q.conditional_pmf(tape, dev.mu, dev.theta)?;
                dkl_star_tape(tape, pmf, q.levels, sigma2, variant)?
            }
            None => gaussian_kl_tape(tape, dev.mu, dev.theta, sigma2)?,
        };
        let s = tape.sum(per_row);
        let term = tape.scale(s, inv_batch);
        kl.push(term);
        let weighted = tape.scale(term, betas[k]);
        total = tape.add(total, weighted)?;
    }
    Ok(LossVars {
        ce,
        kl,
        total,
        betas: betas.to_vec(),
    })
}

#[cfg(test)]
mod tests;
