use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Max over checked entries of `|analytic - central| / max(1, |central|)`.
    pub max_relative_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries whose one-sided differences disagree by more than the
    /// analytic/central discrepancy: the perturbation straddled a kink
    /// (relu at zero), so the central difference is not a derivative there.
    /// Only entries that would otherwise fail are classified this way.
    pub skipped_kinks: Vec<(String, usize)>,
}

/// Evaluates `f` once on a fresh tape.
fn eval<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Checks every scalar parameter of `params` against a central difference
/// with the given `step`. `f` must be deterministic: any randomness inside it
/// has to be drawn from a freshly seeded source on every call.
///
/// Fails with [`Error::Gradcheck`] naming the worst entry when the maximum
/// relative error exceeds `threshold`.
pub fn gradcheck<F>(f: F, params: &ParamSet, step: f64, threshold: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive (got {step})")));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let root = f(&mut tape, &vars)?;
    let base = tape.value(root).item();
    let grads = tape.backward(root)?;

    let mut probe = params.clone();
    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: Vec::new(),
    };
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).clone();
        for idx in 0..analytic.len() {
            let orig = probe.tensor(p).data()[idx];
            probe.tensor_mut(p).data_mut()[idx] = orig + step;
            let up = eval(&f, &probe)?;
            probe.tensor_mut(p).data_mut()[idx] = orig - step;
            let down = eval(&f, &probe)?;
            probe.tensor_mut(p).data_mut()[idx] = orig;

            let central = (up - down) / (2.0 * step);
            let a = analytic.data()[idx];
            let err = (a - central).abs() / central.abs().max(1.0);
            if err > threshold {
                let forward = (up - base) / step;
                let backward = (base - down) / step;
                if (forward - backward).abs() >= (a - central).abs() {
                    report.skipped_kinks.push((probe.name(p).to_string(), idx));
                    continue;
                }
            }
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((probe.name(p).to_string(), idx));
            }
        }
    }
    if report.max_relative_error > threshold {
        let (param, index) = report.worst.clone().unwrap_or_default();
        return Err(Error::Gradcheck {
            param,
            index,
            error: report.max_relative_error,
            threshold,
        });
    }
    Ok(report)
}
