//! Mini-batch training on the quantized IB objective, evaluation with the
//! hard quantizer in the loop, and β grid search.

use crate::autodiff::{Tape, Tensor};
use crate::channel::{latency_ms, ChannelSpec, SymbolModel};
use crate::data::{Dataset, ViewMode, ViewPlan};
use crate::error::{ensure, Error, Result};
use crate::ibloss::{total_loss, KlVariant, LossBreakdown};
use crate::model::{Mode, Model, ModelConfig, Noise};
use crate::numerics::Rng;
use crate::quantizer::SoftMode;
use serde::{Deserialize, Serialize};
use std::time::Instant;

// Stream ids under the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_TRAIN_NOISE: u64 = 2;
const STREAM_EVAL: u64 = 1_000;

/// Rows per evaluation chunk.
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalQuantizer {
    #[default]
    Hard,
    Soft,
}

/// Everything a run depends on. Serialized flat, one key per field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub devices: usize,
    pub feature_dim: usize,
    pub breakpoints: usize,
    /// False bypasses the quantizer (analog transmission).
    pub quantized: bool,
    pub gamma: f64,
    pub soft_mode: SoftMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub noise_draws: usize,
    /// Weight of every link's KL term unless `betas` is set.
    pub beta: f64,
    pub betas: Option<Vec<f64>>,
    pub psnr_db: f64,
    pub psnr_per_link: Option<Vec<f64>>,
    pub learning_rate: f64,
    pub seed: u64,
    pub kl_variant: KlVariant,
    pub eval_quantizer: EvalQuantizer,
    pub eval_trials: usize,
    pub view_mode: ViewMode,
    pub hidden: Vec<usize>,
    /// Use only the first N training samples (0 = all).
    pub train_limit: usize,
    /// Use only the first N test samples (0 = all).
    pub test_limit: usize,
    /// Links transmit simultaneously (latency is per link, not summed).
    pub parallel_links: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            devices: 2,
            feature_dim: 16,
            breakpoints: 15,
            quantized: true,
            gamma: 10.0,
            soft_mode: SoftMode::Scaled,
            epochs: 10,
            batch_size: 128,
            noise_draws: 5,
            beta: 1e-3,
            betas: None,
            psnr_db: 10.0,
            psnr_per_link: None,
            learning_rate: 1e-3,
            seed: 0,
            kl_variant: KlVariant::Tight,
            eval_quantizer: EvalQuantizer::Hard,
            eval_trials: 1,
            view_mode: ViewMode::Disjoint,
            hidden: vec![1024, 256],
            train_limit: 0,
            test_limit: 0,
            parallel_links: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("devices", self.devices),
            ("feature_dim", self.feature_dim),
            ("breakpoints", self.breakpoints),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("noise_draws", self.noise_draws),
            ("eval_trials", self.eval_trials),
        ] {
            if v < 1 {
                return cfg(format!("{name} must be at least 1"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return cfg(format!("gamma must be positive (got {})", self.gamma));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return cfg(format!("learning_rate must be positive (got {})", self.learning_rate));
        }
        let betas = self.link_betas();
        if betas.len() != self.devices {
            return cfg(format!("{} betas for {} devices", betas.len(), self.devices));
        }
        if betas.iter().any(|&b| !(b >= 0.0 && b.is_finite())) {
            return cfg("betas must be nonnegative and finite".into());
        }
        let psnr = self.link_psnr();
        if psnr.len() != self.devices {
            return cfg(format!("{} PSNR values for {} devices", psnr.len(), self.devices));
        }
        if psnr.iter().any(|p| !p.is_finite()) {
            return cfg("PSNR must be finite".into());
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return cfg("hidden widths must be positive".into());
        }
        Ok(())
    }

    pub fn link_betas(&self) -> Vec<f64> {
        self.betas.clone().unwrap_or_else(|| vec![self.beta; self.devices])
    }

    pub fn link_psnr(&self) -> Vec<f64> {
        self.psnr_per_link
            .clone()
            .unwrap_or_else(|| vec![self.psnr_db; self.devices])
    }

    pub fn channels(&self) -> Result<Vec<ChannelSpec>> {
        self.link_psnr().into_iter().map(ChannelSpec::from_psnr).collect()
    }

    pub fn view_plan(&self, input_len: usize) -> Result<ViewPlan> {
        ViewPlan::new(self.devices, self.view_mode, input_len)
    }

    pub fn model_config(&self, plan: &ViewPlan, classes: usize) -> ModelConfig {
        ModelConfig {
            input_dims: vec![plan.view_width(); self.devices],
            feature_dim: self.feature_dim,
            breakpoints: self.breakpoints,
            quantized: self.quantized,
            gamma: self.gamma,
            soft_mode: self.soft_mode,
            hidden: self.hidden.clone(),
            classes,
        }
    }

    /// System latency of one inference under the per-value symbol model.
    pub fn latency_ms(&self) -> Result<f64> {
        let channel = self.channels()?[0];
        Ok(latency_ms(
            self.feature_dim,
            self.breakpoints,
            self.devices,
            &channel,
            self.parallel_links,
            SymbolModel::PerValue,
        )?
        .system_ms)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut crate::autodiff::ParamSet, grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(i).data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub per_trial: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-averaged training loss over the epoch.
    pub train: LossBreakdown,
    pub test_error: f64,
    pub test_error_std: f64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_error: EvalResult,
    /// Seconds per epoch. Not part of the reproducible record.
    #[serde(skip)]
    pub wall_clock_s: Vec<f64>,
}

/// Row-sliced training data ready for the model.
struct Prepared<'a> {
    data: &'a Dataset,
    plan: ViewPlan,
    len: usize,
}

impl<'a> Prepared<'a> {
    fn new(data: &'a Dataset, plan: &ViewPlan, limit: usize) -> Self {
        let len = if limit == 0 { data.len() } else { limit.min(data.len()) };
        Self {
            data,
            plan: plan.clone(),
            len,
        }
    }
}

/// Loss of `model` on the samples `indices` with noise drawn from `rng`.
/// Returns the breakdown and the parameter gradients.
pub fn batch_gradients(
    model: &Model,
    config: &TrainConfig,
    data: &Dataset,
    plan: &ViewPlan,
    indices: &[usize],
    rng: &mut Rng,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let channels = config.channels()?;
    let inputs = data.view_batch(plan, indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.label(i)).collect();
    let noise = Noise::sample(rng, indices.len(), config.noise_draws, config.feature_dim, &channels);
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let out = model.forward_with_noise(&mut tape, &vars, &inputs, &noise, Mode::Train)?;
    let loss = total_loss(&mut tape, &out, &labels, &config.link_betas(), &channels, config.kl_variant)?;
    let breakdown = loss.breakdown(&tape);
    let mut grads = tape.backward_leaves(loss.total)?;
    Ok((breakdown, model.params().collect_grads(&mut grads, &vars)))
}

/// Trains a fresh model. `on_epoch` sees each record as soon as it exists.
pub fn fit_with(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    ensure!(train.width() == test.width(), "train and test inputs differ in width");
    let plan = config.view_plan(train.width())?;
    let mut model = Model::new(
        config.model_config(&plan, train.classes()),
        &mut Rng::with_stream(config.seed, STREAM_INIT),
    )?;
    let data = Prepared::new(train, &plan, config.train_limit);
    ensure!(data.len >= 1, "empty training set");
    let latency = config.latency_ms()?;

    let mut shuffle_rng = Rng::with_stream(config.seed, STREAM_SHUFFLE);
    let mut noise_rng = Rng::with_stream(config.seed, STREAM_TRAIN_NOISE);
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..data.len).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut wall = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let mut last_eval = None;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut sums = LossBreakdown {
            ce_term: 0.0,
            kl_terms: vec![0.0; config.devices],
            betas: config.link_betas(),
            total: 0.0,
        };
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let (b, grads) = batch_gradients(&model, config, data.data, &data.plan, chunk, &mut noise_rng)?;
            if !b.total.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence { step, loss: b.total });
            }
            adam.step(model.params_mut(), &grads);
            sums.ce_term += b.ce_term;
            sums.total += b.total;
            for (s, k) in sums.kl_terms.iter_mut().zip(&b.kl_terms) {
                *s += k;
            }
            batches += 1;
            step += 1;
        }
        let n = batches as f64;
        sums.ce_term /= n;
        sums.total /= n;
        sums.kl_terms.iter_mut().for_each(|k| *k /= n);

        let eval = evaluate(&model, config, test, config.eval_trials)?;
        let record = EpochRecord {
            epoch,
            train: sums,
            test_error: eval.mean,
            test_error_std: eval.std,
            latency_ms: latency,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} ce {:.4} test error {:.4}",
            record.train.total,
            record.train.ce_term,
            record.test_error
        );
        wall.push(start.elapsed().as_secs_f64());
        on_epoch(&record, &model)?;
        epochs.push(record);
        last_eval = Some(eval);
    }
    let report = TrainReport {
        epochs,
        final_error: last_eval.expect("at least one epoch"),
        wall_clock_s: wall,
    };
    Ok((model, report))
}

pub fn fit(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<(Model, TrainReport)> {
    fit_with(config, train, test, |_, _| Ok(()))
}

/// Classification error with fresh channel noise per trial. Trial `t`
/// always uses the same noise stream for a given seed.
pub fn evaluate(model: &Model, config: &TrainConfig, test: &Dataset, trials: usize) -> Result<EvalResult> {
    ensure!(trials >= 1, "at least one trial is required");
    let plan = config.view_plan(test.width())?;
    let channels = config.channels()?;
    let n = if config.test_limit == 0 {
        test.len()
    } else {
        config.test_limit.min(test.len())
    };
    ensure!(n >= 1, "empty test set");
    let mode = match config.eval_quantizer {
        EvalQuantizer::Hard => Mode::Eval,
        EvalQuantizer::Soft => Mode::Train,
    };
    let mut per_trial = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = Rng::with_stream(config.seed, STREAM_EVAL + trial as u64);
        let mut wrong = 0usize;
        let indices: Vec<usize> = (0..n).collect();
        for chunk in indices.chunks(EVAL_CHUNK) {
            let inputs = test.view_batch(&plan, chunk)?;
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape);
            let out = model.forward(&mut tape, &vars, &inputs, &channels, &mut rng, mode, 1)?;
            let lp = tape.value(out.log_probs);
            for (r, &i) in chunk.iter().enumerate() {
                let row = lp.row_slice(r);
                let pred = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0;
                wrong += (pred != test.label(i)) as usize;
            }
        }
        per_trial.push(wrong as f64 / n as f64);
    }
    let mean = per_trial.iter().sum::<f64>() / trials as f64;
    let std = if trials > 1 {
        (per_trial.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalResult { mean, std, per_trial })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f64,
    pub error: Option<f64>,
    pub kl_terms: Vec<f64>,
    /// Failure message when the cell did not complete.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSweep {
    pub rows: Vec<BetaRow>,
    pub best_beta: Option<f64>,
}

/// One fit and evaluation per β (applied to every link), same seed for all
/// cells. Failed cells are recorded and the sweep continues.
pub fn beta_sweep(grid: &[f64], config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<BetaSweep> {
    ensure!(!grid.is_empty(), "beta grid is empty");
    let mut rows = Vec::with_capacity(grid.len());
    for &beta in grid {
        let mut cell = config.clone();
        cell.beta = beta;
        cell.betas = None;
        rows.push(match fit(&cell, train, test) {
            Ok((_, report)) => {
                let last = report.epochs.last().expect("at least one epoch");
                BetaRow {
                    beta,
                    error: Some(report.final_error.mean),
                    kl_terms: last.train.kl_terms.clone(),
                    failure: None,
                }
            }
            Err(e) => BetaRow {
                beta,
                error: None,
                kl_terms: Vec::new(),
                failure: Some(e.to_string()),
            },
        });
    }
    let best_beta = rows
        .iter()
        .filter_map(|r| r.error.map(|e| (r.beta, e)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(b, _)| b);
    Ok(BetaSweep { rows, best_beta })
}
