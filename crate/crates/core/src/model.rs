//! Device encoders, server decoder, and the end-to-end forward pipeline.
//!
//! Each device maps its input view to a diagonal Gaussian `N(μ, θ²)` through
//! two affine heads (`tanh` for the mean, `softplus` plus a floor for the
//! scale), draws `z = μ + θ ⊙ ε`, quantizes it, and sends it over its own
//! AWGN link. The server concatenates the received vectors in device order
//! and classifies them with a ReLU MLP ending in `log_softmax`.

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::channel::ChannelSpec;
use crate::error::{ensure, Error, Result};
use crate::numerics::Rng;
use crate::quantizer::{initial_breakpoints, QuantizerSpec, QuantizerVars, SoftMode, BREAKPOINT_GAP};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Lower bound added to the scale head output.
pub const THETA_FLOOR: f64 = 1e-6;

/// Initial bias of the scale head, `softplus(-2) ≈ 0.127`.
const THETA_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input length of each device's view.
    pub input_dims: Vec<usize>,
    /// Feature dimension `d`, shared by all devices.
    pub feature_dim: usize,
    /// Number of breakpoints `T`.
    pub breakpoints: usize,
    /// When false the quantizer is bypassed and `z` is sent as is.
    pub quantized: bool,
    pub gamma: f64,
    pub soft_mode: SoftMode,
    /// Hidden widths of the server decoder.
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.input_dims.is_empty(), "at least one device is required");
        ensure!(self.input_dims.iter().all(|&n| n >= 1), "input dimensions must be positive");
        ensure!(self.feature_dim >= 1, "feature dimension must be positive");
        ensure!(self.breakpoints >= 1, "at least one breakpoint is required");
        ensure!(self.gamma > 0.0 && self.gamma.is_finite(), "gamma must be positive");
        ensure!(self.hidden.iter().all(|&h| h >= 1), "hidden widths must be positive");
        ensure!(self.classes >= 2, "at least two classes are required");
        Ok(())
    }

    pub fn devices(&self) -> usize {
        self.input_dims.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Soft quantizer, gradients flow everywhere.
    Train,
    /// Hard quantizer; transmitted values are exact levels.
    Eval,
}

/// Per-sample encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Standard-normal draws for one forward pass. `reparam[k]` is `B × d`;
/// `channel[k]` is `(L·B) × d` and already scaled by the link's `σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub reparam: Vec<Tensor>,
    pub channel: Vec<Tensor>,
}

impl Noise {
    /// Draws all reparameterization noise first, then channel noise, device
    /// by device.
    pub fn sample(rng: &mut Rng, batch: usize, draws: usize, feature_dim: usize, channels: &[ChannelSpec]) -> Self {
        let reparam = channels
            .iter()
            .map(|_| {
                let mut t = Tensor::zeros(batch, feature_dim);
                rng.fill_standard_normal(t.data_mut());
                t
            })
            .collect();
        let channel = channels
            .iter()
            .map(|c| {
                let mut t = Tensor::zeros(batch * draws, feature_dim);
                rng.fill_standard_normal(t.data_mut());
                let sd = c.sigma();
                t.data_mut().iter_mut().for_each(|v| *v *= sd);
                t
            })
            .collect();
        Self { reparam, channel }
    }

    pub fn draws(&self) -> usize {
        match (self.reparam.first(), self.channel.first()) {
            (Some(r), Some(c)) if r.rows() > 0 => c.rows() / r.rows(),
            _ => 0,
        }
    }
}

/// Tape handles for one device.
#[derive(Debug, Clone, Copy)]
pub struct DeviceTrace {
    /// `B × d` posterior means.
    pub mu: Var,
    /// `B × d` posterior scales.
    pub theta: Var,
    /// `B × d` reparameterized samples.
    pub z: Var,
    /// `B × d` quantized samples (equal to `z` without quantization).
    pub z_tilde: Var,
    /// `(L·B) × d` received values; row `l·B + m` is draw `l` of sample `m`.
    pub z_hat: Var,
    pub quantizer: Option<QuantizerVars>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub devices: Vec<DeviceTrace>,
    /// `(L·B) × classes`, same row order as `z_hat`.
    pub log_probs: Var,
    pub batch: usize,
    pub draws: usize,
}

#[derive(Debug, Clone, Copy)]
struct DeviceSlots {
    mu_w: usize,
    mu_b: usize,
    theta_w: usize,
    theta_b: usize,
    amp: Option<usize>,
    first: Option<usize>,
    gaps: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    devices: Vec<DeviceSlots>,
    layers: Vec<(usize, usize)>,
}

fn uniform_init(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
}

/// `softplus⁻¹(y) = ln(eʸ - 1)`.
fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Model {
    /// Fresh parameters: Xavier-uniform encoder heads, He-uniform decoder
    /// layers, zero biases, uniformly spaced breakpoints and equal
    /// amplitudes.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let t = config.breakpoints;
        let mut params = ParamSet::new();
        for (k, &n) in config.input_dims.iter().enumerate() {
            let xavier = (6.0 / (n + d) as f64).sqrt();
            params.insert(format!("dev{k}.mu.w"), uniform_init(n, d, xavier, rng))?;
            params.insert(format!("dev{k}.mu.b"), Tensor::zeros(1, d))?;
            params.insert(format!("dev{k}.theta.w"), uniform_init(n, d, xavier, rng))?;
            params.insert(format!("dev{k}.theta.b"), Tensor::filled(1, d, THETA_BIAS_INIT))?;
            if config.quantized {
                let b = initial_breakpoints(t);
                params.insert(format!("dev{k}.quant.amp"), Tensor::filled(1, t, 1.0))?;
                params.insert(format!("dev{k}.quant.first"), Tensor::scalar(b[0]))?;
                if t > 1 {
                    let raw = inverse_softplus(2.0 / (t + 1) as f64 - BREAKPOINT_GAP);
                    params.insert(format!("dev{k}.quant.gaps"), Tensor::filled(1, t - 1, raw))?;
                }
            }
        }
        let mut width = d * config.devices();
        let widths: Vec<usize> = config.hidden.iter().copied().chain([config.classes]).collect();
        for (j, &out) in widths.iter().enumerate() {
            let he = (6.0 / width as f64).sqrt();
            params.insert(format!("dec{j}.w"), uniform_init(width, out, he, rng))?;
            params.insert(format!("dec{j}.b"), Tensor::zeros(1, out))?;
            width = out;
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set, checking every name and shape.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let t = config.breakpoints;
        let slot = |name: String, shape: (usize, usize)| -> Result<usize> {
            let i = params
                .index_of(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let got = params.tensor(i).shape();
            if got != shape {
                return Err(Error::Checkpoint(format!("{name} has shape {got:?}, expected {shape:?}")));
            }
            Ok(i)
        };
        let mut devices = Vec::new();
        for (k, &n) in config.input_dims.iter().enumerate() {
            let quant = config.quantized;
            devices.push(DeviceSlots {
                mu_w: slot(format!("dev{k}.mu.w"), (n, d))?,
                mu_b: slot(format!("dev{k}.mu.b"), (1, d))?,
                theta_w: slot(format!("dev{k}.theta.w"), (n, d))?,
                theta_b: slot(format!("dev{k}.theta.b"), (1, d))?,
                amp: quant.then(|| slot(format!("dev{k}.quant.amp"), (1, t))).transpose()?,
                first: quant.then(|| slot(format!("dev{k}.quant.first"), (1, 1))).transpose()?,
                gaps: (quant && t > 1)
                    .then(|| slot(format!("dev{k}.quant.gaps"), (1, t - 1)))
                    .transpose()?,
            });
        }
        let mut layers = Vec::new();
        let mut width = d * config.devices();
        for (j, &out) in config.hidden.iter().chain([&config.classes]).enumerate() {
            layers.push((slot(format!("dec{j}.w"), (width, out))?, slot(format!("dec{j}.b"), (1, out))?));
            width = out;
        }
        let expected = devices
            .iter()
            .map(|s| 4 + s.amp.is_some() as usize + s.first.is_some() as usize + s.gaps.is_some() as usize)
            .sum::<usize>()
            + 2 * layers.len();
        if expected != params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters present, {expected} expected",
                params.len()
            )));
        }
        Ok(Self {
            config,
            params,
            devices,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Plain encoder evaluation for one input of device `k`.
    pub fn encode(&self, k: usize, x: &[f64]) -> Result<GaussianPosterior> {
        ensure!(k < self.devices.len(), "device {k} out of range");
        let n = self.config.input_dims[k];
        if x.len() != n {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("input has {} values, device {k} expects {n}", x.len()),
            });
        }
        let s = self.devices[k];
        let head = |w: usize, b: usize| -> Vec<f64> {
            let w = self.params.tensor(w);
            let b = self.params.tensor(b).data();
            (0..self.config.feature_dim)
                .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w.get(i, j)).sum::<f64>())
                .collect()
        };
        let mu = head(s.mu_w, s.mu_b).into_iter().map(f64::tanh).collect();
        let theta = head(s.theta_w, s.theta_b).into_iter().map(|r| softplus(r) + THETA_FLOOR).collect();
        Ok(GaussianPosterior { mu, theta })
    }

    /// Current quantizer of device `k`, or `None` without quantization.
    pub fn quantizer(&self, k: usize) -> Result<Option<QuantizerSpec>> {
        ensure!(k < self.devices.len(), "device {k} out of range");
        let s = self.devices[k];
        let (Some(amp), Some(first)) = (s.amp, s.first) else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let a = tape.constant(self.params.tensor(amp).clone());
        let f = tape.constant(self.params.tensor(first).clone());
        let g = s.gaps.map(|g| tape.constant(self.params.tensor(g).clone()));
        let vars = QuantizerVars::build(&mut tape, a, f, g)?;
        vars.to_spec(&tape, a, self.config.gamma).map(Some)
    }

    /// Forward pass with fresh noise from `rng`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        inputs: &[Tensor],
        channels: &[ChannelSpec],
        rng: &mut Rng,
        mode: Mode,
        draws: usize,
    ) -> Result<PipelineOutput> {
        let batch = inputs.first().map_or(0, Tensor::rows);
        let noise = Noise::sample(rng, batch, draws, self.config.feature_dim, channels);
        self.forward_with_noise(tape, vars, inputs, &noise, mode)
    }

    /// Forward pass with the given noise. `vars` are the model parameters
    /// bound on `tape` (see [`ParamSet::bind`]); `inputs[k]` is `B × n_k`.
    pub fn forward_with_noise(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        inputs: &[Tensor],
        noise: &Noise,
        mode: Mode,
    ) -> Result<PipelineOutput> {
        let k_dev = self.config.devices();
        let d = self.config.feature_dim;
        ensure!(vars.len() == self.params.len(), "expected {} bound parameters", self.params.len());
        ensure!(
            inputs.len() == k_dev && noise.reparam.len() == k_dev && noise.channel.len() == k_dev,
            "expected inputs and noise for {k_dev} devices"
        );
        let batch = inputs[0].rows();
        ensure!(batch >= 1, "empty batch");
        let draws = noise.draws();
        ensure!(draws >= 1, "at least one noise draw is required");
        for k in 0..k_dev {
            let shape_ok = inputs[k].shape() == (batch, self.config.input_dims[k])
                && noise.reparam[k].shape() == (batch, d)
                && noise.channel[k].shape() == (batch * draws, d);
            if !shape_ok {
                return Err(Error::Shape {
                    op: "forward",
                    detail: format!("device {k}: inconsistent input or noise shape"),
                });
            }
        }

        let mut devices = Vec::with_capacity(k_dev);
        for (k, s) in self.devices.iter().enumerate() {
            let x = tape.constant(inputs[k].clone());
            let mu = affine(tape, x, vars[s.mu_w], vars[s.mu_b])?;
            let mu = tape.tanh(mu);
            let theta = affine(tape, x, vars[s.theta_w], vars[s.theta_b])?;
            let theta = tape.softplus(theta);
            let theta = tape.add_const(theta, THETA_FLOOR);
            let eps = tape.constant(noise.reparam[k].clone());
            let spread = tape.mul(theta, eps)?;
            let z = tape.add(mu, spread)?;

            let quantizer = match (s.amp, s.first) {
                (Some(a), Some(f)) => {
                    let q = QuantizerVars::build(tape, vars[a], vars[f], s.gaps.map(|g| vars[g]))?;
                    Some((q, vars[a]))
                }
                _ => None,
            };
            let z_tilde = match (quantizer, mode) {
                (None, _) => z,
                (Some((q, _)), Mode::Train) => q.soft_quantize(tape, z, self.config.gamma, self.config.soft_mode)?,
                (Some((q, amp)), Mode::Eval) => {
                    let spec = q.to_spec(tape, amp, self.config.gamma)?;
                    let hard = Tensor::new(batch, d, spec.hard_quantize(tape.value(z).data()))?;
                    tape.constant(hard)
                }
            };
            let repeated = tape.repeat_rows(z_tilde, draws);
            let eps = tape.constant(noise.channel[k].clone());
            let z_hat = tape.add(repeated, eps)?;
            devices.push(DeviceTrace {
                mu,
                theta,
                z,
                z_tilde,
                z_hat,
                quantizer: quantizer.map(|(q, _)| q),
            });
        }

        let received: Vec<Var> = devices.iter().map(|t| t.z_hat).collect();
        let mut h = tape.concat_cols(&received)?;
        let last = self.layers.len() - 1;
        for (j, &(w, b)) in self.layers.iter().enumerate() {
            h = affine(tape, h, vars[w], vars[b])?;
            if j < last {
                h = tape.relu(h);
            }
        }
        let log_probs = tape.log_softmax(h);
        Ok(PipelineOutput {
            devices,
            log_probs,
            batch,
            draws,
        })
    }

    /// Writes a versioned binary checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Layout: magic, format version, JSON config, then each parameter as
    /// name, rows, cols and little-endian `f64` values.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let config = serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, &config);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&out)
            .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config: ModelConfig = serde_json::from_slice(cur.bytes_field()?)
            .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
        let count = cur.u64()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = String::from_utf8(cur.bytes_field()?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rows = cur.u64()? as usize;
            let cols = cur.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= cur.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: truncated values")))?;
            let data = cur
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Tensor::new(rows, cols, data)?)?;
        }
        if cur.remaining() != 0 {
            return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
        }
        Self::from_params(config, params)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"QMLCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| Error::Checkpoint("field length overflow".into()))?;
        self.take(n)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// `z = μ + θ ⊙ ε` for one posterior.
pub fn reparameterize(post: &GaussianPosterior, rng: &mut Rng) -> Vec<f64> {
    post.mu
        .iter()
        .zip(&post.theta)
        .map(|(m, t)| m + t * rng.standard_normal())
        .collect()
}
