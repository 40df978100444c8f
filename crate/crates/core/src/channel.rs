//! AWGN links, PSNR conversion, and transmission latency.

use crate::error::{ensure, Result};
use crate::numerics::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SYMBOL_RATE: f64 = 9600.0;
pub const DEFAULT_BANDWIDTH_HZ: f64 = 12_500.0;

/// Peak signal power. Transmitted values are quantizer levels in `[-1, 1]`.
pub const PEAK_POWER: f64 = 1.0;

/// `σ² = P_max · 10^(-PSNR/10)`.
pub fn psnr_to_sigma2(psnr_db: f64) -> f64 {
    PEAK_POWER * 10f64.powf(-psnr_db / 10.0)
}

pub fn sigma2_to_psnr(sigma2: f64) -> f64 {
    10.0 * (PEAK_POWER / sigma2).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    sigma2: f64,
    psnr_db: f64,
    pub symbol_rate: f64,
    pub bandwidth_hz: f64,
}

impl ChannelSpec {
    pub fn from_psnr(psnr_db: f64) -> Result<Self> {
        ensure!(psnr_db.is_finite(), "PSNR must be finite");
        Ok(Self {
            sigma2: psnr_to_sigma2(psnr_db),
            psnr_db,
            symbol_rate: DEFAULT_SYMBOL_RATE,
            bandwidth_hz: DEFAULT_BANDWIDTH_HZ,
        })
    }

    pub fn from_sigma2(sigma2: f64) -> Result<Self> {
        ensure!(sigma2 > 0.0 && sigma2.is_finite(), "noise variance must be positive (got {sigma2})");
        Ok(Self {
            sigma2,
            psnr_db: sigma2_to_psnr(sigma2),
            symbol_rate: DEFAULT_SYMBOL_RATE,
            bandwidth_hz: DEFAULT_BANDWIDTH_HZ,
        })
    }

    pub fn with_symbol_rate(mut self, rate: f64) -> Result<Self> {
        ensure!(rate > 0.0, "symbol rate must be positive");
        self.symbol_rate = rate;
        Ok(self)
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    pub fn psnr_db(&self) -> f64 {
        self.psnr_db
    }

    /// Adds i.i.d. `N(0, σ²)` noise in place.
    pub fn add_noise(&self, values: &mut [f64], rng: &mut Rng) {
        let sd = self.sigma();
        for v in values {
            *v += sd * rng.standard_normal();
        }
    }
}

/// Received vector `z + ε`, `ε ~ N(0, σ² I)`.
pub fn transmit(z: &[f64], spec: &ChannelSpec, rng: &mut Rng) -> Vec<f64> {
    let mut out = z.to_vec();
    spec.add_noise(&mut out, rng);
    out
}

/// How quantized values map onto channel symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SymbolModel {
    /// One symbol per quantized value, independent of bit depth.
    #[default]
    PerValue,
    /// `ceil(log2(T+1))` one-bit symbols per quantized value.
    PerBit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub per_device_ms: f64,
    pub system_ms: f64,
    pub bits_per_value: u32,
    pub symbols_per_device: usize,
}

/// Bits needed to index `T + 1` levels.
pub fn bit_depth(breakpoints: usize) -> u32 {
    (breakpoints + 1).next_power_of_two().trailing_zeros()
}

/// Transmission latency for `devices` links each carrying a `d`-dimensional
/// feature quantized with `t` breakpoints. Parallel links finish together;
/// serialized links add up.
pub fn latency_ms(
    d: usize,
    t: usize,
    devices: usize,
    spec: &ChannelSpec,
    parallel_links: bool,
    model: SymbolModel,
) -> Result<Latency> {
    ensure!(d >= 1 && t >= 1 && devices >= 1, "d, T and device count must be at least 1");
    let bits = bit_depth(t);
    let symbols = match model {
        SymbolModel::PerValue => d,
        SymbolModel::PerBit => d * bits as usize,
    };
    let per_device_ms = 1000.0 * symbols as f64 / spec.symbol_rate;
    let system_ms = if parallel_links {
        per_device_ms
    } else {
        per_device_ms * devices as f64
    };
    Ok(Latency {
        per_device_ms,
        system_ms,
        bits_per_value: bits,
        symbols_per_device: symbols,
    })
}

/// Largest feature dimension whose per-device latency stays within `cap_ms`.
pub fn max_dim_for_latency(cap_ms: f64, spec: &ChannelSpec) -> usize {
    (cap_ms * spec.symbol_rate / 1000.0 + 1e-9).floor() as usize
}
