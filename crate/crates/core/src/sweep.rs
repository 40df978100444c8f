//! Experiment grids: one axis varied around a base configuration, several
//! seeds per cell, one summary row per cell.

use crate::channel::{max_dim_for_latency, ChannelSpec};
use crate::data::{Dataset, ViewMode};
use crate::error::{ensure, Error, Result};
use crate::runtime::parallel_map;
use crate::train::{fit, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Per-device latency cap used by the device-count axis.
pub const DEFAULT_LATENCY_CAP_MS: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    /// Feature dimension `d`.
    Latency,
    /// Device count `K`, with `d` set to the largest value under the cap.
    Devices,
    Psnr,
    /// Quantizer resolution, or `none` for analog transmission.
    Bits,
    Overlap,
    Beta,
}

impl Axis {
    pub const ALL: [Axis; 6] = [
        Axis::Latency,
        Axis::Devices,
        Axis::Psnr,
        Axis::Bits,
        Axis::Overlap,
        Axis::Beta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Latency => "latency",
            Axis::Devices => "devices",
            Axis::Psnr => "psnr",
            Axis::Bits => "bits",
            Axis::Overlap => "overlap",
            Axis::Beta => "beta",
        }
    }

    pub fn default_grid(self) -> Vec<String> {
        let g: &[&str] = match self {
            Axis::Latency => &["4", "8", "16", "32", "57"],
            Axis::Devices => &["2", "3", "4"],
            Axis::Psnr => &["4", "7", "10", "13"],
            Axis::Bits => &["1-bit", "2-bit", "4-bit", "none"],
            Axis::Overlap => &["disjoint", "overlap50"],
            Axis::Beta => &["1e-5", "1e-4", "1e-3", "1e-2"],
        };
        g.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis '{s}'")))
    }
}

/// One grid point: the full configuration every seed of the cell trains.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub axis: Axis,
    pub value: String,
    pub config: TrainConfig,
}

fn parse_num<T: FromStr>(axis: Axis, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad {axis} grid value '{v}'")))
}

/// `none`, a breakpoint count `T`, or `N-bit` / `Nbit` meaning `T = 2^N - 1`.
fn parse_bits(v: &str) -> Result<Option<usize>> {
    let v = v.trim();
    if v == "none" {
        return Ok(None);
    }
    let bits = v.strip_suffix("-bit").or_else(|| v.strip_suffix("bit"));
    let t = match bits {
        Some(n) => {
            let n: u32 = parse_num(Axis::Bits, n)?;
            ensure!((1..=16).contains(&n), "bit depth {n} out of range 1..=16");
            (1usize << n) - 1
        }
        None => parse_num(Axis::Bits, v)?,
    };
    if t == 0 {
        return Err(Error::Config("breakpoint count must be at least 1".into()));
    }
    Ok(Some(t))
}

/// Expands `grid` along `axis` around `base`.
pub fn expand(axis: Axis, grid: &[String], base: &TrainConfig, latency_cap_ms: f64) -> Result<Vec<Cell>> {
    if grid.is_empty() {
        return Err(Error::Config(format!("empty grid for axis {axis}")));
    }
    grid.iter()
        .enumerate()
        .map(|(index, value)| {
            let mut c = base.clone();
            match axis {
                Axis::Latency => c.feature_dim = parse_num(axis, value)?,
                Axis::Devices => {
                    c.devices = parse_num(axis, value)?;
                    c.betas = None;
                    c.psnr_per_link = None;
                    let channel = ChannelSpec::from_psnr(c.psnr_db)?;
                    let per_link = max_dim_for_latency(latency_cap_ms, &channel);
                    c.feature_dim = if c.parallel_links {
                        per_link
                    } else {
                        per_link / c.devices.max(1)
                    };
                    if c.feature_dim == 0 {
                        return Err(Error::Config(format!(
                            "latency cap {latency_cap_ms} ms leaves no feature dimension for {} devices",
                            c.devices
                        )));
                    }
                }
                Axis::Psnr => {
                    c.psnr_db = parse_num(axis, value)?;
                    c.psnr_per_link = None;
                }
                Axis::Bits => match parse_bits(value)? {
                    Some(t) => {
                        c.quantized = true;
                        c.breakpoints = t;
                    }
                    None => c.quantized = false,
                },
                Axis::Overlap => {
                    c.view_mode = match value.trim() {
                        "disjoint" => ViewMode::Disjoint,
                        "overlap50" | "overlap" => ViewMode::Overlap50,
                        other => return Err(Error::Config(format!("bad overlap grid value '{other}'"))),
                    }
                }
                Axis::Beta => {
                    c.beta = parse_num(axis, value)?;
                    c.betas = None;
                }
            }
            c.validate()?;
            Ok(Cell {
                index,
                axis,
                value: value.trim().to_string(),
                config: c,
            })
        })
        .collect()
}

/// Outcome of one (cell, seed) training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub cell: usize,
    pub value: String,
    pub seed: u64,
    pub final_error: Option<f64>,
    pub kl_terms: Vec<f64>,
    pub failure: Option<String>,
}

/// One CSV row: the cell's varied settings and its error over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub axis: String,
    pub value: String,
    pub devices: usize,
    pub feature_dim: usize,
    pub breakpoints: usize,
    pub quantized: bool,
    pub psnr_db: f64,
    pub view_mode: String,
    pub beta: f64,
    pub latency_ms: f64,
    pub seeds: usize,
    pub completed: usize,
    pub error_mean: Option<f64>,
    pub error_std: Option<f64>,
    pub failures: usize,
}

/// Seeds `base, base + 1, ...`.
pub fn seed_list(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|s| base + s).collect()
}

/// Trains every (cell, seed) pair on up to `jobs` threads. Failed runs are
/// recorded and the rest continue; results are ordered by cell, then seed.
pub fn run_cells(cells: &[Cell], seeds: &[u64], train: &Dataset, test: &Dataset, jobs: usize) -> Vec<RunOutcome> {
    let work: Vec<(usize, u64)> = cells
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c.index, s)))
        .collect();
    parallel_map(&work, jobs, |&(index, seed)| {
        let cell = &cells[index];
        let config = TrainConfig { seed, ..cell.config.clone() };
        log::info!("sweep {}={} seed {seed}: start", cell.axis, cell.value);
        match fit(&config, train, test) {
            Ok((_, report)) => {
                let last = report.epochs.last().expect("at least one epoch");
                log::info!(
                    "sweep {}={} seed {seed}: error {:.4}",
                    cell.axis,
                    cell.value,
                    report.final_error.mean
                );
                RunOutcome {
                    cell: index,
                    value: cell.value.clone(),
                    seed,
                    final_error: Some(report.final_error.mean),
                    kl_terms: last.train.kl_terms.clone(),
                    failure: None,
                }
            }
            Err(e) => {
                log::warn!("sweep {}={} seed {seed} failed: {e}", cell.axis, cell.value);
                RunOutcome {
                    cell: index,
                    value: cell.value.clone(),
                    seed,
                    final_error: None,
                    kl_terms: Vec::new(),
                    failure: Some(e.to_string()),
                }
            }
        }
    })
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

/// Mean and sample standard deviation of the final error per cell.
pub fn summarize(cells: &[Cell], seeds: usize, runs: &[RunOutcome]) -> Result<Vec<CellSummary>> {
    cells
        .iter()
        .map(|cell| {
            let mine: Vec<&RunOutcome> = runs.iter().filter(|r| r.cell == cell.index).collect();
            let errors: Vec<f64> = mine.iter().filter_map(|r| r.final_error).collect();
            let (error_mean, error_std) = mean_std(&errors);
            let c = &cell.config;
            Ok(CellSummary {
                axis: cell.axis.to_string(),
                value: cell.value.clone(),
                devices: c.devices,
                feature_dim: c.feature_dim,
                breakpoints: c.breakpoints,
                quantized: c.quantized,
                psnr_db: c.psnr_db,
                view_mode: match c.view_mode {
                    ViewMode::Disjoint => "disjoint".into(),
                    ViewMode::Overlap50 => "overlap50".into(),
                },
                beta: c.beta,
                latency_ms: c.latency_ms()?,
                seeds,
                completed: errors.len(),
                error_mean,
                error_std,
                failures: mine.len() - errors.len(),
            })
        })
        .collect()
}

pub fn write_csv<W: std::io::Write>(out: W, rows: &[CellSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    #[test]
    fn grid_expansion() {
        let base = TrainConfig::default();
        let cells = expand(Axis::Psnr, &Axis::Psnr.default_grid(), &base, 6.0).unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[2].config.psnr_db, 10.0);
        assert!(cells.iter().all(|c| c.config.devices == 2));

        let bits = expand(Axis::Bits, &Axis::Bits.default_grid(), &base, 6.0).unwrap();
        let t: Vec<(usize, bool)> = bits.iter().map(|c| (c.config.breakpoints, c.config.quantized)).collect();
        assert_eq!(t, [(1, true), (3, true), (15, true), (15, false)]);
        assert_eq!(parse_bits("7").unwrap(), Some(7));
        assert!(parse_bits("0").is_err() && parse_bits("x-bit").is_err());

        let dev = expand(Axis::Devices, &Axis::Devices.default_grid(), &base, 6.0).unwrap();
        for c in &dev {
            assert_eq!(c.config.feature_dim, 57);
            assert!(c.config.latency_ms().unwrap() <= 6.0);
        }
        let serial = TrainConfig { parallel_links: false, ..base.clone() };
        let dev = expand(Axis::Devices, &["3".into()], &serial, 6.0).unwrap();
        assert_eq!(dev[0].config.feature_dim, 19);
        assert!(dev[0].config.latency_ms().unwrap() <= 6.0);

        let ov = expand(Axis::Overlap, &Axis::Overlap.default_grid(), &base, 6.0).unwrap();
        assert_eq!(ov[1].config.view_mode, ViewMode::Overlap50);
        assert!(matches!(expand(Axis::Psnr, &[], &base, 6.0), Err(Error::Config(_))));
        assert!(matches!(expand(Axis::Overlap, &["half".into()], &base, 6.0), Err(Error::Config(_))));
        assert!(matches!("speed".parse::<Axis>(), Err(Error::Config(_))));
    }

    #[test]
    fn failed_runs_are_recorded() {
        let train = Dataset::synthetic(80, 16, 3, Split::Train, 2).unwrap();
        let test = Dataset::synthetic(40, 16, 3, Split::Test, 2).unwrap();
        let base = TrainConfig {
            feature_dim: 2,
            breakpoints: 1,
            epochs: 1,
            batch_size: 20,
            noise_draws: 1,
            hidden: vec![8],
            ..TrainConfig::default()
        };
        let mut cells = expand(Axis::Beta, &["1e-3".into(), "1e-2".into()], &base, 6.0).unwrap();
        cells[1].config.learning_rate = 1e300;
        let runs = run_cells(&cells, &seed_list(4, 2), &train, &test, 2);
        assert_eq!(runs.len(), 4);
        assert_eq!(runs.iter().map(|r| (r.cell, r.seed)).collect::<Vec<_>>(), [(0, 4), (0, 5), (1, 4), (1, 5)]);
        assert_eq!(runs, run_cells(&cells, &seed_list(4, 2), &train, &test, 1));
        let rows = summarize(&cells, 2, &runs).unwrap();
        assert_eq!((rows[0].completed, rows[0].failures), (2, 0));
        assert_eq!((rows[1].completed, rows[1].failures), (0, 2));
        assert!(rows[1].error_mean.is_none());

        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "axis,value,devices,feature_dim,breakpoints,quantized,psnr_db,view_mode,beta,latency_ms,\
             seeds,completed,error_mean,error_std,failures"
        );
        assert_eq!(text.lines().count(), 3);
    }
}
