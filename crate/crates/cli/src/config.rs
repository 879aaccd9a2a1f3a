//! Scenario configuration: a JSON or TOML file, then command-line overrides,
//! validated as a whole before anything is computed.

use std::path::Path;

use anyhow::Context;
use hsfuse_core::degrade::{BandSelector, Kernel, NoiseDistribution, SnrDb, SpatialOperator};
use hsfuse_core::io::Dtype;
use hsfuse_core::solver::{SolverConfig, WeightLevels};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BandPick {
    #[default]
    Random,
    Even,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub rank: usize,
}

impl std::str::FromStr for SyntheticScene {
    type Err = String;

    /// `ROWSxCOLSxBANDS[:RANK]`, rank defaulting to 4.
    fn from_str(s: &str) -> Result<Self, String> {
        let (dims, rank) = match s.split_once(':') {
            Some((d, r)) => (d, r.parse().map_err(|_| format!("bad rank in {s:?}"))?),
            None => (s, 4),
        };
        let parts: Vec<usize> = dims
            .split('x')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| format!("expected ROWSxCOLSxBANDS[:RANK], got {s:?}"))?;
        match parts[..] {
            [rows, cols, bands] => Ok(SyntheticScene {
                rows,
                cols,
                bands,
                rank,
            }),
            _ => Err(format!("expected ROWSxCOLSxBANDS[:RANK], got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub kernel_size: usize,
    /// Defaults to `kernel_size / 6`.
    pub kernel_sigma: Option<f64>,
    pub downsample: usize,
    /// Explicit MS bands; otherwise `ms_band_count` are picked.
    pub ms_band_indices: Option<Vec<usize>>,
    pub ms_band_count: usize,
    /// Picks are restricted to the first `ms_band_range` bands.
    pub ms_band_range: Option<usize>,
    pub ms_band_pick: BandPick,
    /// Noise level of the simulated HS image, or the guessed SNR used to
    /// weight a real one.
    pub hs_snr_db: Option<WeightLevels>,
    pub ms_snr_db: Option<WeightLevels>,
    pub noise: NoiseDistribution,
    pub solver: SolverConfig,
    pub synthetic: Option<SyntheticScene>,
    pub snr_sweep: Option<Vec<f64>>,
    pub dtype: Dtype,
    pub uiqi_window: usize,
}

/// Used by `simulate` when no SNR is configured.
pub const DEFAULT_HS_SNR_DB: f64 = 10.0;
pub const DEFAULT_MS_SNR_DB: f64 = 50.0;

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            kernel_size: 39,
            kernel_sigma: None,
            downsample: 4,
            ms_band_indices: None,
            ms_band_count: 4,
            ms_band_range: None,
            ms_band_pick: BandPick::Random,
            hs_snr_db: None,
            ms_snr_db: None,
            noise: NoiseDistribution::Gaussian,
            solver: SolverConfig::default(),
            synthetic: None,
            snr_sweep: None,
            dtype: Dtype::F64,
            uiqi_window: hsfuse_core::metrics::DEFAULT_UIQI_WINDOW,
        }
    }
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Scenario file (.json or .toml)
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single value or comma-separated per-band list
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub hs_snr_db: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub ms_snr_db: Option<Vec<f64>>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub kernel_sigma: Option<f64>,
    #[arg(long)]
    pub downsample: Option<usize>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub ms_bands: Option<Vec<usize>>,
    #[arg(long)]
    pub ms_band_count: Option<usize>,
    #[arg(long)]
    pub subspace_dim: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Penalty as a multiple of the mean MS inverse noise variance
    #[arg(long)]
    pub mu_ms_weight: Option<f64>,
    #[arg(long)]
    pub outer_iters: Option<usize>,
    #[arg(long)]
    pub inner_iters: Option<usize>,
    #[arg(long, value_parser = parse_noise)]
    pub noise: Option<NoiseDistribution>,
    /// Output cube precision: f32 or f64
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<Dtype>,
}

fn parse_noise(s: &str) -> Result<NoiseDistribution, String> {
    s.parse()
        .map_err(|e: hsfuse_core::FusionError| e.to_string())
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    s.parse()
        .map_err(|e: hsfuse_core::FusionError| e.to_string())
}

fn levels_from_flag(v: &[f64]) -> WeightLevels {
    match v {
        [x] => WeightLevels::Scalar(*x),
        _ => WeightLevels::PerBand(v.to_vec()),
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| e.to_string()),
            _ => serde_json::from_str(&text).map_err(|e| e.to_string()),
        };
        parsed.map_err(|e| CliError::Validation(vec![format!("{}: {e}", path.display())]).into())
    }

    /// The config file (if any) with flags applied on top.
    pub fn resolve(o: &Overrides) -> anyhow::Result<Self> {
        let mut c = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = o.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(seed => seed, kernel_size => kernel_size, downsample => downsample,
             ms_band_count => ms_band_count, noise => noise, dtype => dtype,
             outer_iters => solver.outer_iters, inner_iters => solver.inner_iters,
             subspace_dim => solver.subspace_dim);
        if let Some(v) = o.kernel_sigma {
            c.kernel_sigma = Some(v);
        }
        if let Some(v) = &o.ms_bands {
            c.ms_band_indices = Some(v.clone());
        }
        if let Some(v) = &o.hs_snr_db {
            c.hs_snr_db = Some(levels_from_flag(v));
        }
        if let Some(v) = &o.ms_snr_db {
            c.ms_snr_db = Some(levels_from_flag(v));
        }
        if let Some(v) = o.eta {
            c.solver.eta = Some(v);
        }
        // a penalty flag replaces whichever rule the file chose
        if let Some(v) = o.mu {
            c.solver.mu = Some(v);
            c.solver.mu_ms_weight = None;
        }
        if let Some(v) = o.mu_ms_weight {
            c.solver.mu_ms_weight = Some(v);
            c.solver.mu = None;
        }
        Ok(c)
    }

    pub fn sigma(&self) -> f64 {
        self.kernel_sigma
            .unwrap_or_else(|| Kernel::default_sigma(self.kernel_size))
    }

    /// Checks that don't depend on input data.
    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = self
            .solver
            .validate()
            .into_iter()
            .map(|e| format!("solver: {e}"))
            .collect();
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            errs.push(format!(
                "kernel_size must be odd and positive, got {}",
                self.kernel_size
            ));
        }
        if let Some(s) = self.kernel_sigma {
            if !(s > 0.0) {
                errs.push(format!("kernel_sigma must be positive, got {s}"));
            }
        }
        if self.downsample == 0 {
            errs.push("downsample must be at least 1".into());
        }
        if self.ms_band_indices.as_ref().is_some_and(Vec::is_empty) {
            errs.push("ms_band_indices must not be empty".into());
        }
        if self.ms_band_indices.is_none() && self.ms_band_count == 0 {
            errs.push("ms_band_count must be at least 1".into());
        }
        for (name, levels) in [
            ("hs_snr_db", &self.hs_snr_db),
            ("ms_snr_db", &self.ms_snr_db),
        ] {
            let bad = match levels {
                Some(WeightLevels::Scalar(v)) => v.is_nan(),
                Some(WeightLevels::PerBand(v)) => v.is_empty() || v.iter().any(|x| x.is_nan()),
                Some(WeightLevels::Range { from, to }) => from.is_nan() || to.is_nan(),
                None => false,
            };
            if bad {
                errs.push(format!(
                    "{name} must be a number, a non-empty list or {{from, to}}"
                ));
            }
        }
        if let Some(sweep) = &self.snr_sweep {
            if sweep.is_empty() || sweep.iter().any(|v| !v.is_finite()) {
                errs.push("snr_sweep must be a non-empty list of finite dB values".into());
            }
        }
        if let Some(s) = &self.synthetic {
            if s.rows == 0 || s.cols == 0 || s.bands == 0 || s.rank == 0 || s.rank > s.bands {
                errs.push(format!(
                    "synthetic scene {}x{}x{} rank {} needs positive dims and rank <= bands",
                    s.rows, s.cols, s.bands, s.rank
                ));
            }
        }
        if self.uiqi_window == 0 {
            errs.push("uiqi_window must be at least 1".into());
        }
        errs
    }

    /// Checks against the scene the scenario will run on.
    pub fn validate_for(&self, rows: usize, cols: usize, bands: usize) -> Vec<String> {
        let mut errs = Vec::new();
        let d = self.downsample;
        if d > 0 && (rows % d != 0 || cols % d != 0) {
            let mut bad = Vec::new();
            if rows % d != 0 {
                bad.push(format!("rows = {rows}"));
            }
            if cols % d != 0 {
                bad.push(format!("cols = {cols}"));
            }
            errs.push(format!(
                "downsample {d} does not divide {}",
                bad.join(" and ")
            ));
        }
        match &self.ms_band_indices {
            Some(idx) => {
                if let Some(b) = idx.iter().find(|b| **b >= bands) {
                    errs.push(format!(
                        "ms_band_indices: band {b} out of range for {bands} bands"
                    ));
                }
                let mut sorted = idx.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != idx.len() {
                    errs.push("ms_band_indices contains duplicates".into());
                }
            }
            None => {
                let range = self.ms_band_range.unwrap_or(bands).min(bands);
                if self.ms_band_count > range {
                    errs.push(format!(
                        "ms_band_count {} exceeds the {range} bands available",
                        self.ms_band_count
                    ));
                }
            }
        }
        if self.solver.subspace_dim > bands {
            errs.push(format!(
                "solver.subspace_dim {} exceeds the {bands} HS bands",
                self.solver.subspace_dim
            ));
        }
        for (name, levels) in [
            ("hs_snr_db", &self.hs_snr_db),
            ("ms_snr_db", &self.ms_snr_db),
        ] {
            if let Some(WeightLevels::PerBand(v)) = levels {
                let want = if name == "hs_snr_db" {
                    bands
                } else {
                    self.ms_band_len(bands)
                };
                if v.len() != want && v.len() != 1 {
                    errs.push(format!("{name} lists {} levels for {want} bands", v.len()));
                }
            }
        }
        errs
    }

    fn ms_band_len(&self, bands: usize) -> usize {
        self.ms_band_indices
            .as_ref()
            .map_or(self.ms_band_count.min(bands), Vec::len)
    }

    pub fn operator(&self, rows: usize, cols: usize) -> anyhow::Result<SpatialOperator> {
        let kernel = Kernel::gaussian(self.kernel_size, self.sigma())?;
        Ok(SpatialOperator::new(kernel, self.downsample, rows, cols)?)
    }

    pub fn selector(&self, bands: usize) -> anyhow::Result<BandSelector> {
        let range = self.ms_band_range.unwrap_or(bands);
        Ok(match (&self.ms_band_indices, self.ms_band_pick) {
            (Some(idx), _) => BandSelector::select(bands, idx.clone())?,
            (None, BandPick::Even) => {
                BandSelector::evenly_spaced(bands, self.ms_band_count, range)?
            }
            (None, BandPick::Random) => BandSelector::random(
                bands,
                self.ms_band_count,
                range,
                hsfuse_core::degrade::substream_seed(self.seed, "band-pick"),
            )?,
        })
    }
}

/// Simulation SNR: one level uses the whole-cube signal power, a list or
/// range sets each band against its own power.
pub fn snr_of(levels: &WeightLevels, bands: usize) -> anyhow::Result<SnrDb> {
    Ok(match levels {
        WeightLevels::Scalar(v) => SnrDb::Global(*v),
        WeightLevels::PerBand(v) if v.len() == 1 => SnrDb::Global(v[0]),
        other => SnrDb::PerBand(other.levels(bands)?),
    })
}
