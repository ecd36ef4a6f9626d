//! Run configuration, read from TOML (or JSON when the file ends in `.json`).
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swing_core::calibrate::FixedPointConfig;
use swing_core::lsmc::{LsmcConfig, SwingContract};
use swing_core::pde::PdeGrid;
use swing_core::ppo::TrainConfig;
use swing_core::spike::SpikeParams;

use crate::failure::Failure;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// ISO date; curve and quote dates are measured from it.
    pub valuation_date: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub market: MarketBlock,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub spike: Option<SpikeParams>,
    #[serde(default)]
    pub smile: SmileBlock,
    #[serde(default)]
    pub contract: Option<SwingContract>,
    #[serde(default)]
    pub lsmc: LsmcBlock,
    #[serde(default)]
    pub ppo: PpoBlock,
    #[serde(default)]
    pub diagnose: DiagnoseBlock,
    /// Directory of the config file; not part of the hashed content.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketBlock {
    /// `date,price` CSV of the initial forward curve.
    pub curve: PathBuf,
    /// Option quotes; PVO rows are calibrated exactly, MCO rows drive the
    /// mean-reversion fit.
    pub quotes: PathBuf,
    /// Flat continuously compounded rate.
    #[serde(default)]
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolDropTarget {
    pub front_ltd_day: u32,
    pub back_maturity_day: u32,
    pub value: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    /// Fixed mean reversion; ignored when `a_grid` is set.
    pub a: Option<f64>,
    /// Candidate mean reversions for the fit on the secondary targets.
    pub a_grid: Option<Vec<f64>>,
    pub vol_drops: Vec<VolDropTarget>,
    /// Previously calibrated local vol (`t,k,vol` CSV); skips calibration.
    pub surface: Option<PathBuf>,
    pub pde: PdeBlock,
    pub calibration: CalibrationBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeBlock {
    pub k_max: f64,
    pub nodes: usize,
    pub steps_per_day: usize,
}

impl Default for PdeBlock {
    fn default() -> Self {
        let g = PdeGrid::default();
        Self {
            k_max: g.k_max,
            nodes: g.nodes,
            steps_per_day: g.steps_per_day,
        }
    }
}

impl PdeBlock {
    pub fn grid(&self) -> PdeGrid {
        PdeGrid {
            k_max: self.k_max,
            nodes: self.nodes,
            steps_per_day: self.steps_per_day,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationBlock {
    pub tol_bp: f64,
    pub max_iter: usize,
    pub memory: usize,
    pub ridge: f64,
}

impl Default for CalibrationBlock {
    fn default() -> Self {
        let c = FixedPointConfig::default();
        Self {
            tol_bp: c.tol_bp,
            max_iter: c.max_iter,
            memory: c.memory,
            ridge: c.ridge,
        }
    }
}

impl CalibrationBlock {
    pub fn fixed_point(&self) -> FixedPointConfig {
        FixedPointConfig {
            tol_bp: self.tol_bp,
            max_iter: self.max_iter,
            memory: self.memory,
            ridge: self.ridge,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmileBlock {
    /// Delivery labels such as `1d`, `1w`, `1m`, `3m`.
    pub deliveries: Vec<String>,
    /// Option expiries, in days from valuation; delivery starts at expiry.
    pub expiry_days: Vec<u32>,
    /// Strikes as multiples of the period futures.
    pub moneyness: Vec<f64>,
}

impl Default for SmileBlock {
    fn default() -> Self {
        Self {
            deliveries: ["1d", "1m", "3m", "6m"].map(String::from).to_vec(),
            expiry_days: vec![33, 94, 186],
            moneyness: (0..=10).map(|i| 0.7 + 0.06 * i as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsmcBlock {
    pub regression_paths: usize,
    pub pricing_paths: usize,
    pub chunk_paths: usize,
    pub substeps_per_day: u32,
}

impl Default for LsmcBlock {
    fn default() -> Self {
        let c = LsmcConfig::default();
        Self {
            regression_paths: c.regression_paths,
            pricing_paths: c.pricing_paths,
            chunk_paths: c.chunk_paths,
            substeps_per_day: c.substeps_per_day,
        }
    }
}

impl LsmcBlock {
    pub fn config(&self, seed: u64) -> LsmcConfig {
        LsmcConfig {
            regression_paths: self.regression_paths,
            pricing_paths: self.pricing_paths,
            seed,
            chunk_paths: self.chunk_paths,
            substeps_per_day: self.substeps_per_day,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoBlock {
    pub train: TrainConfig,
    pub pricing_paths: usize,
    pub chunk_paths: usize,
}

impl Default for PpoBlock {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            pricing_paths: 1_000_000,
            chunk_paths: 65_536,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseBlock {
    pub paths: usize,
    /// Days at which simulated means are compared with the forwards.
    pub days: Vec<u32>,
}

impl Default for DiagnoseBlock {
    fn default() -> Self {
        Self {
            paths: 100_000,
            days: vec![30, 90, 180],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        };
        cfg.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(cfg)
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |m: String| Err(Failure::Config(m));
        if swing_core::market::parse_date(&self.valuation_date).is_none() {
            return bad(format!("valuation_date `{}` is not an ISO date", self.valuation_date));
        }
        if !self.market.rate.is_finite() {
            return bad("market.rate must be finite".into());
        }
        match (&self.model.a, &self.model.a_grid) {
            (_, Some(grid)) if grid.is_empty() || grid.iter().any(|a| a.is_nan() || *a < 0.0) => {
                return bad("model.a_grid must be non-empty and non-negative".into())
            }
            (Some(a), None) if a.is_nan() || *a < 0.0 => return bad("model.a must be non-negative".into()),
            (None, None) => return bad("model needs `a` or `a_grid`".into()),
            _ => {}
        }
        self.model
            .pde
            .grid()
            .validate()
            .map_err(|e| Failure::Config(format!("model.pde: {e}")))?;
        if let Some(s) = &self.spike {
            s.validate().map_err(|e| Failure::Config(format!("spike: {e}")))?;
        }
        if let Some(c) = &self.contract {
            c.validate().map_err(|e| Failure::Config(format!("contract: {e}")))?;
        }
        self.ppo
            .train
            .validate()
            .map_err(|e| Failure::Config(format!("ppo.train: {e}")))?;
        if self.lsmc.regression_paths == 0
            || self.lsmc.pricing_paths == 0
            || self.ppo.pricing_paths == 0
            || self.diagnose.paths < 2
        {
            return bad("path counts must be positive".into());
        }
        for d in &self.smile.deliveries {
            swing_core::market::DeliveryPeriod::from_label(d)
                .map_err(|e| Failure::Config(format!("smile.deliveries: {e}")))?;
        }
        Ok(())
    }

    /// `p` relative to the config file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.base_dir.join(p)
        } else {
            p.to_path_buf()
        }
    }

    pub fn contract(&self) -> Result<&SwingContract, Failure> {
        self.contract
            .as_ref()
            .ok_or_else(|| Failure::Config("this command needs a [contract] block".into()))
    }
}
