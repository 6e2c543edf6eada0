//! The JSON run-configuration format: what the command-line tool reads,
//! resolves against defaults, validates, and echoes back into every output
//! it writes. Unknown keys are rejected everywhere, so a typo fails loudly
//! instead of silently falling back to a default.
//!
//! A minimal file looks like
//!
//! ```json
//! {
//!   "dataset": "trial.csv",
//!   "design": { "kind": "bernoulli" },
//!   "selection": {
//!     "batch_size": 20,
//!     "rule": { "kind": "positive", "threshold": 0.0 },
//!     "direction": "increasing"
//!   },
//!   "statistic": { "kind": "hajek" },
//!   "m": 200,
//!   "alpha": 0.05,
//!   "seed": 0
//! }
//! ```
//!
//! and every field shown is optional except `dataset` (required by the
//! commands that read data). Command-specific sections (`ci`, `study`,
//! `snr`, `becheck`) are carried alongside and ignored by commands that do
//! not use them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::design::Design;
use crate::error::{Error, Result};
use crate::infer::Orientation;
use crate::model::{self, CsvSchema, Dataset};
use crate::select::{BatchSpec, Direction, MarkerSource, SelectionConfig, StoppingRule};
use crate::simulate::{Method, MethodParams, PowerStudyConfig, TauKind};
use crate::stats::TestStatistic;
use crate::theory::DensitySpec;

fn default_m() -> usize {
    200
}
fn default_alpha() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}

pub const DEFAULT_BATCH_SIZE: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub design: DesignSpec,
    pub selection: SelectionSpec,
    pub statistic: StatisticSpec,
    pub m: usize,
    pub alpha: f64,
    pub seed: u64,
    pub orientation: Orientation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci: Option<CiSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub study: Option<StudySpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr: Option<SnrSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub becheck: Option<BeCheckSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            design: DesignSpec::default(),
            selection: SelectionSpec::default(),
            statistic: StatisticSpec::default(),
            m: default_m(),
            alpha: default_alpha(),
            seed: 0,
            orientation: Orientation::default(),
            out: None,
            ci: None,
            study: None,
            snr: None,
            becheck: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Fills remaining implicit defaults in place, so that serializing the
    /// config afterwards spells out the values a run actually used.
    pub fn resolve(&mut self) {
        if self.selection.batch_size.is_none() && self.selection.batch_count.is_none() {
            self.selection.batch_size = Some(DEFAULT_BATCH_SIZE);
        }
        if let Some(study) = &mut self.study {
            study.resolve();
        }
    }

    /// Checks the fields every command depends on.
    pub fn validate_common(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {} outside (0,1)", self.alpha)));
        }
        Ok(())
    }

    pub fn require_dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("config has no `dataset` path".into()))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        model::load_dataset(self.require_dataset()?, &CsvSchema::default())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignSpec {
    /// Independent Bernoulli draws at each unit's own propensity column.
    Bernoulli,
    /// Completely randomized: exactly `treated` of the full sample.
    Crd { treated: usize },
    /// Per-stratum completely randomized; strata come from the dataset's
    /// stratum column.
    Stratified { treated_per_stratum: BTreeMap<u32, usize> },
}

impl Default for DesignSpec {
    fn default() -> Self {
        DesignSpec::Bernoulli
    }
}

impl DesignSpec {
    pub fn to_design(&self, dataset: &Dataset) -> Result<Design> {
        let design = match self {
            DesignSpec::Bernoulli => Design::Bernoulli { propensities: dataset.propensities() },
            DesignSpec::Crd { treated } => {
                Design::CompletelyRandomized { treated: *treated, total: dataset.len() }
            }
            DesignSpec::Stratified { treated_per_stratum } => {
                let strata = dataset.strata().ok_or_else(|| {
                    Error::InvalidConfig(
                        "stratified design requires a stratum column in the dataset".into(),
                    )
                })?;
                Design::StratifiedCrd { strata, treated_per_stratum: treated_per_stratum.clone() }
            }
        };
        design.validate()?;
        Ok(design)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSpec {
    /// Mutually exclusive with `batch_count`; 20 when neither is given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_count: Option<usize>,
    pub rule: RuleSpec,
    pub direction: DirectionSpec,
}

impl SelectionSpec {
    pub fn to_config(&self) -> Result<SelectionConfig> {
        let batch = match (self.batch_size, self.batch_count) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig(
                    "batch_size and batch_count are mutually exclusive".into(),
                ))
            }
            (Some(s), None) => BatchSpec::Size(s),
            (None, Some(c)) => BatchSpec::Count(c),
            (None, None) => BatchSpec::Size(DEFAULT_BATCH_SIZE),
        };
        Ok(SelectionConfig {
            batch,
            rule: self.rule.to_rule(),
            direction: self.direction.to_direction(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleSpec {
    Positive {
        #[serde(default)]
        threshold: f64,
    },
    Zscore {
        level: f64,
    },
}

impl Default for RuleSpec {
    fn default() -> Self {
        RuleSpec::Positive { threshold: 0.0 }
    }
}

impl RuleSpec {
    pub fn to_rule(&self) -> StoppingRule {
        match *self {
            RuleSpec::Positive { threshold } => StoppingRule::PositiveEstimate { threshold },
            RuleSpec::Zscore { level } => StoppingRule::ZScore { level },
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSpec {
    #[default]
    Increasing,
    Arc,
    Multi(Vec<MarkerSpec>),
}

impl DirectionSpec {
    pub fn to_direction(&self) -> Direction {
        match self {
            DirectionSpec::Increasing => Direction::Increasing,
            DirectionSpec::Arc => Direction::Arc,
            DirectionSpec::Multi(markers) => {
                Direction::MultiBiomarker(markers.iter().map(MarkerSpec::to_marker).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerSpec {
    Biomarker,
    Covariate(usize),
}

impl MarkerSpec {
    pub fn to_marker(&self) -> MarkerSource {
        match *self {
            MarkerSpec::Biomarker => MarkerSource::Biomarker,
            MarkerSpec::Covariate(j) => MarkerSource::Covariate(j),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StatisticSpec {
    Hajek,
    ResidualSum {
        #[serde(default = "default_true")]
        standardized: bool,
    },
}

impl Default for StatisticSpec {
    fn default() -> Self {
        StatisticSpec::Hajek
    }
}

impl StatisticSpec {
    pub fn to_statistic(&self) -> TestStatistic {
        match *self {
            StatisticSpec::Hajek => TestStatistic::HajekDiffInMeans,
            StatisticSpec::ResidualSum { standardized } => {
                TestStatistic::ResidualSum { standardized }
            }
        }
    }
}

/// Grid of points `lo, lo+step, …` up to and including `hi` when it lands on
/// a step boundary.
pub fn build_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !lo.is_finite() || !hi.is_finite() || !step.is_finite() {
        return Err(Error::InvalidConfig("grid bounds and step must be finite".into()));
    }
    if lo >= hi {
        return Err(Error::InvalidConfig(format!("grid needs lo < hi, got [{lo}, {hi}]")));
    }
    if step <= 0.0 {
        return Err(Error::InvalidConfig(format!("grid step {step} must be positive")));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|k| lo + k as f64 * step).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CiSpec {
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_step: f64,
}

impl CiSpec {
    pub fn build_grid(&self) -> Result<Vec<f64>> {
        build_grid(self.grid_lo, self.grid_hi, self.grid_step)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ns: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kinds: Option<Vec<TauKind>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bonferroni_cutoffs: Option<usize>,
}

impl StudySpec {
    /// Fills the unset fields with the default study's values.
    pub fn resolve(&mut self) {
        let d = PowerStudyConfig::default();
        self.ns.get_or_insert(d.ns);
        self.deltas.get_or_insert(d.deltas);
        self.kinds.get_or_insert(d.tau_kinds);
        self.replicates.get_or_insert(d.replicates);
        self.bonferroni_cutoffs.get_or_insert(d.params.bonferroni_cutoffs);
    }

    /// Combines the study grid with the shared method parameters. The
    /// selection spec must be a plain batch size; the study's selectors are
    /// built internally.
    pub fn to_study(&self, config: &RunConfig) -> Result<PowerStudyConfig> {
        let mut resolved = self.clone();
        resolved.resolve();
        let batch_size = match (config.selection.batch_size, config.selection.batch_count) {
            (None, None) => DEFAULT_BATCH_SIZE,
            (Some(s), None) => s,
            _ => {
                return Err(Error::InvalidConfig(
                    "the power study uses a fixed batch_size, not batch_count".into(),
                ))
            }
        };
        Ok(PowerStudyConfig {
            ns: resolved.ns.unwrap(),
            deltas: resolved.deltas.unwrap(),
            tau_kinds: resolved.kinds.unwrap(),
            replicates: resolved.replicates.unwrap(),
            params: MethodParams {
                alpha: config.alpha,
                m: config.m,
                batch_size,
                bonferroni_cutoffs: resolved.bonferroni_cutoffs.unwrap(),
            },
            methods: Method::ALL.to_vec(),
            seed: config.seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnrSpec {
    pub density: DensitySpec,
    pub n: usize,
    pub sigma: f64,
    pub theta: f64,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_step: f64,
}

impl SnrSpec {
    pub fn build_grid(&self) -> Result<Vec<f64>> {
        build_grid(self.grid_lo, self.grid_hi, self.grid_step)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeCheckSpec {
    pub residuals: Vec<f64>,
    pub theta: f64,
}
