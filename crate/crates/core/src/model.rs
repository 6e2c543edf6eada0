//! Units, datasets, and subgroup hypotheses, plus CSV ingestion.
//!
//! A `Dataset` keeps its rows in file order and carries the biomarker
//! ordering as a separate permutation, so loading and re-serializing a file
//! never reorders or reformats the data. All types here are immutable after
//! construction.

use std::path::Path;

use crate::error::{Error, Result};

/// One experimental unit: observed data only. Potential outcomes live in
/// [`PotentialTable`] and exist only for simulated data.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub id: u64,
    /// S_i, the ordering variable for selection.
    pub biomarker: f64,
    /// Z_i, 0 or 1.
    pub treatment: u8,
    /// Y_i = Y_i(Z_i).
    pub outcome: f64,
    /// e_i, strictly inside (0,1).
    pub propensity: f64,
    pub stratum: Option<u32>,
    pub covariates: Vec<f64>,
}

/// Validated collection of units. Row order is whatever the caller (or file)
/// provided; `biomarker_order` is the permutation sorting rows by ascending
/// `(biomarker, id)`. Ties broken by id keep every ordering decision
/// deterministic.
#[derive(Debug, Clone)]
pub struct Dataset {
    units: Vec<Unit>,
    order: Vec<usize>,
}

impl Dataset {
    pub fn new(units: Vec<Unit>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::InvalidData("dataset has no rows".into()));
        }
        let n_cov = units[0].covariates.len();
        let has_strata = units[0].stratum.is_some();
        for (i, u) in units.iter().enumerate() {
            let row = i + 1;
            if !u.biomarker.is_finite() {
                return Err(Error::InvalidData(format!("non-finite biomarker at row {row}")));
            }
            if !u.outcome.is_finite() {
                return Err(Error::InvalidData(format!("non-finite outcome at row {row}")));
            }
            if u.treatment > 1 {
                return Err(Error::InvalidData(format!("non-binary treatment at row {row}")));
            }
            if !(u.propensity > 0.0 && u.propensity < 1.0) {
                return Err(Error::InvalidData(format!(
                    "propensity outside (0,1) at row {row}"
                )));
            }
            if u.covariates.len() != n_cov {
                return Err(Error::InvalidData(format!(
                    "row {row} has {} covariates, expected {n_cov}",
                    u.covariates.len()
                )));
            }
            if u.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidData(format!("non-finite covariate at row {row}")));
            }
            if u.stratum.is_some() != has_strata {
                return Err(Error::InvalidData(format!(
                    "stratum label missing at row {row} but present elsewhere"
                )));
            }
        }
        let mut seen: Vec<u64> = units.iter().map(|u| u.id).collect();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidData(format!("duplicate id {}", w[0])));
        }
        let mut order: Vec<usize> = (0..units.len()).collect();
        order.sort_by(|&a, &b| {
            units[a]
                .biomarker
                .partial_cmp(&units[b].biomarker)
                .expect("biomarkers validated finite")
                .then(units[a].id.cmp(&units[b].id))
        });
        Ok(Dataset { units, order })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    /// Permutation of row indices, ascending in `(biomarker, id)`.
    pub fn biomarker_order(&self) -> &[usize] {
        &self.order
    }

    pub fn biomarkers(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.biomarker).collect()
    }

    pub fn treatments(&self) -> Vec<u8> {
        self.units.iter().map(|u| u.treatment).collect()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.outcome).collect()
    }

    pub fn propensities(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.propensity).collect()
    }

    /// Per-row stratum labels, if every row has one.
    pub fn strata(&self) -> Option<Vec<u32>> {
        self.units.iter().map(|u| u.stratum).collect()
    }

    pub fn n_covariates(&self) -> usize {
        self.units[0].covariates.len()
    }

    pub fn covariate_column(&self, j: usize) -> Result<Vec<f64>> {
        if j >= self.n_covariates() {
            return Err(Error::InvalidConfig(format!(
                "covariate index {j} out of range ({} columns)",
                self.n_covariates()
            )));
        }
        Ok(self.units.iter().map(|u| u.covariates[j]).collect())
    }

    /// Copy of this dataset with treatments and outcomes replaced, everything
    /// else untouched. The two must be replaced together: an outcome is only
    /// meaningful for the assignment that produced it.
    pub fn with_observations(&self, treatments: &[u8], outcomes: &[f64]) -> Result<Dataset> {
        if treatments.len() != self.len() || outcomes.len() != self.len() {
            return Err(Error::InvalidData(
                "replacement vectors must match dataset length".into(),
            ));
        }
        let units = self
            .units
            .iter()
            .zip(treatments.iter().zip(outcomes))
            .map(|(u, (&z, &y))| Unit { treatment: z, outcome: y, ..u.clone() })
            .collect();
        Dataset::new(units)
    }
}

/// Ground-truth potential outcomes, available only when the data were
/// simulated.
#[derive(Debug, Clone)]
pub struct PotentialTable {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

impl PotentialTable {
    pub fn new(y0: Vec<f64>, y1: Vec<f64>) -> Result<Self> {
        if y0.len() != y1.len() {
            return Err(Error::InvalidData("potential outcome arms differ in length".into()));
        }
        if y0.iter().chain(&y1).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite potential outcome".into()));
        }
        Ok(PotentialTable { y0, y1 })
    }

    pub fn len(&self) -> usize {
        self.y0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y0.is_empty()
    }

    /// Observed outcomes under assignment `z`.
    pub fn realize(&self, z: &[u8]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, &zi)| if zi == 1 { self.y1[i] } else { self.y0[i] })
            .collect()
    }
}

/// H_{Ŝ,c}: every unit in `subgroup` has treatment effect exactly
/// `effect_constant`. c = 0 is the sharp null of no effect.
#[derive(Debug, Clone)]
pub struct SubgroupHypothesis {
    /// Row indices, sorted ascending.
    pub subgroup: Vec<usize>,
    pub effect_constant: f64,
}

impl SubgroupHypothesis {
    pub fn new(mut subgroup: Vec<usize>, effect_constant: f64) -> Self {
        subgroup.sort_unstable();
        subgroup.dedup();
        SubgroupHypothesis { subgroup, effect_constant }
    }

    pub fn from_mask(mask: &[bool], effect_constant: f64) -> Self {
        let subgroup = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        SubgroupHypothesis { subgroup, effect_constant }
    }
}

/// S*: the units that truly benefit. Simulation ground truth, unknowable on
/// real data. `true_cutoff` is `Some(t)` exactly when the benefiting set is
/// the strict upper set {s : s > t} (infinite for an empty set); effect
/// shapes whose benefiting region is not an upper set carry `None`.
#[derive(Debug, Clone)]
pub struct BenefitingSubgroup {
    pub indices: Vec<usize>,
    pub true_cutoff: Option<f64>,
}

/// Potential outcomes implied by a constant-effect hypothesis: for subgroup
/// units, Y(0) = Y − c·Z and Y(1) = Y + c·(1−Z). Outside the subgroup the
/// hypothesis says nothing, so both arms are filled with the observed outcome;
/// conditional tests never re-randomize those units, so the filler is never
/// read as a counterfactual.
pub fn impute_under_null(dataset: &Dataset, hyp: &SubgroupHypothesis) -> Result<PotentialTable> {
    let n = dataset.len();
    let mut y0 = dataset.outcomes();
    let mut y1 = y0.clone();
    let c = hyp.effect_constant;
    for &i in &hyp.subgroup {
        if i >= n {
            return Err(Error::InvalidData(format!(
                "subgroup index {i} out of range for dataset of {n} rows"
            )));
        }
        let u = &dataset.units()[i];
        y0[i] = u.outcome - c * f64::from(u.treatment);
        y1[i] = u.outcome + c * f64::from(1 - u.treatment);
    }
    PotentialTable::new(y0, y1)
}

/// Column names for dataset files. The defaults match the documented layout
/// `id,biomarker,treatment,outcome,propensity[,stratum][,cov_0..cov_k]`;
/// stratum and covariate columns are picked up when present.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub id: String,
    pub biomarker: String,
    pub treatment: String,
    pub outcome: String,
    pub propensity: String,
    pub stratum: String,
    pub covariate_prefix: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id: "id".into(),
            biomarker: "biomarker".into(),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            propensity: "propensity".into(),
            stratum: "stratum".into(),
            covariate_prefix: "cov_".into(),
        }
    }
}

/// Load a dataset from a headered CSV file. Rows keep file order; every
/// validation failure names the offending 1-based data row.
pub fn load_dataset(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::InvalidData(format!("cannot open {}: {e}", path.display())),
        _ => Error::InvalidData(format!("{}: {e}", path.display())),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?
        .clone();

    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidData(format!("missing column `{name}`")))
    };
    let id_col = col(&schema.id)?;
    let bio_col = col(&schema.biomarker)?;
    let trt_col = col(&schema.treatment)?;
    let out_col = col(&schema.outcome)?;
    let prop_col = col(&schema.propensity)?;
    let strat_col = headers.iter().position(|h| h == schema.stratum);

    // Covariate columns must be covariate_prefix + 0..k with no gaps, so that
    // a column index is meaningful across files.
    let mut cov_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(pos, h)| {
            h.strip_prefix(schema.covariate_prefix.as_str())
                .and_then(|suffix| suffix.parse::<usize>().ok())
                .map(|k| (k, pos))
        })
        .collect();
    cov_cols.sort_unstable();
    for (expected, &(k, _)) in cov_cols.iter().enumerate() {
        if k != expected {
            return Err(Error::InvalidData(format!(
                "covariate columns must be {}0..{}k without gaps; found {}{k}",
                schema.covariate_prefix, schema.covariate_prefix, schema.covariate_prefix
            )));
        }
    }

    let mut units = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::InvalidData(format!("row {row}: {e}")))?;
        let field = |pos: usize, name: &str| -> Result<&str> {
            record
                .get(pos)
                .ok_or_else(|| Error::InvalidData(format!("missing `{name}` at row {row}")))
        };
        let id: u64 = field(id_col, &schema.id)?
            .trim()
            .parse()
            .map_err(|_| Error::InvalidData(format!("invalid id at row {row}")))?;
        let parse_f64 = |pos: usize, name: &str| -> Result<f64> {
            let raw = field(pos, name)?;
            raw.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidData(format!("invalid {name} at row {row}")))
        };
        let biomarker = parse_f64(bio_col, &schema.biomarker)?;
        let outcome = parse_f64(out_col, &schema.outcome)?;
        let propensity = parse_f64(prop_col, &schema.propensity)?;
        let treatment = match field(trt_col, &schema.treatment)?.trim() {
            "0" => 0u8,
            "1" => 1u8,
            _ => return Err(Error::InvalidData(format!("non-binary treatment at row {row}"))),
        };
        let stratum = match strat_col {
            None => None,
            Some(pos) => Some(
                field(pos, &schema.stratum)?
                    .trim()
                    .parse::<u32>()
                    .map_err(|_| Error::InvalidData(format!("invalid stratum at row {row}")))?,
            ),
        };
        let covariates = cov_cols
            .iter()
            .map(|&(k, pos)| parse_f64(pos, &format!("{}{k}", schema.covariate_prefix)))
            .collect::<Result<Vec<f64>>>()?;
        units.push(Unit { id, biomarker, treatment, outcome, propensity, stratum, covariates });
    }
    Dataset::new(units)
}

/// Write a dataset back to CSV in row order. Floats are printed with the
/// shortest representation that parses back to the identical bits, so a
/// load/save cycle preserves numeric content exactly.
pub fn save_dataset(path: &Path, dataset: &Dataset, schema: &CsvSchema) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let has_strata = dataset.strata().is_some();
    let n_cov = dataset.n_covariates();

    let mut header = vec![
        schema.id.clone(),
        schema.biomarker.clone(),
        schema.treatment.clone(),
        schema.outcome.clone(),
        schema.propensity.clone(),
    ];
    if has_strata {
        header.push(schema.stratum.clone());
    }
    for k in 0..n_cov {
        header.push(format!("{}{k}", schema.covariate_prefix));
    }
    writer.write_record(&header)?;

    for u in dataset.units() {
        let mut fields = vec![
            u.id.to_string(),
            u.biomarker.to_string(),
            u.treatment.to_string(),
            u.outcome.to_string(),
            u.propensity.to_string(),
        ];
        if let Some(s) = u.stratum {
            fields.push(s.to_string());
        }
        for x in &u.covariates {
            fields.push(x.to_string());
        }
        writer.write_record(&fields)?;
    }
    writer.flush()?;
    Ok(())
}
