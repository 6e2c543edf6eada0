//! Stage-1 subgroup selection: reveal treatment assignments batch by batch
//! from the least promising end of a marker ordering, stop when a batch shows
//! benefit, keep the still-concealed remainder.
//!
//! Every selector here is self-contained: the returned subgroup never
//! contains a unit whose treatment the selector consumed. That property is
//! what licenses re-randomizing the subgroup alone in stage 2, so it is
//! audited at the end of every selection as a hard error, and
//! [`verify_self_contained`] probes it empirically by mutating concealed
//! treatments.
//!
//! The arc and multi-marker variants compose independent single-marker passes
//! over the full dataset. A unit revealed by some pass always sits on the
//! excluded side of that pass's cutoff, so pass composition preserves
//! self-containedness without any cross-pass bookkeeping.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::design::replicate_rng;
use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::stats::{hajek_contributions, hajek_diff_in_means};

/// How the sorted sample is cut into batches. The last batch absorbs any
/// remainder, so batches before it are equal-sized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BatchSpec {
    /// Fixed number of batches; size = ⌊n/count⌋.
    Count(usize),
    /// Fixed batch size; count = ⌊n/size⌋.
    Size(usize),
}

impl BatchSpec {
    /// The default ⌈n^{1/3}⌉ batch count.
    pub fn default_count(n: usize) -> BatchSpec {
        BatchSpec::Count((n as f64).powf(1.0 / 3.0).ceil() as usize)
    }

    /// Batch lengths for a sample of `n`, in revelation order.
    pub fn batch_lengths(&self, n: usize) -> Result<Vec<usize>> {
        let (count, size) = match *self {
            BatchSpec::Count(c) => {
                if c == 0 || c > n {
                    return Err(Error::InvalidConfig(format!(
                        "batch count {c} invalid for {n} units"
                    )));
                }
                (c, n / c)
            }
            BatchSpec::Size(s) => {
                if s == 0 || s > n {
                    return Err(Error::InvalidConfig(format!(
                        "batch size {s} exceeds the {n} available units"
                    )));
                }
                (n / s, s)
            }
        };
        let mut lengths = vec![size; count];
        *lengths.last_mut().unwrap() = n - size * (count - 1);
        Ok(lengths)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum StoppingRule {
    /// Stop when the batch estimate strictly exceeds the threshold
    /// (default 0).
    PositiveEstimate { threshold: f64 },
    /// Stop when 1 − Φ(√|B|·τ̂/σ̂) falls strictly below the level, with σ̂ the
    /// sample standard deviation of the per-unit contributions. A zero σ̂
    /// collapses to the sign of τ̂.
    ZScore { level: f64 },
}

impl Default for StoppingRule {
    fn default() -> Self {
        StoppingRule::PositiveEstimate { threshold: 0.0 }
    }
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StoppingRule::PositiveEstimate { threshold } => {
                if !threshold.is_finite() {
                    return Err(Error::InvalidConfig("non-finite stopping threshold".into()));
                }
            }
            StoppingRule::ZScore { level } => {
                if !(level > 0.0 && level < 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "z-score level {level} outside (0,1)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Batch estimate and stop decision for one revealed batch.
    fn evaluate(&self, z: &[u8], y: &[f64], e: &[f64]) -> Result<(f64, bool)> {
        let tau = hajek_diff_in_means(z, y, e)?;
        let stop = match *self {
            StoppingRule::PositiveEstimate { threshold } => tau > threshold,
            StoppingRule::ZScore { level } => {
                let u = hajek_contributions(z, y, e)?;
                let m = u.len() as f64;
                let mean = u.iter().sum::<f64>() / m;
                let sd = if u.len() < 2 {
                    0.0
                } else {
                    (u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
                };
                if sd == 0.0 {
                    tau > 0.0
                } else {
                    let normal = Normal::new(0.0, 1.0).expect("unit normal");
                    1.0 - normal.cdf(m.sqrt() * tau / sd) < level
                }
            }
        };
        Ok((tau, stop))
    }
}

/// Where a selection pass reads its marker values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MarkerSource {
    Biomarker,
    Covariate(usize),
}

impl MarkerSource {
    fn values(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        match *self {
            MarkerSource::Biomarker => Ok(dataset.biomarkers()),
            MarkerSource::Covariate(j) => dataset.covariate_column(j),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Direction {
    /// Benefit increases with the biomarker; one ascending pass.
    Increasing,
    /// Benefit rises then falls; ascending and descending passes bracket it.
    Arc,
    /// One pass per marker; the subgroup is the intersection.
    MultiBiomarker(Vec<MarkerSource>),
}

#[derive(Debug, Clone)]
pub struct SelectionConfig {
    pub batch: BatchSpec,
    pub rule: StoppingRule,
    pub direction: Direction,
}

impl SelectionConfig {
    pub fn increasing(batch: BatchSpec) -> Self {
        SelectionConfig { batch, rule: StoppingRule::default(), direction: Direction::Increasing }
    }
}

/// One examined batch. `batch_max_marker` is on the pass's working scale:
/// raw biomarker for ascending passes, sign-flipped for descending ones, and
/// the predicted effect (or id during fallback) for the adaptive selector.
#[derive(Debug, Clone, Serialize)]
pub struct BatchRecord {
    pub pass: usize,
    pub batch_index: usize,
    pub batch_max_marker: f64,
    pub tau_hat: f64,
    pub stopped: bool,
    /// Adaptive selector only: batch revealed in id order because a training
    /// arm was still empty.
    pub fallback: bool,
}

#[derive(Debug, Clone, Serialize)]
pub enum SelectionDetail {
    Increasing,
    Arc {
        lower: f64,
        upper: f64,
        /// Lower ≥ upper: the passes ate the whole arc; subgroup empty.
        crossed: bool,
    },
    Multi {
        cutoffs: Vec<f64>,
    },
    Adaptive {
        /// Batches revealed without a usable effect model.
        refit_skipped: usize,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionOutcome {
    /// The scalar threshold ŝ for increasing selection; other directions
    /// carry their thresholds in `detail`.
    pub cutoff: Option<f64>,
    /// Row indices, sorted ascending.
    pub subgroup: Vec<usize>,
    /// Row indices whose treatment the selection consumed, sorted ascending.
    pub revealed: Vec<usize>,
    pub trail: Vec<BatchRecord>,
    pub detail: SelectionDetail,
}

impl SelectionOutcome {
    pub fn subgroup_mask(&self, n: usize) -> Vec<bool> {
        let mut mask = vec![false; n];
        for &i in &self.subgroup {
            mask[i] = true;
        }
        mask
    }
}

/// Hard error if any revealed treatment belongs to a selected unit. Both
/// inputs sorted ascending.
pub fn audit_self_contained(subgroup: &[usize], revealed: &[usize]) -> Result<()> {
    let (mut a, mut b) = (0, 0);
    while a < subgroup.len() && b < revealed.len() {
        match subgroup[a].cmp(&revealed[b]) {
            std::cmp::Ordering::Less => a += 1,
            std::cmp::Ordering::Greater => b += 1,
            std::cmp::Ordering::Equal => {
                return Err(Error::SelectionAudit(format!(
                    "unit {} is selected but its treatment was revealed",
                    subgroup[a]
                )))
            }
        }
    }
    Ok(())
}

struct PassOutcome {
    /// Max working-marker value of the stopping batch, or of the whole sample
    /// when no batch stopped.
    cutoff: f64,
    revealed: Vec<usize>,
    records: Vec<BatchRecord>,
}

/// One ascending scan over `marker`, revealing batches until the rule fires.
fn run_pass(
    dataset: &Dataset,
    marker: &[f64],
    pass: usize,
    batch: BatchSpec,
    rule: &StoppingRule,
) -> Result<PassOutcome> {
    rule.validate()?;
    if let Some(bad) = marker.iter().find(|m| !m.is_finite()) {
        return Err(Error::InvalidData(format!("non-finite marker value {bad}")));
    }
    let n = dataset.len();
    let lengths = batch.batch_lengths(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        marker[a]
            .partial_cmp(&marker[b])
            .expect("markers checked finite")
            .then(dataset.units()[a].id.cmp(&dataset.units()[b].id))
    });

    let mut revealed = Vec::new();
    let mut records = Vec::new();
    let mut start = 0;
    for (batch_index, &len) in lengths.iter().enumerate() {
        let members = &order[start..start + len];
        start += len;
        let z: Vec<u8> = members.iter().map(|&i| dataset.units()[i].treatment).collect();
        let y: Vec<f64> = members.iter().map(|&i| dataset.units()[i].outcome).collect();
        let e: Vec<f64> = members.iter().map(|&i| dataset.units()[i].propensity).collect();
        let (tau, stopped) = rule.evaluate(&z, &y, &e)?;
        let batch_max = members.iter().map(|&i| marker[i]).fold(f64::NEG_INFINITY, f64::max);
        revealed.extend_from_slice(members);
        records.push(BatchRecord {
            pass,
            batch_index,
            batch_max_marker: batch_max,
            tau_hat: tau,
            stopped,
            fallback: false,
        });
        if stopped {
            revealed.sort_unstable();
            return Ok(PassOutcome { cutoff: batch_max, revealed, records });
        }
    }
    revealed.sort_unstable();
    let cutoff = marker.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PassOutcome { cutoff, revealed, records })
}

/// Algorithm for the increasing direction: ascending batches, stop on
/// benefit, subgroup strictly above the stopping batch's max biomarker. A
/// never-stopping scan leaves an empty subgroup with the cutoff at the max
/// biomarker, so downstream inference degrades to the trivial p-value.
pub fn select_cutoff(dataset: &Dataset, config: &SelectionConfig) -> Result<SelectionOutcome> {
    if config.direction != Direction::Increasing {
        return Err(Error::InvalidConfig("select_cutoff requires the increasing direction".into()));
    }
    let marker = dataset.biomarkers();
    let pass = run_pass(dataset, &marker, 0, config.batch, &config.rule)?;
    let subgroup: Vec<usize> = (0..dataset.len()).filter(|&i| marker[i] > pass.cutoff).collect();
    audit_self_contained(&subgroup, &pass.revealed)?;
    Ok(SelectionOutcome {
        cutoff: Some(pass.cutoff),
        subgroup,
        revealed: pass.revealed,
        trail: pass.records,
        detail: SelectionDetail::Increasing,
    })
}

/// Arc-shaped benefit: an ascending pass fixes the lower cutoff and a
/// descending (sign-flipped) pass the upper one; the subgroup is the open
/// band between them. Each pass reveals only units outside the band, so the
/// composition stays self-contained. Crossed cutoffs flag an empty outcome.
pub fn select_arc(dataset: &Dataset, config: &SelectionConfig) -> Result<SelectionOutcome> {
    if config.direction != Direction::Arc {
        return Err(Error::InvalidConfig("select_arc requires the arc direction".into()));
    }
    let marker = dataset.biomarkers();
    let flipped: Vec<f64> = marker.iter().map(|s| -s).collect();
    let lower_pass = run_pass(dataset, &marker, 0, config.batch, &config.rule)?;
    let upper_pass = run_pass(dataset, &flipped, 1, config.batch, &config.rule)?;
    let lower = lower_pass.cutoff;
    let upper = -upper_pass.cutoff;
    let crossed = lower >= upper;
    let subgroup: Vec<usize> = if crossed {
        Vec::new()
    } else {
        (0..dataset.len()).filter(|&i| marker[i] > lower && marker[i] < upper).collect()
    };
    let mut revealed = lower_pass.revealed;
    revealed.extend_from_slice(&upper_pass.revealed);
    revealed.sort_unstable();
    revealed.dedup();
    let mut trail = lower_pass.records;
    trail.extend(upper_pass.records);
    audit_self_contained(&subgroup, &revealed)?;
    Ok(SelectionOutcome {
        cutoff: None,
        subgroup,
        revealed,
        trail,
        detail: SelectionDetail::Arc { lower, upper, crossed },
    })
}

/// One independent ascending pass per marker; the subgroup is the
/// intersection of the strict upper sets. Any unit a pass reveals sits at or
/// below that pass's cutoff and is therefore outside the intersection, which
/// is why independent passes cannot leak a selected treatment; the audit
/// still runs as a hard backstop.
pub fn select_multi(dataset: &Dataset, config: &SelectionConfig) -> Result<SelectionOutcome> {
    let markers = match &config.direction {
        Direction::MultiBiomarker(m) => m,
        _ => {
            return Err(Error::InvalidConfig(
                "select_multi requires the multi-biomarker direction".into(),
            ))
        }
    };
    if markers.len() < 2 {
        return Err(Error::InvalidConfig("multi-biomarker selection needs at least 2 markers".into()));
    }
    let n = dataset.len();
    let mut in_all = vec![true; n];
    let mut revealed: Vec<usize> = Vec::new();
    let mut trail = Vec::new();
    let mut cutoffs = Vec::with_capacity(markers.len());
    for (j, source) in markers.iter().enumerate() {
        let marker = source.values(dataset)?;
        let pass = run_pass(dataset, &marker, j, config.batch, &config.rule)?;
        for i in 0..n {
            if !(marker[i] > pass.cutoff) {
                in_all[i] = false;
            }
        }
        cutoffs.push(pass.cutoff);
        revealed.extend_from_slice(&pass.revealed);
        trail.extend(pass.records);
    }
    revealed.sort_unstable();
    revealed.dedup();
    let subgroup: Vec<usize> = (0..n).filter(|&i| in_all[i]).collect();
    audit_self_contained(&subgroup, &revealed)?;
    Ok(SelectionOutcome {
        cutoff: None,
        subgroup,
        revealed,
        trail,
        detail: SelectionDetail::Multi { cutoffs },
    })
}

/// How the adaptive selector picks its seed training units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum InitRule {
    /// Every k-th unit in ascending id order, k = round(1/fraction). The
    /// deterministic default: reproducible selections without a seed.
    EveryKthById,
    /// A seeded uniform sample of round(n·fraction) units.
    SeededRandom { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct AdaptiveConfig {
    /// Share of units revealed up front as training data, in (0, 1].
    pub init_fraction: f64,
    pub batch_size: usize,
    pub rule: StoppingRule,
    pub init_rule: InitRule,
}

impl AdaptiveConfig {
    pub fn new(init_fraction: f64, batch_size: usize) -> Self {
        AdaptiveConfig {
            init_fraction,
            batch_size,
            rule: StoppingRule::default(),
            init_rule: InitRule::EveryKthById,
        }
    }
}

/// Least squares of y on intercept + covariates over the given rows. Returns
/// None when the rows cannot support the fit.
fn fit_arm(dataset: &Dataset, rows: &[usize]) -> Option<Vec<f64>> {
    let p = 1 + dataset.n_covariates();
    if rows.len() < p {
        return None;
    }
    let mut x = DMatrix::zeros(rows.len(), p);
    let mut y = DVector::zeros(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        let u = &dataset.units()[i];
        x[(r, 0)] = 1.0;
        for (j, &v) in u.covariates.iter().enumerate() {
            x[(r, 1 + j)] = v;
        }
        y[r] = u.outcome;
    }
    let svd = x.svd(true, true);
    let eps = svd.singular_values.max() * (rows.len().max(p) as f64) * f64::EPSILON;
    svd.solve(&y, eps).ok().map(|b| b.iter().copied().collect())
}

fn predict_arm(coef: &[f64], covariates: &[f64]) -> f64 {
    let mut v = coef[0];
    for (c, x) in coef[1..].iter().zip(covariates) {
        v += c * x;
    }
    v
}

/// Data-driven-marker selection: seed a training set, fit one linear model
/// per arm, reveal the lowest-predicted-effect batch, refit, repeat until a
/// batch passes the stopping rule. The subgroup is whatever was never
/// revealed. Until both arms have enough units to fit, batches fall back to
/// id order and are flagged.
pub fn select_adaptive(dataset: &Dataset, config: &AdaptiveConfig) -> Result<SelectionOutcome> {
    config.rule.validate()?;
    if dataset.n_covariates() == 0 {
        return Err(Error::InvalidConfig("adaptive selection needs covariates".into()));
    }
    if !(config.init_fraction > 0.0 && config.init_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "init fraction {} outside (0,1]",
            config.init_fraction
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let n = dataset.len();
    let mut by_id: Vec<usize> = (0..n).collect();
    by_id.sort_by_key(|&i| dataset.units()[i].id);

    let mut revealed_mask = vec![false; n];
    match config.init_rule {
        InitRule::EveryKthById => {
            let k = (1.0 / config.init_fraction).round().max(1.0) as usize;
            for pos in (0..n).step_by(k) {
                revealed_mask[by_id[pos]] = true;
            }
        }
        InitRule::SeededRandom { seed } => {
            let k = ((n as f64) * config.init_fraction).round().max(1.0) as usize;
            let mut rng = replicate_rng(seed, 0);
            for pos in rand::seq::index::sample(&mut rng, n, k.min(n)).iter() {
                revealed_mask[by_id[pos]] = true;
            }
        }
    }

    let mut trail = Vec::new();
    let mut refit_skipped = 0usize;
    let mut stopped = false;
    let mut batch_index = 0usize;
    while revealed_mask.iter().any(|r| !r) {
        let training: Vec<usize> = (0..n).filter(|&i| revealed_mask[i]).collect();
        let treated: Vec<usize> =
            training.iter().copied().filter(|&i| dataset.units()[i].treatment == 1).collect();
        let control: Vec<usize> =
            training.iter().copied().filter(|&i| dataset.units()[i].treatment == 0).collect();
        let model = match (fit_arm(dataset, &treated), fit_arm(dataset, &control)) {
            (Some(t), Some(c)) => Some((t, c)),
            _ => None,
        };

        let mut remaining: Vec<usize> = (0..n).filter(|&i| !revealed_mask[i]).collect();
        let working: Vec<f64> = match &model {
            Some((t, c)) => (0..n)
                .map(|i| {
                    let x = &dataset.units()[i].covariates;
                    predict_arm(t, x) - predict_arm(c, x)
                })
                .collect(),
            None => {
                refit_skipped += 1;
                (0..n).map(|i| dataset.units()[i].id as f64).collect()
            }
        };
        remaining.sort_by(|&a, &b| {
            working[a]
                .partial_cmp(&working[b])
                .expect("finite working marker")
                .then(dataset.units()[a].id.cmp(&dataset.units()[b].id))
        });
        let batch: Vec<usize> =
            remaining.iter().copied().take(config.batch_size.min(remaining.len())).collect();

        let z: Vec<u8> = batch.iter().map(|&i| dataset.units()[i].treatment).collect();
        let y: Vec<f64> = batch.iter().map(|&i| dataset.units()[i].outcome).collect();
        let e: Vec<f64> = batch.iter().map(|&i| dataset.units()[i].propensity).collect();
        let (tau, stop) = config.rule.evaluate(&z, &y, &e)?;
        let batch_max = batch.iter().map(|&i| working[i]).fold(f64::NEG_INFINITY, f64::max);
        for &i in &batch {
            revealed_mask[i] = true;
        }
        trail.push(BatchRecord {
            pass: 0,
            batch_index,
            batch_max_marker: batch_max,
            tau_hat: tau,
            stopped: stop,
            fallback: model.is_none(),
        });
        batch_index += 1;
        if stop {
            stopped = true;
            break;
        }
    }

    let subgroup: Vec<usize> = if stopped {
        (0..n).filter(|&i| !revealed_mask[i]).collect()
    } else {
        Vec::new()
    };
    let revealed: Vec<usize> = (0..n).filter(|&i| revealed_mask[i]).collect();
    audit_self_contained(&subgroup, &revealed)?;
    Ok(SelectionOutcome {
        cutoff: None,
        subgroup,
        revealed,
        trail,
        detail: SelectionDetail::Adaptive { refit_skipped },
    })
}

/// Dispatch on the configured direction.
pub fn select(dataset: &Dataset, config: &SelectionConfig) -> Result<SelectionOutcome> {
    match config.direction {
        Direction::Increasing => select_cutoff(dataset, config),
        Direction::Arc => select_arc(dataset, config),
        Direction::MultiBiomarker(_) => select_multi(dataset, config),
    }
}

/// Empirical probe of self-containedness: rerun the selector under random
/// rewrites of the treatments it claims not to have read. Treatments outside
/// the selected subgroup (and all outcomes) stay fixed; a self-contained
/// selector must reproduce the subgroup under every rewrite. Returns false on
/// the first witnessing mutation.
pub fn verify_self_contained(
    selector: &dyn Fn(&Dataset) -> Result<SelectionOutcome>,
    dataset: &Dataset,
    trials: usize,
    seed: u64,
) -> Result<bool> {
    let baseline = selector(dataset)?;
    if baseline.subgroup.is_empty() {
        return Ok(true);
    }
    let z0 = dataset.treatments();
    let y = dataset.outcomes();
    for trial in 0..trials {
        let mut rng = replicate_rng(seed, trial as u64);
        let mut z = z0.clone();
        // Resample until the rewrite differs somewhere, so every trial is a
        // real probe.
        loop {
            for &i in &baseline.subgroup {
                z[i] = u8::from(rng.gen_bool(0.5));
            }
            if z != z0 {
                break;
            }
        }
        let mutated = dataset.with_observations(&z, &y)?;
        let outcome = selector(&mutated)?;
        if outcome.subgroup != baseline.subgroup {
            log::debug!(
                "self-containedness violated on trial {trial}: subgroup changed from {:?} to {:?}",
                baseline.subgroup,
                outcome.subgroup
            );
            return Ok(false);
        }
    }
    Ok(true)
}
