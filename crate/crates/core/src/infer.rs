//! Stage-2 inference: randomization tests that re-draw treatments only
//! inside the selected subgroup, holding every other assignment at its
//! observed value.
//!
//! Conditioning on the complement is what makes post-selection inference
//! exact here: a self-contained selection is a constant function of the
//! re-drawn coordinates, so under the subgroup sharp null the observed data
//! and each conditional re-draw are exchangeable. The Monte Carlo p-value
//! uses the add-one form and can never fall below 1/(1+M); the enumerated
//! variant integrates the exact conditional law and needs no correction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{
    conditional_resample, enumerate_conditional_support, replicate_rng, ConditionalLaw, Design,
};
use crate::error::{Error, Result};
use crate::model::{impute_under_null, Dataset, PotentialTable, SubgroupHypothesis};
use crate::select::{audit_self_contained, select_cutoff, SelectionConfig, SelectionOutcome};
use crate::stats::TestStatistic;

/// Which tail of the statistic counts as evidence. Ties are always extreme,
/// keeping the p-value conservative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    #[default]
    GreaterIsExtreme,
    LessIsExtreme,
}

impl Orientation {
    fn at_least_as_extreme(self, replicate: f64, observed: f64) -> bool {
        match self {
            Orientation::GreaterIsExtreme => replicate >= observed,
            Orientation::LessIsExtreme => replicate <= observed,
        }
    }
}

/// Add-one Monte Carlo p-value.
fn mc_p_value(replicates: &[f64], observed: f64, orientation: Orientation) -> f64 {
    let extreme =
        replicates.iter().filter(|&&t| orientation.at_least_as_extreme(t, observed)).count();
    (1 + extreme) as f64 / (1 + replicates.len()) as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct RandomizationTestResult {
    pub p_value: f64,
    /// None when the subgroup was empty and no statistic could be evaluated.
    pub observed_stat: Option<f64>,
    pub replicate_stats: Vec<f64>,
    pub m: usize,
    pub seed: u64,
    pub orientation: Orientation,
    /// Human-readable description of the fixed assignment set.
    pub conditioning: String,
    /// Empty subgroup: the test degenerates to p = 1 without drawing.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExactTestResult {
    pub p_value: f64,
    pub observed_stat: Option<f64>,
    /// Number of assignment vectors in the conditional support.
    pub support_size: usize,
    pub orientation: Orientation,
    pub degenerate: bool,
}

fn degenerate_mc(m: usize, seed: u64, orientation: Orientation, why: &str) -> RandomizationTestResult {
    RandomizationTestResult {
        p_value: 1.0,
        observed_stat: None,
        replicate_stats: Vec::new(),
        m,
        seed,
        orientation,
        conditioning: why.into(),
        degenerate: true,
    }
}

/// The conditional law that re-draws only the subgroup: everything else is
/// pinned at its observed assignment.
fn subgroup_law(dataset: &Dataset, design: &Design, subgroup: &[usize]) -> Result<ConditionalLaw> {
    if design.n() != dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "design covers {} units but the dataset has {}",
            design.n(),
            dataset.len()
        )));
    }
    let in_subgroup = {
        let mut mask = vec![false; dataset.len()];
        for &i in subgroup {
            mask[i] = true;
        }
        mask
    };
    let fixed_indices: Vec<usize> = (0..dataset.len()).filter(|&i| !in_subgroup[i]).collect();
    let z_obs = dataset.treatments();
    let fixed_values: Vec<u8> = fixed_indices.iter().map(|&i| z_obs[i]).collect();
    ConditionalLaw::new(design.clone(), &fixed_indices, &fixed_values)
}

fn gather<T: Copy>(values: &[T], indices: &[usize]) -> Vec<T> {
    indices.iter().map(|&i| values[i]).collect()
}

struct PreparedTest {
    law: ConditionalLaw,
    potentials: PotentialTable,
    observed: f64,
    stat: crate::stats::StatFn,
}

fn prepare(
    dataset: &Dataset,
    design: &Design,
    hyp: &SubgroupHypothesis,
    stat: &TestStatistic,
    conditional: bool,
) -> Result<PreparedTest> {
    let law = if conditional {
        subgroup_law(dataset, design, &hyp.subgroup)?
    } else {
        if design.n() != dataset.len() {
            return Err(Error::InvalidConfig(format!(
                "design covers {} units but the dataset has {}",
                design.n(),
                dataset.len()
            )));
        }
        ConditionalLaw::unconditional(design.clone())?
    };
    let potentials = impute_under_null(dataset, hyp)?;
    let stat_fn = stat.resolve(dataset, &hyp.subgroup)?;
    let z_obs = gather(&dataset.treatments(), &hyp.subgroup);
    let y_obs = gather(&dataset.outcomes(), &hyp.subgroup);
    let observed = stat_fn(&z_obs, &y_obs);
    if !observed.is_finite() {
        return Err(Error::Numerical("observed statistic is not finite".into()));
    }
    Ok(PreparedTest { law, potentials, observed, stat: stat_fn })
}

fn describe_conditioning(n: usize, subgroup_len: usize) -> String {
    format!(
        "treatments fixed at observed values for {} of {} units; {} subgroup assignments re-drawn",
        n - subgroup_len,
        n,
        subgroup_len
    )
}

fn mc_replicates(prep: &PreparedTest, subgroup: &[usize], m: usize, seed: u64) -> Vec<f64> {
    (0..m)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r as u64);
            let z_star = conditional_resample(&prep.law, &mut rng);
            let y_star = prep.potentials.realize(z_star.as_slice());
            let z_sub = gather(z_star.as_slice(), subgroup);
            let y_sub = gather(&y_star, subgroup);
            (prep.stat)(&z_sub, &y_sub)
        })
        .collect()
}

fn exact_tail(
    prep: &PreparedTest,
    subgroup: &[usize],
    orientation: Orientation,
) -> Result<(f64, usize)> {
    let support = enumerate_conditional_support(&prep.law)?;
    let mut p = 0.0;
    for (z_star, weight) in &support {
        let y_star = prep.potentials.realize(z_star.as_slice());
        let z_sub = gather(z_star.as_slice(), subgroup);
        let y_sub = gather(&y_star, subgroup);
        let t = (prep.stat)(&z_sub, &y_sub);
        if orientation.at_least_as_extreme(t, prep.observed) {
            p += weight;
        }
    }
    Ok((p.min(1.0), support.len()))
}

/// Monte Carlo conditional randomization test of the sharp null `hyp` with
/// the add-one p-value. Replicates derive from per-index RNG streams, so the
/// result is independent of evaluation order and reruns bit-identically.
pub fn conditional_rt(
    dataset: &Dataset,
    design: &Design,
    hyp: &SubgroupHypothesis,
    stat: &TestStatistic,
    m: usize,
    seed: u64,
    orientation: Orientation,
) -> Result<RandomizationTestResult> {
    if m == 0 {
        return Err(Error::InvalidConfig("at least one replicate required".into()));
    }
    if hyp.subgroup.is_empty() {
        return Ok(degenerate_mc(
            m,
            seed,
            orientation,
            "empty subgroup: all assignments fixed, trivial test",
        ));
    }
    let prep = prepare(dataset, design, hyp, stat, true)?;
    let replicate_stats = mc_replicates(&prep, &hyp.subgroup, m, seed);
    let p_value = mc_p_value(&replicate_stats, prep.observed, orientation);
    Ok(RandomizationTestResult {
        p_value,
        observed_stat: Some(prep.observed),
        replicate_stats,
        m,
        seed,
        orientation,
        conditioning: describe_conditioning(dataset.len(), hyp.subgroup.len()),
        degenerate: false,
    })
}

/// Exact conditional test: sums assignment probabilities over the enumerated
/// support. No add-one correction, since the law is integrated exactly.
pub fn exact_conditional_rt(
    dataset: &Dataset,
    design: &Design,
    hyp: &SubgroupHypothesis,
    stat: &TestStatistic,
    orientation: Orientation,
) -> Result<ExactTestResult> {
    if hyp.subgroup.is_empty() {
        return Ok(ExactTestResult {
            p_value: 1.0,
            observed_stat: None,
            support_size: 0,
            orientation,
            degenerate: true,
        });
    }
    let prep = prepare(dataset, design, hyp, stat, true)?;
    let (p_value, support_size) = exact_tail(&prep, &hyp.subgroup, orientation)?;
    Ok(ExactTestResult {
        p_value,
        observed_stat: Some(prep.observed),
        support_size,
        orientation,
        degenerate: false,
    })
}

/// Randomization test for a subgroup that was fixed before any treatment was
/// observed: the whole assignment vector is re-drawn from the raw design law,
/// no coordinates held. Only valid for pre-specified subgroups; anything
/// data-driven needs [`conditional_rt`]. Under a Bernoulli design both tests
/// coincide, since the coordinates are independent; under fixed-count designs
/// the full re-draw also varies the subgroup's treated count.
pub fn unconditional_rt(
    dataset: &Dataset,
    design: &Design,
    hyp: &SubgroupHypothesis,
    stat: &TestStatistic,
    m: usize,
    seed: u64,
    orientation: Orientation,
) -> Result<RandomizationTestResult> {
    if m == 0 {
        return Err(Error::InvalidConfig("at least one replicate required".into()));
    }
    if hyp.subgroup.is_empty() {
        return Ok(degenerate_mc(m, seed, orientation, "empty subgroup: trivial test"));
    }
    let prep = prepare(dataset, design, hyp, stat, false)?;
    let replicate_stats = mc_replicates(&prep, &hyp.subgroup, m, seed);
    let p_value = mc_p_value(&replicate_stats, prep.observed, orientation);
    Ok(RandomizationTestResult {
        p_value,
        observed_stat: Some(prep.observed),
        replicate_stats,
        m,
        seed,
        orientation,
        conditioning: "none: full assignment vector re-drawn for a pre-specified subgroup".into(),
        degenerate: false,
    })
}

/// Exact version of [`unconditional_rt`]: enumerates the design's full
/// support, so every unit counts against the enumeration cap.
pub fn exact_unconditional_rt(
    dataset: &Dataset,
    design: &Design,
    hyp: &SubgroupHypothesis,
    stat: &TestStatistic,
    orientation: Orientation,
) -> Result<ExactTestResult> {
    if hyp.subgroup.is_empty() {
        return Ok(ExactTestResult {
            p_value: 1.0,
            observed_stat: None,
            support_size: 0,
            orientation,
            degenerate: true,
        });
    }
    let prep = prepare(dataset, design, hyp, stat, false)?;
    let (p_value, support_size) = exact_tail(&prep, &hyp.subgroup, orientation)?;
    Ok(ExactTestResult {
        p_value,
        observed_stat: Some(prep.observed),
        support_size,
        orientation,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceSet {
    pub grid: Vec<f64>,
    pub p_curve: Vec<f64>,
    pub alpha: f64,
    /// Maximal runs of consecutive grid points with p ≥ α, as inclusive
    /// (low, high) grid values. May be disconnected: the conditional p-curve
    /// need not be unimodal, so every run is reported.
    pub intervals: Vec<(f64, f64)>,
}

/// Test inversion over a grid of constant effects. All grid points share one
/// set of conditional assignment draws (the law does not depend on the
/// hypothesized constant), which keeps the p-curve smooth in c.
pub fn confidence_set(
    dataset: &Dataset,
    design: &Design,
    subgroup: &[usize],
    stat: &TestStatistic,
    grid: &[f64],
    alpha: f64,
    m: usize,
    seed: u64,
) -> Result<ConfidenceSet> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty effect grid".into()));
    }
    if grid.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidConfig("non-finite effect grid value".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("effect grid must be strictly ascending".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside (0,1)")));
    }
    if m == 0 {
        return Err(Error::InvalidConfig("at least one replicate required".into()));
    }

    let p_curve: Vec<f64> = if subgroup.is_empty() {
        vec![1.0; grid.len()]
    } else {
        let law = subgroup_law(dataset, design, subgroup)?;
        let stat_fn = stat.resolve(dataset, subgroup)?;
        let z_obs_sub = gather(&dataset.treatments(), subgroup);
        let y_obs_sub = gather(&dataset.outcomes(), subgroup);
        let observed = stat_fn(&z_obs_sub, &y_obs_sub);
        if !observed.is_finite() {
            return Err(Error::Numerical("observed statistic is not finite".into()));
        }
        // Common random numbers: one pool of assignments reused at every c.
        let draws: Vec<Vec<u8>> = (0..m)
            .into_par_iter()
            .map(|r| {
                let mut rng = replicate_rng(seed, r as u64);
                conditional_resample(&law, &mut rng).0
            })
            .collect();
        grid.par_iter()
            .map(|&c| {
                let hyp = SubgroupHypothesis::new(subgroup.to_vec(), c);
                let potentials = impute_under_null(dataset, &hyp)?;
                let stats: Vec<f64> = draws
                    .iter()
                    .map(|z_star| {
                        let y_star = potentials.realize(z_star);
                        let z_sub = gather(z_star, subgroup);
                        let y_sub = gather(&y_star, subgroup);
                        stat_fn(&z_sub, &y_sub)
                    })
                    .collect();
                // Two-sided by doubling the smaller one-sided p: a one-sided
                // inversion would return half-lines, and the union bound
                // keeps the doubled form superuniform.
                let p_g = mc_p_value(&stats, observed, Orientation::GreaterIsExtreme);
                let p_l = mc_p_value(&stats, observed, Orientation::LessIsExtreme);
                Ok((2.0 * p_g.min(p_l)).min(1.0))
            })
            .collect::<Result<Vec<f64>>>()?
    };

    let mut intervals = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, &p) in p_curve.iter().enumerate() {
        if p >= alpha {
            run_start.get_or_insert(i);
        } else if let Some(s) = run_start.take() {
            intervals.push((grid[s], grid[i - 1]));
        }
    }
    if let Some(s) = run_start {
        intervals.push((grid[s], grid[grid.len() - 1]));
    }
    Ok(ConfidenceSet { grid: grid.to_vec(), p_curve, alpha, intervals })
}

/// Stage 1 and stage 2 end to end: increasing-direction selection, then the
/// conditional test of no effect on the selected subgroup. The
/// self-containedness audit runs again here so a leak between the stages is a
/// hard error, not a silent invalidation.
pub fn run_pipeline(
    dataset: &Dataset,
    design: &Design,
    selection: &SelectionConfig,
    stat: &TestStatistic,
    m: usize,
    seed: u64,
    orientation: Orientation,
) -> Result<(SelectionOutcome, RandomizationTestResult)> {
    let outcome = select_cutoff(dataset, selection)?;
    audit_self_contained(&outcome.subgroup, &outcome.revealed)?;
    let hyp = SubgroupHypothesis::new(outcome.subgroup.clone(), 0.0);
    let result = conditional_rt(dataset, design, &hyp, stat, m, seed, orientation)?;
    Ok((outcome, result))
}
