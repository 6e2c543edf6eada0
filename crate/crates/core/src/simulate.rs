//! Super-population data generation and the four-method power comparison.
//!
//! The generator draws (S, Z, Y) with known potential outcomes and the true
//! benefiting set, so downstream studies can score any selection against the
//! ground truth. Power is the expected recovered share of the benefiting
//! subgroup gated by rejection: E[(|S* ∩ Ŝ|/|S*|) · 1{reject}].

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::design::{replicate_rng, Design};
use crate::error::{Error, Result};
use crate::infer::{conditional_rt, run_pipeline, Orientation};
use crate::model::{BenefitingSubgroup, Dataset, PotentialTable, SubgroupHypothesis, Unit};
use crate::select::{BatchSpec, SelectionConfig};
use crate::stats::TestStatistic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BiomarkerLaw {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PropensitySpec {
    Constant(f64),
    /// e(s) = `below` for s < threshold, `above` otherwise.
    Step { threshold: f64, below: f64, above: f64 },
}

impl PropensitySpec {
    fn at(&self, s: f64) -> f64 {
        match *self {
            PropensitySpec::Constant(e) => e,
            PropensitySpec::Step { threshold, below, above } => {
                if s < threshold {
                    below
                } else {
                    above
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let values = match *self {
            PropensitySpec::Constant(e) => vec![e],
            PropensitySpec::Step { below, above, .. } => vec![below, above],
        };
        if values.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(Error::InvalidConfig("propensity outside (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BaselineSpec {
    /// μ0(s) = s + s².
    SPlusSSquared,
    Constant(f64),
}

impl BaselineSpec {
    fn at(&self, s: f64) -> f64 {
        match *self {
            BaselineSpec::SPlusSSquared => s + s * s,
            BaselineSpec::Constant(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TauSpec {
    /// τ(s) = δ·s.
    Linear { delta: f64 },
    /// τ(s) = 2δ·e^{δs}/(1+e^{δs}) − δ, evaluated as δ·tanh(δs/2) to avoid
    /// overflow. Even in δ, zero at s = 0, range (−δ, δ).
    Sigmoid { delta: f64 },
    /// τ(s) = levels[j] on the j-th interval, j = #{b ∈ breakpoints : b ≤ s}.
    PiecewiseConstant { levels: Vec<f64>, breakpoints: Vec<f64> },
}

impl TauSpec {
    pub fn at(&self, s: f64) -> f64 {
        match self {
            TauSpec::Linear { delta } => delta * s,
            TauSpec::Sigmoid { delta } => delta * (delta * s / 2.0).tanh(),
            TauSpec::PiecewiseConstant { levels, breakpoints } => {
                let j = breakpoints.iter().take_while(|&&b| b <= s).count();
                levels[j]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            TauSpec::Linear { delta } | TauSpec::Sigmoid { delta } => {
                if !delta.is_finite() {
                    return Err(Error::InvalidConfig("non-finite effect slope".into()));
                }
            }
            TauSpec::PiecewiseConstant { levels, breakpoints } => {
                if levels.len() != breakpoints.len() + 1 {
                    return Err(Error::InvalidConfig(
                        "piecewise effect needs one more level than breakpoints".into(),
                    ));
                }
                if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidConfig(
                        "piecewise breakpoints must be strictly ascending".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The threshold t with {τ > 0} = {s > t}, when that upper-set form
    /// holds for every sample.
    fn upper_set_cutoff(&self) -> Option<f64> {
        match self {
            TauSpec::Linear { delta } => {
                if *delta > 0.0 {
                    Some(0.0)
                } else if *delta == 0.0 {
                    Some(f64::INFINITY)
                } else {
                    None
                }
            }
            // δ·tanh(δs/2) > 0 iff s > 0 for either sign of δ.
            TauSpec::Sigmoid { delta } => {
                if *delta == 0.0 {
                    Some(f64::INFINITY)
                } else {
                    Some(0.0)
                }
            }
            TauSpec::PiecewiseConstant { levels, breakpoints } => {
                let first_positive = levels.iter().position(|&l| l > 0.0);
                match first_positive {
                    None => Some(f64::INFINITY),
                    Some(j) if levels[j..].iter().all(|&l| l > 0.0) => {
                        if j == 0 {
                            Some(f64::NEG_INFINITY)
                        } else {
                            Some(breakpoints[j - 1])
                        }
                    }
                    Some(_) => None,
                }
            }
        }
    }
}

/// Whether Y(1) and Y(0) share one noise draw (the default: a single epsilon
/// enters both potential outcomes) or draw independently per arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NoiseMode {
    Shared,
    Independent,
}

#[derive(Debug, Clone, Serialize)]
pub struct PopulationConfig {
    pub n: usize,
    pub biomarker_law: BiomarkerLaw,
    pub propensity: PropensitySpec,
    pub mu0: BaselineSpec,
    pub tau: TauSpec,
    pub noise_sd: f64,
    pub noise_mode: NoiseMode,
}

impl PopulationConfig {
    /// The simulation-study defaults: n=400, S ~ Normal(0, sd 2), constant
    /// propensity 0.2, μ0(s) = s + s², noise sd 4, shared noise.
    pub fn study_default(tau: TauSpec) -> Self {
        PopulationConfig {
            n: 400,
            biomarker_law: BiomarkerLaw::Normal { mean: 0.0, sd: 2.0 },
            propensity: PropensitySpec::Constant(0.2),
            mu0: BaselineSpec::SPlusSSquared,
            tau,
            noise_sd: 4.0,
            noise_mode: NoiseMode::Shared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("population size must be positive".into()));
        }
        match self.biomarker_law {
            BiomarkerLaw::Normal { sd, .. } => {
                if !(sd > 0.0) {
                    return Err(Error::InvalidConfig("biomarker sd must be positive".into()));
                }
            }
            BiomarkerLaw::Uniform { low, high } => {
                if !(low < high) {
                    return Err(Error::InvalidConfig("uniform biomarker needs low < high".into()));
                }
            }
        }
        self.propensity.validate()?;
        self.tau.validate()?;
        if !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidConfig("noise sd must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One draw from the super-population: the observable dataset plus the
/// ground truth (both potential outcomes and the benefiting set).
pub fn generate(
    config: &PopulationConfig,
    seed: u64,
) -> Result<(Dataset, PotentialTable, BenefitingSubgroup)> {
    config.validate()?;
    let mut rng = replicate_rng(seed, 0);

    let n = config.n;
    let mut units = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut benefiting = Vec::new();
    for i in 0..n {
        let s = match config.biomarker_law {
            BiomarkerLaw::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            BiomarkerLaw::Uniform { low, high } => rng.gen_range(low..high),
        };
        let e = config.propensity.at(s);
        let z = u8::from(rng.gen_bool(e));
        let tau = config.tau.at(s);
        let base = config.mu0.at(s);
        let (y0_i, y1_i) = match config.noise_mode {
            NoiseMode::Shared => {
                let eps = config.noise_sd * rng.sample::<f64, _>(StandardNormal);
                (base + eps, base + tau + eps)
            }
            NoiseMode::Independent => {
                let eps0 = config.noise_sd * rng.sample::<f64, _>(StandardNormal);
                let eps1 = config.noise_sd * rng.sample::<f64, _>(StandardNormal);
                (base + eps0, base + tau + eps1)
            }
        };
        let y = if z == 1 { y1_i } else { y0_i };
        if tau > 0.0 {
            benefiting.push(i);
        }
        units.push(Unit {
            id: i as u64,
            biomarker: s,
            treatment: z,
            outcome: y,
            propensity: e,
            stratum: None,
            covariates: vec![],
        });
        y0.push(y0_i);
        y1.push(y1_i);
    }
    let dataset = Dataset::new(units)?;
    let potentials = PotentialTable::new(y0, y1)?;
    let truth =
        BenefitingSubgroup { indices: benefiting, true_cutoff: config.tau.upper_set_cutoff() };
    Ok((dataset, potentials, truth))
}

/// Tuning shared by the four study methods.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MethodParams {
    pub alpha: f64,
    pub m: usize,
    pub batch_size: usize,
    pub bonferroni_cutoffs: usize,
}

impl Default for MethodParams {
    fn default() -> Self {
        MethodParams { alpha: 0.05, m: 200, batch_size: 20, bonferroni_cutoffs: 20 }
    }
}

impl MethodParams {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {} outside (0,1)", self.alpha)));
        }
        if self.m == 0 || self.batch_size == 0 || self.bonferroni_cutoffs == 0 {
            return Err(Error::InvalidConfig("replicates, batch size, and cutoff count must be positive".into()));
        }
        Ok(())
    }
}

fn bernoulli_design(dataset: &Dataset) -> Design {
    Design::Bernoulli { propensities: dataset.propensities() }
}

/// Batch selection then the conditional test of no subgroup effect.
pub fn method_art(
    dataset: &Dataset,
    _truth: &BenefitingSubgroup,
    params: &MethodParams,
    seed: u64,
) -> Result<(Vec<usize>, bool)> {
    params.validate()?;
    let cfg = SelectionConfig::increasing(BatchSpec::Size(params.batch_size));
    let (outcome, result) = run_pipeline(
        dataset,
        &bernoulli_design(dataset),
        &cfg,
        &TestStatistic::HajekDiffInMeans,
        params.m,
        seed,
        Orientation::GreaterIsExtreme,
    )?;
    Ok((outcome.subgroup, result.p_value <= params.alpha))
}

/// Randomization test on the true benefiting subgroup, which no feasible
/// method can observe; the power ceiling.
pub fn method_oracle(
    dataset: &Dataset,
    truth: &BenefitingSubgroup,
    params: &MethodParams,
    seed: u64,
) -> Result<(Vec<usize>, bool)> {
    params.validate()?;
    let hyp = SubgroupHypothesis::new(truth.indices.clone(), 0.0);
    let result = conditional_rt(
        dataset,
        &bernoulli_design(dataset),
        &hyp,
        &TestStatistic::HajekDiffInMeans,
        params.m,
        seed,
        Orientation::GreaterIsExtreme,
    )?;
    Ok((truth.indices.clone(), result.p_value <= params.alpha))
}

/// Sample splitting: learn a monotone-rectified effect curve on fold 1, pick
/// the cutoff where it turns positive, and test fold-2 units above it. The
/// method's subgroup is those fold-2 units only; fold 1 is spent.
pub fn method_split(
    dataset: &Dataset,
    _truth: &BenefitingSubgroup,
    params: &MethodParams,
    seed: u64,
) -> Result<(Vec<usize>, bool)> {
    params.validate()?;
    let n = dataset.len();
    // Utility draws live on a stream no replicate index reaches.
    let mut util_rng = replicate_rng(seed, u64::MAX);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut util_rng);
    let (fold1, fold2) = perm.split_at(n / 2);

    // Per-arm least squares of y on (1, s) over fold 1.
    let fit = |arm: u8| -> Option<(f64, f64)> {
        let rows: Vec<&Unit> =
            fold1.iter().map(|&i| &dataset.units()[i]).filter(|u| u.treatment == arm).collect();
        if rows.len() < 2 {
            return None;
        }
        let m = rows.len() as f64;
        let sx: f64 = rows.iter().map(|u| u.biomarker).sum();
        let sy: f64 = rows.iter().map(|u| u.outcome).sum();
        let sxx: f64 = rows.iter().map(|u| u.biomarker * u.biomarker).sum();
        let sxy: f64 = rows.iter().map(|u| u.biomarker * u.outcome).sum();
        let det = m * sxx - sx * sx;
        if det.abs() < 1e-12 {
            return None;
        }
        let slope = (m * sxy - sx * sy) / det;
        let intercept = (sy - slope * sx) / m;
        Some((intercept, slope))
    };
    let (treated_fit, control_fit) = match (fit(1), fit(0)) {
        (Some(t), Some(c)) => (t, c),
        _ => {
            log::warn!("sample splitting: degenerate fold (missing arm or collapsed biomarker)");
            return Ok((Vec::new(), false));
        }
    };
    let tau_tilde = |s: f64| {
        (treated_fit.0 + treated_fit.1 * s) - (control_fit.0 + control_fit.1 * s)
    };

    // Rectify to a nondecreasing curve over fold-1 biomarkers (running max
    // from the left), then cut where it last sits at or below zero.
    let mut fold1_s: Vec<f64> = fold1.iter().map(|&i| dataset.units()[i].biomarker).collect();
    fold1_s.sort_by(|a, b| a.partial_cmp(b).expect("finite biomarkers"));
    let mut cutoff = f64::NEG_INFINITY;
    let mut running = f64::NEG_INFINITY;
    for &s in &fold1_s {
        running = running.max(tau_tilde(s));
        if running <= 0.0 {
            cutoff = s;
        }
    }

    let subgroup: Vec<usize> = {
        let mut sel: Vec<usize> =
            fold2.iter().copied().filter(|&i| dataset.units()[i].biomarker > cutoff).collect();
        sel.sort_unstable();
        sel
    };
    let hyp = SubgroupHypothesis::new(subgroup.clone(), 0.0);
    let rt_seed = util_rng.gen::<u64>();
    let result = conditional_rt(
        dataset,
        &bernoulli_design(dataset),
        &hyp,
        &TestStatistic::HajekDiffInMeans,
        params.m,
        rt_seed,
        Orientation::GreaterIsExtreme,
    )?;
    Ok((subgroup, result.p_value <= params.alpha))
}

/// Nearest-rank sample quantile at level q ∈ (0, 1].
fn quantile_cutoff(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// One randomization test per candidate quantile cutoff, Bonferroni-adjusted;
/// the returned subgroup is the largest one whose adjusted p-value clears α.
pub fn method_bonferroni(
    dataset: &Dataset,
    _truth: &BenefitingSubgroup,
    params: &MethodParams,
    seed: u64,
) -> Result<(Vec<usize>, bool)> {
    params.validate()?;
    let k = params.bonferroni_cutoffs;
    let mut sorted = dataset.biomarkers();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite biomarkers"));
    let design = bernoulli_design(dataset);
    let mut util_rng = replicate_rng(seed, u64::MAX);

    // Largest subgroup = lowest cutoff, so scan cutoffs ascending and keep
    // the first significant one.
    let mut best: Option<Vec<usize>> = None;
    for j in 1..=k {
        let q = j as f64 / k as f64;
        let cut = quantile_cutoff(&sorted, q);
        let subgroup: Vec<usize> =
            (0..dataset.len()).filter(|&i| dataset.units()[i].biomarker > cut).collect();
        let hyp = SubgroupHypothesis::new(subgroup.clone(), 0.0);
        let rt_seed = util_rng.gen::<u64>();
        let result = conditional_rt(
            dataset,
            &design,
            &hyp,
            &TestStatistic::HajekDiffInMeans,
            params.m,
            rt_seed,
            Orientation::GreaterIsExtreme,
        )?;
        let adjusted = (result.p_value * k as f64).min(1.0);
        if adjusted <= params.alpha && best.is_none() {
            best = Some(subgroup);
        }
    }
    match best {
        Some(subgroup) => Ok((subgroup, true)),
        None => Ok((Vec::new(), false)),
    }
}

/// Recovered share of the benefiting subgroup, gated by rejection. An empty
/// S* contributes 0: the metric is undefined there and any positive
/// convention would inflate null power.
pub fn power_contribution(s_star: &[usize], s_hat: &[usize], reject: bool) -> f64 {
    if !reject || s_star.is_empty() {
        return 0.0;
    }
    let star: std::collections::HashSet<usize> = s_star.iter().copied().collect();
    let overlap = s_hat.iter().filter(|i| star.contains(i)).count();
    overlap as f64 / s_star.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    Art,
    Oracle,
    Split,
    Bonferroni,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Art, Method::Oracle, Method::Split, Method::Bonferroni];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Art => "art",
            Method::Oracle => "oracle",
            Method::Split => "split",
            Method::Bonferroni => "bonferroni",
        }
    }

    fn run(
        &self,
        dataset: &Dataset,
        truth: &BenefitingSubgroup,
        params: &MethodParams,
        seed: u64,
    ) -> Result<(Vec<usize>, bool)> {
        match self {
            Method::Art => method_art(dataset, truth, params, seed),
            Method::Oracle => method_oracle(dataset, truth, params, seed),
            Method::Split => method_split(dataset, truth, params, seed),
            Method::Bonferroni => method_bonferroni(dataset, truth, params, seed),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerRow {
    pub method: String,
    pub n: usize,
    pub delta: f64,
    pub tau: String,
    pub power: f64,
    pub se: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerTable {
    pub rows: Vec<PowerRow>,
}

impl PowerTable {
    /// `method,n,delta,tau,power,se,reps` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,n,delta,tau,power,se,reps\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method, r.n, r.delta, r.tau, r.power, r.se, r.reps
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerStudyConfig {
    pub ns: Vec<usize>,
    pub deltas: Vec<f64>,
    /// Effect shapes by name; each pairs with every δ.
    pub tau_kinds: Vec<TauKind>,
    pub replicates: usize,
    pub params: MethodParams,
    pub methods: Vec<Method>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauKind {
    Linear,
    Sigmoid,
}

impl TauKind {
    pub fn name(&self) -> &'static str {
        match self {
            TauKind::Linear => "linear",
            TauKind::Sigmoid => "sigmoid",
        }
    }

    pub fn spec(&self, delta: f64) -> TauSpec {
        match self {
            TauKind::Linear => TauSpec::Linear { delta },
            TauKind::Sigmoid => TauSpec::Sigmoid { delta },
        }
    }
}

impl Default for PowerStudyConfig {
    fn default() -> Self {
        PowerStudyConfig {
            ns: vec![200, 400, 600],
            deltas: vec![2.0, 6.0, 10.0],
            tau_kinds: vec![TauKind::Linear, TauKind::Sigmoid],
            replicates: 400,
            params: MethodParams::default(),
            methods: Method::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// Full factorial power study. Replicates are parallel with per-replicate
/// seed streams; within a replicate all methods score the same dataset, so
/// method comparisons are paired. The whole table is reproducible bit-exactly
/// from the master seed.
pub fn power_study(config: &PowerStudyConfig) -> Result<PowerTable> {
    if config.replicates == 0 {
        return Err(Error::InvalidConfig("at least one replicate required".into()));
    }
    config.params.validate()?;
    let mut rows = Vec::new();
    let mut cell_index: u64 = 0;
    for &n in &config.ns {
        for kind in &config.tau_kinds {
            for &delta in &config.deltas {
                let mut population = PopulationConfig::study_default(kind.spec(delta));
                population.n = n;
                // Per-cell stream block: replicate r of cell c draws from
                // stream c·2³² + r, so cells never share randomness.
                let base_stream = cell_index << 32;
                cell_index += 1;

                let contributions: Vec<Vec<f64>> = (0..config.replicates)
                    .into_par_iter()
                    .map(|r| {
                        let mut seeder = replicate_rng(config.seed, base_stream + r as u64);
                        let data_seed = seeder.gen::<u64>();
                        let (dataset, _potentials, truth) = generate(&population, data_seed)?;
                        config
                            .methods
                            .iter()
                            .map(|method| {
                                let method_seed = seeder.gen::<u64>();
                                let (subgroup, reject) =
                                    method.run(&dataset, &truth, &config.params, method_seed)?;
                                Ok(power_contribution(&truth.indices, &subgroup, reject))
                            })
                            .collect::<Result<Vec<f64>>>()
                    })
                    .collect::<Result<Vec<Vec<f64>>>>()?;

                for (mi, method) in config.methods.iter().enumerate() {
                    let values: Vec<f64> = contributions.iter().map(|c| c[mi]).collect();
                    let r = values.len() as f64;
                    let mean = values.iter().sum::<f64>() / r;
                    let se = if values.len() < 2 {
                        0.0
                    } else {
                        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                            / (r - 1.0);
                        (var / r).sqrt()
                    };
                    rows.push(PowerRow {
                        method: method.name().to_string(),
                        n,
                        delta,
                        tau: kind.name().to_string(),
                        power: mean,
                        se,
                        reps: values.len(),
                    });
                }
            }
        }
    }
    Ok(PowerTable { rows })
}
