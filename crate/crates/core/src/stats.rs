//! Test statistics and their moments.
//!
//! Two statistics ship: the Hájek difference in means with fixed
//! (propensity-sum) denominators, and the residual sum Σψ built on a nuisance
//! mean fit. The ψ moments carry exact closed forms under Bernoulli(θ)
//! assignment, which feed the normal-approximation bound checked by the
//! theory module. The difference in means is normalized by Σe and Σ(1−e)
//! rather than realized arm counts; with constant propensity the sign matches
//! the unnormalized sum, so stopping decisions are unaffected, and the
//! normalized form is the one the concentration analysis targets.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// (Σ Z_iY_i)/(Σ e_i) − (Σ (1−Z_i)Y_i)/(Σ (1−e_i)).
///
/// The denominators are deterministic given the propensities, so an empty arm
/// contributes zero rather than failing.
pub fn hajek_diff_in_means(z: &[u8], y: &[f64], e: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::InvalidData("empty input to difference in means".into()));
    }
    if z.len() != y.len() || z.len() != e.len() {
        return Err(Error::InvalidData("difference in means inputs differ in length".into()));
    }
    if e.iter().any(|&ei| !(ei > 0.0 && ei < 1.0)) {
        return Err(Error::InvalidData("propensity outside (0,1)".into()));
    }
    if z.iter().any(|&zi| zi > 1) {
        return Err(Error::InvalidData("non-binary treatment".into()));
    }
    let mut treated_sum = 0.0;
    let mut control_sum = 0.0;
    let mut e_sum = 0.0;
    for ((&zi, &yi), &ei) in z.iter().zip(y).zip(e) {
        if zi == 1 {
            treated_sum += yi;
        } else {
            control_sum += yi;
        }
        e_sum += ei;
    }
    let n = z.len() as f64;
    Ok(treated_sum / e_sum - control_sum / (n - e_sum))
}

/// Per-unit contributions whose mean is [`hajek_diff_in_means`]:
/// u_i = Z_iY_i/ē − (1−Z_i)Y_i/(1−ē) with ē the mean propensity. The ZScore
/// stopping rule takes their empirical standard deviation.
pub fn hajek_contributions(z: &[u8], y: &[f64], e: &[f64]) -> Result<Vec<f64>> {
    hajek_diff_in_means(z, y, e)?; // same validation
    let n = z.len() as f64;
    let e_bar = e.iter().sum::<f64>() / n;
    Ok(z.iter()
        .zip(y)
        .map(|(&zi, &yi)| {
            if zi == 1 {
                yi / e_bar
            } else {
                -yi / (1.0 - e_bar)
            }
        })
        .collect())
}

pub(crate) fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidConfig(format!("theta {theta} outside (0,1)")));
    }
    Ok(())
}

/// ψ_i for one unit: r/θ if treated, −r/(1−θ) if control. Mean zero over
/// Z* ~ Bernoulli(θ) by construction.
pub fn psi(z_star: u8, residual: f64, theta: f64) -> Result<f64> {
    check_theta(theta)?;
    Ok(if z_star == 1 { residual / theta } else { -residual / (1.0 - theta) })
}

/// Exact Bernoulli(θ) moments of ψ for one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiMoments {
    /// Var_{Z*}(ψ) = r²/(θ(1−θ)).
    pub sigma2: f64,
    /// E_{Z*}|ψ|³ = (2θ²−2θ+1)/(θ²(1−θ)²)·|r|³.
    pub rho: f64,
}

pub fn psi_moments(residual: f64, theta: f64) -> Result<PsiMoments> {
    check_theta(theta)?;
    let r2 = residual * residual;
    let sigma2 = r2 / (theta * (1.0 - theta));
    let q = 1.0 - theta;
    let rho = (2.0 * theta * theta - 2.0 * theta + 1.0) / (theta * theta * q * q)
        * residual.abs().powi(3);
    Ok(PsiMoments { sigma2, rho })
}

/// Σψ_i/√|S|, or the studentized Σψ_i/√(Σσ_i²) when `standardized`. All-zero
/// residuals give 0 under either normalization.
pub fn residual_sum_statistic(
    z: &[u8],
    residuals: &[f64],
    theta: f64,
    standardized: bool,
) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::InvalidData("empty subgroup".into()));
    }
    if z.len() != residuals.len() {
        return Err(Error::InvalidData("assignment and residuals differ in length".into()));
    }
    check_theta(theta)?;
    let mut sum = 0.0;
    let mut sigma2_sum = 0.0;
    for (&zi, &ri) in z.iter().zip(residuals) {
        sum += psi(zi, ri, theta)?;
        sigma2_sum += ri * ri;
    }
    sigma2_sum /= theta * (1.0 - theta);
    if standardized {
        if sigma2_sum == 0.0 {
            return Ok(0.0);
        }
        Ok(sum / sigma2_sum.sqrt())
    } else {
        Ok(sum / (z.len() as f64).sqrt())
    }
}

/// C·Σρ_i/(Σσ_i²)^{3/2}: the bound on the sup-distance between the
/// studentized ψ sum and the standard normal.
pub fn berry_esseen_bound(residuals: &[f64], theta: f64, c: f64) -> Result<f64> {
    check_theta(theta)?;
    if !(c > 0.0 && c <= 0.56) {
        return Err(Error::InvalidConfig(format!("constant {c} outside (0, 0.56]")));
    }
    let mut sigma2_sum = 0.0;
    let mut rho_sum = 0.0;
    for &r in residuals {
        let m = psi_moments(r, theta)?;
        sigma2_sum += m.sigma2;
        rho_sum += m.rho;
    }
    if sigma2_sum == 0.0 {
        return Err(Error::InvalidData(
            "all residuals zero: normal-approximation bound undefined".into(),
        ));
    }
    Ok(c * rho_sum / sigma2_sum.powf(1.5))
}

/// Linear least-squares fit of outcome on intercept + biomarker + covariates.
/// The treatment indicator is deliberately absent from the features, which is
/// what makes the fitted mean invariant under reassignment.
#[derive(Debug, Clone)]
pub struct MeanModel {
    /// Intercept, biomarker slope, then one coefficient per covariate.
    pub coefficients: Vec<f64>,
    /// True when the design matrix was rank-deficient and the minimum-norm
    /// solution was used.
    pub rank_deficient: bool,
}

impl MeanModel {
    pub fn predict(&self, biomarker: f64, covariates: &[f64]) -> f64 {
        let mut v = self.coefficients[0] + self.coefficients[1] * biomarker;
        for (c, x) in self.coefficients[2..].iter().zip(covariates) {
            v += c * x;
        }
        v
    }

    /// Y_i − μ̂(W_i, X_i) for every unit, in row order.
    pub fn residuals(&self, dataset: &Dataset) -> Vec<f64> {
        dataset
            .units()
            .iter()
            .map(|u| u.outcome - self.predict(u.biomarker, &u.covariates))
            .collect()
    }
}

pub fn fit_mean_model(dataset: &Dataset) -> Result<MeanModel> {
    let n = dataset.len();
    let p = 2 + dataset.n_covariates();
    if n < p {
        return Err(Error::InvalidData(format!(
            "{n} units cannot support a mean fit with {p} coefficients"
        )));
    }
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (i, u) in dataset.units().iter().enumerate() {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = u.biomarker;
        for (j, &v) in u.covariates.iter().enumerate() {
            x[(i, 2 + j)] = v;
        }
        y[i] = u.outcome;
    }
    let svd = x.svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = max_sv * (n.max(p) as f64) * f64::EPSILON;
    let rank = svd.rank(eps);
    let beta = svd
        .solve(&y, eps)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
    let model =
        MeanModel { coefficients: beta.iter().copied().collect(), rank_deficient: rank < p };
    if model.residuals(dataset).iter().any(|r| !r.is_finite()) {
        return Err(Error::Numerical("non-finite residual from mean fit".into()));
    }
    Ok(model)
}

/// Evaluates a statistic on (assignment, outcomes) restricted to a subgroup,
/// in subgroup order.
pub type StatFn = Box<dyn Fn(&[u8], &[f64]) -> f64 + Send + Sync>;

/// Which statistic the randomization test evaluates.
#[derive(Clone)]
pub enum TestStatistic {
    HajekDiffInMeans,
    ResidualSum { standardized: bool },
    /// Caller-provided function of (assignment, outcomes) on the subgroup.
    /// The contract is the same one the built-ins obey: it must not read
    /// anything assignment-dependent beyond its arguments.
    UserSupplied(Arc<dyn Fn(&[u8], &[f64]) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for TestStatistic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TestStatistic::HajekDiffInMeans => write!(f, "HajekDiffInMeans"),
            TestStatistic::ResidualSum { standardized } => {
                write!(f, "ResidualSum {{ standardized: {standardized} }}")
            }
            TestStatistic::UserSupplied(_) => write!(f, "UserSupplied(..)"),
        }
    }
}

impl TestStatistic {
    /// Bind the statistic to a dataset and subgroup, returning a closure over
    /// (z*, y*) restricted to the subgroup. Everything assignment-independent
    /// (propensities, the nuisance fit) is captured once here, so replicate
    /// evaluation touches only its two arguments.
    pub fn resolve(&self, dataset: &Dataset, subgroup: &[usize]) -> Result<StatFn> {
        if subgroup.is_empty() {
            return Err(Error::InvalidData("empty subgroup".into()));
        }
        if let Some(&bad) = subgroup.iter().find(|&&i| i >= dataset.len()) {
            return Err(Error::InvalidData(format!("subgroup index {bad} out of range")));
        }
        match self {
            TestStatistic::HajekDiffInMeans => {
                let e: Vec<f64> =
                    subgroup.iter().map(|&i| dataset.units()[i].propensity).collect();
                Ok(Box::new(move |z, y| {
                    hajek_diff_in_means(z, y, &e).expect("validated at resolve time")
                }))
            }
            TestStatistic::ResidualSum { standardized } => {
                let theta = dataset.units()[subgroup[0]].propensity;
                if subgroup.iter().any(|&i| dataset.units()[i].propensity != theta) {
                    return Err(Error::InvalidConfig(
                        "residual-sum statistic needs a constant propensity on the subgroup"
                            .into(),
                    ));
                }
                let model = fit_mean_model(dataset)?;
                let mu_hat: Vec<f64> = subgroup
                    .iter()
                    .map(|&i| {
                        let u = &dataset.units()[i];
                        model.predict(u.biomarker, &u.covariates)
                    })
                    .collect();
                let standardized = *standardized;
                Ok(Box::new(move |z, y| {
                    let residuals: Vec<f64> =
                        y.iter().zip(&mu_hat).map(|(yi, mi)| yi - mi).collect();
                    residual_sum_statistic(z, &residuals, theta, standardized)
                        .expect("validated at resolve time")
                }))
            }
            TestStatistic::UserSupplied(f) => {
                let f = Arc::clone(f);
                Ok(Box::new(move |z, y| f(z, y)))
            }
        }
    }
}
