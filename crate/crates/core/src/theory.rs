//! Signal-to-noise analysis of threshold subgroups, and exhaustive
//! verification of the normal approximation used by the z-score stopping
//! rule.
//!
//! For a treatment-effect density f and the subgroup {τ > t}, the
//! signal-to-noise ratio of the subgroup's effect estimate is
//!
//! ```text
//! SNR(t) = log n + 2·log ∫_t^∞ s f(s) ds
//!                − log( ∫_t^∞ s² f(s) ds + σ²/(θ(1−θ)) · ∫_t^∞ f(s) ds )
//! ```
//!
//! Without outcome noise (σ = 0) the curve peaks at t = 0: selecting exactly
//! the units that benefit is optimal. With noise the peak moves strictly
//! right, because units with small positive effects cost more variance than
//! they contribute signal. [`snr`], [`snr_derivative`], and
//! [`optimal_threshold`] evaluate the curve, its closed-form derivative, and
//! its grid argmax; all tail integrals go through one adaptive
//! Gauss–Kronrod quadrature with absolute tolerance 1e-9.
//!
//! [`be_enumeration_check`] verifies the Berry–Esseen bound on the
//! studentized residual sum by brute force: for n ≤ 14 units it enumerates
//! all 2ⁿ assignments, builds the exact conditional CDF, and compares its
//! sup-distance from the standard normal against the bound with C = 0.56.

use crate::error::{Error, Result};
use crate::stats::{berry_esseen_bound, check_theta, psi, psi_moments};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

/// Absolute tolerance for every tail integral behind the public functions.
const SNR_QUAD_TOL: f64 = 1e-9;

/// Largest residual vector `be_enumeration_check` will enumerate (2ⁿ terms).
pub const ENUMERATION_LIMIT: usize = 14;

/// A treatment-effect density on the real line.
///
/// Invariants: the density is nonnegative and integrates to 1 within 1e-6
/// under this module's quadrature; [`DensitySpec::validate`] checks both.
/// Normal and Laplace tails are truncated where their remaining mass is
/// below 1e-12, far inside the quadrature tolerance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
    Laplace { location: f64, scale: f64 },
    /// Piecewise-linear density through `(points[i], densities[i])`, zero
    /// outside the covered interval. Points must be strictly ascending.
    TabulatedGrid { points: Vec<f64>, densities: Vec<f64> },
}

impl DensitySpec {
    pub fn standard_normal() -> Self {
        DensitySpec::Normal { mean: 0.0, sd: 1.0 }
    }

    pub fn pdf(&self, s: f64) -> f64 {
        match self {
            DensitySpec::Normal { mean, sd } => {
                let z = (s - mean) / sd;
                (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
            DensitySpec::Uniform { lo, hi } => {
                if s >= *lo && s <= *hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            DensitySpec::Laplace { location, scale } => {
                (-(s - location).abs() / scale).exp() / (2.0 * scale)
            }
            DensitySpec::TabulatedGrid { points, densities } => {
                let n = points.len();
                if n < 2 || s < points[0] || s > points[n - 1] {
                    return 0.0;
                }
                let k = match points.binary_search_by(|p| p.partial_cmp(&s).unwrap()) {
                    Ok(i) => return densities[i],
                    Err(i) => i,
                };
                let (x0, x1) = (points[k - 1], points[k]);
                let w = (s - x0) / (x1 - x0);
                densities[k - 1] * (1.0 - w) + densities[k] * w
            }
        }
    }

    /// Interval outside which the density is treated as zero.
    fn support(&self) -> (f64, f64) {
        match self {
            DensitySpec::Normal { mean, sd } => (mean - 8.0 * sd, mean + 8.0 * sd),
            DensitySpec::Uniform { lo, hi } => (*lo, *hi),
            DensitySpec::Laplace { location, scale } => {
                (location - 30.0 * scale, location + 30.0 * scale)
            }
            DensitySpec::TabulatedGrid { points, .. } => {
                (*points.first().unwrap_or(&0.0), *points.last().unwrap_or(&0.0))
            }
        }
    }

    /// Interior points where the density is not smooth; integration splits
    /// there so the quadrature only ever sees smooth pieces.
    fn kinks(&self) -> Vec<f64> {
        match self {
            DensitySpec::Normal { .. } | DensitySpec::Uniform { .. } => Vec::new(),
            DensitySpec::Laplace { location, .. } => vec![*location],
            DensitySpec::TabulatedGrid { points, .. } => {
                if points.len() > 2 {
                    points[1..points.len() - 1].to_vec()
                } else {
                    Vec::new()
                }
            }
        }
    }

    /// Checks parameters and the unit-mass invariant.
    pub fn validate(&self) -> Result<()> {
        match self {
            DensitySpec::Normal { mean, sd } => {
                if !mean.is_finite() || !sd.is_finite() || *sd <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "normal density needs finite mean and positive sd, got ({mean}, {sd})"
                    )));
                }
            }
            DensitySpec::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                    return Err(Error::InvalidConfig(format!(
                        "uniform density needs lo < hi, got ({lo}, {hi})"
                    )));
                }
            }
            DensitySpec::Laplace { location, scale } => {
                if !location.is_finite() || !scale.is_finite() || *scale <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "laplace density needs finite location and positive scale, got ({location}, {scale})"
                    )));
                }
            }
            DensitySpec::TabulatedGrid { points, densities } => {
                if points.len() < 2 || points.len() != densities.len() {
                    return Err(Error::InvalidConfig(
                        "tabulated density needs at least two points and matching lengths".into(),
                    ));
                }
                if points.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::InvalidConfig(
                        "tabulated density points must be strictly ascending".into(),
                    ));
                }
                if points.iter().chain(densities).any(|v| !v.is_finite()) {
                    return Err(Error::InvalidConfig("tabulated density has non-finite entries".into()));
                }
                if densities.iter().any(|&d| d < 0.0) {
                    return Err(Error::InvalidConfig("tabulated density has negative values".into()));
                }
            }
        }
        let mass = tail_integral(self, 0, f64::NEG_INFINITY, SNR_QUAD_TOL);
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "density mass {mass} is not 1 within 1e-6"
            )));
        }
        Ok(())
    }
}

/// 15-point Kronrod nodes on [0, 1] side (symmetric), with the embedded
/// 7-point Gauss rule at the odd-index nodes.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_7,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One Gauss–Kronrod panel: returns the K15 estimate and |K15 − G7| as an
/// error proxy.
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let half = 0.5 * (b - a);
    let center = 0.5 * (a + b);
    let fc = f(center);
    let mut resk = WGK[7] * fc;
    let mut resg = WG[3] * fc;
    for j in 0..7 {
        let offset = half * XGK[j];
        let fsum = f(center - offset) + f(center + offset);
        resk += WGK[j] * fsum;
        if j % 2 == 1 {
            resg += WG[j / 2] * fsum;
        }
    }
    (resk * half, (resk - resg).abs() * half.abs())
}

/// Adaptive bisection to an absolute tolerance. Each split halves the local
/// budget, so accepted panels sum to at most `tol` of proxy error.
fn integrate(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a >= b {
        return 0.0;
    }
    let mut total = 0.0;
    let mut stack = vec![(a, b, tol, 0u32)];
    while let Some((lo, hi, budget, depth)) = stack.pop() {
        let (value, err) = gk15(f, lo, hi);
        if err <= budget || depth >= 60 {
            total += value;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, 0.5 * budget, depth + 1));
            stack.push((mid, hi, 0.5 * budget, depth + 1));
        }
    }
    total
}

/// ∫_t^∞ s^power · f(s) ds, truncated to the density's support and split at
/// its kinks.
fn tail_integral(density: &DensitySpec, power: u32, t: f64, tol: f64) -> f64 {
    let (lo, hi) = density.support();
    let from = t.max(lo);
    if from >= hi {
        return 0.0;
    }
    let mut cuts = vec![from];
    for k in density.kinks() {
        if k > from && k < hi {
            cuts.push(k);
        }
    }
    cuts.push(hi);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let segments = cuts.len() - 1;
    let f = |s: f64| density.pdf(s) * s.powi(power as i32);
    cuts.windows(2).map(|w| integrate(&f, w[0], w[1], tol / segments as f64)).sum()
}

fn check_snr_inputs(t: f64, n: usize, sigma: f64, theta: f64) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::InvalidConfig(format!("threshold {t} is not finite")));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("sample size must be positive".into()));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidConfig(format!("noise sd {sigma} must be finite and >= 0")));
    }
    check_theta(theta)
}

fn snr_at_tolerance(
    t: f64,
    density: &DensitySpec,
    n: usize,
    sigma: f64,
    theta: f64,
    tol: f64,
) -> Result<f64> {
    check_snr_inputs(t, n, sigma, theta)?;
    let i1 = tail_integral(density, 1, t, tol);
    if i1 <= 0.0 {
        return Err(Error::Numerical(format!(
            "first tail integral {i1} at t = {t} is nonpositive; SNR undefined"
        )));
    }
    let i2 = tail_integral(density, 2, t, tol);
    let kappa = sigma * sigma / (theta * (1.0 - theta));
    let denom = if kappa > 0.0 { i2 + kappa * tail_integral(density, 0, t, tol) } else { i2 };
    if denom <= 0.0 {
        return Err(Error::Numerical(format!(
            "variance integral {denom} at t = {t} is nonpositive; SNR undefined"
        )));
    }
    Ok((n as f64).ln() + 2.0 * i1.ln() - denom.ln())
}

/// Signal-to-noise ratio of the threshold subgroup {τ > t} in a trial of
/// size n with outcome noise sd `sigma` and treatment probability `theta`.
///
/// Undefined (an error) where the tail mean ∫_t^∞ s f(s) ds is nonpositive,
/// e.g. beyond the density's support or so far left that negative effects
/// cancel the mean.
pub fn snr(t: f64, density: &DensitySpec, n: usize, sigma: f64, theta: f64) -> Result<f64> {
    snr_at_tolerance(t, density, n, sigma, theta, SNR_QUAD_TOL)
}

/// Closed-form derivative of [`snr`] in t:
///
/// ```text
/// SNR'(t) = −2·t·f(t)/I₁(t) + (t² + κ)·f(t)/(I₂(t) + κ·I₀(t)),
/// ```
///
/// with κ = σ²/(θ(1−θ)) and I_j the tail integrals. At σ = 0 the second
/// term loses κ and the derivative vanishes exactly at t = 0; at σ > 0 it is
/// positive there, which is why noise pushes the optimum right.
pub fn snr_derivative(t: f64, density: &DensitySpec, n: usize, sigma: f64, theta: f64) -> Result<f64> {
    check_snr_inputs(t, n, sigma, theta)?;
    let i1 = tail_integral(density, 1, t, SNR_QUAD_TOL);
    if i1 <= 0.0 {
        return Err(Error::Numerical(format!(
            "first tail integral {i1} at t = {t} is nonpositive; SNR undefined"
        )));
    }
    let i2 = tail_integral(density, 2, t, SNR_QUAD_TOL);
    let kappa = sigma * sigma / (theta * (1.0 - theta));
    let denom = if kappa > 0.0 { i2 + kappa * tail_integral(density, 0, t, SNR_QUAD_TOL) } else { i2 };
    if denom <= 0.0 {
        return Err(Error::Numerical(format!(
            "variance integral {denom} at t = {t} is nonpositive; SNR undefined"
        )));
    }
    let ft = density.pdf(t);
    Ok(-2.0 * t * ft / i1 + (t * t + kappa) * ft / denom)
}

/// An SNR curve evaluated over a threshold grid. Grid points where the
/// curve is undefined hold NaN.
#[derive(Debug, Clone)]
pub struct SnrCurve {
    pub grid: Vec<f64>,
    pub snr: Vec<f64>,
    pub n: usize,
    pub sigma: f64,
    pub theta: f64,
}

impl SnrCurve {
    pub fn compute(
        density: &DensitySpec,
        n: usize,
        sigma: f64,
        theta: f64,
        grid: &[f64],
    ) -> Result<SnrCurve> {
        density.validate()?;
        if grid.is_empty() {
            return Err(Error::InvalidConfig("empty threshold grid".into()));
        }
        let values: Vec<f64> = grid
            .par_iter()
            .map(|&t| snr(t, density, n, sigma, theta).unwrap_or(f64::NAN))
            .collect();
        Ok(SnrCurve { grid: grid.to_vec(), snr: values, n, sigma, theta })
    }
}

/// Grid argmax of the SNR curve; ties resolve to the smallest threshold.
/// Errors if the curve is undefined at every grid point.
pub fn optimal_threshold(
    density: &DensitySpec,
    n: usize,
    sigma: f64,
    theta: f64,
    grid: &[f64],
) -> Result<f64> {
    let curve = SnrCurve::compute(density, n, sigma, theta, grid)?;
    let mut best: Option<(f64, f64)> = None;
    for (&t, &v) in curve.grid.iter().zip(&curve.snr) {
        if !v.is_nan() && best.map_or(true, |(_, bv)| v > bv) {
            best = Some((t, v));
        }
    }
    best.map(|(t, _)| t)
        .ok_or_else(|| Error::Numerical("SNR undefined on the whole grid".into()))
}

/// Outcome of one exhaustive Berry–Esseen verification.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct BeCheck {
    /// sup_x |P(T ≤ x) − Φ(x)| over the exact enumeration.
    pub sup_distance: f64,
    /// 0.56 · Σρᵢ / (Σσᵢ²)^{3/2}.
    pub bound: f64,
    pub pass: bool,
}

/// Enumerates all 2ⁿ Bernoulli(θ) assignments for the given residuals,
/// builds the exact CDF of the studentized sum Σψᵢ/√(Σσᵢ²), and compares
/// its sup-distance from Φ (taken over both one-sided limits at every jump)
/// against the Berry–Esseen bound with C = 0.56.
pub fn be_enumeration_check(residuals: &[f64], theta: f64) -> Result<BeCheck> {
    let n = residuals.len();
    if n == 0 {
        return Err(Error::InvalidData("no residuals to enumerate".into()));
    }
    if n > ENUMERATION_LIMIT {
        return Err(Error::SupportTooLarge { free: n, cap: ENUMERATION_LIMIT });
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidData("non-finite residual".into()));
    }
    let bound = berry_esseen_bound(residuals, theta, 0.56)?;
    let sigma2_sum: f64 = residuals
        .iter()
        .map(|&r| psi_moments(r, theta).map(|m| m.sigma2))
        .sum::<Result<f64>>()?;
    let scale = sigma2_sum.sqrt();

    let mut atoms: Vec<(f64, f64)> = Vec::with_capacity(1 << n);
    for mask in 0u32..(1u32 << n) {
        let mut sum = 0.0;
        let mut weight = 1.0;
        for (i, &r) in residuals.iter().enumerate() {
            let z = ((mask >> i) & 1) as u8;
            sum += psi(z, r, theta)?;
            weight *= if z == 1 { theta } else { 1.0 - theta };
        }
        atoms.push((sum / scale, weight));
    }
    atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let normal = NormalDist::new(0.0, 1.0).expect("unit normal");
    let mut sup = 0.0f64;
    let mut below = 0.0;
    let mut i = 0;
    while i < atoms.len() {
        let x = atoms[i].0;
        let mut at = below;
        while i < atoms.len() && atoms[i].0 == x {
            at += atoms[i].1;
            i += 1;
        }
        let phi = normal.cdf(x);
        sup = sup.max((below - phi).abs()).max((at - phi).abs());
        below = at;
    }
    Ok(BeCheck { sup_distance: sup, bound, pass: sup <= bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn test_family() -> Vec<DensitySpec> {
        vec![
            DensitySpec::standard_normal(),
            DensitySpec::Normal { mean: 1.0, sd: 1.0 },
            DensitySpec::Uniform { lo: -1.0, hi: 1.0 },
            DensitySpec::Laplace { location: 0.0, scale: 1.0 },
        ]
    }

    fn step_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
        let count = ((hi - lo) / step).round() as usize;
        (0..=count).map(|k| lo + k as f64 * step).collect()
    }

    #[test]
    fn quadrature_reproduces_closed_forms() {
        let cube = integrate(&|x: f64| x * x * x, 0.0, 2.0, 1e-12);
        assert!((cube - 4.0).abs() < 1e-12);
        let exp = integrate(&|x: f64| x.exp(), -1.0, 1.0, 1e-12);
        assert!((exp - (1.0f64.exp() - (-1.0f64).exp())).abs() < 1e-12);
        let kinked = integrate(&|x: f64| x.abs(), -1.0, 1.0, 1e-12);
        assert!((kinked - 1.0).abs() < 1e-10);
    }

    #[test]
    fn density_families_have_unit_mass() {
        let mut family = test_family();
        family.push(DensitySpec::Normal { mean: 5.0, sd: 0.01 });
        family.push(DensitySpec::Laplace { location: -2.0, scale: 0.5 });
        family.push(DensitySpec::TabulatedGrid {
            points: vec![-1.0, 0.0, 1.0],
            densities: vec![0.0, 1.0, 0.0],
        });
        for d in &family {
            d.validate().unwrap();
        }
    }

    #[test]
    fn density_validation_rejects_bad_parameters() {
        assert!(DensitySpec::Normal { mean: 0.0, sd: 0.0 }.validate().is_err());
        assert!(DensitySpec::Uniform { lo: 1.0, hi: 1.0 }.validate().is_err());
        assert!(DensitySpec::Laplace { location: 0.0, scale: -1.0 }.validate().is_err());
        let unnormalized = DensitySpec::TabulatedGrid {
            points: vec![-1.0, 0.0, 1.0],
            densities: vec![0.0, 3.0, 0.0],
        };
        assert!(unnormalized.validate().is_err());
        let negative = DensitySpec::TabulatedGrid {
            points: vec![0.0, 1.0],
            densities: vec![2.0, -0.1],
        };
        assert!(negative.validate().is_err());
    }

    #[test]
    fn snr_matches_gaussian_tail_moments() {
        // At t = 0: ∫₀^∞ sφ = 1/√(2π) and ∫₀^∞ s²φ = 1/2, so with n = 1,
        // σ = 0 the value is −ln(2π) + ln 2 exactly.
        let d = DensitySpec::standard_normal();
        let expected = -(2.0 * std::f64::consts::PI).ln() + 2.0f64.ln();
        let got = snr(0.0, &d, 1, 0.0, 0.5).unwrap();
        assert!((got - expected).abs() < 1e-8, "got {got}, expected {expected}");
        assert!((snr(0.0, &d, 3, 0.0, 0.5).unwrap() - expected - 3.0f64.ln()).abs() < 1e-8);

        // General t: I₁(t) = φ(t), I₂(t) = Φ̄(t) + t·φ(t).
        let t = 0.7;
        let phi_t = d.pdf(t);
        let normal = NormalDist::new(0.0, 1.0).unwrap();
        let upper = 1.0 - normal.cdf(t);
        let closed = 2.0 * phi_t.ln() - (upper + t * phi_t).ln();
        assert!((snr(t, &d, 1, 0.0, 0.5).unwrap() - closed).abs() < 1e-8);
    }

    #[test]
    fn snr_is_flat_below_an_isolated_mass() {
        let d = DensitySpec::Normal { mean: 5.0, sd: 0.01 };
        let a = snr(0.0, &d, 100, 0.0, 0.5).unwrap();
        let b = snr(4.5, &d, 100, 0.0, 0.5).unwrap();
        assert!((a - b).abs() < 1e-6, "thresholds below the mass must not matter: {a} vs {b}");
    }

    #[test]
    fn snr_decreases_as_noise_grows() {
        let d = DensitySpec::standard_normal();
        let values: Vec<f64> =
            [0.0, 1.0, 2.0, 4.0, 8.0].iter().map(|&s| snr(0.5, &d, 50, s, 0.3).unwrap()).collect();
        for w in values.windows(2) {
            assert!(w[1] < w[0], "SNR must fall with noise: {values:?}");
        }
    }

    #[test]
    fn snr_is_undefined_where_the_tail_mean_vanishes() {
        let d = DensitySpec::Uniform { lo: -1.0, hi: 1.0 };
        assert!(matches!(snr(-1.0, &d, 10, 0.0, 0.5), Err(Error::Numerical(_))));
        assert!(matches!(snr(1.0, &d, 10, 0.0, 0.5), Err(Error::Numerical(_))));
        assert!(snr(-0.5, &d, 10, 0.0, 0.5).is_ok());
    }

    #[test]
    fn snr_rejects_bad_parameters() {
        let d = DensitySpec::standard_normal();
        assert!(snr(0.0, &d, 0, 0.0, 0.5).is_err());
        assert!(snr(0.0, &d, 10, -1.0, 0.5).is_err());
        assert!(snr(0.0, &d, 10, 0.0, 1.0).is_err());
        assert!(snr(f64::INFINITY, &d, 10, 0.0, 0.5).is_err());
    }

    #[test]
    fn noiseless_optimum_sits_at_zero_for_every_family() {
        for d in &test_family() {
            let grid = match d {
                DensitySpec::Uniform { .. } => step_grid(-1.0, 1.0, 0.01),
                _ => step_grid(-3.0, 3.0, 0.01),
            };
            let t = optimal_threshold(d, 100, 0.0, 0.5, &grid).unwrap();
            assert!(t.abs() <= 0.01 + 1e-12, "argmax {t} for {d:?}");
        }
    }

    #[test]
    fn noise_pushes_the_optimum_strictly_right() {
        let d = DensitySpec::standard_normal();
        let grid = step_grid(-3.0, 3.0, 0.01);
        let t = optimal_threshold(&d, 100, 2.0, 0.5, &grid).unwrap();
        assert!(t > 0.0, "noisy argmax {t}");
        // The derivative agrees: still climbing at zero.
        assert!(snr_derivative(0.0, &d, 100, 2.0, 0.5).unwrap() > 0.0);
    }

    #[test]
    fn optimal_threshold_errors_when_snr_is_nowhere_defined() {
        let d = DensitySpec::Uniform { lo: -1.0, hi: 1.0 };
        let grid = vec![1.0, 2.0, 3.0];
        assert!(optimal_threshold(&d, 10, 0.0, 0.5, &grid).is_err());
    }

    #[test]
    fn snr_curve_marks_undefined_points_as_nan() {
        let d = DensitySpec::Uniform { lo: -1.0, hi: 1.0 };
        let curve = SnrCurve::compute(&d, 10, 0.0, 0.5, &[-1.0, 0.0, 2.0]).unwrap();
        assert!(curve.snr[0].is_nan());
        assert!(curve.snr[1].is_finite());
        assert!(curve.snr[2].is_nan());
    }

    #[test]
    fn derivative_signs_bracket_the_noiseless_optimum() {
        let d = DensitySpec::standard_normal();
        assert!(snr_derivative(-0.7, &d, 10, 0.0, 0.5).unwrap() > 0.0);
        assert_eq!(snr_derivative(0.0, &d, 10, 0.0, 0.5).unwrap(), 0.0);
        assert!(snr_derivative(0.5, &d, 10, 0.0, 0.5).unwrap() < 0.0);
    }

    #[test]
    fn derivative_matches_central_differences() {
        let h = 1e-4;
        let densities = [
            DensitySpec::standard_normal(),
            DensitySpec::Normal { mean: 1.0, sd: 1.0 },
            DensitySpec::Laplace { location: 0.0, scale: 1.0 },
        ];
        for d in &densities {
            for &t in &[-1.5, -0.5, 0.3, 1.2] {
                for &sigma in &[0.0, 2.0] {
                    let exact = snr_derivative(t, d, 50, sigma, 0.3).unwrap();
                    let up = snr(t + h, d, 50, sigma, 0.3).unwrap();
                    let down = snr(t - h, d, 50, sigma, 0.3).unwrap();
                    let fd = (up - down) / (2.0 * h);
                    assert!(
                        (exact - fd).abs() <= 1e-4,
                        "derivative mismatch at t={t} sigma={sigma} for {d:?}: {exact} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn tightening_the_tolerance_does_not_move_the_curve() {
        let d = DensitySpec::Laplace { location: 0.0, scale: 1.0 };
        for &t in &[-2.0, -1.0, 0.0, 1.0, 2.0] {
            let coarse = snr_at_tolerance(t, &d, 50, 1.0, 0.4, 1e-9).unwrap();
            let fine = snr_at_tolerance(t, &d, 50, 1.0, 0.4, 1e-12).unwrap();
            assert!((coarse - fine).abs() < 1e-7, "tolerance gap at {t}");
        }
    }

    #[test]
    fn two_point_enumeration_is_exact() {
        let check = be_enumeration_check(&[1.0], 0.5).unwrap();
        // ψ = ±2 with σ² = 4, so the studentized atom sits at ±1 with mass
        // one half each; the sup distance is Φ(1) − 1/2.
        let normal = NormalDist::new(0.0, 1.0).unwrap();
        let expected = normal.cdf(1.0) - 0.5;
        assert!((check.sup_distance - expected).abs() < 1e-12);
        assert!((check.bound - 0.56).abs() < 1e-12);
        assert!(check.pass);
    }

    #[test]
    fn exhaustive_check_passes_on_gaussian_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let residuals: Vec<f64> = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for &theta in &[0.5, 0.1] {
            let check = be_enumeration_check(&residuals, theta).unwrap();
            assert!(
                check.pass,
                "theta {theta}: sup {} vs bound {}",
                check.sup_distance, check.bound
            );
            assert!(check.sup_distance > 0.0);
        }
    }

    #[test]
    fn enumeration_check_rejects_oversize_and_degenerate_input() {
        let too_many = vec![1.0; 15];
        assert!(matches!(
            be_enumeration_check(&too_many, 0.5),
            Err(Error::SupportTooLarge { free: 15, cap: 14 })
        ));
        assert!(be_enumeration_check(&[0.0, 0.0], 0.5).is_err());
        assert!(be_enumeration_check(&[], 0.5).is_err());
    }

    #[test]
    fn tabulated_density_interpolates_and_locates_its_optimum() {
        let triangle = DensitySpec::TabulatedGrid {
            points: vec![-1.0, 0.0, 1.0],
            densities: vec![0.0, 1.0, 0.0],
        };
        triangle.validate().unwrap();
        assert!((triangle.pdf(-0.5) - 0.5).abs() < 1e-12);
        assert!((triangle.pdf(0.0) - 1.0).abs() < 1e-12);
        assert_eq!(triangle.pdf(1.5), 0.0);
        let grid = step_grid(-0.99, 0.99, 0.01);
        let t = optimal_threshold(&triangle, 100, 0.0, 0.5, &grid).unwrap();
        assert!(t.abs() <= 0.01 + 1e-12, "triangle argmax {t}");
    }
}
