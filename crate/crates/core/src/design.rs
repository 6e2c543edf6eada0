//! The three assignment designs and their laws conditional on pinning a set
//! of coordinates.
//!
//! Conditioning is exact, never approximate: under Bernoulli the free units
//! stay independent, under complete randomization the free units follow a
//! smaller completely randomized design with the leftover treated count, and
//! a stratified design factors into independent per-stratum versions of the
//! same rule. Pinning coordinates the design could not have produced is a
//! hard error rather than a renormalization.
//!
//! Every sampling routine visits free units in row order and processes strata
//! in ascending label order. Downstream equivalence arguments (re-randomizing
//! a subgroup in place versus sampling a fresh restricted design) rely on the
//! two paths consuming the generator identically, so this order is part of
//! the contract, not an implementation detail.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How many free units `enumerate_conditional_support` will expand.
pub const ENUMERATION_CAP: usize = 20;

#[derive(Debug, Clone)]
pub enum Design {
    /// Independent Bernoulli(e_i) per unit; propensities may vary.
    Bernoulli { propensities: Vec<f64> },
    /// Exactly `treated` of `total` units treated, uniformly at random.
    CompletelyRandomized { treated: usize, total: usize },
    /// Independent completely randomized designs within strata. `strata`
    /// gives each unit's label in row order.
    StratifiedCrd { strata: Vec<u32>, treated_per_stratum: BTreeMap<u32, usize> },
}

impl Design {
    pub fn n(&self) -> usize {
        match self {
            Design::Bernoulli { propensities } => propensities.len(),
            Design::CompletelyRandomized { total, .. } => *total,
            Design::StratifiedCrd { strata, .. } => strata.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Design::Bernoulli { propensities } => {
                if propensities.is_empty() {
                    return Err(Error::InvalidConfig("design covers no units".into()));
                }
                if propensities.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
                    return Err(Error::InvalidConfig(
                        "Bernoulli propensity outside (0,1)".into(),
                    ));
                }
            }
            Design::CompletelyRandomized { treated, total } => {
                if !(*treated > 0 && treated < total) {
                    return Err(Error::InvalidConfig(format!(
                        "completely randomized design needs 0 < treated < total, got {treated} of {total}"
                    )));
                }
            }
            Design::StratifiedCrd { strata, treated_per_stratum } => {
                if strata.is_empty() {
                    return Err(Error::InvalidConfig("design covers no units".into()));
                }
                let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
                for &g in strata {
                    *sizes.entry(g).or_insert(0) += 1;
                }
                for (&g, &size) in &sizes {
                    match treated_per_stratum.get(&g) {
                        None => {
                            return Err(Error::InvalidConfig(format!(
                                "stratum {g} has no treated count"
                            )))
                        }
                        Some(&k) if !(k > 0 && k < size) => {
                            return Err(Error::InvalidConfig(format!(
                                "stratum {g} needs 0 < treated < {size}, got {k}"
                            )))
                        }
                        Some(_) => {}
                    }
                }
                if let Some(&g) =
                    treated_per_stratum.keys().find(|g| !sizes.contains_key(g))
                {
                    return Err(Error::InvalidConfig(format!(
                        "treated count given for unknown stratum {g}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An assignment vector drawn from a design (or one of its conditional laws).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentVector(pub Vec<u8>);

impl AssignmentVector {
    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

/// A design with some coordinates pinned to observed values. Free units
/// follow the exact conditional law; construction fails if the pins are
/// impossible under the design.
#[derive(Debug, Clone)]
pub struct ConditionalLaw {
    design: Design,
    /// Row-indexed: `Some(z)` pinned, `None` free.
    pinned: Vec<Option<u8>>,
    free: Vec<usize>,
}

impl ConditionalLaw {
    pub fn new(design: Design, fixed_indices: &[usize], fixed_values: &[u8]) -> Result<Self> {
        design.validate()?;
        let n = design.n();
        if fixed_indices.len() != fixed_values.len() {
            return Err(Error::InvalidConfig(
                "fixed indices and values differ in length".into(),
            ));
        }
        let mut pinned: Vec<Option<u8>> = vec![None; n];
        for (&i, &v) in fixed_indices.iter().zip(fixed_values) {
            if i >= n {
                return Err(Error::InvalidConfig(format!(
                    "fixed index {i} out of range for design of {n} units"
                )));
            }
            if v > 1 {
                return Err(Error::InvalidConfig(format!("non-binary fixed value at unit {i}")));
            }
            if pinned[i].is_some() {
                return Err(Error::InvalidConfig(format!("unit {i} fixed twice")));
            }
            pinned[i] = Some(v);
        }
        let free: Vec<usize> = (0..n).filter(|&i| pinned[i].is_none()).collect();

        match &design {
            Design::Bernoulli { .. } => {}
            Design::CompletelyRandomized { treated, .. } => {
                let pinned_treated: usize =
                    pinned.iter().flatten().map(|&v| usize::from(v)).sum();
                if pinned_treated > *treated {
                    return Err(Error::InfeasibleConditioning(format!(
                        "{pinned_treated} treated units fixed but the design assigns {treated}"
                    )));
                }
                if treated - pinned_treated > free.len() {
                    return Err(Error::InfeasibleConditioning(format!(
                        "{} treated still required but only {} free units remain",
                        treated - pinned_treated,
                        free.len()
                    )));
                }
            }
            Design::StratifiedCrd { strata, treated_per_stratum } => {
                for (&g, &k) in treated_per_stratum {
                    let members: Vec<usize> =
                        (0..n).filter(|&i| strata[i] == g).collect();
                    let pinned_treated: usize = members
                        .iter()
                        .filter_map(|&i| pinned[i])
                        .map(usize::from)
                        .sum();
                    let free_here = members.iter().filter(|&&i| pinned[i].is_none()).count();
                    if pinned_treated > k || k - pinned_treated > free_here {
                        return Err(Error::InfeasibleConditioning(format!(
                            "stratum {g}: {pinned_treated} treated fixed, {free_here} free, need {k} total"
                        )));
                    }
                }
            }
        }
        Ok(ConditionalLaw { design, pinned, free })
    }

    /// Conditional law with nothing pinned; draws coincide with
    /// `sample_assignment` call for call.
    pub fn unconditional(design: Design) -> Result<Self> {
        ConditionalLaw::new(design, &[], &[])
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    /// Free unit indices in row order.
    pub fn free_indices(&self) -> &[usize] {
        &self.free
    }

    pub fn fixed_indices(&self) -> Vec<usize> {
        (0..self.pinned.len()).filter(|&i| self.pinned[i].is_some()).collect()
    }
}

/// ChaCha stream for one replicate: the master seed keys the cipher and the
/// replicate index selects a stream, so replicate k's randomness never
/// depends on how many replicates ran before it or on which thread ran it.
pub fn replicate_rng(master_seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replicate);
    rng
}

/// Treat exactly `k` of the units listed in `indices`, uniformly.
fn crd_fill(rng: &mut ChaCha8Rng, z: &mut [u8], indices: &[usize], k: usize) {
    let chosen = rand::seq::index::sample(rng, indices.len(), k);
    for pos in chosen.iter() {
        z[indices[pos]] = 1;
    }
}

/// One unconditional draw from the design.
pub fn sample_assignment(design: &Design, rng: &mut ChaCha8Rng) -> Result<AssignmentVector> {
    design.validate()?;
    let n = design.n();
    let mut z = vec![0u8; n];
    match design {
        Design::Bernoulli { propensities } => {
            for (zi, &e) in z.iter_mut().zip(propensities) {
                *zi = u8::from(rng.gen_bool(e));
            }
        }
        Design::CompletelyRandomized { treated, .. } => {
            let all: Vec<usize> = (0..n).collect();
            crd_fill(rng, &mut z, &all, *treated);
        }
        Design::StratifiedCrd { strata, treated_per_stratum } => {
            for (&g, &k) in treated_per_stratum {
                let members: Vec<usize> = (0..n).filter(|&i| strata[i] == g).collect();
                crd_fill(rng, &mut z, &members, k);
            }
        }
    }
    Ok(AssignmentVector(z))
}

/// One draw with the pinned coordinates held at their fixed values and the
/// free coordinates drawn from the exact conditional law.
pub fn conditional_resample(law: &ConditionalLaw, rng: &mut ChaCha8Rng) -> AssignmentVector {
    let n = law.pinned.len();
    let mut z = vec![0u8; n];
    for (i, p) in law.pinned.iter().enumerate() {
        if let Some(v) = p {
            z[i] = *v;
        }
    }
    match &law.design {
        Design::Bernoulli { propensities } => {
            for &i in &law.free {
                z[i] = u8::from(rng.gen_bool(propensities[i]));
            }
        }
        Design::CompletelyRandomized { treated, .. } => {
            let pinned_treated: usize =
                law.pinned.iter().flatten().map(|&v| usize::from(v)).sum();
            crd_fill(rng, &mut z, &law.free, treated - pinned_treated);
        }
        Design::StratifiedCrd { strata, treated_per_stratum } => {
            for (&g, &k) in treated_per_stratum {
                let free_here: Vec<usize> =
                    law.free.iter().copied().filter(|&i| strata[i] == g).collect();
                let pinned_treated: usize = (0..n)
                    .filter(|&i| strata[i] == g)
                    .filter_map(|i| law.pinned[i])
                    .map(usize::from)
                    .sum();
                crd_fill(rng, &mut z, &free_here, k - pinned_treated);
            }
        }
    }
    AssignmentVector(z)
}

/// The complete conditional support with exact probabilities. Free-unit count
/// is capped because the support grows as 2^free.
pub fn enumerate_conditional_support(
    law: &ConditionalLaw,
) -> Result<Vec<(AssignmentVector, f64)>> {
    let f = law.free.len();
    if f > ENUMERATION_CAP {
        return Err(Error::SupportTooLarge { free: f, cap: ENUMERATION_CAP });
    }
    let n = law.pinned.len();
    let base: Vec<u8> = law.pinned.iter().map(|p| p.unwrap_or(0)).collect();

    let mut raw: Vec<(Vec<u8>, f64)> = Vec::new();
    for mask in 0u32..(1u32 << f) {
        let mut z = base.clone();
        for (bit, &i) in law.free.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                z[i] = 1;
            }
        }
        let weight = match &law.design {
            Design::Bernoulli { propensities } => law
                .free
                .iter()
                .map(|&i| if z[i] == 1 { propensities[i] } else { 1.0 - propensities[i] })
                .product(),
            Design::CompletelyRandomized { treated, .. } => {
                let total: usize = z.iter().map(|&v| usize::from(v)).sum();
                if total == *treated {
                    1.0
                } else {
                    0.0
                }
            }
            Design::StratifiedCrd { strata, treated_per_stratum } => {
                let ok = treated_per_stratum.iter().all(|(&g, &k)| {
                    let got: usize = (0..n)
                        .filter(|&i| strata[i] == g)
                        .map(|i| usize::from(z[i]))
                        .sum();
                    got == k
                });
                if ok {
                    1.0
                } else {
                    0.0
                }
            }
        };
        if weight > 0.0 {
            raw.push((z, weight));
        }
    }
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    Ok(raw
        .into_iter()
        .map(|(z, w)| (AssignmentVector(z), w / total))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn degenerate_bernoulli_is_rejected() {
        let d = Design::Bernoulli { propensities: vec![1.0, 1.0] };
        assert!(d.validate().unwrap_err().is_validation());
    }

    #[test]
    fn crd_draw_has_exact_treated_count() {
        let d = Design::CompletelyRandomized { treated: 2, total: 4 };
        let mut rng = replicate_rng(1, 0);
        for _ in 0..50 {
            let z = sample_assignment(&d, &mut rng).unwrap();
            assert_eq!(z.0.iter().map(|&v| u32::from(v)).sum::<u32>(), 2);
        }
    }

    #[test]
    fn crd_draws_are_uniform_over_the_enumerated_support() {
        // C(4,2) = 6 support points, each with probability 1/6.
        let d = Design::CompletelyRandomized { treated: 2, total: 4 };
        let mut rng = replicate_rng(42, 0);
        let mut counts: HashMap<Vec<u8>, u32> = HashMap::new();
        let draws = 100_000;
        for _ in 0..draws {
            let z = sample_assignment(&d, &mut rng).unwrap();
            *counts.entry(z.0).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (_, c) in counts {
            let freq = f64::from(c) / f64::from(draws);
            assert!((freq - 1.0 / 6.0).abs() < 0.01, "freq {freq}");
        }
    }

    #[test]
    fn crd_conditioning_leaves_one_treated_among_free() {
        // Units 2,3 pinned to (1,0): one treated remains for units 0,1.
        let d = Design::CompletelyRandomized { treated: 2, total: 4 };
        let law = ConditionalLaw::new(d, &[2, 3], &[1, 0]).unwrap();
        let support = enumerate_conditional_support(&law).unwrap();
        assert_eq!(support.len(), 2);
        for (z, p) in &support {
            assert_eq!((z.0[2], z.0[3]), (1, 0));
            assert_eq!(z.0[0] + z.0[1], 1);
            assert!((p - 0.5).abs() < 1e-15);
        }

        let mut rng = replicate_rng(7, 0);
        for _ in 0..200 {
            let z = conditional_resample(&law, &mut rng);
            assert_eq!((z.0[2], z.0[3]), (1, 0));
            assert_eq!(z.0[0] + z.0[1], 1);
        }
    }

    #[test]
    fn bernoulli_conditioning_is_a_noop_on_free_units() {
        let d = Design::Bernoulli { propensities: vec![0.5, 0.5, 0.5] };
        let law = ConditionalLaw::new(d, &[0], &[1]).unwrap();
        let support = enumerate_conditional_support(&law).unwrap();
        assert_eq!(support.len(), 4);
        for (z, p) in &support {
            assert_eq!(z.0[0], 1);
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn stratified_counts_can_force_free_units() {
        // Stratum 0 = units {0,1} with one treated, stratum 1 = units {2,3}
        // with one treated. Pinning unit 1 to control and unit 3 to treated
        // leaves no choice: unit 0 treated, unit 2 control.
        let d = Design::StratifiedCrd {
            strata: vec![0, 0, 1, 1],
            treated_per_stratum: BTreeMap::from([(0, 1), (1, 1)]),
        };
        let law = ConditionalLaw::new(d, &[1, 3], &[0, 1]).unwrap();
        let support = enumerate_conditional_support(&law).unwrap();
        assert_eq!(support.len(), 1);
        assert_eq!(support[0].0 .0, vec![1, 0, 0, 1]);
        assert!((support[0].1 - 1.0).abs() < 1e-15);

        let mut rng = replicate_rng(3, 0);
        assert_eq!(conditional_resample(&law, &mut rng).0, vec![1, 0, 0, 1]);
    }

    #[test]
    fn infeasible_pins_are_hard_errors() {
        let d = Design::CompletelyRandomized { treated: 1, total: 4 };
        let err = ConditionalLaw::new(d, &[0, 1], &[1, 1]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleConditioning(_)), "{err}");

        let d = Design::CompletelyRandomized { treated: 3, total: 4 };
        let err = ConditionalLaw::new(d, &[0, 1], &[0, 0]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleConditioning(_)), "{err}");
    }

    #[test]
    fn support_probabilities_sum_to_one() {
        let d = Design::Bernoulli { propensities: vec![0.2, 0.7, 0.4, 0.9] };
        let law = ConditionalLaw::unconditional(d).unwrap();
        let support = enumerate_conditional_support(&law).unwrap();
        assert_eq!(support.len(), 16);
        let total: f64 = support.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let d = Design::Bernoulli { propensities: vec![0.5; 21] };
        let law = ConditionalLaw::unconditional(d).unwrap();
        let err = enumerate_conditional_support(&law).unwrap_err();
        assert!(matches!(err, Error::SupportTooLarge { free: 21, cap: 20 }));
    }

    #[test]
    fn identical_seeds_give_identical_draws_and_streams_differ() {
        let d = Design::CompletelyRandomized { treated: 5, total: 12 };
        let a = sample_assignment(&d, &mut replicate_rng(9, 3)).unwrap();
        let b = sample_assignment(&d, &mut replicate_rng(9, 3)).unwrap();
        let c = sample_assignment(&d, &mut replicate_rng(9, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
