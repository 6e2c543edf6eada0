//! Randomization inference for data-driven subgroups.
//!
//! The pipeline this crate implements: reveal treatment assignments batch by
//! batch from the least promising end of a biomarker ordering, stop when a
//! batch shows benefit, and take the still-concealed remainder as the selected
//! subgroup. Because the selection never reads the treatments of the units it
//! keeps, the sharp null inside the subgroup can be tested by re-randomizing
//! those units alone, holding everything revealed fixed. The test is exactly
//! valid conditional on the selection, with no sample splitting.
//!
//! Module map: [`model`] holds datasets and hypotheses, [`design`] the three
//! assignment designs and their conditional laws, [`stats`] the test
//! statistics, [`select`] the batch selectors, [`infer`] the conditional
//! randomization test and confidence sets, [`simulate`] the synthetic-trial
//! power harness, and [`theory`] the signal-to-noise and normal-approximation
//! diagnostics.

pub mod config;
pub mod design;
pub mod error;
pub mod infer;
pub mod model;
pub mod select;
pub mod simulate;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
