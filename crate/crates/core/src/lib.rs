//! Conditional randomization tests for causal effects under interference.
//!
//! An experiment is a [`Population`] of units in households (optionally on a
//! network), a [`DesignSpec`] that randomizes treatment, and an
//! [`ExposureMapSpec`] that reduces an assignment to each unit's exposure.
//! A [`ContrastHypothesis`] asserts that two exposures have the same effect.
//! Conditioning on focal units chosen by a [`MechanismSpec`] makes the null
//! sharp, and [`ConditionalTest`] computes the p-value.
//!
//! Outcome values are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common `f64` case.

pub mod cli;
pub mod conditioning;
pub mod design;
pub mod engine;
pub mod error;
pub mod estimate;
pub mod exposure;
pub mod population;
pub mod power;
pub mod rng;
pub mod scalar;

pub use conditioning::{
    aronow_set, compatible_set, effective_focal_distribution, effective_focal_distribution_for, effective_focals,
    sample_network_conditional, Arm, ConditionalSampler, ConditioningEvent, ContrastHypothesis, EffectTarget,
    HouseholdStateSampler, MechanismSpec, Zset,
};
pub use design::{Assignment, DesignSpec, DEFAULT_ENUMERATION_CAP};
pub use engine::{
    check_imputable, diff_in_means, pvalue_exact, pvalue_monte_carlo, pvalue_permutation_spillover, Alternative,
    ConditionalTest, EngineConfig, Method, NullPlan,
};
pub use error::{Error, Result};
pub use estimate::{
    hodges_lehmann, invert_ci, invert_test, residualize, shift_under_null, AdditiveEffectModel, InversionConfig,
};
pub use exposure::{ExposureLabel, ExposureMapSpec};
pub use population::{Covariates, Dataset, OutcomeData, Population, Schema};
pub use power::{
    analytic_power, power_comparison_rule, simulate_power, AnalyticPowerParams, PowerOrdering, PowerScenario,
};
pub use rng::Rng;
pub use scalar::Scalar;

pub type Outcomes = OutcomeData<f64>;
pub type Report = engine::TestReport<f64>;
pub type Inversion = estimate::InversionResult<f64>;
pub type Effect = AdditiveEffectModel<f64>;

pub type Outcomes32 = OutcomeData<f32>;
pub type Report32 = engine::TestReport<f32>;
pub type Inversion32 = estimate::InversionResult<f32>;
pub type Effect32 = AdditiveEffectModel<f32>;
