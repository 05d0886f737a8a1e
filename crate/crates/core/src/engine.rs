//! Test statistics and conditional p-values.
//!
//! A null distribution is represented by the arm patterns the focal units
//! take under draws from `pr(Z | C)`. Under the sharp contrast null the focal
//! outcomes are fixed, so the statistic of a pattern is computed from the
//! observed outcomes alone.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    Arm, ConditionalSampler, ConditioningEvent, ContrastHypothesis, MechanismSpec, Zset,
};
use crate::design::{binomial_saturating, Assignment, Combinations, DesignSpec, DEFAULT_ENUMERATION_CAP};
use crate::error::{Error, Result};
use crate::exposure::ExposureLabel;
use crate::population::Population;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

/// Stream index reserved for the focal-set draw of a test.
pub const FOCAL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Large values of `mean_a - mean_b` are evidence against the null.
    #[default]
    Greater,
    Less,
    /// Twice the smaller one-sided p-value, capped at 1.
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Permutation when the mechanism allows it, else Monte Carlo when a
    /// conditional sampler exists, else exact enumeration.
    #[default]
    Auto,
    Exact,
    Permutation,
    MonteCarlo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Auto => "auto",
            Method::Exact => "exact",
            Method::Permutation => "permutation",
            Method::MonteCarlo => "monte_carlo",
        }
    }
}

/// Engine settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub method: Method,
    pub replicates: usize,
    /// Largest support an exact enumeration may visit.
    pub cap: u64,
    pub alternative: Alternative,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            method: Method::Auto,
            replicates: 10_000,
            cap: DEFAULT_ENUMERATION_CAP as u64,
            alternative: Alternative::Greater,
        }
    }
}

/// Arm of each focal under `z`.
pub fn focal_arms(hyp: &ContrastHypothesis, pop: &Population, focals: &[usize], z: &Assignment) -> Vec<Arm> {
    focals.iter().map(|&i| hyp.arm(hyp.map.exposure_of(pop, z, i))).collect()
}

/// `mean(y | A) - mean(y | B)` over parallel slices of focal outcomes and
/// arms; `None` when an arm is empty.
pub fn pattern_statistic<T: Scalar>(y: &[T], arms: &[Arm]) -> Option<T> {
    let (mut sa, mut sb) = (T::zero(), T::zero());
    let (mut na, mut nb) = (0usize, 0usize);
    for (&v, &arm) in y.iter().zip(arms) {
        match arm {
            Arm::A => {
                sa = sa + v;
                na += 1;
            }
            Arm::B => {
                sb = sb + v;
                nb += 1;
            }
            Arm::Other => {}
        }
    }
    if na == 0 || nb == 0 {
        return None;
    }
    Some(sa / T::of_usize(na) - sb / T::of_usize(nb))
}

/// Difference in mean outcome between focals at exposure `a` and focals at
/// exposure `b` under `z`. `y` is indexed by unit.
pub fn diff_in_means<T: Scalar>(
    hyp: &ContrastHypothesis,
    pop: &Population,
    focals: &[usize],
    z: &Assignment,
    y: &[T],
) -> Option<T> {
    let yf: Vec<T> = focals.iter().map(|&i| y[i]).collect();
    pattern_statistic(&yf, &focal_arms(hyp, pop, focals, z))
}

/// Tolerance under which two statistics count as tied.
pub fn tie_tolerance<T: Scalar>(y_focal: &[T]) -> T {
    let scale = y_focal.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    T::epsilon() * T::of_usize(y_focal.len() + 8) * scale
}

/// Null values with optional probability weights. Weighted values are an
/// exact distribution; unweighted ones are Monte Carlo replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct NullValues<V> {
    pub values: Vec<V>,
    pub weights: Option<Vec<f64>>,
}

/// One-sided tail probability `pr(T >= t_obs)` (or `<=` when `upper` is
/// false). Degenerate values count as extreme in either direction.
fn tail<T: Scalar>(null: &NullValues<Option<T>>, t_obs: T, upper: bool, tol: T) -> f64 {
    let extreme = |t: &Option<T>| match t {
        None => true,
        Some(t) if upper => *t >= t_obs - tol,
        Some(t) => *t <= t_obs + tol,
    };
    match &null.weights {
        Some(w) => null.values.iter().zip(w).filter(|(t, _)| extreme(t)).map(|(_, w)| *w).sum::<f64>().min(1.0),
        None => {
            let hits = null.values.iter().filter(|t| extreme(t)).count();
            (1 + hits) as f64 / (1 + null.values.len()) as f64
        }
    }
}

/// Conditional p-value of `t_obs` against a null distribution; an observed
/// degenerate statistic has p-value 1.
pub fn p_value<T: Scalar>(null: &NullValues<Option<T>>, t_obs: Option<T>, alt: Alternative, tol: T) -> f64 {
    let Some(t) = t_obs else { return 1.0 };
    match alt {
        Alternative::Greater => tail(null, t, true, tol),
        Alternative::Less => tail(null, t, false, tol),
        Alternative::TwoSided => (2.0 * tail(null, t, true, tol).min(tail(null, t, false, tol))).min(1.0),
    }
}

#[derive(Debug, Clone)]
enum PlanKind {
    /// Distinct patterns of the explicit assignment set with their mass.
    Exact(Vec<(Vec<Arm>, f64)>),
    /// All arrangements of the observed B labels over the effective focals.
    PermutationExact { effective: Vec<usize>, n_b: usize, total: u128 },
    PermutationMc { effective: Vec<usize>, replicates: usize, seed: u64 },
    MonteCarlo { sampler: ConditionalSampler, replicates: usize, seed: u64 },
}

/// A resolved way of drawing focal arm patterns from `pr(Z | C)`.
#[derive(Debug, Clone)]
pub struct NullPlan {
    kind: PlanKind,
    observed: Vec<Arm>,
    zset_size: Option<usize>,
}

impl NullPlan {
    pub fn method(&self) -> Method {
        match self.kind {
            PlanKind::Exact(_) => Method::Exact,
            PlanKind::PermutationExact { .. } | PlanKind::PermutationMc { .. } => Method::Permutation,
            PlanKind::MonteCarlo { .. } => Method::MonteCarlo,
        }
    }

    /// Monte Carlo replicate count, or 0 for exact distributions.
    pub fn replicates(&self) -> usize {
        match self.kind {
            PlanKind::PermutationMc { replicates, .. } | PlanKind::MonteCarlo { replicates, .. } => replicates,
            _ => 0,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.kind, PlanKind::Exact(_) | PlanKind::PermutationExact { .. })
    }

    /// Size of the explicit assignment set, when one was built.
    pub fn zset_size(&self) -> Option<usize> {
        self.zset_size
    }

    /// Observed focal arms.
    pub fn observed(&self) -> &[Arm] {
        &self.observed
    }

    /// Plan over all permutations of the observed arms among the effective
    /// focals; exact when at most `cap` arrangements exist.
    pub fn permutation(observed: Vec<Arm>, replicates: usize, cap: u128, seed: u64) -> Self {
        let effective: Vec<usize> = (0..observed.len()).filter(|&j| observed[j] != Arm::Other).collect();
        let n_b = effective.iter().filter(|&&j| observed[j] == Arm::B).count();
        let total = binomial_saturating(effective.len(), n_b);
        let kind = if total <= cap {
            PlanKind::PermutationExact { effective, n_b, total }
        } else {
            PlanKind::PermutationMc { effective, replicates, seed }
        };
        Self { kind, observed, zset_size: None }
    }

    /// Exact plan over an explicit assignment set with weights
    /// `pr(Z) f(U | Z)` renormalized over the set.
    pub fn exact(
        hyp: &ContrastHypothesis,
        pop: &Population,
        design: &DesignSpec,
        mech: &MechanismSpec,
        event: &ConditioningEvent,
        z_obs: &Assignment,
    ) -> Result<Self> {
        let Zset::Explicit(set) = &event.zset else {
            return Err(Error::Infeasible("exact p-values need an explicit assignment set".into()));
        };
        let mut logw = Vec::with_capacity(set.len());
        let mut patterns = Vec::with_capacity(set.len());
        for z in set {
            let lw = design.log_mass(pop, z) + mech.log_focal_prob(pop, &event.focals, z);
            if lw.is_finite() {
                logw.push(lw);
                patterns.push(focal_arms(hyp, pop, &event.focals, z));
            }
        }
        if logw.is_empty() {
            return Err(Error::OutOfSupport);
        }
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logw.iter().map(|lw| (lw - max).exp()).sum();
        let mut merged: BTreeMap<Vec<Arm>, f64> = BTreeMap::new();
        for (p, lw) in patterns.into_iter().zip(logw) {
            *merged.entry(p).or_insert(0.0) += (lw - max).exp() / total;
        }
        Ok(Self {
            kind: PlanKind::Exact(merged.into_iter().collect()),
            observed: focal_arms(hyp, pop, &event.focals, z_obs),
            zset_size: Some(set.len()),
        })
    }

    pub fn monte_carlo(sampler: ConditionalSampler, observed: Vec<Arm>, replicates: usize, seed: u64) -> Self {
        Self { kind: PlanKind::MonteCarlo { sampler, replicates, seed }, observed, zset_size: None }
    }

    /// Evaluates `f` on every pattern (exact) or on each replicate (Monte
    /// Carlo). Replicate `r` draws from stream `r` of the plan seed, so the
    /// result does not depend on the thread count.
    pub fn evaluate<V, F>(&self, pop: &Population, f: F) -> Result<NullValues<V>>
    where
        V: Send,
        F: Fn(&[Arm]) -> V + Sync,
    {
        match &self.kind {
            PlanKind::Exact(patterns) => Ok(NullValues {
                values: patterns.iter().map(|(p, _)| f(p)).collect(),
                weights: Some(patterns.iter().map(|(_, w)| *w).collect()),
            }),
            PlanKind::PermutationExact { effective, n_b, total } => {
                let mut buf = self.observed.clone();
                let mut values = Vec::with_capacity(*total as usize);
                for chosen in Combinations::new(effective.len(), *n_b) {
                    for &j in effective {
                        buf[j] = Arm::A;
                    }
                    for c in chosen {
                        buf[effective[c]] = Arm::B;
                    }
                    values.push(f(&buf));
                }
                let w = 1.0 / values.len() as f64;
                let weights = Some(vec![w; values.len()]);
                Ok(NullValues { values, weights })
            }
            PlanKind::PermutationMc { effective, replicates, seed } => {
                let labels: Vec<Arm> = effective.iter().map(|&j| self.observed[j]).collect();
                let values = (0..*replicates)
                    .into_par_iter()
                    .map_init(
                        || (self.observed.clone(), labels.clone()),
                        |(buf, lab), r| {
                            let mut rng = rng::stream(*seed, r as u64);
                            lab.copy_from_slice(&labels);
                            lab.shuffle(&mut rng);
                            for (&j, &l) in effective.iter().zip(lab.iter()) {
                                buf[j] = l;
                            }
                            f(buf)
                        },
                    )
                    .collect();
                Ok(NullValues { values, weights: None })
            }
            PlanKind::MonteCarlo { sampler, replicates, seed } => {
                let values = (0..*replicates)
                    .into_par_iter()
                    .map_init(
                        || vec![Arm::Other; self.observed.len()],
                        |buf, r| {
                            let mut rng: Rng = rng::stream(*seed, r as u64);
                            sampler.sample_pattern(pop, &mut rng, buf).map(|_| f(buf))
                        },
                    )
                    .collect::<Result<Vec<V>>>()?;
                Ok(NullValues { values, weights: None })
            }
        }
    }
}

/// Focal counts by arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArmCounts {
    pub a: usize,
    pub b: usize,
    pub other: usize,
}

impl ArmCounts {
    pub fn of(arms: &[Arm]) -> Self {
        arms.iter().fold(Self::default(), |mut c, arm| {
            match arm {
                Arm::A => c.a += 1,
                Arm::B => c.b += 1,
                Arm::Other => c.other += 1,
            }
            c
        })
    }
}

/// Result of one conditional randomization test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport<T> {
    /// Observed statistic; absent when an arm is empty.
    pub t_obs: Option<T>,
    pub pvalue: f64,
    pub method: Method,
    pub alternative: Alternative,
    /// Monte Carlo replicates; 0 for exact distributions.
    pub replicates: usize,
    pub seed: u64,
    pub focals: Vec<usize>,
    pub n_effective: usize,
    pub arm_counts: ArmCounts,
    /// Set when every effective focal shares one exposure.
    pub degenerate: bool,
    /// Size of the explicit assignment set, for exact runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub zset_size: Option<usize>,
}

/// Whether labels can be permuted directly: the conditional mechanism that
/// matches the contrast makes every arrangement of treated households
/// equally likely.
pub fn permutation_applies(mech: &MechanismSpec, hyp: &ContrastHypothesis) -> bool {
    if hyp.map != crate::exposure::ExposureMapSpec::TwoStage {
        return false;
    }
    let pair = |x: ExposureLabel, y: ExposureLabel| {
        (hyp.a == x && hyp.b == y) || (hyp.a == y && hyp.b == x)
    };
    match mech {
        MechanismSpec::SpilloverConditional => pair(ExposureLabel::CONTROL, ExposureLabel::SPILLOVER),
        MechanismSpec::PrimaryConditional => pair(ExposureLabel::CONTROL, ExposureLabel::TREATED),
        _ => false,
    }
}

/// A configured conditional randomization test.
#[derive(Debug, Clone)]
pub struct ConditionalTest<'a> {
    pub pop: &'a Population,
    pub design: &'a DesignSpec,
    pub hyp: &'a ContrastHypothesis,
    pub mech: &'a MechanismSpec,
    pub config: EngineConfig,
}

impl<'a> ConditionalTest<'a> {
    pub fn new(
        pop: &'a Population,
        design: &'a DesignSpec,
        hyp: &'a ContrastHypothesis,
        mech: &'a MechanismSpec,
        config: EngineConfig,
    ) -> Result<Self> {
        mech.validate(hyp, pop, design)?;
        Ok(Self { pop, design, hyp, mech, config })
    }

    fn check_observed(&self, z_obs: &Assignment) -> Result<()> {
        if self.design.log_mass(self.pop, z_obs).is_finite() {
            Ok(())
        } else {
            Err(Error::OutOfSupport)
        }
    }

    /// Focal set drawn from the mechanism on the reserved stream of `seed`.
    pub fn draw_focals(&self, z_obs: &Assignment, seed: u64) -> Result<Vec<usize>> {
        self.mech.draw_focals(self.pop, z_obs, &mut rng::stream(seed, FOCAL_STREAM))
    }

    /// Resolves the configured method for a focal set.
    pub fn plan(&self, focals: &[usize], z_obs: &Assignment, seed: u64) -> Result<NullPlan> {
        self.check_observed(z_obs)?;
        let cap = self.config.cap as u128;
        let observed = focal_arms(self.hyp, self.pop, focals, z_obs);
        let exact = || -> Result<NullPlan> {
            let event = ConditioningEvent::explicit(
                self.mech,
                self.hyp,
                self.pop,
                self.design,
                focals.to_vec(),
                z_obs,
                cap,
            )?;
            NullPlan::exact(self.hyp, self.pop, self.design, self.mech, &event, z_obs)
        };
        let sampler = || ConditionalSampler::new(self.mech, self.hyp, self.pop, self.design, focals, z_obs);
        let replicates = self.config.replicates;
        match self.config.method {
            Method::Exact => exact(),
            Method::Permutation => {
                if !permutation_applies(self.mech, self.hyp) {
                    return Err(Error::IncompatibleMechanism {
                        mechanism: self.mech.name().into(),
                        reason: "label permutation needs the conditional mechanism matching the contrast".into(),
                    });
                }
                Ok(NullPlan::permutation(observed, replicates, cap, seed))
            }
            Method::MonteCarlo => Ok(NullPlan::monte_carlo(sampler()?, observed, replicates, seed)),
            Method::Auto => {
                if permutation_applies(self.mech, self.hyp) {
                    return Ok(NullPlan::permutation(observed, replicates, cap, seed));
                }
                match sampler() {
                    Ok(s) => Ok(NullPlan::monte_carlo(s, observed, replicates, seed)),
                    Err(Error::SamplerUnavailable { .. }) => exact(),
                    Err(e) => Err(e),
                }
            }
        }
    }

    /// Draws a focal set and tests. `y` is indexed by unit.
    pub fn run<T: Scalar>(&self, y: &[T], z_obs: &Assignment, seed: u64) -> Result<TestReport<T>> {
        self.check_observed(z_obs)?;
        let focals = self.draw_focals(z_obs, seed)?;
        self.run_with_focals(y, z_obs, focals, seed)
    }

    pub fn run_with_focals<T: Scalar>(
        &self,
        y: &[T],
        z_obs: &Assignment,
        focals: Vec<usize>,
        seed: u64,
    ) -> Result<TestReport<T>> {
        if y.len() != self.pop.n_units() {
            return Err(Error::InvalidData(format!(
                "{} outcomes for {} units",
                y.len(),
                self.pop.n_units()
            )));
        }
        let plan = self.plan(&focals, z_obs, seed)?;
        let yf: Vec<T> = focals.iter().map(|&i| y[i]).collect();
        report_from_plan(&plan, self.pop, &yf, focals, self.config.alternative, seed)
    }
}

/// Runs a plan against focal outcomes `yf` (in focal order).
pub fn report_from_plan<T: Scalar>(
    plan: &NullPlan,
    pop: &Population,
    yf: &[T],
    focals: Vec<usize>,
    alternative: Alternative,
    seed: u64,
) -> Result<TestReport<T>> {
    let observed = plan.observed();
    let t_obs = pattern_statistic(yf, observed);
    let counts = ArmCounts::of(observed);
    let pvalue = match t_obs {
        None => 1.0,
        Some(_) => {
            let null = plan.evaluate(pop, |arms| pattern_statistic(yf, arms))?;
            p_value(&null, t_obs, alternative, tie_tolerance(yf))
        }
    };
    Ok(TestReport {
        t_obs,
        pvalue,
        method: plan.method(),
        alternative,
        replicates: plan.replicates(),
        seed,
        focals,
        n_effective: counts.a + counts.b,
        arm_counts: counts,
        degenerate: t_obs.is_none(),
        zset_size: plan.zset_size(),
    })
}

/// Exact p-value over an explicit conditioning event.
pub fn pvalue_exact<T: Scalar>(
    hyp: &ContrastHypothesis,
    pop: &Population,
    design: &DesignSpec,
    mech: &MechanismSpec,
    event: &ConditioningEvent,
    z_obs: &Assignment,
    y: &[T],
    alternative: Alternative,
) -> Result<TestReport<T>> {
    let plan = NullPlan::exact(hyp, pop, design, mech, event, z_obs)?;
    let yf: Vec<T> = event.focals.iter().map(|&i| y[i]).collect();
    report_from_plan(&plan, pop, &yf, event.focals.clone(), alternative, 0)
}

/// Label-permutation p-value for the spillover contrast with focals drawn
/// by the spillover-conditional mechanism.
pub fn pvalue_permutation_spillover<T: Scalar>(
    pop: &Population,
    z_obs: &Assignment,
    y: &[T],
    focals: &[usize],
    seed: u64,
    replicates: usize,
    cap: u128,
    alternative: Alternative,
) -> Result<TestReport<T>> {
    let mut seen = vec![false; pop.n_households()];
    for &i in focals {
        let k = pop.household_of(i);
        if seen[k] || z_obs.is_treated(i) {
            return Err(Error::InvalidData("focals must be one untreated unit per household".into()));
        }
        seen[k] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidData("focals must cover every household".into()));
    }
    let hyp = ContrastHypothesis::spillover();
    let plan = NullPlan::permutation(focal_arms(&hyp, pop, focals, z_obs), replicates, cap, seed);
    let yf: Vec<T> = focals.iter().map(|&i| y[i]).collect();
    report_from_plan(&plan, pop, &yf, focals.to_vec(), alternative, seed)
}

/// Monte Carlo p-value: draws the focal set once, then `replicates`
/// assignments from `pr(Z | C)`.
pub fn pvalue_monte_carlo<T: Scalar>(
    hyp: &ContrastHypothesis,
    pop: &Population,
    design: &DesignSpec,
    mech: &MechanismSpec,
    z_obs: &Assignment,
    y: &[T],
    seed: u64,
    replicates: usize,
    alternative: Alternative,
) -> Result<TestReport<T>> {
    let config = EngineConfig { method: Method::MonteCarlo, replicates, alternative, ..EngineConfig::default() };
    ConditionalTest::new(pop, design, hyp, mech, config)?.run(y, z_obs, seed)
}

/// A violation of imputability: the statistic at `z_prime` differs when
/// computed from `Y(z_prime)` and from `Y(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub z: Assignment,
    pub z_prime: Assignment,
    pub focals: Vec<usize>,
}

/// Checks that the difference in means is imputable for every observed
/// assignment, every focal set the mechanism can draw and every assignment
/// in the resulting event. `outcomes(z)` returns `Y(z)` indexed by unit.
pub fn check_imputable<T, F>(
    hyp: &ContrastHypothesis,
    pop: &Population,
    design: &DesignSpec,
    mech: &MechanismSpec,
    outcomes: F,
    cap: u128,
) -> Result<Option<Counterexample>>
where
    T: Scalar,
    F: Fn(&Assignment) -> Vec<T>,
{
    let support: Vec<Assignment> = design.enumerate(pop, cap)?.collect();
    let table: HashMap<&Assignment, Vec<T>> = support.iter().map(|z| (z, outcomes(z))).collect();
    let close = |x: Option<T>, y: Option<T>| match (x, y) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= T::of(1e-9) * (T::one() + x.abs()),
        _ => false,
    };
    for z in &support {
        let y_z = &table[z];
        for focals in mech.enumerate_focal_sets(pop, z, cap)? {
            let event = ConditioningEvent::explicit(mech, hyp, pop, design, focals, z, cap)?;
            let Zset::Explicit(set) = &event.zset else { unreachable!("explicit event") };
            for zp in set {
                if mech.log_focal_prob(pop, &event.focals, zp) == f64::NEG_INFINITY {
                    continue;
                }
                let arms = focal_arms(hyp, pop, &event.focals, zp);
                let own: Vec<T> = event.focals.iter().map(|&i| table[zp][i]).collect();
                let imputed: Vec<T> = event.focals.iter().map(|&i| y_z[i]).collect();
                if !close(pattern_statistic(&own, &arms), pattern_statistic(&imputed, &arms)) {
                    return Ok(Some(Counterexample { z: z.clone(), z_prime: zp.clone(), focals: event.focals }));
                }
            }
        }
    }
    Ok(None)
}
