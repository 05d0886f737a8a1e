//! Conditioning mechanisms `m(C | Z) = f(U | Z) g(Zset | U, Z)`.
//!
//! A conditioning event is a focal set `U` and a set of assignments `Zset`.
//! `g` is always degenerate on the assignments that keep every focal's
//! exposure inside `{a, b}` when it is observed there, and fixed otherwise;
//! mechanisms therefore differ only in how they draw the focal set.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::design::{Assignment, DesignSpec, MixedRadix};
use crate::error::{Error, Result};
use crate::exposure::{ExposureLabel, ExposureMapSpec};
use crate::population::Population;
use crate::rng::Rng;

/// Which side of the contrast a focal unit falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Arm {
    A,
    B,
    /// Exposure outside `{a, b}`: the unit is focal but not effective.
    Other,
}

/// Null hypothesis of no difference between exposures `a` and `b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastHypothesis {
    pub a: ExposureLabel,
    pub b: ExposureLabel,
    pub map: ExposureMapSpec,
}

impl ContrastHypothesis {
    pub fn new(map: ExposureMapSpec, a: ExposureLabel, b: ExposureLabel) -> Result<Self> {
        if a == b {
            return Err(Error::InvalidHypothesis(format!("contrasted exposures must differ (both `{a}`)")));
        }
        let alphabet = map.alphabet();
        for l in [a, b] {
            if !alphabet.contains(&l) {
                return Err(Error::InvalidHypothesis(format!("`{l}` is not an exposure of `{}`", map.name())));
            }
        }
        Ok(Self { a, b, map })
    }

    /// No spillover: `(0,0)` against `(0,1)`.
    pub fn spillover() -> Self {
        Self { a: ExposureLabel::CONTROL, b: ExposureLabel::SPILLOVER, map: ExposureMapSpec::TwoStage }
    }

    /// No primary effect: `(0,0)` against `(1,1)`.
    pub fn primary() -> Self {
        Self { a: ExposureLabel::CONTROL, b: ExposureLabel::TREATED, map: ExposureMapSpec::TwoStage }
    }

    /// Same contrast with the arms swapped; the statistic changes sign.
    pub fn swapped(&self) -> Self {
        Self { a: self.b, b: self.a, map: self.map.clone() }
    }

    pub fn contains(&self, l: ExposureLabel) -> bool {
        l == self.a || l == self.b
    }

    pub fn arm(&self, l: ExposureLabel) -> Arm {
        if l == self.a {
            Arm::A
        } else if l == self.b {
            Arm::B
        } else {
            Arm::Other
        }
    }

    /// True for two-stage contrasts that involve the spillover exposure,
    /// which is undefined for units living alone.
    pub fn involves_spillover(&self) -> bool {
        self.map == ExposureMapSpec::TwoStage && self.contains(ExposureLabel::SPILLOVER)
    }

    pub fn validate(&self, pop: &Population) -> Result<()> {
        Self::new(self.map.clone(), self.a, self.b)?;
        self.map.validate(pop)?;
        if self.involves_spillover() {
            if let Some(&k) = pop.singleton_households().first() {
                return Err(Error::SingletonHousehold(pop.household_id(k).to_string()));
            }
        }
        Ok(())
    }
}

/// Effect targeted by two-stage analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectTarget {
    Spillover,
    Primary,
}

impl EffectTarget {
    /// The exposure that differs from pure control under this target.
    pub fn exposed_label(self) -> ExposureLabel {
        match self {
            EffectTarget::Spillover => ExposureLabel::SPILLOVER,
            EffectTarget::Primary => ExposureLabel::TREATED,
        }
    }

    /// `(0,0)` against the exposed label.
    pub fn hypothesis(self) -> ContrastHypothesis {
        match self {
            EffectTarget::Spillover => ContrastHypothesis::spillover(),
            EffectTarget::Primary => ContrastHypothesis::primary(),
        }
    }
}

/// Focal-set distribution `f(U | Z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MechanismSpec {
    /// One untreated unit per household, uniformly.
    SpilloverConditional,
    /// The treated unit in treated households, a uniform unit elsewhere.
    PrimaryConditional,
    /// One uniform unit per household, ignoring the assignment.
    PerHouseholdUnconditional,
    /// Same focal draw as [`MechanismSpec::PerHouseholdUnconditional`], with
    /// the assignment set restricted to `Z_U = Z_obs,U`.
    AronowRestriction,
    /// `m` uniform focals among the untreated units of a network.
    NetworkProcedure { m: usize },
}

impl MechanismSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MechanismSpec::SpilloverConditional => "spillover_conditional",
            MechanismSpec::PrimaryConditional => "primary_conditional",
            MechanismSpec::PerHouseholdUnconditional => "per_household_unconditional",
            MechanismSpec::AronowRestriction => "aronow_restriction",
            MechanismSpec::NetworkProcedure { .. } => "network_procedure",
        }
    }

    fn incompatible(&self, reason: impl Into<String>) -> Error {
        Error::IncompatibleMechanism { mechanism: self.name().into(), reason: reason.into() }
    }

    pub fn one_per_household(&self) -> bool {
        !matches!(self, MechanismSpec::NetworkProcedure { .. })
    }

    /// Cross-checks mechanism, hypothesis, design and population.
    pub fn validate(&self, hyp: &ContrastHypothesis, pop: &Population, design: &DesignSpec) -> Result<()> {
        hyp.validate(pop)?;
        design.validate(pop)?;
        match self {
            MechanismSpec::SpilloverConditional | MechanismSpec::PrimaryConditional => {
                if hyp.map != ExposureMapSpec::TwoStage {
                    return Err(self.incompatible("requires the two_stage exposure mapping"));
                }
                if !matches!(design, DesignSpec::TwoStage { .. }) {
                    return Err(self.incompatible("requires a two_stage design"));
                }
            }
            MechanismSpec::PerHouseholdUnconditional | MechanismSpec::AronowRestriction => {}
            MechanismSpec::NetworkProcedure { m } => {
                let DesignSpec::Complete { n1 } = *design else {
                    return Err(self.incompatible("requires a complete design"));
                };
                if *m > pop.n_units() - n1 {
                    return Err(self.incompatible(format!("M = {m} exceeds the {} control units", pop.n_units() - n1)));
                }
            }
        }
        Ok(())
    }

    /// Draws a focal set `U ~ f(U | z_obs)`, returned in ascending unit order.
    pub fn draw_focals(&self, pop: &Population, z_obs: &Assignment, rng: &mut Rng) -> Result<Vec<usize>> {
        let mut focals = Vec::with_capacity(pop.n_households());
        match *self {
            MechanismSpec::SpilloverConditional => {
                for k in 0..pop.n_households() {
                    let eligible: Vec<usize> =
                        pop.members(k).iter().copied().filter(|&i| !z_obs.is_treated(i)).collect();
                    if eligible.is_empty() {
                        return Err(Error::NoEligibleFocal(pop.household_id(k).to_string()));
                    }
                    focals.push(eligible[rng.random_range(0..eligible.len())]);
                }
            }
            MechanismSpec::PrimaryConditional => {
                for k in 0..pop.n_households() {
                    let members = pop.members(k);
                    match z_obs.household_count(k) {
                        0 => focals.push(members[rng.random_range(0..members.len())]),
                        1 => focals.extend(members.iter().copied().filter(|&i| z_obs.is_treated(i))),
                        _ => return Err(self.incompatible("household with more than one treated unit")),
                    }
                }
            }
            MechanismSpec::PerHouseholdUnconditional | MechanismSpec::AronowRestriction => {
                for k in 0..pop.n_households() {
                    let members = pop.members(k);
                    focals.push(members[rng.random_range(0..members.len())]);
                }
            }
            MechanismSpec::NetworkProcedure { m } => {
                let controls: Vec<usize> = (0..pop.n_units()).filter(|&i| !z_obs.is_treated(i)).collect();
                if m > controls.len() {
                    return Err(Error::Infeasible(format!("M = {m} exceeds the {} untreated units", controls.len())));
                }
                focals.extend(index::sample(rng, controls.len(), m).into_iter().map(|j| controls[j]));
            }
        }
        focals.sort_unstable();
        Ok(focals)
    }

    /// `log f(U | z)`; `-inf` when the mechanism cannot produce `U` under `z`.
    pub fn log_focal_prob(&self, pop: &Population, focals: &[usize], z: &Assignment) -> f64 {
        if self.one_per_household() {
            let mut seen = vec![0usize; pop.n_households()];
            for &i in focals {
                seen[pop.household_of(i)] += 1;
            }
            if seen.iter().any(|&c| c != 1) {
                return f64::NEG_INFINITY;
            }
        }
        match *self {
            MechanismSpec::SpilloverConditional => {
                let mut lp = 0.0;
                for &i in focals {
                    if z.is_treated(i) {
                        return f64::NEG_INFINITY;
                    }
                    let k = pop.household_of(i);
                    lp -= ((pop.household_size(k) - z.household_count(k) as usize) as f64).ln();
                }
                lp
            }
            MechanismSpec::PrimaryConditional => {
                let mut lp = 0.0;
                for &i in focals {
                    let k = pop.household_of(i);
                    match z.household_count(k) {
                        0 => lp -= (pop.household_size(k) as f64).ln(),
                        1 if z.is_treated(i) => {}
                        _ => return f64::NEG_INFINITY,
                    }
                }
                lp
            }
            MechanismSpec::PerHouseholdUnconditional | MechanismSpec::AronowRestriction => {
                -focals.iter().map(|&i| (pop.household_size(pop.household_of(i)) as f64).ln()).sum::<f64>()
            }
            MechanismSpec::NetworkProcedure { m } => {
                let controls = pop.n_units() - z.n_treated();
                if focals.len() != m || focals.iter().any(|&i| z.is_treated(i)) || m > controls {
                    return f64::NEG_INFINITY;
                }
                -ln_binomial(controls as u64, m as u64)
            }
        }
    }

    /// Every focal set with positive probability under `z`.
    pub fn enumerate_focal_sets(&self, pop: &Population, z: &Assignment, cap: u128) -> Result<Vec<Vec<usize>>> {
        let sets: Vec<Vec<usize>> = match *self {
            MechanismSpec::NetworkProcedure { m } => {
                let controls: Vec<usize> = (0..pop.n_units()).filter(|&i| !z.is_treated(i)).collect();
                let size = crate::design::binomial_saturating(controls.len(), m);
                if size > cap {
                    return Err(Error::SupportCap { size, cap });
                }
                crate::design::Combinations::new(controls.len(), m)
                    .map(|c| c.into_iter().map(|j| controls[j]).collect())
                    .collect()
            }
            _ => {
                let choices: Vec<Vec<usize>> = (0..pop.n_households())
                    .map(|k| {
                        pop.members(k)
                            .iter()
                            .copied()
                            .filter(|&i| self.log_focal_prob_unit(pop, i, z))
                            .collect()
                    })
                    .collect();
                let size = choices.iter().fold(1u128, |acc, c| acc.saturating_mul(c.len() as u128));
                if size > cap {
                    return Err(Error::SupportCap { size, cap });
                }
                MixedRadix::new(choices.iter().map(Vec::len).collect())
                    .map(|digits| {
                        let mut u: Vec<usize> = digits.iter().enumerate().map(|(k, &d)| choices[k][d]).collect();
                        u.sort_unstable();
                        u
                    })
                    .collect()
            }
        };
        Ok(sets)
    }

    fn log_focal_prob_unit(&self, pop: &Population, i: usize, z: &Assignment) -> bool {
        let k = pop.household_of(i);
        match self {
            MechanismSpec::SpilloverConditional => !z.is_treated(i),
            MechanismSpec::PrimaryConditional => z.household_count(k) == 0 || z.is_treated(i),
            _ => true,
        }
    }
}

/// The assignment set of a conditioning event.
#[derive(Debug, Clone, PartialEq)]
pub enum Zset {
    /// Materialized list, in design enumeration order.
    Explicit(Vec<Assignment>),
    /// Described only by the conditional sampler that draws from it.
    Implicit,
}

/// A conditioning event `C = (U, Zset)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningEvent {
    pub focals: Vec<usize>,
    pub zset: Zset,
}

impl ConditioningEvent {
    /// Explicit event for `mech`: [`aronow_set`] for the Aronow restriction,
    /// [`compatible_set`] for every other mechanism.
    pub fn explicit(
        mech: &MechanismSpec,
        hyp: &ContrastHypothesis,
        pop: &Population,
        design: &DesignSpec,
        focals: Vec<usize>,
        z_obs: &Assignment,
        cap: u128,
    ) -> Result<Self> {
        let set = match mech {
            MechanismSpec::AronowRestriction => aronow_set(pop, design, &focals, z_obs, cap)?,
            _ => compatible_set(hyp, pop, design, &focals, z_obs, cap)?,
        };
        Ok(Self { focals, zset: Zset::Explicit(set) })
    }
}

/// Observed focal exposures, used to test membership in `Zset`.
pub(crate) struct FocalConstraint<'a> {
    hyp: &'a ContrastHypothesis,
    focals: &'a [usize],
    observed: Vec<ExposureLabel>,
}

impl<'a> FocalConstraint<'a> {
    pub(crate) fn new(hyp: &'a ContrastHypothesis, pop: &Population, focals: &'a [usize], z_obs: &Assignment) -> Self {
        let observed = focals.iter().map(|&i| hyp.map.exposure_of(pop, z_obs, i)).collect();
        Self { hyp, focals, observed }
    }

    /// Whether `z` keeps every focal in `{a, b}` when observed there and at
    /// its observed exposure otherwise.
    pub(crate) fn admits(&self, pop: &Population, z: &Assignment) -> bool {
        self.focals.iter().zip(&self.observed).all(|(&i, &obs)| {
            let h = self.hyp.map.exposure_of(pop, z, i);
            if self.hyp.contains(obs) {
                self.hyp.contains(h)
            } else {
                h == obs
            }
        })
    }
}

/// `{Z' in support : every focal keeps a compatible exposure}`.
pub fn compatible_set(
    hyp: &ContrastHypothesis,
    pop: &Population,
    design: &DesignSpec,
    focals: &[usize],
    z_obs: &Assignment,
    cap: u128,
) -> Result<Vec<Assignment>> {
    hyp.map.validate(pop)?;
    let constraint = FocalConstraint::new(hyp, pop, focals, z_obs);
    Ok(design.enumerate(pop, cap)?.filter(|z| constraint.admits(pop, z)).collect())
}

/// `{Z' in support : Z'_U = Z_obs,U}`.
pub fn aronow_set(
    pop: &Population,
    design: &DesignSpec,
    focals: &[usize],
    z_obs: &Assignment,
    cap: u128,
) -> Result<Vec<Assignment>> {
    Ok(design
        .enumerate(pop, cap)?
        .filter(|z| focals.iter().all(|&i| z.is_treated(i) == z_obs.is_treated(i)))
        .collect())
}

/// Focals whose observed exposure is `a` or `b`.
pub fn effective_focals(hyp: &ContrastHypothesis, pop: &Population, focals: &[usize], z_obs: &Assignment) -> Vec<usize> {
    focals.iter().copied().filter(|&i| hyp.contains(hyp.map.exposure_of(pop, z_obs, i))).collect()
}

/// Law of `K - K1 + Binomial(K1, 1/n)` as `(count, probability)` pairs.
///
/// This is the effective-focal count of one-per-household focal selection
/// that ignores the assignment, when contrasting `(0,0)` with `(1,1)`: a
/// treated household's focal is effective only if it is the treated unit.
pub fn effective_focal_distribution(k: usize, k1: usize, n: usize) -> Result<Vec<(usize, f64)>> {
    if n == 0 {
        return Err(Error::Infeasible("household size must be positive".into()));
    }
    binomial_shifted(k, k1, 1.0 / n as f64)
}

/// Effective-focal law for the given target. For the spillover contrast a
/// treated household's focal is effective unless it is the treated unit, so
/// the success probability is `(n - 1)/n`; the two laws agree at `n = 2`.
pub fn effective_focal_distribution_for(
    target: EffectTarget,
    k: usize,
    k1: usize,
    n: usize,
) -> Result<Vec<(usize, f64)>> {
    match target {
        EffectTarget::Primary => effective_focal_distribution(k, k1, n),
        EffectTarget::Spillover => {
            if n < 2 {
                return Err(Error::Infeasible("spillover contrast needs households of size at least 2".into()));
            }
            binomial_shifted(k, k1, (n - 1) as f64 / n as f64)
        }
    }
}

fn binomial_shifted(k: usize, k1: usize, p: f64) -> Result<Vec<(usize, f64)>> {
    if k1 > k {
        return Err(Error::Infeasible(format!("K1 = {k1} exceeds K = {k}")));
    }
    if p == 1.0 {
        return Ok(vec![(k, 1.0)]);
    }
    Ok((0..=k1)
        .map(|j| {
            let lp = ln_binomial(k1 as u64, j as u64) + j as f64 * p.ln() + (k1 - j) as f64 * (1.0 - p).ln();
            (k - k1 + j, lp.exp())
        })
        .collect())
}

/// Draws `Z'` uniformly from `{Z : Z_U = 0, sum Z = n1}`.
pub fn sample_network_conditional(pop: &Population, n1: usize, focals: &[usize], rng: &mut Rng) -> Result<Assignment> {
    let n = pop.n_units();
    if n1 > n || focals.len() > n - n1 {
        return Err(Error::Infeasible(format!(
            "{} focals cannot all be controls with N = {n}, N1 = {n1}",
            focals.len()
        )));
    }
    let mut is_focal = vec![false; n];
    for &i in focals {
        is_focal[i] = true;
    }
    let others: Vec<usize> = (0..n).filter(|&i| !is_focal[i]).collect();
    let mut z = vec![false; n];
    for j in index::sample(rng, others.len(), n1) {
        z[others[j]] = true;
    }
    Assignment::new(pop, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Control,
    TreatedFocal,
    TreatedOther,
}

#[derive(Debug, Clone)]
struct Slot {
    household: usize,
    focal: usize,
    arms: [Arm; 3],
    /// Probability that a treated household treats its focal.
    p_focal: f64,
}

/// Exact sampler for `pr(Z | C)` under one-focal-per-household mechanisms in
/// two-stage designs.
///
/// Each household is in one of three states (control, focal treated, other
/// unit treated). The event fixes which states are admissible and the design
/// and focal distribution weight them; when the treated-to-control weight
/// ratio is common to all free households the law over treated-household
/// subsets is uniform and can be drawn directly.
#[derive(Debug, Clone)]
pub struct HouseholdStateSampler {
    slots: Vec<Slot>,
    free: Vec<usize>,
    forced_treated: Vec<usize>,
    n_free_treated: usize,
}

impl HouseholdStateSampler {
    pub fn new(
        mech: &MechanismSpec,
        hyp: &ContrastHypothesis,
        pop: &Population,
        design: &DesignSpec,
        focals: &[usize],
        z_obs: &Assignment,
    ) -> Result<Self> {
        let unavailable =
            |reason: &str| Error::SamplerUnavailable { mechanism: mech.name().into(), reason: reason.into() };
        let DesignSpec::TwoStage { k1 } = *design else {
            return Err(unavailable("household sampler requires a two_stage design"));
        };
        if hyp.map != ExposureMapSpec::TwoStage {
            return Err(unavailable("household sampler requires the two_stage exposure mapping"));
        }
        if !mech.one_per_household() {
            return Err(unavailable("household sampler requires one focal per household"));
        }
        let mut per_household = vec![usize::MAX; pop.n_households()];
        for &i in focals {
            let k = pop.household_of(i);
            if per_household[k] != usize::MAX {
                return Err(Error::InvalidData(format!("household `{}` has two focals", pop.household_id(k))));
            }
            per_household[k] = i;
        }
        if let Some(k) = per_household.iter().position(|&i| i == usize::MAX) {
            return Err(Error::InvalidData(format!("household `{}` has no focal", pop.household_id(k))));
        }

        let states = [State::Control, State::TreatedFocal, State::TreatedOther];
        let label = |s: State| match s {
            State::Control => ExposureLabel::CONTROL,
            State::TreatedFocal => ExposureLabel::TREATED,
            State::TreatedOther => ExposureLabel::SPILLOVER,
        };

        let mut slots = Vec::with_capacity(focals.len());
        let mut free = Vec::new();
        let mut forced_treated = Vec::new();
        let mut ratio: Option<f64> = None;
        for (pos, &i) in focals.iter().enumerate() {
            let k = pop.household_of(i);
            let n = pop.household_size(k) as f64;
            let observed = hyp.map.exposure_of(pop, z_obs, i);
            let weight = |s: State| -> f64 {
                let admissible = match mech {
                    MechanismSpec::AronowRestriction => (s == State::TreatedFocal) == z_obs.is_treated(i),
                    _ => {
                        if hyp.contains(observed) {
                            hyp.contains(label(s))
                        } else {
                            label(s) == observed
                        }
                    }
                };
                if !admissible {
                    return 0.0;
                }
                let design_w = match s {
                    State::Control => 1.0,
                    State::TreatedFocal => 1.0 / n,
                    State::TreatedOther => (n - 1.0) / n,
                };
                let focal_w = match (mech, s) {
                    (MechanismSpec::SpilloverConditional, State::Control) => 1.0 / n,
                    (MechanismSpec::SpilloverConditional, State::TreatedFocal) => 0.0,
                    (MechanismSpec::SpilloverConditional, State::TreatedOther) => {
                        if n > 1.0 {
                            1.0 / (n - 1.0)
                        } else {
                            0.0
                        }
                    }
                    (MechanismSpec::PrimaryConditional, State::Control) => 1.0 / n,
                    (MechanismSpec::PrimaryConditional, State::TreatedFocal) => 1.0,
                    (MechanismSpec::PrimaryConditional, State::TreatedOther) => 0.0,
                    _ => 1.0,
                };
                design_w * focal_w
            };
            let w = states.map(weight);
            let control = w[0];
            let treated = w[1] + w[2];
            match (control > 0.0, treated > 0.0) {
                (true, true) => {
                    let r = treated / control;
                    match ratio {
                        None => ratio = Some(r),
                        Some(r0) if ((r - r0) / r0).abs() > 1e-12 => {
                            return Err(unavailable(
                                "unequal household sizes make the conditional law non-uniform over household subsets",
                            ))
                        }
                        Some(_) => {}
                    }
                    free.push(pos);
                }
                (false, true) => forced_treated.push(pos),
                (true, false) => {}
                (false, false) => return Err(Error::OutOfSupport),
            }
            slots.push(Slot {
                household: k,
                focal: i,
                arms: states.map(|s| hyp.arm(label(s))),
                p_focal: if treated > 0.0 { w[1] / treated } else { 0.0 },
            });
        }
        if forced_treated.len() > k1 || k1 - forced_treated.len() > free.len() {
            return Err(Error::OutOfSupport);
        }
        Ok(Self { slots, free, n_free_treated: k1 - forced_treated.len(), forced_treated })
    }

    fn draw_states(&self, rng: &mut Rng, mut visit: impl FnMut(usize, State)) {
        let mut treated = vec![false; self.slots.len()];
        for &pos in &self.forced_treated {
            treated[pos] = true;
        }
        for j in index::sample(rng, self.free.len(), self.n_free_treated) {
            treated[self.free[j]] = true;
        }
        for (pos, slot) in self.slots.iter().enumerate() {
            let state = if !treated[pos] {
                State::Control
            } else if slot.p_focal >= 1.0 || (slot.p_focal > 0.0 && rng.random_bool(slot.p_focal)) {
                State::TreatedFocal
            } else {
                State::TreatedOther
            };
            visit(pos, state);
        }
    }

    /// Focal arms under a draw from `pr(Z | C)`, in focal order.
    pub fn sample_pattern(&self, rng: &mut Rng, out: &mut [Arm]) {
        self.draw_states(rng, |pos, s| out[pos] = self.slots[pos].arms[s as usize]);
    }

    /// Full assignment drawn from `pr(Z | C)`.
    pub fn sample_assignment(&self, pop: &Population, rng: &mut Rng) -> Assignment {
        let mut z = vec![false; pop.n_units()];
        let mut states = Vec::with_capacity(self.slots.len());
        self.draw_states(rng, |_, s| states.push(s));
        for (slot, s) in self.slots.iter().zip(states) {
            match s {
                State::Control => {}
                State::TreatedFocal => z[slot.focal] = true,
                State::TreatedOther => {
                    let members = pop.members(slot.household);
                    let mut j = rng.random_range(0..members.len() - 1);
                    if members[j] == slot.focal {
                        j = members.len() - 1;
                    }
                    z[members[j]] = true;
                }
            }
        }
        Assignment::new(pop, z).expect("length matches population")
    }
}

/// Draws from `pr(Z | C)` for network focal sets: uniform over the
/// completions that keep focals untreated, rejecting draws that move a focal
/// outside its admissible exposures.
#[derive(Debug, Clone)]
pub struct NetworkSampler {
    n1: usize,
    focals: Vec<usize>,
    observed: Vec<ExposureLabel>,
    hyp: ContrastHypothesis,
}

const MAX_REJECTIONS: usize = 100_000;

impl NetworkSampler {
    pub fn new(
        mech: &MechanismSpec,
        hyp: &ContrastHypothesis,
        pop: &Population,
        design: &DesignSpec,
        focals: &[usize],
        z_obs: &Assignment,
    ) -> Result<Self> {
        let unavailable =
            |reason: &str| Error::SamplerUnavailable { mechanism: mech.name().into(), reason: reason.into() };
        let MechanismSpec::NetworkProcedure { .. } = mech else {
            return Err(unavailable("network sampler requires the network procedure"));
        };
        let DesignSpec::Complete { n1 } = *design else {
            return Err(unavailable("network sampler requires a complete design"));
        };
        if focals.iter().any(|&i| z_obs.is_treated(i)) {
            return Err(Error::InvalidData("network focals must be untreated".into()));
        }
        hyp.map.validate(pop)?;
        Ok(Self {
            n1,
            focals: focals.to_vec(),
            observed: focals.iter().map(|&i| hyp.map.exposure_of(pop, z_obs, i)).collect(),
            hyp: hyp.clone(),
        })
    }

    pub fn sample_assignment(&self, pop: &Population, rng: &mut Rng) -> Result<Assignment> {
        let constraint = FocalConstraint { hyp: &self.hyp, focals: &self.focals, observed: self.observed.clone() };
        for _ in 0..MAX_REJECTIONS {
            let z = sample_network_conditional(pop, self.n1, &self.focals, rng)?;
            if constraint.admits(pop, &z) {
                return Ok(z);
            }
        }
        Err(Error::Infeasible(format!("rejection sampler accepted none of {MAX_REJECTIONS} draws")))
    }

    pub fn sample_pattern(&self, pop: &Population, rng: &mut Rng, out: &mut [Arm]) -> Result<()> {
        let z = self.sample_assignment(pop, rng)?;
        for (slot, &i) in out.iter_mut().zip(&self.focals) {
            *slot = self.hyp.arm(self.hyp.map.exposure_of(pop, &z, i));
        }
        Ok(())
    }
}

/// A draw-from-`pr(Z | C)` routine for Monte Carlo p-values.
#[derive(Debug, Clone)]
pub enum ConditionalSampler {
    Households(HouseholdStateSampler),
    Network(NetworkSampler),
}

impl ConditionalSampler {
    pub fn new(
        mech: &MechanismSpec,
        hyp: &ContrastHypothesis,
        pop: &Population,
        design: &DesignSpec,
        focals: &[usize],
        z_obs: &Assignment,
    ) -> Result<Self> {
        match mech {
            MechanismSpec::NetworkProcedure { .. } => {
                Ok(Self::Network(NetworkSampler::new(mech, hyp, pop, design, focals, z_obs)?))
            }
            _ => Ok(Self::Households(HouseholdStateSampler::new(mech, hyp, pop, design, focals, z_obs)?)),
        }
    }

    pub fn sample_assignment(&self, pop: &Population, rng: &mut Rng) -> Result<Assignment> {
        match self {
            Self::Households(s) => Ok(s.sample_assignment(pop, rng)),
            Self::Network(s) => s.sample_assignment(pop, rng),
        }
    }

    pub fn sample_pattern(&self, pop: &Population, rng: &mut Rng, out: &mut [Arm]) -> Result<()> {
        match self {
            Self::Households(s) => {
                s.sample_pattern(rng, out);
                Ok(())
            }
            Self::Network(s) => s.sample_pattern(pop, rng, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use std::collections::BTreeMap;

    const CAP: u128 = 1_000_000;

    #[test]
    fn hypothesis_validation() {
        let m = ExposureMapSpec::TwoStage;
        assert!(ContrastHypothesis::new(m.clone(), ExposureLabel::CONTROL, ExposureLabel::CONTROL).is_err());
        assert!(ContrastHypothesis::new(m, ExposureLabel::CONTROL, ExposureLabel::tag('a')).is_err());
        let pop = Population::from_sizes(&[2, 1]).unwrap();
        assert!(matches!(ContrastHypothesis::spillover().validate(&pop), Err(Error::SingletonHousehold(_))));
        assert!(ContrastHypothesis::primary().validate(&pop).is_ok());
    }

    #[test]
    fn spillover_conditional_picks_the_only_untreated_unit() {
        let pop = Population::from_sizes(&[2]).unwrap();
        let z = Assignment::from_treated(&pop, &[0]).unwrap();
        for s in 0..20 {
            let u = MechanismSpec::SpilloverConditional.draw_focals(&pop, &z, &mut rng::stream(s, 0)).unwrap();
            assert_eq!(u, vec![1]);
        }
    }

    #[test]
    fn spillover_conditional_needs_an_untreated_unit() {
        let pop = Population::from_sizes(&[1, 2]).unwrap();
        let z = Assignment::from_treated(&pop, &[0]).unwrap();
        let err = MechanismSpec::SpilloverConditional.draw_focals(&pop, &z, &mut rng::stream(1, 0));
        assert!(matches!(err, Err(Error::NoEligibleFocal(h)) if h == "h0"));
    }

    #[test]
    fn primary_conditional_takes_the_treated_unit() {
        let pop = Population::from_sizes(&[3, 2]).unwrap();
        let z = Assignment::from_treated(&pop, &[1]).unwrap();
        for s in 0..20 {
            let u = MechanismSpec::PrimaryConditional.draw_focals(&pop, &z, &mut rng::stream(s, 0)).unwrap();
            assert_eq!(u[0], 1);
            assert!(u[1] == 3 || u[1] == 4);
        }
    }

    /// Chi-square goodness of fit of the per-household draw against 1/2.
    #[test]
    fn per_household_unconditional_is_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let pop = Population::from_sizes(&[2]).unwrap();
        let z = Assignment::from_treated(&pop, &[0]).unwrap();
        let mut r = rng::stream(99, 0);
        let draws = 10_000;
        let mut first = 0usize;
        for _ in 0..draws {
            let u = MechanismSpec::PerHouseholdUnconditional.draw_focals(&pop, &z, &mut r).unwrap();
            first += (u[0] == 0) as usize;
        }
        let e = draws as f64 / 2.0;
        let chi2 = (first as f64 - e).powi(2) / e + ((draws - first) as f64 - e).powi(2) / e;
        assert!(chi2 < ChiSquared::new(1.0).unwrap().inverse_cdf(0.99), "chi2 = {chi2}");
    }

    #[test]
    fn network_procedure_draws_untreated_focals() {
        let pop = Population::network(6, &[(0, 1), (1, 2), (3, 4)]).unwrap();
        let z = Assignment::from_treated(&pop, &[1, 4]).unwrap();
        let mech = MechanismSpec::NetworkProcedure { m: 3 };
        for s in 0..20 {
            let u = mech.draw_focals(&pop, &z, &mut rng::stream(s, 1)).unwrap();
            assert_eq!(u.len(), 3);
            assert!(u.iter().all(|&i| !z.is_treated(i)));
        }
        let too_many = MechanismSpec::NetworkProcedure { m: 5 };
        assert!(too_many.draw_focals(&pop, &z, &mut rng::stream(1, 1)).is_err());
    }

    /// Filters the four enumerated assignments by hand.
    #[test]
    fn compatible_set_small_instance() {
        let pop = Population::from_sizes(&[2, 2]).unwrap();
        let design = DesignSpec::TwoStage { k1: 1 };
        let z_obs = Assignment::from_treated(&pop, &[0]).unwrap();
        let focals = vec![1, 2];
        let set = compatible_set(&ContrastHypothesis::spillover(), &pop, &design, &focals, &z_obs, CAP).unwrap();
        // focals 1 and 2 must stay untreated: treat unit 0 or unit 3
        let expected: Vec<Assignment> =
            [0, 3].iter().map(|&i| Assignment::from_treated(&pop, &[i]).unwrap()).collect();
        assert_eq!(set, expected);
        assert!(set.contains(&z_obs));

        let all: Vec<Assignment> = design.enumerate(&pop, CAP).unwrap().collect();
        assert_eq!(compatible_set(&ContrastHypothesis::spillover(), &pop, &design, &[], &z_obs, CAP).unwrap(), all);
    }

    #[test]
    fn aronow_set_extremes() {
        let pop = Population::from_sizes(&[2, 3]).unwrap();
        let design = DesignSpec::TwoStage { k1: 1 };
        let z_obs = Assignment::from_treated(&pop, &[3]).unwrap();
        let everyone: Vec<usize> = (0..5).collect();
        assert_eq!(aronow_set(&pop, &design, &everyone, &z_obs, CAP).unwrap(), vec![z_obs.clone()]);
        assert_eq!(aronow_set(&pop, &design, &[], &z_obs, CAP).unwrap().len(), 5);
    }

    #[test]
    fn aronow_matches_compatible_for_spillover() {
        let pop = Population::from_sizes(&[2, 3, 2]).unwrap();
        let hyp = ContrastHypothesis::spillover();
        let design = DesignSpec::TwoStage { k1: 2 };
        for z_obs in design.enumerate(&pop, CAP).unwrap() {
            for u in MechanismSpec::PerHouseholdUnconditional.enumerate_focal_sets(&pop, &z_obs, CAP).unwrap() {
                assert_eq!(
                    aronow_set(&pop, &design, &u, &z_obs, CAP).unwrap(),
                    compatible_set(&hyp, &pop, &design, &u, &z_obs, CAP).unwrap()
                );
            }
        }
    }

    #[test]
    fn effective_focal_counts() {
        let pop = Population::from_sizes(&[2, 2, 2, 2]).unwrap();
        let z = Assignment::from_treated(&pop, &[0, 2]).unwrap();
        let hyp = ContrastHypothesis::spillover();
        let mut r = rng::stream(5, 0);
        for _ in 0..50 {
            let u = MechanismSpec::SpilloverConditional.draw_focals(&pop, &z, &mut r).unwrap();
            assert_eq!(effective_focals(&hyp, &pop, &u, &z).len(), 4);
        }
        let none = Assignment::from_treated(&pop, &[]).unwrap();
        let u = MechanismSpec::PerHouseholdUnconditional.draw_focals(&pop, &none, &mut r).unwrap();
        assert_eq!(effective_focals(&hyp, &pop, &u, &none).len(), 4);
    }

    #[test]
    fn effective_focal_law() {
        let law = effective_focal_distribution(4, 2, 2).unwrap();
        let expected = [(2, 0.25), (3, 0.5), (4, 0.25)];
        for ((c, p), (ec, ep)) in law.iter().zip(expected) {
            assert_eq!(*c, ec);
            assert!((p - ep).abs() < 1e-12);
        }
        let mean: f64 = law.iter().map(|&(c, p)| c as f64 * p).sum();
        assert!((mean - 3.0).abs() < 1e-12);
        assert_eq!(effective_focal_distribution(5, 3, 1).unwrap(), vec![(5, 1.0)]);

        let big = effective_focal_distribution(3169, 2092, 2).unwrap();
        let mean: f64 = big.iter().map(|&(c, p)| c as f64 * p).sum();
        assert!((mean - 2123.0).abs() < 1e-6, "{mean}");

        assert!(effective_focal_distribution(2, 3, 2).is_err());
        let spill = effective_focal_distribution_for(EffectTarget::Spillover, 4, 2, 2).unwrap();
        assert_eq!(spill.len(), 3);
        assert!(spill.iter().zip(&law).all(|(a, b)| a.0 == b.0 && (a.1 - b.1).abs() < 1e-15));
    }

    /// Monte Carlo check of the K=4, K1=2, n=2 law over the unconditional
    /// mechanism.
    #[test]
    fn effective_focal_law_matches_simulation() {
        let pop = Population::from_sizes(&[2, 2, 2, 2]).unwrap();
        let design = DesignSpec::TwoStage { k1: 2 };
        let hyp = ContrastHypothesis::spillover();
        let mut r = rng::stream(11, 0);
        let draws = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            let z = design.sample(&pop, &mut r).unwrap();
            let u = MechanismSpec::PerHouseholdUnconditional.draw_focals(&pop, &z, &mut r).unwrap();
            counts[effective_focals(&hyp, &pop, &u, &z).len()] += 1;
        }
        for (c, p) in effective_focal_distribution(4, 2, 2).unwrap() {
            let freq = counts[c] as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((freq - p).abs() < 4.0 * se, "count {c}: {freq} vs {p}");
        }
    }

    #[test]
    fn network_conditional_is_uniform_over_completions() {
        let pop = Population::network(3, &[(0, 1), (1, 2)]).unwrap();
        let mut r = rng::stream(3, 0);
        let mut counts: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
        for _ in 0..20_000 {
            let z = sample_network_conditional(&pop, 1, &[0], &mut r).unwrap();
            *counts.entry(z.z().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 2);
        assert!(counts.keys().all(|z| !z[0]));
        for &c in counts.values() {
            assert!((c as f64 - 10_000.0).abs() < 4.0 * 70.8);
        }
    }

    #[test]
    fn network_conditional_edge_cases() {
        let pop = Population::network(4, &[(0, 1)]).unwrap();
        let z = sample_network_conditional(&pop, 2, &[0, 3], &mut rng::stream(1, 0)).unwrap();
        assert_eq!(z.z(), &[false, true, true, false]);
        let none = sample_network_conditional(&pop, 0, &[1], &mut rng::stream(1, 0)).unwrap();
        assert_eq!(none.n_treated(), 0);
        assert!(sample_network_conditional(&pop, 3, &[0, 1], &mut rng::stream(1, 0)).is_err());
    }

    #[test]
    fn focal_probability_and_enumeration_agree() {
        let pop = Population::from_sizes(&[3, 2, 2]).unwrap();
        let design = DesignSpec::TwoStage { k1: 2 };
        for mech in [
            MechanismSpec::SpilloverConditional,
            MechanismSpec::PrimaryConditional,
            MechanismSpec::PerHouseholdUnconditional,
        ] {
            for z in design.enumerate(&pop, CAP).unwrap() {
                let sets = mech.enumerate_focal_sets(&pop, &z, CAP).unwrap();
                let total: f64 = sets.iter().map(|u| mech.log_focal_prob(&pop, u, &z).exp()).sum();
                assert!((total - 1.0).abs() < 1e-12, "{mech:?}: {total}");
            }
        }
        let net = Population::network(5, &[(0, 1), (2, 3)]).unwrap();
        let z = Assignment::from_treated(&net, &[0, 4]).unwrap();
        let mech = MechanismSpec::NetworkProcedure { m: 2 };
        let sets = mech.enumerate_focal_sets(&net, &z, CAP).unwrap();
        assert_eq!(sets.len(), 3);
        let total: f64 = sets.iter().map(|u| mech.log_focal_prob(&net, u, &z).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn household_sampler_rejects_unequal_sizes_for_unconditional() {
        let pop = Population::from_sizes(&[2, 3, 2]).unwrap();
        let design = DesignSpec::TwoStage { k1: 1 };
        let z = Assignment::from_treated(&pop, &[0]).unwrap();
        let u = vec![1, 2, 5];
        let res = HouseholdStateSampler::new(
            &MechanismSpec::PerHouseholdUnconditional,
            &ContrastHypothesis::spillover(),
            &pop,
            &design,
            &u,
            &z,
        );
        assert!(matches!(res, Err(Error::SamplerUnavailable { .. })));
        // conditional mechanisms are uniform whatever the sizes
        assert!(HouseholdStateSampler::new(
            &MechanismSpec::SpilloverConditional,
            &ContrastHypothesis::spillover(),
            &pop,
            &design,
            &u,
            &z
        )
        .is_ok());
    }
}
