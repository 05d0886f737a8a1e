//! Power: normal-approximation formulas for classical tests and paired
//! simulations comparing focal-selection mechanisms.

use rand_distr::{Distribution, Normal as NormalSampler};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::conditioning::{ContrastHypothesis, EffectTarget, MechanismSpec};
use crate::design::{Assignment, DesignSpec};
use crate::engine::{Alternative, ConditionalTest, EngineConfig};
use crate::error::{Error, Result};
use crate::exposure::{ExposureLabel, ExposureMapSpec};
use crate::population::Population;
use crate::rng::{self, derive_seed};

/// Inputs of the large-sample power formula for a completely randomized
/// difference-in-means test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticPowerParams {
    /// Number of units `N`.
    pub n: usize,
    /// Treated proportion.
    pub p: f64,
    pub tau: f64,
    pub sigma: f64,
    pub alpha: f64,
}

impl AnalyticPowerParams {
    pub fn new(n: usize, p: f64, tau: f64, sigma: f64, alpha: f64) -> Result<Self> {
        let params = Self { n, p, tau, sigma, alpha };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("N must be positive".into()));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Config(format!("treated proportion {} outside (0, 1)", self.p)));
        }
        if !(self.sigma > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config("sigma must be positive and tau finite".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        Ok(())
    }

    /// `tau^2 / (sigma^2 / (p (1 - p)) + tau^2)`, in `[0, 1)`.
    pub fn c(&self) -> f64 {
        let t2 = self.tau * self.tau;
        t2 / (self.sigma * self.sigma / (self.p * (1.0 - self.p)) + t2)
    }
}

/// `1 - Phi((Phi^-1(1 - alpha) - sqrt(N c)) / sqrt(1 - c))`.
pub fn analytic_power(params: &AnalyticPowerParams) -> f64 {
    let std = Normal::standard();
    let c = params.c();
    let z = -normal_quantile(params.alpha);
    let x = (z - (params.n as f64 * c).sqrt()) / (1.0 - c).sqrt();
    std.cdf(-x)
}

/// Standard normal quantile. The statrs value is only good to about 1e-12
/// in probability, so two Newton steps on `Phi(z) = p` polish it.
pub fn normal_quantile(p: f64) -> f64 {
    let std = Normal::standard();
    let mut z = std.inverse_cdf(p);
    if z.is_finite() {
        for _ in 0..2 {
            let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            if density > 0.0 {
                z -= (std.cdf(z) - p) / density;
            }
        }
    }
    z
}

/// Which of two classical tests is asymptotically more powerful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerOrdering {
    First,
    Second,
    Tie,
    /// One test has more units, the other a more balanced split.
    Indeterminate,
}

/// More units win at equal balance; better balance (treated proportion
/// closer to 1/2) wins at equal size.
pub fn power_comparison_rule(n1: usize, p1: f64, n2: usize, p2: f64) -> PowerOrdering {
    let imbalance = |p: f64| (p - 0.5).abs();
    let size = n1.cmp(&n2);
    let balance = imbalance(p2).partial_cmp(&imbalance(p1)).unwrap_or(std::cmp::Ordering::Equal);
    use std::cmp::Ordering::*;
    match (size, balance) {
        (Equal, Equal) => PowerOrdering::Tie,
        (Greater | Equal, Greater | Equal) => PowerOrdering::First,
        (Less | Equal, Less | Equal) => PowerOrdering::Second,
        _ => PowerOrdering::Indeterminate,
    }
}

/// Two-stage household experiment with additive effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerScenario {
    /// Households.
    pub k: usize,
    /// Treated households.
    pub k1: usize,
    /// Household size.
    pub n: usize,
    pub tau_s: f64,
    pub tau_p: f64,
    pub sigma: f64,
    pub mu: f64,
    pub alpha: f64,
    pub replications: usize,
}

impl PowerScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Infeasible(m));
        if self.k == 0 || self.n == 0 {
            return bad("K and n must be positive".into());
        }
        if self.k1 > self.k {
            return bad(format!("K1 = {} exceeds K = {}", self.k1, self.k));
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive".into());
        }
        if self.replications == 0 {
            return bad("at least one replication is needed".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        Ok(())
    }

    pub fn outcome_model(&self) -> OutcomeModel {
        OutcomeModel { mu: self.mu, sigma: self.sigma, tau_s: self.tau_s, tau_p: self.tau_p }
    }
}

/// `Y_i(0,0) ~ N(mu, sigma^2)` independently; the spillover exposure adds
/// `tau_s` and own treatment adds `tau_p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub mu: f64,
    pub sigma: f64,
    pub tau_s: f64,
    pub tau_p: f64,
}

impl OutcomeModel {
    pub fn baseline(&self, n_units: usize, rng: &mut rng::Rng) -> Result<Vec<f64>> {
        let normal = NormalSampler::new(self.mu, self.sigma).map_err(|e| Error::Config(e.to_string()))?;
        Ok((0..n_units).map(|_| normal.sample(rng)).collect())
    }

    pub fn effect(&self, label: ExposureLabel) -> f64 {
        match label {
            ExposureLabel::SPILLOVER => self.tau_s,
            ExposureLabel::TREATED => self.tau_p,
            _ => 0.0,
        }
    }

    /// Observed outcomes `Y(z)` for a baseline draw.
    pub fn observe(&self, pop: &Population, baseline: &[f64], z: &Assignment) -> Vec<f64> {
        let map = ExposureMapSpec::TwoStage;
        (0..pop.n_units()).map(|i| baseline[i] + self.effect(map.exposure_of(pop, z, i))).collect()
    }
}

/// Rejection summary of one mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismPower {
    pub mechanism: MechanismSpec,
    pub rejections: usize,
    pub power: f64,
    /// Binomial standard error of `power`.
    pub se: f64,
    pub mean_effective: f64,
    pub sd_effective: f64,
    #[serde(skip)]
    pub rejected: Vec<bool>,
    #[serde(skip)]
    pub effective: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    pub scenario: PowerScenario,
    pub target: EffectTarget,
    pub first: MechanismPower,
    pub second: MechanismPower,
}

/// Paired power simulation: each replication draws baseline outcomes and a
/// two-stage assignment once and tests the target effect with both
/// mechanisms. Replication `j` uses seed `derive_seed(seed, j)`, so the same
/// seed pairs results across effect sizes as well.
///
/// The contrast is exposed against control with a one-sided test for a
/// positive effect.
pub fn simulate_power(
    scenario: &PowerScenario,
    first: &MechanismSpec,
    second: &MechanismSpec,
    target: EffectTarget,
    engine: &EngineConfig,
    seed: u64,
) -> Result<PowerResult> {
    scenario.validate()?;
    let pop = Population::from_sizes(&vec![scenario.n; scenario.k])?;
    let design = DesignSpec::TwoStage { k1: scenario.k1 };
    let hyp = ContrastHypothesis::new(ExposureMapSpec::TwoStage, target.exposed_label(), ExposureLabel::CONTROL)?;
    let engine = EngineConfig { alternative: Alternative::Greater, ..*engine };
    let tests = [
        ConditionalTest::new(&pop, &design, &hyp, first, engine)?,
        ConditionalTest::new(&pop, &design, &hyp, second, engine)?,
    ];
    let model = scenario.outcome_model();

    let outcomes: Vec<[(bool, usize); 2]> = (0..scenario.replications)
        .into_par_iter()
        .map(|j| -> Result<[(bool, usize); 2]> {
            let rep_seed = derive_seed(seed, j as u64);
            let mut r = rng::stream(rep_seed, 0);
            let baseline = model.baseline(pop.n_units(), &mut r)?;
            let z = design.sample(&pop, &mut r)?;
            let y = model.observe(&pop, &baseline, &z);
            let mut out = [(false, 0usize); 2];
            for (m, test) in tests.iter().enumerate() {
                let report = test.run(&y, &z, derive_seed(rep_seed, 1 + m as u64))?;
                out[m] = (report.pvalue <= scenario.alpha, report.n_effective);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let summarize = |m: usize, mech: &MechanismSpec| {
        let rejected: Vec<bool> = outcomes.iter().map(|o| o[m].0).collect();
        let effective: Vec<usize> = outcomes.iter().map(|o| o[m].1).collect();
        let reps = rejected.len() as f64;
        let rejections = rejected.iter().filter(|&&r| r).count();
        let power = rejections as f64 / reps;
        let mean_effective = effective.iter().sum::<usize>() as f64 / reps;
        let var = effective.iter().map(|&e| (e as f64 - mean_effective).powi(2)).sum::<f64>() / (reps - 1.0).max(1.0);
        MechanismPower {
            mechanism: *mech,
            rejections,
            power,
            se: (power * (1.0 - power) / reps).sqrt(),
            mean_effective,
            sd_effective: var.sqrt(),
            rejected,
            effective,
        }
    };
    Ok(PowerResult { scenario: *scenario, target, first: summarize(0, first), second: summarize(1, second) })
}
