//! Assignment distributions: sampling, enumeration and probability mass.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::population::Population;
use crate::rng::Rng;

/// Default cap on the number of assignments an enumeration may visit.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Unit-level treatment vector together with per-household treated counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Assignment {
    z: Vec<bool>,
    w: Vec<u32>,
}

impl Assignment {
    pub fn new(pop: &Population, z: Vec<bool>) -> Result<Self> {
        if z.len() != pop.n_units() {
            return Err(Error::InvalidData(format!(
                "assignment has length {} but population has {} units",
                z.len(),
                pop.n_units()
            )));
        }
        let mut w = vec![0u32; pop.n_households()];
        for (i, &t) in z.iter().enumerate() {
            if t {
                w[pop.household_of(i)] += 1;
            }
        }
        Ok(Self { z, w })
    }

    /// Assignment treating exactly the listed units.
    pub fn from_treated(pop: &Population, treated: &[usize]) -> Result<Self> {
        let mut z = vec![false; pop.n_units()];
        for &i in treated {
            if i >= z.len() {
                return Err(Error::InvalidData(format!("unit index {i} out of range")));
            }
            z[i] = true;
        }
        Self::new(pop, z)
    }

    pub fn z(&self) -> &[bool] {
        &self.z
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.z[i]
    }

    /// Number of treated units in household `k`.
    pub fn household_count(&self, k: usize) -> u32 {
        self.w[k]
    }

    /// `W_k`: whether household `k` contains a treated unit.
    pub fn household_treated(&self, k: usize) -> bool {
        self.w[k] > 0
    }

    pub fn household_counts(&self) -> &[u32] {
        &self.w
    }

    pub fn n_treated(&self) -> usize {
        self.z.iter().filter(|&&t| t).count()
    }

    pub fn n_treated_households(&self) -> usize {
        self.w.iter().filter(|&&c| c > 0).count()
    }

    pub fn treated_units(&self) -> impl Iterator<Item = usize> + '_ {
        self.z.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i)
    }
}

/// A randomization design `pr(Z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignSpec {
    /// `k1` households treated completely at random, then one unit treated
    /// uniformly within each treated household.
    TwoStage { k1: usize },
    /// `n1` units treated completely at random.
    Complete { n1: usize },
    /// Independent treatment with probability `prob`.
    Bernoulli { prob: f64 },
}

impl DesignSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DesignSpec::TwoStage { .. } => "two_stage",
            DesignSpec::Complete { .. } => "complete",
            DesignSpec::Bernoulli { .. } => "bernoulli",
        }
    }

    pub fn validate(&self, pop: &Population) -> Result<()> {
        match *self {
            DesignSpec::TwoStage { k1 } if k1 > pop.n_households() => Err(Error::InvalidDesign(format!(
                "K1 = {k1} exceeds the number of households K = {}",
                pop.n_households()
            ))),
            DesignSpec::Complete { n1 } if n1 > pop.n_units() => Err(Error::InvalidDesign(format!(
                "N1 = {n1} exceeds the number of units N = {}",
                pop.n_units()
            ))),
            DesignSpec::Bernoulli { prob } if !(0.0..=1.0).contains(&prob) => {
                Err(Error::InvalidDesign(format!("treatment probability {prob} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Number of assignments with positive probability, saturating at
    /// `u128::MAX`.
    pub fn support_size(&self, pop: &Population) -> u128 {
        match *self {
            DesignSpec::TwoStage { k1 } => {
                // elementary symmetric polynomial e_{k1}(n_1, ..., n_K)
                let mut e = vec![0u128; k1 + 1];
                e[0] = 1;
                for n in pop.household_sizes() {
                    for j in (1..=k1).rev() {
                        e[j] = e[j].saturating_add(e[j - 1].saturating_mul(n as u128));
                    }
                }
                e[k1]
            }
            DesignSpec::Complete { n1 } => binomial_saturating(pop.n_units(), n1),
            DesignSpec::Bernoulli { prob } => {
                if prob == 0.0 || prob == 1.0 {
                    1
                } else if pop.n_units() >= 128 {
                    u128::MAX
                } else {
                    1u128 << pop.n_units()
                }
            }
        }
    }

    /// Draws `Z ~ pr(Z)`.
    pub fn sample(&self, pop: &Population, rng: &mut Rng) -> Result<Assignment> {
        self.validate(pop)?;
        let mut z = vec![false; pop.n_units()];
        match *self {
            DesignSpec::TwoStage { k1 } => {
                let mut chosen = index::sample(rng, pop.n_households(), k1).into_vec();
                chosen.sort_unstable();
                for k in chosen {
                    let members = pop.members(k);
                    z[members[rng.random_range(0..members.len())]] = true;
                }
            }
            DesignSpec::Complete { n1 } => {
                for i in index::sample(rng, pop.n_units(), n1) {
                    z[i] = true;
                }
            }
            DesignSpec::Bernoulli { prob } => {
                for t in z.iter_mut() {
                    *t = rng.random_bool(prob);
                }
            }
        }
        Assignment::new(pop, z)
    }

    /// Every assignment in the support exactly once, in a fixed order.
    ///
    /// Two-stage designs are visited lexicographically over (treated
    /// household subset, within-household treated index); complete designs
    /// over treated-unit subsets; Bernoulli designs over binary vectors with
    /// unit 0 most significant.
    pub fn enumerate<'a>(
        &self,
        pop: &'a Population,
        cap: u128,
    ) -> Result<Box<dyn Iterator<Item = Assignment> + 'a>> {
        self.validate(pop)?;
        let size = self.support_size(pop);
        if size > cap {
            return Err(Error::SupportCap { size, cap });
        }
        let n = pop.n_units();
        let build = move |treated: &[usize]| {
            let mut z = vec![false; n];
            for &i in treated {
                z[i] = true;
            }
            Assignment::new(pop, z).expect("length matches population")
        };
        Ok(match *self {
            DesignSpec::TwoStage { k1 } => Box::new(Combinations::new(pop.n_households(), k1).flat_map(
                move |households| {
                    let radices: Vec<usize> = households.iter().map(|&k| pop.household_size(k)).collect();
                    MixedRadix::new(radices).map(move |digits| {
                        let treated: Vec<usize> =
                            households.iter().zip(&digits).map(|(&k, &d)| pop.members(k)[d]).collect();
                        build(&treated)
                    })
                },
            )),
            DesignSpec::Complete { n1 } => Box::new(Combinations::new(n, n1).map(move |c| build(&c))),
            DesignSpec::Bernoulli { prob } => {
                if prob == 0.0 {
                    Box::new(std::iter::once(build(&[])))
                } else if prob == 1.0 {
                    let all: Vec<usize> = (0..n).collect();
                    Box::new(std::iter::once(build(&all)))
                } else {
                    Box::new(MixedRadix::new(vec![2; n]).map(move |bits| {
                        let treated: Vec<usize> = (0..n).filter(|&i| bits[i] == 1).collect();
                        build(&treated)
                    }))
                }
            }
        })
    }

    /// `log pr(Z)`, or `-inf` when `z` is outside the support.
    pub fn log_mass(&self, pop: &Population, z: &Assignment) -> f64 {
        if z.z().len() != pop.n_units() {
            return f64::NEG_INFINITY;
        }
        match *self {
            DesignSpec::TwoStage { k1 } => {
                if k1 > pop.n_households()
                    || z.household_counts().iter().any(|&c| c > 1)
                    || z.n_treated_households() != k1
                {
                    return f64::NEG_INFINITY;
                }
                let within: f64 = (0..pop.n_households())
                    .filter(|&k| z.household_treated(k))
                    .map(|k| (pop.household_size(k) as f64).ln())
                    .sum();
                -ln_binomial(pop.n_households() as u64, k1 as u64) - within
            }
            DesignSpec::Complete { n1 } => {
                if n1 > pop.n_units() || z.n_treated() != n1 {
                    return f64::NEG_INFINITY;
                }
                -ln_binomial(pop.n_units() as u64, n1 as u64)
            }
            DesignSpec::Bernoulli { prob } => {
                let treated = z.n_treated() as f64;
                let control = pop.n_units() as f64 - treated;
                let lp = |count: f64, p: f64| if count == 0.0 { 0.0 } else { count * p.ln() };
                lp(treated, prob) + lp(control, 1.0 - prob)
            }
        }
    }

    /// Treated-household count (two-stage) or treated-unit count (complete)
    /// implied by an observed assignment.
    pub fn inferred_from(kind: &str, z: &Assignment) -> Result<Self> {
        match kind {
            "two_stage" => Ok(DesignSpec::TwoStage { k1: z.n_treated_households() }),
            "complete" => Ok(DesignSpec::Complete { n1: z.n_treated() }),
            other => Err(Error::Config(format!("cannot infer parameters of design `{other}`"))),
        }
    }
}

pub(crate) fn binomial_saturating(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at each step
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// k-subsets of `0..n` in lexicographic order.
pub(crate) struct Combinations {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Combinations {
    pub(crate) fn new(n: usize, k: usize) -> Self {
        Self { n, current: (k <= n).then(|| (0..k).collect()) }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let k = out.len();
        let cur = self.current.as_mut().expect("checked above");
        let mut i = k;
        loop {
            if i == 0 {
                self.current = None;
                break;
            }
            i -= 1;
            if cur[i] < self.n - k + i {
                cur[i] += 1;
                for j in i + 1..k {
                    cur[j] = cur[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

/// Odometer over `0..r_0 x 0..r_1 x ...`, last digit fastest.
pub(crate) struct MixedRadix {
    radices: Vec<usize>,
    current: Option<Vec<usize>>,
}

impl MixedRadix {
    pub(crate) fn new(radices: Vec<usize>) -> Self {
        let current = radices.iter().all(|&r| r > 0).then(|| vec![0; radices.len()]);
        Self { radices, current }
    }
}

impl Iterator for MixedRadix {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let cur = self.current.as_mut().expect("checked above");
        let mut i = cur.len();
        loop {
            if i == 0 {
                self.current = None;
                break;
            }
            i -= 1;
            cur[i] += 1;
            if cur[i] < self.radices[i] {
                break;
            }
            cur[i] = 0;
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use std::collections::{BTreeMap, BTreeSet};

    fn pop(sizes: &[usize]) -> Population {
        Population::from_sizes(sizes).unwrap()
    }

    #[test]
    fn two_stage_with_no_treated_households() {
        let p = pop(&[2, 2]);
        let z = DesignSpec::TwoStage { k1: 0 }.sample(&p, &mut rng::stream(1, 0)).unwrap();
        assert_eq!(z.n_treated(), 0);
    }

    #[test]
    fn two_stage_single_household() {
        let p = pop(&[3]);
        for s in 0..20 {
            let z = DesignSpec::TwoStage { k1: 1 }.sample(&p, &mut rng::stream(s, 0)).unwrap();
            assert_eq!(z.n_treated(), 1);
            assert!(z.household_treated(0));
        }
    }

    #[test]
    fn sample_rejects_infeasible_counts() {
        let p = pop(&[2, 2]);
        assert!(matches!(
            DesignSpec::TwoStage { k1: 3 }.sample(&p, &mut rng::stream(1, 0)),
            Err(Error::InvalidDesign(_))
        ));
        assert!(DesignSpec::Complete { n1: 5 }.sample(&p, &mut rng::stream(1, 0)).is_err());
        assert!(DesignSpec::Bernoulli { prob: 1.5 }.validate(&p).is_err());
    }

    #[test]
    fn enumeration_counts() {
        let p = pop(&[2, 2]);
        // C(K, K1) * prod n_k over treated households = 2 * 2
        assert_eq!(DesignSpec::TwoStage { k1: 1 }.enumerate(&p, 100).unwrap().count(), 4);
        let p3 = pop(&[1, 1, 1]);
        assert_eq!(DesignSpec::Complete { n1: 1 }.enumerate(&p3, 100).unwrap().count(), 3);
        assert_eq!(DesignSpec::Bernoulli { prob: 0.5 }.enumerate(&p3, 100).unwrap().count(), 8);
    }

    #[test]
    fn enumeration_is_distinct_and_in_support() {
        let p = pop(&[2, 3, 1, 2]);
        for k1 in 0..=4 {
            let d = DesignSpec::TwoStage { k1 };
            let all: Vec<Assignment> = d.enumerate(&p, 10_000).unwrap().collect();
            let distinct: BTreeSet<_> = all.iter().cloned().collect();
            assert_eq!(distinct.len(), all.len());
            assert_eq!(all.len() as u128, d.support_size(&p));
            assert!(all.iter().all(|z| d.log_mass(&p, z).is_finite()));
        }
    }

    #[test]
    fn enumeration_order_is_lexicographic() {
        let p = pop(&[2, 2]);
        let all: Vec<Vec<bool>> =
            DesignSpec::TwoStage { k1: 1 }.enumerate(&p, 10).unwrap().map(|z| z.z().to_vec()).collect();
        let t = true;
        let f = false;
        assert_eq!(all, vec![vec![t, f, f, f], vec![f, t, f, f], vec![f, f, t, f], vec![f, f, f, t]]);
    }

    #[test]
    fn enumeration_cap() {
        let p = pop(&[2; 30]);
        let err = DesignSpec::TwoStage { k1: 15 }.enumerate(&p, 1_000_000).err().unwrap();
        assert!(matches!(err, Error::SupportCap { cap: 1_000_000, .. }));
        assert!(err.to_string().contains("1000000"));
    }

    #[test]
    fn masses() {
        let p = pop(&[2, 2]);
        let d = DesignSpec::TwoStage { k1: 1 };
        for z in d.enumerate(&p, 10).unwrap() {
            assert!((d.log_mass(&p, &z).exp() - 0.25).abs() < 1e-15);
        }
        let bad = Assignment::from_treated(&p, &[0, 1]).unwrap();
        assert_eq!(d.log_mass(&p, &bad), f64::NEG_INFINITY);

        let p3 = pop(&[1, 1, 1]);
        let b = DesignSpec::Bernoulli { prob: 0.5 };
        for z in b.enumerate(&p3, 10).unwrap() {
            assert!((b.log_mass(&p3, &z).exp() - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn mass_sums_to_one() {
        let p = pop(&[3, 1, 2, 4, 2]);
        for d in [
            DesignSpec::TwoStage { k1: 2 },
            DesignSpec::TwoStage { k1: 5 },
            DesignSpec::Complete { n1: 4 },
            DesignSpec::Bernoulli { prob: 0.3 },
        ] {
            let total: f64 = d.enumerate(&p, 100_000).unwrap().map(|z| d.log_mass(&p, &z).exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "{d:?}: {total}");
        }
    }

    #[test]
    fn sample_frequencies_match_mass() {
        // support of 2*3 + 2*1 + 3*1 = 11 assignments
        let p = pop(&[2, 3, 1]);
        let d = DesignSpec::TwoStage { k1: 2 };
        let draws = 100_000usize;
        let mut counts: BTreeMap<Assignment, usize> = BTreeMap::new();
        let mut r = rng::stream(2024, 0);
        for _ in 0..draws {
            *counts.entry(d.sample(&p, &mut r).unwrap()).or_default() += 1;
        }
        for z in d.enumerate(&p, 100).unwrap() {
            let prob = d.log_mass(&p, &z).exp();
            let expected = prob * draws as f64;
            let sd = (draws as f64 * prob * (1.0 - prob)).sqrt();
            let got = *counts.get(&z).unwrap_or(&0) as f64;
            assert!((got - expected).abs() <= 4.0 * sd, "{got} vs {expected}");
        }
        assert_eq!(counts.len(), 11);
    }

    #[test]
    fn combinations_and_odometer() {
        assert_eq!(Combinations::new(4, 2).count(), 6);
        assert_eq!(Combinations::new(3, 0).collect::<Vec<_>>(), vec![Vec::<usize>::new()]);
        assert_eq!(Combinations::new(2, 3).count(), 0);
        assert_eq!(MixedRadix::new(vec![2, 3]).count(), 6);
        assert_eq!(MixedRadix::new(vec![]).count(), 1);
        assert_eq!(binomial_saturating(10, 3), 120);
        assert_eq!(binomial_saturating(3000, 1500), u128::MAX);
    }
}
