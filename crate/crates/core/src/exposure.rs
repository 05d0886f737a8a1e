//! Exposure mappings `h_i(Z)`: the part of the assignment vector that a
//! unit's potential outcome is assumed to depend on.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::design::Assignment;
use crate::error::{Error, Result};
use crate::population::Population;

/// A discrete exposure value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExposureLabel {
    /// Own treatment only.
    Unit(bool),
    /// `(Z_i, W_[i])`: own treatment and whether the household is treated.
    Household { own: bool, household: bool },
    /// Number of treated neighbors (top-coded by the mapping).
    Count(u32),
    /// Symbolic label; `Tag(0)` prints as `a`, `Tag(1)` as `b`, ...
    Tag(u8),
}

impl ExposureLabel {
    /// `(0,0)`: control unit in a control household.
    pub const CONTROL: Self = ExposureLabel::Household { own: false, household: false };
    /// `(0,1)`: control unit in a treated household.
    pub const SPILLOVER: Self = ExposureLabel::Household { own: false, household: true };
    /// `(1,1)`: treated unit (its household is necessarily treated).
    pub const TREATED: Self = ExposureLabel::Household { own: true, household: true };

    pub fn tag(letter: char) -> Self {
        debug_assert!(letter.is_ascii_lowercase());
        ExposureLabel::Tag(letter as u8 - b'a')
    }
}

impl fmt::Display for ExposureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ExposureLabel::Unit(t) => write!(f, "{}", t as u8),
            ExposureLabel::Household { own, household } => write!(f, "({},{})", own as u8, household as u8),
            ExposureLabel::Count(c) => write!(f, "{c}"),
            ExposureLabel::Tag(t) => write!(f, "{}", (b'a' + t) as char),
        }
    }
}

impl Serialize for ExposureLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExposureLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ExposureLabel::from_str(&s).map_err(serde::de::Error::custom)
    }
}

impl FromStr for ExposureLabel {
    type Err = Error;

    /// Parses the printed forms. Bare digits parse as [`ExposureLabel::Count`];
    /// use [`ExposureMapSpec::parse_label`] to resolve them against a mapping.
    fn from_str(s: &str) -> Result<Self> {
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        match t.as_str() {
            "(0,0)" | "control" => return Ok(Self::CONTROL),
            "(0,1)" | "(1,0)" | "spillover" => return Ok(Self::SPILLOVER),
            "(1,1)" | "treated" => return Ok(Self::TREATED),
            _ => {}
        }
        if let Ok(c) = t.parse::<u32>() {
            return Ok(ExposureLabel::Count(c));
        }
        let mut chars = t.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if c.is_ascii_lowercase() {
                return Ok(ExposureLabel::tag(c));
            }
        }
        Err(Error::InvalidHypothesis(format!("unrecognized exposure label `{s}`")))
    }
}

/// Inclusive bounds on a count; missing bounds are open.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRange {
    #[serde(default)]
    pub min: Option<u32>,
    #[serde(default)]
    pub max: Option<u32>,
}

impl CountRange {
    fn contains(&self, c: u32) -> bool {
        self.min.is_none_or(|m| c >= m) && self.max.is_none_or(|m| c <= m)
    }
}

/// One row of a declarative exposure table. A rule matches a unit when all
/// of its present conditions hold; the first matching rule assigns the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposureRule {
    pub label: char,
    /// Own treatment.
    #[serde(default)]
    pub treated: Option<bool>,
    /// Treated housemates, excluding the unit itself.
    #[serde(default)]
    pub housemates_treated: Option<CountRange>,
    /// Treated first-order neighbors.
    #[serde(default)]
    pub first_order: Option<CountRange>,
    /// Treated second-but-not-first-order neighbors.
    #[serde(default)]
    pub second_order: Option<CountRange>,
}

fn default_count_max() -> u32 {
    64
}

/// Which exposure mapping to apply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExposureMapSpec {
    /// `h_i(Z) = Z_i`.
    UnitLevel,
    /// `h_i(Z) = (Z_i, W_[i])`.
    TwoStage,
    /// Number of treated neighbors, top-coded at `max`.
    NeighborCount {
        #[serde(default = "default_count_max")]
        max: u32,
    },
    /// `a` treated; `b` untreated with a treated neighbor; `c` otherwise.
    NetworkFirstOrder,
    /// `a` treated; `b` untreated with fewer than `d` treated neighbors;
    /// `c` untreated with at least `d`.
    NetworkThreshold { d: u32 },
    /// `a` treated; `b` untreated with a treated first- or second-order
    /// neighbor; `c` otherwise.
    NetworkOrder2Any,
    /// `a` treated; `b` untreated with a treated neighbor; `c` untreated with
    /// treated second-order (but no first-order) neighbors; `d` otherwise.
    NetworkOrder2Only,
    /// Declarative rule table.
    Custom { rules: Vec<ExposureRule> },
}

impl ExposureMapSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ExposureMapSpec::UnitLevel => "unit_level",
            ExposureMapSpec::TwoStage => "two_stage",
            ExposureMapSpec::NeighborCount { .. } => "neighbor_count",
            ExposureMapSpec::NetworkFirstOrder => "network_first_order",
            ExposureMapSpec::NetworkThreshold { .. } => "network_threshold",
            ExposureMapSpec::NetworkOrder2Any => "network_order2_any",
            ExposureMapSpec::NetworkOrder2Only => "network_order2_only",
            ExposureMapSpec::Custom { .. } => "custom",
        }
    }

    /// The declared finite label set, in sorted order.
    pub fn alphabet(&self) -> Vec<ExposureLabel> {
        let tags = |n: u8| (0..n).map(ExposureLabel::Tag).collect();
        match self {
            ExposureMapSpec::UnitLevel => vec![ExposureLabel::Unit(false), ExposureLabel::Unit(true)],
            ExposureMapSpec::TwoStage => {
                vec![ExposureLabel::CONTROL, ExposureLabel::SPILLOVER, ExposureLabel::TREATED]
            }
            ExposureMapSpec::NeighborCount { max } => (0..=*max).map(ExposureLabel::Count).collect(),
            ExposureMapSpec::NetworkFirstOrder
            | ExposureMapSpec::NetworkThreshold { .. }
            | ExposureMapSpec::NetworkOrder2Any => tags(3),
            ExposureMapSpec::NetworkOrder2Only => tags(4),
            ExposureMapSpec::Custom { rules } => rules
                .iter()
                .filter(|r| r.label.is_ascii_lowercase())
                .map(|r| ExposureLabel::tag(r.label))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        }
    }

    /// Parses a label in the vocabulary of this mapping.
    pub fn parse_label(&self, s: &str) -> Result<ExposureLabel> {
        let label = match (self, s.trim().parse::<u32>()) {
            (ExposureMapSpec::UnitLevel, Ok(v @ (0 | 1))) => ExposureLabel::Unit(v == 1),
            _ => s.parse()?,
        };
        if self.alphabet().contains(&label) {
            Ok(label)
        } else {
            Err(Error::InvalidHypothesis(format!("label `{s}` is not in the alphabet of `{}`", self.name())))
        }
    }

    /// Checks that the population carries the structure this mapping reads.
    pub fn validate(&self, pop: &Population) -> Result<()> {
        let need = |needed: &'static str| Error::MissingStructure { mapping: self.name().into(), needed };
        let adjacency = pop.adjacency().is_some();
        let second = pop.second_order().is_some();
        match self {
            ExposureMapSpec::UnitLevel | ExposureMapSpec::TwoStage => Ok(()),
            ExposureMapSpec::NeighborCount { .. }
            | ExposureMapSpec::NetworkFirstOrder
            | ExposureMapSpec::NetworkThreshold { .. } => {
                if adjacency {
                    Ok(())
                } else {
                    Err(need("a network (adjacency)"))
                }
            }
            ExposureMapSpec::NetworkOrder2Any | ExposureMapSpec::NetworkOrder2Only => {
                if !adjacency {
                    Err(need("a network (adjacency)"))
                } else if !second {
                    Err(need("the second-order relation"))
                } else {
                    Ok(())
                }
            }
            ExposureMapSpec::Custom { rules } => {
                if rules.is_empty() {
                    return Err(Error::Config("custom exposure mapping has no rules".into()));
                }
                if let Some(r) = rules.iter().find(|r| !r.label.is_ascii_lowercase()) {
                    return Err(Error::Config(format!("custom label `{}` must be a letter a-z", r.label)));
                }
                if rules.iter().any(|r| r.first_order.is_some()) && !adjacency {
                    return Err(need("a network (adjacency)"));
                }
                if rules.iter().any(|r| r.second_order.is_some()) && !second {
                    return Err(need("the second-order relation"));
                }
                Ok(())
            }
        }
    }

    /// Exposure of unit `i`. The caller must have validated the mapping.
    pub fn exposure_of(&self, pop: &Population, z: &Assignment, i: usize) -> ExposureLabel {
        let zi = z.is_treated(i);
        let first = || count_treated(pop.adjacency().map(|a| a[i].as_slice()).unwrap_or(&[]), z);
        let second = || count_treated(pop.second_order().map(|h| h[i].as_slice()).unwrap_or(&[]), z);
        let tag = |c: char| ExposureLabel::tag(c);
        match self {
            ExposureMapSpec::UnitLevel => ExposureLabel::Unit(zi),
            ExposureMapSpec::TwoStage => ExposureLabel::Household {
                own: zi,
                household: z.household_treated(pop.household_of(i)),
            },
            ExposureMapSpec::NeighborCount { max } => ExposureLabel::Count(first().min(*max)),
            ExposureMapSpec::NetworkFirstOrder => match (zi, first()) {
                (true, _) => tag('a'),
                (false, 0) => tag('c'),
                (false, _) => tag('b'),
            },
            ExposureMapSpec::NetworkThreshold { d } => match zi {
                true => tag('a'),
                false if first() < *d => tag('b'),
                false => tag('c'),
            },
            ExposureMapSpec::NetworkOrder2Any => match (zi, first() + second()) {
                (true, _) => tag('a'),
                (false, 0) => tag('c'),
                (false, _) => tag('b'),
            },
            ExposureMapSpec::NetworkOrder2Only => match (zi, first(), second()) {
                (true, _, _) => tag('a'),
                (false, g, _) if g > 0 => tag('b'),
                (false, 0, h) if h > 0 => tag('c'),
                _ => tag('d'),
            },
            ExposureMapSpec::Custom { rules } => {
                let housemates = z.household_count(pop.household_of(i)) - zi as u32;
                rules
                    .iter()
                    .find(|r| {
                        r.treated.is_none_or(|t| t == zi)
                            && r.housemates_treated.is_none_or(|c| c.contains(housemates))
                            && r.first_order.is_none_or(|c| c.contains(first()))
                            && r.second_order.is_none_or(|c| c.contains(second()))
                    })
                    .map(|r| tag(r.label))
                    // an unmatched unit gets a label outside every declared alphabet
                    .unwrap_or(ExposureLabel::Tag(u8::MAX))
            }
        }
    }

    /// Exposures of all units under `z`.
    pub fn exposures(&self, pop: &Population, z: &Assignment) -> Result<Vec<ExposureLabel>> {
        self.validate(pop)?;
        let labels: Vec<ExposureLabel> = (0..pop.n_units()).map(|i| self.exposure_of(pop, z, i)).collect();
        if let Some(i) = labels.iter().position(|l| *l == ExposureLabel::Tag(u8::MAX)) {
            return Err(Error::InvalidData(format!("no exposure rule matches unit `{}`", pop.unit_id(i))));
        }
        Ok(labels)
    }
}

fn count_treated(units: &[usize], z: &Assignment) -> u32 {
    units.iter().filter(|&&j| z.is_treated(j)).count() as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DesignSpec;

    fn labels(map: &ExposureMapSpec, pop: &Population, treated: &[usize]) -> String {
        let z = Assignment::from_treated(pop, treated).unwrap();
        map.exposures(pop, &z).unwrap().iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn two_stage_labels() {
        let pop = Population::from_sizes(&[2, 2]).unwrap();
        let map = ExposureMapSpec::TwoStage;
        assert_eq!(labels(&map, &pop, &[0]), "(1,1) (0,1) (0,0) (0,0)");
        assert_eq!(labels(&map, &pop, &[]), "(0,0) (0,0) (0,0) (0,0)");
    }

    #[test]
    fn two_stage_never_emits_treated_in_control_household() {
        let pop = Population::from_sizes(&[3, 2, 1]).unwrap();
        let map = ExposureMapSpec::TwoStage;
        let alphabet = map.alphabet();
        for k1 in 0..=3 {
            for z in (DesignSpec::TwoStage { k1 }).enumerate(&pop, 1000).unwrap() {
                for l in map.exposures(&pop, &z).unwrap() {
                    assert!(alphabet.contains(&l));
                    assert_ne!(l, ExposureLabel::Household { own: true, household: false });
                }
            }
        }
    }

    /// Direct evaluation of the first-order and threshold case splits on the
    /// path 0-1-2 for every assignment.
    #[test]
    fn network_case_splits_on_path() {
        let pop = Population::network(3, &[(0, 1), (1, 2)]).unwrap();
        let neighbors = [vec![1], vec![0, 2], vec![1]];
        for bits in 0..8u32 {
            let z: Vec<bool> = (0..3).map(|i| bits >> (2 - i) & 1 == 1).collect();
            let a = Assignment::new(&pop, z.clone()).unwrap();
            for i in 0..3 {
                let treated_nb = neighbors[i].iter().filter(|&&j| z[j]).count() as u32;
                let first = if z[i] { 'a' } else if treated_nb > 0 { 'b' } else { 'c' };
                assert_eq!(ExposureMapSpec::NetworkFirstOrder.exposure_of(&pop, &a, i), ExposureLabel::tag(first));
                for d in 0..3 {
                    let thr = if z[i] { 'a' } else if treated_nb < d { 'b' } else { 'c' };
                    let map = ExposureMapSpec::NetworkThreshold { d };
                    assert_eq!(map.exposure_of(&pop, &a, i), ExposureLabel::tag(thr));
                }
            }
        }
        assert_eq!(labels(&ExposureMapSpec::NetworkFirstOrder, &pop, &[1]), "b a b");
        // at the boundary (one treated neighbor, d = 1) the threshold map says `c`
        assert_eq!(labels(&ExposureMapSpec::NetworkThreshold { d: 1 }, &pop, &[1]), "c a c");
    }

    #[test]
    fn second_order_mappings() {
        // path 0-1-2-3
        let pop = Population::network(4, &[(0, 1), (1, 2), (2, 3)]).unwrap().second_order_relation().unwrap();
        assert_eq!(labels(&ExposureMapSpec::NetworkOrder2Only, &pop, &[0]), "a b c d");
        assert_eq!(labels(&ExposureMapSpec::NetworkOrder2Any, &pop, &[0]), "a b b c");
        let no_h = Population::network(2, &[(0, 1)]).unwrap();
        let z = Assignment::from_treated(&no_h, &[]).unwrap();
        assert!(matches!(
            ExposureMapSpec::NetworkOrder2Only.exposures(&no_h, &z),
            Err(Error::MissingStructure { .. })
        ));
    }

    #[test]
    fn network_mapping_requires_adjacency() {
        let pop = Population::from_sizes(&[2]).unwrap();
        let z = Assignment::from_treated(&pop, &[0]).unwrap();
        assert!(ExposureMapSpec::NetworkThreshold { d: 1 }.exposures(&pop, &z).is_err());
        assert!(ExposureMapSpec::NeighborCount { max: 3 }.exposures(&pop, &z).is_err());
    }

    #[test]
    fn alphabets() {
        assert_eq!(
            ExposureMapSpec::TwoStage.alphabet(),
            vec![ExposureLabel::CONTROL, ExposureLabel::SPILLOVER, ExposureLabel::TREATED]
        );
        assert_eq!(ExposureMapSpec::UnitLevel.alphabet(), vec![ExposureLabel::Unit(false), ExposureLabel::Unit(true)]);
        let names: Vec<String> = ExposureMapSpec::NetworkOrder2Only.alphabet().iter().map(|l| l.to_string()).collect();
        assert_eq!(names, ["a", "b", "c", "d"]);
    }

    #[test]
    fn label_parsing() {
        let m = ExposureMapSpec::TwoStage;
        assert_eq!(m.parse_label("(0, 1)").unwrap(), ExposureLabel::SPILLOVER);
        assert_eq!(m.parse_label("(1,0)").unwrap(), ExposureLabel::SPILLOVER);
        assert_eq!(m.parse_label("control").unwrap(), ExposureLabel::CONTROL);
        assert!(m.parse_label("a").is_err());
        assert_eq!(ExposureMapSpec::UnitLevel.parse_label("1").unwrap(), ExposureLabel::Unit(true));
        assert_eq!(ExposureMapSpec::NetworkOrder2Only.parse_label("d").unwrap(), ExposureLabel::tag('d'));
        let json = serde_json::to_string(&ExposureLabel::TREATED).unwrap();
        assert_eq!(json, "\"(1,1)\"");
        assert_eq!(serde_json::from_str::<ExposureLabel>(&json).unwrap(), ExposureLabel::TREATED);
    }

    #[test]
    fn custom_rules_reproduce_two_stage() {
        let rules = vec![
            ExposureRule { label: 'c', treated: Some(true), housemates_treated: None, first_order: None, second_order: None },
            ExposureRule {
                label: 'b',
                treated: Some(false),
                housemates_treated: Some(CountRange { min: Some(1), max: None }),
                first_order: None,
                second_order: None,
            },
            ExposureRule { label: 'a', treated: None, housemates_treated: None, first_order: None, second_order: None },
        ];
        let custom = ExposureMapSpec::Custom { rules };
        let pop = Population::from_sizes(&[2, 3]).unwrap();
        for z in (DesignSpec::TwoStage { k1: 1 }).enumerate(&pop, 100).unwrap() {
            let got = custom.exposures(&pop, &z).unwrap();
            let want = ExposureMapSpec::TwoStage.exposures(&pop, &z).unwrap();
            let relabel = |l: &ExposureLabel| match *l {
                ExposureLabel::CONTROL => 'a',
                ExposureLabel::SPILLOVER => 'b',
                _ => 'c',
            };
            assert_eq!(got, want.iter().map(|l| ExposureLabel::tag(relabel(l))).collect::<Vec<_>>());
        }
    }

    #[test]
    fn custom_rule_without_match_is_an_error() {
        let rules =
            vec![ExposureRule { label: 'a', treated: Some(true), housemates_treated: None, first_order: None, second_order: None }];
        let pop = Population::from_sizes(&[2]).unwrap();
        let z = Assignment::from_treated(&pop, &[0]).unwrap();
        assert!(ExposureMapSpec::Custom { rules }.exposures(&pop, &z).is_err());
    }
}
