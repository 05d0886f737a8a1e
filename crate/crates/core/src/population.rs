//! Units, households, networks and outcomes.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Units partitioned into households, optionally linked by a network.
///
/// Unit order is the order in which units were supplied (file order for
/// loaded data); household order is order of first appearance. The value is
/// immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    unit_ids: Vec<String>,
    household_ids: Vec<String>,
    household_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    adjacency: Option<Vec<Vec<usize>>>,
    second_order: Option<Vec<Vec<usize>>>,
}

impl Population {
    /// Builds a population from parallel lists of unit and household labels.
    pub fn new<U, H>(unit_ids: Vec<U>, household_labels: Vec<H>) -> Result<Self>
    where
        U: Into<String>,
        H: Into<String>,
    {
        if unit_ids.len() != household_labels.len() {
            return Err(Error::InvalidData(format!(
                "{} unit ids but {} household labels",
                unit_ids.len(),
                household_labels.len()
            )));
        }
        let unit_ids: Vec<String> = unit_ids.into_iter().map(Into::into).collect();
        let mut seen = BTreeSet::new();
        for id in &unit_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateUnit(id.clone()));
            }
        }

        let mut household_ids = Vec::new();
        let mut index_of: HashMap<String, usize> = HashMap::new();
        let mut household_of = Vec::with_capacity(unit_ids.len());
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, label) in household_labels.into_iter().enumerate() {
            let label: String = label.into();
            if label.trim().is_empty() {
                return Err(Error::MissingHousehold(unit_ids[i].clone()));
            }
            let k = *index_of.entry(label.clone()).or_insert_with(|| {
                household_ids.push(label);
                members.push(Vec::new());
                members.len() - 1
            });
            household_of.push(k);
            members[k].push(i);
        }

        Ok(Self {
            unit_ids,
            household_ids,
            household_of,
            members,
            adjacency: None,
            second_order: None,
        })
    }

    /// Synthetic population with households of the given sizes. Units are
    /// named `u0, u1, ...` and households `h0, h1, ...`.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if let Some(k) = sizes.iter().position(|&n| n == 0) {
            return Err(Error::InvalidData(format!("household h{k} has size 0")));
        }
        let mut units = Vec::new();
        let mut households = Vec::new();
        for (k, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                units.push(format!("u{}", units.len()));
                households.push(format!("h{k}"));
            }
        }
        Self::new(units, households)
    }

    /// Synthetic network population: every unit is its own household.
    pub fn network(n_units: usize, edges: &[(usize, usize)]) -> Result<Self> {
        Self::from_sizes(&vec![1; n_units])?.with_adjacency(edges)
    }

    /// Attaches an undirected network. Duplicate edges collapse; self-loops
    /// and out-of-range endpoints are rejected.
    pub fn with_adjacency(mut self, edges: &[(usize, usize)]) -> Result<Self> {
        let n = self.n_units();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidNetwork(format!("edge ({u}, {v}) out of range for {n} units")));
            }
            if u == v {
                return Err(Error::InvalidNetwork(format!("self-loop on unit `{}`", self.unit_ids[u])));
            }
            adj[u].insert(v);
            adj[v].insert(u);
        }
        self.adjacency = Some(adj.into_iter().map(|s| s.into_iter().collect()).collect());
        self.second_order = None;
        Ok(self)
    }

    /// Fills the second-order relation: pairs joined by a length-2 path that
    /// are not themselves neighbors. Idempotent.
    pub fn second_order_relation(mut self) -> Result<Self> {
        let adj = self.adjacency.as_ref().ok_or_else(|| Error::MissingStructure {
            mapping: "second_order_relation".into(),
            needed: "a network (adjacency)",
        })?;
        let n = adj.len();
        let mut mark = vec![usize::MAX; n];
        let mut relation = Vec::with_capacity(n);
        for i in 0..n {
            mark[i] = i;
            for &j in &adj[i] {
                mark[j] = i;
            }
            let mut two_hop = Vec::new();
            for &j in &adj[i] {
                for &k in &adj[j] {
                    if mark[k] != i {
                        mark[k] = i;
                        two_hop.push(k);
                    }
                }
            }
            two_hop.sort_unstable();
            relation.push(two_hop);
        }
        self.second_order = Some(relation);
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_households(&self) -> usize {
        self.members.len()
    }

    pub fn unit_id(&self, i: usize) -> &str {
        &self.unit_ids[i]
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn household_id(&self, k: usize) -> &str {
        &self.household_ids[k]
    }

    /// Household index of unit `i`.
    pub fn household_of(&self, i: usize) -> usize {
        self.household_of[i]
    }

    /// Units of household `k`, in unit order.
    pub fn members(&self, k: usize) -> &[usize] {
        &self.members[k]
    }

    pub fn household_size(&self, k: usize) -> usize {
        self.members[k].len()
    }

    pub fn household_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Common household size, if all households have the same size.
    pub fn equal_household_size(&self) -> Option<usize> {
        let first = self.members.first()?.len();
        self.members.iter().all(|m| m.len() == first).then_some(first)
    }

    pub fn singleton_households(&self) -> Vec<usize> {
        (0..self.n_households()).filter(|&k| self.members[k].len() == 1).collect()
    }

    pub fn adjacency(&self) -> Option<&[Vec<usize>]> {
        self.adjacency.as_deref()
    }

    pub fn second_order(&self) -> Option<&[Vec<usize>]> {
        self.second_order.as_deref()
    }

    pub fn are_neighbors(&self, i: usize, j: usize) -> bool {
        self.adjacency
            .as_ref()
            .is_some_and(|adj| adj[i].binary_search(&j).is_ok())
    }

    /// Subpopulation of the households flagged in `keep`, plus the original
    /// indices of retained units. Network structure is not carried over.
    pub fn restrict_households(&self, keep: &[bool]) -> Result<(Population, Vec<usize>)> {
        let kept: Vec<usize> = (0..self.n_units()).filter(|&i| keep[self.household_of[i]]).collect();
        let pop = Population::new(
            kept.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            kept.iter().map(|&i| self.household_ids[self.household_of[i]].clone()).collect(),
        )?;
        Ok((pop, kept))
    }
}

/// Named covariate columns, stored row-major (one row per unit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates<T> {
    pub names: Vec<String>,
    pub rows: Vec<Vec<T>>,
}

/// Observed outcomes and raw covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeData<T> {
    pub y: Vec<T>,
    pub covariates: Option<Covariates<T>>,
}

impl<T: Scalar> OutcomeData<T> {
    pub fn new(y: Vec<T>) -> Self {
        Self { y, covariates: None }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Column names used when reading unit-level CSV files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub unit_id: String,
    pub household_id: String,
    pub outcome: String,
    /// Observed treatment column; optional.
    pub assignment: Option<String>,
    pub covariates: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            unit_id: "unit_id".into(),
            household_id: "household_id".into(),
            outcome: "y".into(),
            assignment: Some("z".into()),
            covariates: Vec::new(),
        }
    }
}

/// A population together with its outcomes and (optionally) the observed
/// assignment read from the same file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub population: Population,
    pub outcomes: OutcomeData<T>,
    pub assignment: Option<Vec<bool>>,
}

impl<T: Scalar> Dataset<T> {
    /// Removes units living alone. The network, if any, is dropped.
    pub fn drop_singletons(self) -> Result<Self> {
        let keep: Vec<bool> = self.population.household_sizes().iter().map(|&n| n > 1).collect();
        let (population, kept) = self.population.restrict_households(&keep)?;
        let take = |v: &Vec<T>| kept.iter().map(|&i| v[i]).collect::<Vec<T>>();
        let covariates = self.outcomes.covariates.as_ref().map(|c| Covariates {
            names: c.names.clone(),
            rows: kept.iter().map(|&i| c.rows[i].clone()).collect(),
        });
        Ok(Self {
            outcomes: OutcomeData { y: take(&self.outcomes.y), covariates },
            assignment: self.assignment.as_ref().map(|z| kept.iter().map(|&i| z[i]).collect()),
            population,
        })
    }

    /// Writes the dataset as CSV using `schema` column names.
    pub fn write_csv<W: Write>(&self, writer: W, schema: &Schema) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![schema.unit_id.clone(), schema.household_id.clone(), schema.outcome.clone()];
        let write_z = self.assignment.is_some() && schema.assignment.is_some();
        if write_z {
            header.push(schema.assignment.clone().unwrap_or_default());
        }
        if let Some(c) = &self.outcomes.covariates {
            header.extend(c.names.iter().cloned());
        }
        w.write_record(&header)?;
        let pop = &self.population;
        for i in 0..pop.n_units() {
            let mut row = vec![
                pop.unit_id(i).to_string(),
                pop.household_id(pop.household_of(i)).to_string(),
                format_value(self.outcomes.y[i]),
            ];
            if write_z {
                let z = self.assignment.as_ref().expect("checked above")[i];
                row.push(if z { "1" } else { "0" }.into());
            }
            if let Some(c) = &self.outcomes.covariates {
                row.extend(c.rows[i].iter().map(|&x| format_value(x)));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn format_value<T: Scalar>(x: T) -> String {
    // shortest representation that round-trips through `parse`
    format!("{}", x)
}

/// Reads a unit-level CSV file.
pub fn load_population<T: Scalar + std::str::FromStr>(path: &Path, schema: &Schema) -> Result<Dataset<T>> {
    let file = std::fs::File::open(path)?;
    read_population(file, path, schema)
}

/// Reads unit-level CSV from any reader; `origin` is used in error messages.
pub fn read_population<T: Scalar + std::str::FromStr, R: Read>(
    reader: R,
    origin: &Path,
    schema: &Schema,
) -> Result<Dataset<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|_| Error::EmptyFile(origin.to_path_buf()))?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyFile(origin.to_path_buf()));
    }
    let column = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn {
            path: origin.to_path_buf(),
            column: name.to_string(),
        })
    };
    let unit_col = column(&schema.unit_id)?;
    let house_col = column(&schema.household_id)?;
    let y_col = column(&schema.outcome)?;
    let z_col = match &schema.assignment {
        Some(name) if headers.iter().any(|h| h == name) => Some(column(name)?),
        _ => None,
    };
    let cov_cols = schema.covariates.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;

    let mut units = Vec::new();
    let mut households = Vec::new();
    let mut y = Vec::new();
    let mut z = Vec::new();
    let mut cov_rows = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let row = row + 1;
        let field = |c: usize| record.get(c).unwrap_or("");
        units.push(field(unit_col).to_string());
        households.push(field(house_col).to_string());
        y.push(parse_number::<T>(field(y_col), &schema.outcome, row)?);
        if let Some(c) = z_col {
            let name = schema.assignment.as_deref().unwrap_or_default();
            z.push(match field(c) {
                "1" | "true" => true,
                "0" | "false" => false,
                other => {
                    return Err(Error::NonNumeric { column: name.to_string(), row, value: other.to_string() })
                }
            });
        }
        if !cov_cols.is_empty() {
            let values = cov_cols
                .iter()
                .zip(&schema.covariates)
                .map(|(&c, name)| parse_number::<T>(field(c), name, row))
                .collect::<Result<Vec<T>>>()?;
            cov_rows.push(values);
        }
    }
    if units.is_empty() {
        return Err(Error::EmptyFile(origin.to_path_buf()));
    }
    let population = Population::new(units, households)?;
    let covariates = (!cov_cols.is_empty()).then(|| Covariates { names: schema.covariates.clone(), rows: cov_rows });
    Ok(Dataset {
        population,
        outcomes: OutcomeData { y, covariates },
        assignment: z_col.map(|_| z),
    })
}

fn parse_number<T: Scalar + std::str::FromStr>(s: &str, column: &str, row: usize) -> Result<T> {
    let bad = || Error::NonNumeric { column: column.to_string(), row, value: s.to_string() };
    let v: T = s.parse().map_err(|_| bad())?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad())
    }
}

/// Reads an undirected edge list (`u,v` header) referencing unit ids of `pop`.
pub fn load_edges(path: &Path, pop: &Population) -> Result<Vec<(usize, usize)>> {
    let file = std::fs::File::open(path)?;
    read_edges(file, pop)
}

pub fn read_edges<R: Read>(reader: R, pop: &Population) -> Result<Vec<(usize, usize)>> {
    let index: HashMap<&str, usize> = pop.unit_ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let lookup = |s: &str| index.get(s).copied().ok_or_else(|| Error::UnknownUnit(s.to_string()));
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut edges = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let u = lookup(record.get(0).unwrap_or(""))?;
        let v = lookup(record.get(1).unwrap_or(""))?;
        edges.push((u, v));
    }
    Ok(edges)
}
