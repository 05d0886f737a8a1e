//! Batch runners behind the subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{Provenance, RunConfig};
use crate::conditioning::{ContrastHypothesis, EffectTarget};
use crate::design::{Assignment, DesignSpec};
use crate::engine::{ConditionalTest, TestReport};
use crate::error::{Error, Result};
use crate::estimate::{invert_test, residualize, InversionResult};
use crate::population::{load_edges, load_population, Covariates, Dataset, OutcomeData, Population, Schema};
use crate::power::{simulate_power, PowerScenario};
use crate::rng::{self, derive_seed};

/// Stream of the master seed used for the covariate holdout split.
const HOLDOUT_STREAM: u64 = u64::MAX - 1;

/// Data ready for analysis: singletons dropped and, when configured,
/// outcomes replaced by regression residuals on the analysis households.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub population: Population,
    pub y: Vec<f64>,
    pub z: Assignment,
    pub design: DesignSpec,
    pub hypothesis: ContrastHypothesis,
    /// Units used only to fit the covariate regression.
    pub holdout_units: usize,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let data = config.data.as_ref().ok_or_else(|| Error::Config("missing [data] section".into()))?;
    let mut schema = data.schema.clone();
    if config.estimate.holdout_fraction.is_none() {
        schema.covariates.clear();
    }
    let mut dataset: Dataset<f64> = load_population(&data.path, &schema)?;
    if data.drop_singletons {
        if data.edges.is_some() {
            return Err(Error::Config("drop_singletons cannot be combined with a network".into()));
        }
        dataset = dataset.drop_singletons()?;
    }
    if let Some(edges) = &data.edges {
        let list = load_edges(edges, &dataset.population)?;
        dataset.population = dataset.population.with_adjacency(&list)?;
        if data.second_order {
            dataset.population = dataset.population.second_order_relation()?;
        }
    }
    let z = dataset.assignment.clone().ok_or_else(|| Error::MissingColumn {
        path: data.path.clone(),
        column: schema.assignment.clone().unwrap_or_else(|| "z".into()),
    })?;
    let mut population = dataset.population;
    let mut y = dataset.outcomes.y;
    let mut z = z;
    let mut holdout_units = 0;
    let mut design_config = config.design.clone();

    if let Some(fraction) = config.estimate.holdout_fraction {
        let covariates: Covariates<f64> = dataset.outcomes.covariates.ok_or_else(|| {
            Error::Config("holdout_fraction needs at least one covariate column".into())
        })?;
        let fit = residualize(&population, &y, &covariates, fraction, &mut rng::stream(config.seed, HOLDOUT_STREAM))?;
        let keep: Vec<bool> =
            (0..population.n_households()).map(|k| !fit.holdout[population.members(k)[0]]).collect();
        let (analysis, kept) = population.restrict_households(&keep)?;
        holdout_units = population.n_units() - kept.len();
        y = kept.iter().map(|&i| fit.residuals[i]).collect();
        z = kept.iter().map(|&i| z[i]).collect();
        population = analysis;
        // treated counts change with the split; always read them from the data
        design_config.k1 = None;
        design_config.n1 = None;
    }
    let z = Assignment::new(&population, z)?;
    let design = design_config.resolve(Some(&z))?;
    let hypothesis = config.hypothesis.resolve(&config.exposure)?;
    config.mechanism.validate(&hypothesis, &population, &design)?;
    if !design.log_mass(&population, &z).is_finite() {
        return Err(Error::OutOfSupport);
    }
    Ok(Prepared { population, y, z, design, hypothesis, holdout_units })
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self { min: v[0], q25: q(0.25), median: q(0.5), q75: q(0.75), max: v[v.len() - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub units: usize,
    pub households: usize,
    pub holdout_units: usize,
    pub design: DesignSpec,
}

/// Aggregate of a `test` batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchReport {
    pub command: &'static str,
    pub draws: usize,
    pub alpha: f64,
    pub rejections: usize,
    pub rejection_fraction: f64,
    pub degenerate: usize,
    pub pvalue: Option<Quantiles>,
    pub n_effective: Option<Quantiles>,
    pub data: DataSummary,
    pub provenance: Provenance,
}

/// Aggregate of an `invert` batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InversionSummary {
    pub command: &'static str,
    pub draws: usize,
    pub alpha: f64,
    pub target: EffectTarget,
    pub tau_hat: Option<Quantiles>,
    pub ci_low: Option<Quantiles>,
    pub ci_high: Option<Quantiles>,
    pub mean_width: f64,
    pub median_width: f64,
    pub empty_intervals: usize,
    pub truncated_intervals: usize,
    pub data: DataSummary,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct DrawRecord<'a> {
    draw: usize,
    #[serde(flatten)]
    report: &'a TestReport<f64>,
    focal_ids: Vec<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct IntervalRecord {
    draw: usize,
    seed: u64,
    tau_hat: f64,
    ci_low: f64,
    ci_high: f64,
    width: f64,
    alpha: f64,
    n_focals: usize,
    grid_points: usize,
    empty: bool,
    non_contiguous: bool,
    truncated: bool,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Runs `f` for every draw in parallel. On failure the error carries the
/// draw index; with `keep_partial` the draws before it are still returned
/// for writing.
fn run_draws<R, F>(draws: usize, seed: u64, f: F) -> (Vec<R>, Option<Error>)
where
    R: Send,
    F: Fn(u64) -> Result<R> + Sync,
{
    let results: Vec<Result<R>> = (0..draws).into_par_iter().map(|l| f(derive_seed(seed, l as u64))).collect();
    let mut done = Vec::with_capacity(draws);
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => done.push(v),
            Err(e) => return (done, Some(Error::Draw { index, source: Box::new(e) })),
        }
    }
    (done, None)
}

fn data_summary(p: &Prepared) -> DataSummary {
    DataSummary {
        units: p.population.n_units(),
        households: p.population.n_households(),
        holdout_units: p.holdout_units,
        design: p.design,
    }
}

/// Draws `batch.draws` focal sets and tests each. Writes `draws.ndjson`
/// and `summary.json`.
pub fn run_test(config: &RunConfig, out_dir: &Path, keep_partial: bool) -> Result<BatchReport> {
    let p = prepare(config)?;
    let test = ConditionalTest::new(&p.population, &p.design, &p.hypothesis, &config.mechanism, config.engine)?;
    let (reports, failure) = run_draws(config.batch.draws, config.seed, |s| test.run(&p.y, &p.z, s));
    if failure.is_none() || keep_partial {
        let mut w = create(out_dir, "draws.ndjson")?;
        for (draw, report) in reports.iter().enumerate() {
            let focal_ids = report.focals.iter().map(|&i| p.population.unit_id(i)).collect();
            serde_json::to_writer(&mut w, &DrawRecord { draw, report, focal_ids })?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let alpha = config.batch.alpha;
    let rejections = reports.iter().filter(|r| r.pvalue <= alpha).count();
    let pvalues: Vec<f64> = reports.iter().map(|r| r.pvalue).collect();
    let effective: Vec<f64> = reports.iter().map(|r| r.n_effective as f64).collect();
    let summary = BatchReport {
        command: "test",
        draws: reports.len(),
        alpha,
        rejections,
        rejection_fraction: rejections as f64 / reports.len() as f64,
        degenerate: reports.iter().filter(|r| r.degenerate).count(),
        pvalue: Quantiles::of(&pvalues),
        n_effective: Quantiles::of(&effective),
        data: data_summary(&p),
        provenance: Provenance::of(config),
    };
    write_json(out_dir, "summary.json", &summary)?;
    Ok(summary)
}

/// Estimates the additive effect for each focal-set draw. Writes
/// `intervals.ndjson` and `summary.json`.
pub fn run_invert(config: &RunConfig, out_dir: &Path, keep_partial: bool) -> Result<InversionSummary> {
    let p = prepare(config)?;
    let test = ConditionalTest::new(&p.population, &p.design, &p.hypothesis, &config.mechanism, config.engine)?;
    let inversion = config.estimate.inversion;
    let (results, failure): (Vec<(u64, Vec<usize>, InversionResult<f64>)>, _) =
        run_draws(config.batch.draws, config.seed, |s| {
            invert_test(&test, &p.y, &p.z, s, &inversion).map(|(focals, r)| (s, focals, r))
        });
    if failure.is_none() || keep_partial {
        let mut w = create(out_dir, "intervals.ndjson")?;
        for (draw, (seed, focals, r)) in results.iter().enumerate() {
            let record = IntervalRecord {
                draw,
                seed: *seed,
                tau_hat: r.tau_hat,
                ci_low: r.ci_low,
                ci_high: r.ci_high,
                width: r.width(),
                alpha: r.alpha,
                n_focals: focals.len(),
                grid_points: r.grid.len(),
                empty: r.empty,
                non_contiguous: r.non_contiguous,
                truncated: r.truncated,
            };
            serde_json::to_writer(&mut w, &record)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let pick = |f: fn(&InversionResult<f64>) -> f64| results.iter().map(|(_, _, r)| f(r)).collect::<Vec<f64>>();
    let widths = pick(|r| r.width());
    let summary = InversionSummary {
        command: "invert",
        draws: results.len(),
        alpha: inversion.alpha,
        target: inversion.target,
        tau_hat: Quantiles::of(&pick(|r| r.tau_hat)),
        ci_low: Quantiles::of(&pick(|r| r.ci_low)),
        ci_high: Quantiles::of(&pick(|r| r.ci_high)),
        mean_width: widths.iter().sum::<f64>() / widths.len() as f64,
        median_width: Quantiles::of(&widths).map_or(f64::NAN, |q| q.median),
        empty_intervals: results.iter().filter(|(_, _, r)| r.empty).count(),
        truncated_intervals: results.iter().filter(|(_, _, r)| r.truncated).count(),
        data: data_summary(&p),
        provenance: Provenance::of(config),
    };
    write_json(out_dir, "summary.json", &summary)?;
    Ok(summary)
}

/// One row of `power.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerRow {
    pub scenario: String,
    pub mechanism: String,
    pub tau: f64,
    pub n: usize,
    pub power: f64,
    pub se: f64,
    pub mean_effective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct PowerSummary<'a> {
    command: &'static str,
    rows: usize,
    target: EffectTarget,
    tau_values: Vec<f64>,
    n_values: &'a [usize],
    provenance: Provenance,
}

/// Paired power curves for the two configured mechanisms. Writes
/// `power.csv` and `summary.json`.
pub fn run_power(config: &RunConfig, out_dir: &Path) -> Result<Vec<PowerRow>> {
    let pc = config.power.as_ref().ok_or_else(|| Error::Config("missing [power] section".into()))?;
    if !(pc.alpha > 0.0 && pc.alpha < 1.0) {
        return Err(Error::Config(format!("power.alpha = {} outside (0, 1)", pc.alpha)));
    }
    let taus = pc.taus();
    let mut rows = Vec::new();
    for &n in &pc.n_values {
        for &tau in &taus {
            let (tau_s, tau_p) = match pc.target {
                EffectTarget::Spillover => (tau, pc.other_effect),
                EffectTarget::Primary => (pc.other_effect, tau),
            };
            let scenario = PowerScenario {
                k: pc.k,
                k1: pc.k1,
                n,
                tau_s,
                tau_p,
                sigma: pc.sigma,
                mu: pc.mu,
                alpha: pc.alpha,
                replications: pc.replications,
            };
            let result =
                simulate_power(&scenario, &pc.mechanisms[0], &pc.mechanisms[1], pc.target, &config.engine, config.seed)?;
            for m in [&result.first, &result.second] {
                rows.push(PowerRow {
                    scenario: format!("{}_k{}_k1{}_n{}", target_name(pc.target), pc.k, pc.k1, n),
                    mechanism: m.mechanism.name().to_string(),
                    tau,
                    n,
                    power: m.power,
                    se: m.se,
                    mean_effective: m.mean_effective,
                });
            }
        }
    }
    let mut w = csv::Writer::from_writer(create(out_dir, "power.csv")?);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let summary = PowerSummary {
        command: "power",
        rows: rows.len(),
        target: pc.target,
        tau_values: taus,
        n_values: &pc.n_values,
        provenance: Provenance::of(config),
    };
    write_json(out_dir, "summary.json", &summary)?;
    Ok(rows)
}

fn target_name(t: EffectTarget) -> &'static str {
    match t {
        EffectTarget::Spillover => "spillover",
        EffectTarget::Primary => "primary",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SimulateSummary {
    command: &'static str,
    units: usize,
    households: usize,
    treated_households: usize,
    parameters: super::config::SimulateConfig,
    provenance: Provenance,
}

/// Writes a synthetic two-stage data set to `data.csv`.
pub fn run_simulate(config: &RunConfig, out_dir: &Path) -> Result<Dataset<f64>> {
    let sc = config.simulate.ok_or_else(|| Error::Config("missing [simulate] section".into()))?;
    let scenario = PowerScenario {
        k: sc.k,
        k1: sc.k1,
        n: sc.n,
        tau_s: sc.tau_s,
        tau_p: sc.tau_p,
        sigma: sc.sigma,
        mu: sc.mu,
        alpha: 0.05,
        replications: 1,
    };
    scenario.validate().map_err(|e| Error::Config(e.to_string()))?;
    let population = Population::from_sizes(&vec![sc.n; sc.k])?;
    let design = DesignSpec::TwoStage { k1: sc.k1 };
    let model = scenario.outcome_model();
    let mut r = rng::stream(config.seed, 0);
    let baseline = model.baseline(population.n_units(), &mut r)?;
    let z = design.sample(&population, &mut r)?;
    let y = model.observe(&population, &baseline, &z);
    let dataset = Dataset { population, outcomes: OutcomeData::new(y), assignment: Some(z.z().to_vec()) };
    let schema = config.data.as_ref().map(|d| d.schema.clone()).unwrap_or_default();
    let schema = Schema { covariates: Vec::new(), assignment: schema.assignment.or(Some("z".into())), ..schema };
    let w = create(out_dir, "data.csv")?;
    dataset.write_csv(w, &schema)?;
    let summary = SimulateSummary {
        command: "simulate",
        units: dataset.population.n_units(),
        households: sc.k,
        treated_households: sc.k1,
        parameters: sc,
        provenance: Provenance::of(config),
    };
    write_json(out_dir, "summary.json", &summary)?;
    Ok(dataset)
}
