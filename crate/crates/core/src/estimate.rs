//! Covariate adjustment, Hodges-Lehmann estimates and confidence intervals
//! by inverting randomization tests under an additive effect model.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{Arm, ContrastHypothesis, EffectTarget};
use crate::design::Assignment;
use crate::engine::{p_value, tie_tolerance, Alternative, ConditionalTest, NullValues};
use crate::error::{Error, Result};
use crate::exposure::{ExposureLabel, ExposureMapSpec};
use crate::population::{Covariates, Population};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// `Y_i(exposed) = Y_i(0,0) + tau` for every unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdditiveEffectModel<T> {
    pub tau: T,
    pub target: EffectTarget,
}

impl<T: Scalar> AdditiveEffectModel<T> {
    pub fn new(target: EffectTarget, tau: T) -> Self {
        Self { tau, target }
    }

    /// Outcomes with the effect removed, see [`shift_under_null`].
    pub fn shift(&self, y: &[T], exposures: &[ExposureLabel]) -> Vec<T> {
        shift_under_null(y, exposures, self.target, self.tau)
    }
}

/// Subtracts `tau` from units observed at the target's exposed label.
pub fn shift_under_null<T: Scalar>(y: &[T], exposures: &[ExposureLabel], target: EffectTarget, tau: T) -> Vec<T> {
    let exposed = target.exposed_label();
    y.iter().zip(exposures).map(|(&v, &e)| if e == exposed { v - tau } else { v }).collect()
}

/// Residuals from a regression fit on held-out households.
#[derive(Debug, Clone, PartialEq)]
pub struct Residualized<T> {
    /// `y - yhat` for every unit.
    pub residuals: Vec<T>,
    /// Units whose households were used for fitting.
    pub holdout: Vec<bool>,
    /// Intercept followed by one slope per covariate.
    pub coefficients: Vec<f64>,
}

/// Fits ordinary least squares with an intercept on a random
/// `holdout_fraction` of households and returns residuals for all units.
/// Analysis should use only units outside the holdout.
pub fn residualize<T: Scalar>(
    pop: &Population,
    y: &[T],
    covariates: &Covariates<T>,
    holdout_fraction: f64,
    rng: &mut Rng,
) -> Result<Residualized<T>> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Config(format!("holdout fraction {holdout_fraction} outside (0, 1)")));
    }
    if y.len() != pop.n_units() || covariates.rows.len() != pop.n_units() {
        return Err(Error::InvalidData("outcomes and covariates must have one row per unit".into()));
    }
    let k = pop.n_households();
    if k < 2 {
        return Err(Error::InvalidData("need at least two households to hold some out".into()));
    }
    let n_hold = ((holdout_fraction * k as f64).round() as usize).clamp(1, k - 1);
    let mut holdout = vec![false; pop.n_units()];
    for h in index::sample(rng, k, n_hold) {
        for &i in pop.members(h) {
            holdout[i] = true;
        }
    }
    let coefficients = fit_ols(y, covariates, &holdout)?;
    let residuals = (0..pop.n_units())
        .map(|i| {
            let fitted = coefficients[0]
                + covariates.rows[i].iter().zip(&coefficients[1..]).map(|(x, b)| x.to_f64_lossy() * b).sum::<f64>();
            y[i] - T::of(fitted)
        })
        .collect();
    Ok(Residualized { residuals, holdout, coefficients })
}

fn fit_ols<T: Scalar>(y: &[T], covariates: &Covariates<T>, rows: &[bool]) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..y.len()).filter(|&i| rows[i]).collect();
    let p = covariates.names.len() + 1;
    let x = DMatrix::from_fn(idx.len(), p, |r, c| {
        if c == 0 {
            1.0
        } else {
            covariates.rows[idx[r]][c - 1].to_f64_lossy()
        }
    });
    let b = DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i].to_f64_lossy()));

    let dependent = dependent_columns(&x);
    if !dependent.is_empty() {
        let names = dependent
            .into_iter()
            .map(|c| if c == 0 { "intercept".to_string() } else { covariates.names[c - 1].clone() })
            .collect();
        return Err(Error::SingularDesign { columns: names });
    }
    let svd = x.svd(true, true);
    let beta = svd.solve(&b, 1e-12).map_err(|e| Error::Infeasible(e.to_string()))?;
    Ok(beta.iter().copied().collect())
}

fn rank(m: &DMatrix<f64>) -> usize {
    if m.ncols() == 0 || m.nrows() == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = max * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Columns that add nothing to the span of the columns before them.
fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    let mut dependent = Vec::new();
    for c in 0..x.ncols() {
        let mut cols = kept.clone();
        cols.push(c);
        let sub = x.select_columns(&cols);
        if rank(&sub) == cols.len() {
            kept.push(c);
        } else {
            dependent.push(c);
        }
    }
    dependent
}

/// Grid point closest to solving `E(T | H_tau) = t_obs`.
///
/// `expected` gives `E(T | H_tau)` at each grid point. Fails when the
/// difference does not change sign across the grid.
pub fn hodges_lehmann<T: Scalar>(expected: &[T], t_obs: T, grid: &[T]) -> Result<T> {
    if grid.is_empty() || expected.len() != grid.len() {
        return Err(Error::Infeasible("grid and profile must be non-empty and of equal length".into()));
    }
    let diffs: Vec<T> = expected.iter().map(|&e| e - t_obs).collect();
    let below = diffs.iter().any(|d| *d <= T::zero());
    let above = diffs.iter().any(|d| *d >= T::zero());
    if !(below && above) {
        return Err(Error::NoBracket { low: grid[0].to_f64_lossy(), high: grid[grid.len() - 1].to_f64_lossy() });
    }
    let best = (0..grid.len())
        .min_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).expect("finite profile"))
        .expect("non-empty grid");
    Ok(grid[best])
}

/// Point estimate and confidence interval from test inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionResult<T> {
    pub tau_hat: T,
    pub ci_low: T,
    pub ci_high: T,
    pub alpha: f64,
    pub grid: Vec<T>,
    /// Two-sided p-value at each grid point.
    pub pvalues: Vec<f64>,
    /// No grid point was retained; the interval collapses to `tau_hat`.
    pub empty: bool,
    /// Retained points do not form one run of consecutive grid points.
    pub non_contiguous: bool,
    /// The interval reaches the edge of the grid.
    pub truncated: bool,
}

impl<T: Scalar> InversionResult<T> {
    pub fn width(&self) -> T {
        self.ci_high - self.ci_low
    }
}

/// Interval `{tau : p(tau) > alpha}` reported as its hull on the grid.
pub fn invert_ci<T: Scalar>(grid: Vec<T>, pvalues: Vec<f64>, alpha: f64, tau_hat: T) -> InversionResult<T> {
    let kept: Vec<usize> = (0..grid.len()).filter(|&i| pvalues[i] > alpha).collect();
    let (ci_low, ci_high, empty, non_contiguous, truncated) = match (kept.first(), kept.last()) {
        (Some(&lo), Some(&hi)) => {
            let non_contiguous = hi - lo + 1 != kept.len();
            let truncated = lo == 0 || hi == grid.len() - 1;
            (grid[lo], grid[hi], false, non_contiguous, truncated)
        }
        _ => (tau_hat, tau_hat, true, false, false),
    };
    let (ci_low, ci_high) = (ci_low.min(tau_hat), ci_high.max(tau_hat));
    InversionResult { tau_hat, ci_low, ci_high, alpha, grid, pvalues, empty, non_contiguous, truncated }
}

/// Grid and level used by [`invert_test`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub alpha: f64,
    pub target: EffectTarget,
    /// Coarse grid size.
    pub grid_points: usize,
    /// Half-width of the coarse grid, in pooled within-arm SDs.
    pub grid_sds: f64,
    /// Extra points placed in each refined cell.
    pub refine_points: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { alpha: 0.05, target: EffectTarget::Spillover, grid_points: 81, grid_sds: 4.0, refine_points: 20 }
    }
}

/// `(D, g)` per null pattern: with exposed indicator `s` and arms from the
/// pattern, `D = diff(y)` and `g = diff(s)`, so that the statistic under
/// `H_tau` is `D - tau g + sign tau`.
type Profile<T> = NullValues<Option<(T, T)>>;

struct Profiler<T> {
    null: Profile<T>,
    t_obs: T,
    sign: T,
    tol: T,
}

impl<T: Scalar> Profiler<T> {
    fn at(&self, tau: T) -> NullValues<Option<T>> {
        NullValues {
            values: self.null.values.iter().map(|v| v.map(|(d, g)| d - tau * g + self.sign * tau)).collect(),
            weights: self.null.weights.clone(),
        }
    }

    fn expected(&self, tau: T) -> T {
        let null = self.at(tau);
        let (mut sum, mut mass) = (0.0, 0.0);
        for (j, v) in null.values.iter().enumerate() {
            if let Some(t) = v {
                let w = null.weights.as_ref().map_or(1.0, |w| w[j]);
                sum += w * t.to_f64_lossy();
                mass += w;
            }
        }
        T::of(if mass > 0.0 { sum / mass } else { f64::NAN })
    }

    fn pvalue(&self, tau: T) -> f64 {
        p_value(&self.at(tau), Some(self.t_obs), Alternative::TwoSided, self.tol)
    }
}

fn linspace<T: Scalar>(lo: T, hi: T, n: usize) -> Vec<T> {
    if n < 2 {
        return vec![(lo + hi) / T::of(2.0)];
    }
    (0..n).map(|i| lo + (hi - lo) * T::of_usize(i) / T::of_usize(n - 1)).collect()
}

fn merge<T: Scalar>(grid: &mut Vec<T>, extra: Vec<T>) {
    grid.extend(extra);
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    grid.dedup();
}

fn pooled_sd<T: Scalar>(y: &[T], arms: &[Arm]) -> f64 {
    let group = |which: Arm| -> (f64, f64, usize) {
        let v: Vec<f64> = y.iter().zip(arms).filter(|(_, &a)| a == which).map(|(x, _)| x.to_f64_lossy()).collect();
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n.max(1) as f64;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>(), mean, n)
    };
    let (ssa, _, na) = group(Arm::A);
    let (ssb, _, nb) = group(Arm::B);
    if na + nb <= 2 {
        return 0.0;
    }
    ((ssa + ssb) / (na + nb - 2) as f64).sqrt()
}

/// Estimates the additive effect for one focal-set draw.
///
/// The focal set and the null replicate set are drawn once and held fixed
/// across the grid. The coarse grid spans the observed contrast plus or
/// minus `grid_sds` pooled SDs; it is refined around the estimate and
/// around both interval endpoints.
pub fn invert_test<T: Scalar>(
    test: &ConditionalTest<'_>,
    y: &[T],
    z_obs: &Assignment,
    seed: u64,
    config: &InversionConfig,
) -> Result<(Vec<usize>, InversionResult<T>)> {
    let focals = test.draw_focals(z_obs, seed)?;
    let result = invert_with_focals(test, y, z_obs, &focals, seed, config)?;
    Ok((focals, result))
}

pub fn invert_with_focals<T: Scalar>(
    test: &ConditionalTest<'_>,
    y: &[T],
    z_obs: &Assignment,
    focals: &[usize],
    seed: u64,
    config: &InversionConfig,
) -> Result<InversionResult<T>> {
    let hyp: &ContrastHypothesis = test.hyp;
    let exposed = config.target.exposed_label();
    if hyp.map != ExposureMapSpec::TwoStage || !(hyp.contains(exposed) && hyp.contains(ExposureLabel::CONTROL)) {
        return Err(Error::InvalidHypothesis(format!(
            "estimating the {:?} effect needs the contrast between (0,0) and {exposed}",
            config.target
        )));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::Config(format!("alpha {} outside (0, 1)", config.alpha)));
    }
    let sign = if hyp.a == exposed { T::one() } else { -T::one() };
    let plan = test.plan(focals, z_obs, seed)?;
    let observed = plan.observed().to_vec();
    let exposed_arm = hyp.arm(exposed);
    let yf: Vec<T> = focals.iter().map(|&i| y[i]).collect();
    let s: Vec<T> = observed.iter().map(|&a| if a == exposed_arm { T::one() } else { T::zero() }).collect();
    let Some(t_obs) = crate::engine::pattern_statistic(&yf, &observed) else {
        return Err(Error::Infeasible("observed statistic is degenerate: an arm has no focal".into()));
    };
    let null = plan.evaluate(test.pop, |arms| {
        crate::engine::pattern_statistic(&yf, arms).zip(crate::engine::pattern_statistic(&s, arms))
    })?;
    let profiler = Profiler { null, t_obs, sign, tol: tie_tolerance(&yf) };

    let center = sign * t_obs;
    let mut half = T::of(config.grid_sds * pooled_sd(&yf, &observed));
    if !(half > T::zero()) {
        half = T::one();
    }
    let coarse = linspace(center - half, center + half, config.grid_points.max(3));
    let step = coarse[1] - coarse[0];

    let expected: Vec<T> = coarse.par_iter().map(|&tau| profiler.expected(tau)).collect();
    let coarse_hat = hodges_lehmann(&expected, t_obs, &coarse)?;
    let mut grid = coarse.clone();
    merge(&mut grid, linspace(coarse_hat - step, coarse_hat + step, config.refine_points + 2));
    let expected: Vec<T> = grid.par_iter().map(|&tau| profiler.expected(tau)).collect();
    let tau_hat = hodges_lehmann(&expected, t_obs, &grid)?;

    let pvals: Vec<f64> = grid.par_iter().map(|&tau| profiler.pvalue(tau)).collect();
    // refine the cells where the p-value crosses alpha
    let mut extra = Vec::new();
    for j in 1..grid.len() {
        let inside = |p: f64| p > config.alpha;
        if inside(pvals[j - 1]) != inside(pvals[j]) {
            extra.extend(linspace(grid[j - 1], grid[j], config.refine_points + 2));
        }
    }
    if !extra.is_empty() {
        merge(&mut grid, extra);
    }
    let pvals: Vec<f64> = grid.par_iter().map(|&tau| profiler.pvalue(tau)).collect();
    Ok(invert_ci(grid, pvals, config.alpha, tau_hat))
}
