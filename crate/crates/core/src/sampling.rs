//! Choosing the sampling rate on the tenths grid.
//!
//! [`optimize_sampling_rate`] bisects on the sign of the forward difference
//! `f(λ + 0.1) − f(λ)`, which finds the minimum of any unimodal profile in
//! `O(log n)` evaluations. Infeasible rates count as `+∞`, so a feasibility
//! cliff behaves like an increasing tail. [`grid_search`] evaluates every
//! point and is the reference the bisection is checked against.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lagrange::{solve_cmdp, MixedPolicy, SolverSettings};
use crate::model::{SamplingRate, SensorConfig, SystemParams};

/// Averages at one feasible rate.
#[derive(Clone, Debug)]
pub struct RateOutcome {
    pub avg_aoi: f64,
    pub avg_cost: f64,
    pub theta: f64,
    pub policy: Option<Arc<MixedPolicy>>,
}

impl RateOutcome {
    pub fn from_policy(policy: Arc<MixedPolicy>) -> Self {
        Self { avg_aoi: policy.avg_aoi, avg_cost: policy.avg_cost, theta: policy.theta, policy: Some(policy) }
    }
}

/// Anything that maps a sampling rate to its constrained optimum, or `None`
/// when no policy meets the budget.
pub trait RateEvaluator: Sync {
    fn evaluate(&self, rate: SamplingRate) -> Result<Option<RateOutcome>>;
}

/// Solves the constrained problem at each rate.
pub struct CmdpEvaluator<'a> {
    pub params: &'a SystemParams,
    pub template: &'a SensorConfig,
    pub settings: &'a SolverSettings,
}

impl RateEvaluator for CmdpEvaluator<'_> {
    fn evaluate(&self, rate: SamplingRate) -> Result<Option<RateOutcome>> {
        match solve_cmdp(self.params, &self.template.with_rate(rate), self.settings) {
            Ok(policy) => Ok(Some(RateOutcome::from_policy(Arc::new(policy)))),
            Err(Error::NoFeasiblePolicy { .. }) => Ok(None),
            Err(err) => Err(err),
        }
    }
}

/// A fixed profile of ages over the tenths grid; `None` marks infeasible.
pub struct TableEvaluator(pub Vec<Option<f64>>);

impl RateEvaluator for TableEvaluator {
    fn evaluate(&self, rate: SamplingRate) -> Result<Option<RateOutcome>> {
        let idx = (rate.in_hundredths() / 10) as usize;
        Ok(self.0.get(idx.wrapping_sub(1)).copied().flatten().map(|avg_aoi| RateOutcome {
            avg_aoi,
            avg_cost: 0.0,
            theta: 1.0,
            policy: None,
        }))
    }
}

#[derive(Clone, Debug)]
pub struct RatePoint {
    pub rate: SamplingRate,
    pub outcome: Option<RateOutcome>,
}

impl RatePoint {
    pub fn feasible(&self) -> bool {
        self.outcome.is_some()
    }

    /// Average age, `+∞` when infeasible.
    pub fn aoi(&self) -> f64 {
        self.outcome.as_ref().map_or(f64::INFINITY, |o| o.avg_aoi)
    }
}

/// Every rate evaluated and the chosen one.
#[derive(Clone, Debug)]
pub struct LambdaReport {
    /// Sorted by rate.
    pub points: Vec<RatePoint>,
    pub lambda_star: SamplingRate,
    /// Rates that could not be evaluated, with the reason.
    pub skipped: Vec<(SamplingRate, String)>,
}

impl LambdaReport {
    fn from_map(map: BTreeMap<SamplingRate, Option<RateOutcome>>, lambda_star: SamplingRate) -> Self {
        let points = map.into_iter().map(|(rate, outcome)| RatePoint { rate, outcome }).collect();
        Self { points, lambda_star, skipped: Vec::new() }
    }

    pub fn point(&self, rate: SamplingRate) -> Option<&RatePoint> {
        self.points.iter().find(|p| p.rate == rate)
    }

    pub fn star(&self) -> &RatePoint {
        self.point(self.lambda_star).expect("the chosen rate was evaluated")
    }

    pub fn rows(&self) -> Vec<LambdaRow> {
        self.points
            .iter()
            .map(|p| LambdaRow {
                lambda: p.rate.to_string(),
                feasible: p.feasible(),
                avg_aoi: p.outcome.as_ref().map(|o| o.avg_aoi),
                avg_cost: p.outcome.as_ref().map(|o| o.avg_cost),
                theta: p.outcome.as_ref().map(|o| o.theta),
            })
            .collect()
    }
}

/// One CSV row of a [`LambdaReport`]; infeasible rows leave the averages
/// empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaRow {
    pub lambda: String,
    pub feasible: bool,
    pub avg_aoi: Option<f64>,
    pub avg_cost: Option<f64>,
    pub theta: Option<f64>,
}

/// Largest tenths index `L` with `L/10 < 1/N`.
pub fn uniform_grid_upper(n_sensors: u32) -> Result<u32> {
    if n_sensors == 0 {
        return Err(Error::InvalidParams("need at least one sensor".into()));
    }
    let upper = if 10 % n_sensors == 0 { 10 / n_sensors - 1 } else { 10 / n_sensors };
    if upper == 0 {
        return Err(Error::InvalidParams(format!("no tenths rate lies below 1/{n_sensors}")));
    }
    Ok(upper)
}

struct Memo<'a, E: RateEvaluator + ?Sized> {
    evaluator: &'a E,
    seen: BTreeMap<SamplingRate, Option<RateOutcome>>,
}

impl<E: RateEvaluator + ?Sized> Memo<'_, E> {
    fn aoi(&mut self, tenths: u32) -> Result<f64> {
        let rate = SamplingRate::tenths(tenths)?;
        if !self.seen.contains_key(&rate) {
            let outcome = self.evaluator.evaluate(rate)?;
            log::info!(
                "lambda {rate}: {}",
                outcome.as_ref().map_or("infeasible".to_string(), |o| format!("aoi {:.4}", o.avg_aoi))
            );
            self.seen.insert(rate, outcome);
        }
        Ok(self.seen[&rate].as_ref().map_or(f64::INFINITY, |o| o.avg_aoi))
    }
}

/// Bisection over tenths `1..=grid_upper`. Ties keep the smaller rate.
pub fn optimize_sampling_rate<E: RateEvaluator + ?Sized>(evaluator: &E, grid_upper: u32) -> Result<LambdaReport> {
    if !(1..=10).contains(&grid_upper) {
        return Err(Error::InvalidParams(format!("grid upper bound {grid_upper} outside 1..=10")));
    }
    let mut memo = Memo { evaluator, seen: BTreeMap::new() };
    let (mut lo, mut hi) = (1, grid_upper);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if memo.aoi(mid + 1)? < memo.aoi(mid)? {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    if !memo.aoi(lo)?.is_finite() {
        return Err(Error::AllInfeasible);
    }
    Ok(LambdaReport::from_map(memo.seen, SamplingRate::tenths(lo)?))
}

/// Evaluates every rate in `grid` and returns the argmin, ties going to the
/// smaller rate.
pub fn grid_search<E: RateEvaluator + ?Sized>(evaluator: &E, grid: &[SamplingRate]) -> Result<LambdaReport> {
    if grid.is_empty() {
        return Err(Error::InvalidParams("empty sampling-rate grid".into()));
    }
    let outcomes = grid
        .par_iter()
        .map(|&rate| evaluator.evaluate(rate).map(|o| (rate, o)))
        .collect::<Result<Vec<_>>>()?;
    let map: BTreeMap<_, _> = outcomes.into_iter().collect();
    let star = argmin(&map).ok_or(Error::AllInfeasible)?;
    Ok(LambdaReport::from_map(map, star))
}

fn argmin(map: &BTreeMap<SamplingRate, Option<RateOutcome>>) -> Option<SamplingRate> {
    let mut best: Option<(SamplingRate, f64)> = None;
    for (&rate, outcome) in map {
        if let Some(o) = outcome {
            if best.is_none_or(|(_, a)| o.avg_aoi < a) {
                best = Some((rate, o.avg_aoi));
            }
        }
    }
    best.map(|(rate, _)| rate)
}

/// The tenths grid `0.1, …, grid_upper/10`.
pub fn tenths_grid(grid_upper: u32) -> Result<Vec<SamplingRate>> {
    (1..=grid_upper).map(SamplingRate::tenths).collect()
}

/// Adds the 0.01-step rates between the largest feasible tenth and the next
/// (infeasible) tenth. Rates whose evaluation fails, typically because the
/// finer grid makes the state space too large, are recorded as skipped.
pub fn refine_cliff<E: RateEvaluator + ?Sized>(evaluator: &E, report: &mut LambdaReport) -> Result<()> {
    let last_feasible = report
        .points
        .iter()
        .filter(|p| p.rate.denom() == 10 && p.feasible())
        .map(|p| p.rate.numer())
        .max()
        .ok_or(Error::AllInfeasible)?;
    let next = SamplingRate::tenths(last_feasible + 1).ok();
    if next.is_none_or(|r| report.point(r).is_some_and(RatePoint::feasible)) {
        return Ok(());
    }
    let fine: Vec<SamplingRate> = (1..10)
        .map(|i| SamplingRate::hundredths(last_feasible * 10 + i))
        .collect::<Result<_>>()?;
    let skipped = Mutex::new(Vec::new());
    let outcomes: Vec<_> = fine
        .par_iter()
        .filter_map(|&rate| match evaluator.evaluate(rate) {
            Ok(o) => Some((rate, o)),
            Err(err) => {
                skipped.lock().expect("no panics while holding the lock").push((rate, err.to_string()));
                None
            }
        })
        .collect();
    let mut map: BTreeMap<_, _> = report.points.drain(..).map(|p| (p.rate, p.outcome)).collect();
    map.extend(outcomes);
    let star = argmin(&map).ok_or(Error::AllInfeasible)?;
    let mut skipped = skipped.into_inner().expect("no panics while holding the lock");
    skipped.sort_by_key(|(rate, _)| *rate);
    report.points = map.into_iter().map(|(rate, outcome)| RatePoint { rate, outcome }).collect();
    report.lambda_star = star;
    report.skipped.extend(skipped);
    Ok(())
}
