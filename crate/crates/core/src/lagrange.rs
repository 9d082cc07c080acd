//! Constrained single-sensor scheduling: subgradient search on the Lagrange
//! multiplier and randomized mixing of the two bracketing deterministic
//! policies.
//!
//! [`solve_cmdp`] first solves the unconstrained problem (`y = 0`). If that
//! policy already meets the energy budget it is returned as a degenerate
//! mixture with `θ = 1`. Otherwise `y` follows
//! `y ← max(0, y + η·(C̄(π_y) − C_max))` until a policy below the budget
//! appears and the multiplier settles. The answer mixes one policy above the
//! budget with one within it so that the mixture spends exactly `C_max`;
//! among every pair the search visited, the one with the smallest mixed age
//! is kept, i.e. the lower convex hull of the visited (cost, age) points.
//!
//! A constant step can stall just above the budget. When the loop ends with
//! no policy under budget, `y` is doubled until one appears; this always
//! succeeds when the idle floor `c_b·λ` is within budget, so the only
//! infeasible case is `c_b·λ ≥ C_max`. Optional bisection on `y`
//! ([`SolverSettings::refine_steps`]) then tightens the bracket, and the
//! policies of a fixed multiplier grid ([`SolverSettings::y_grid`]) join the
//! candidates.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ActionSource, DeterministicPolicy, MdpModel, ViSettings};
use crate::model::{Action, SamplingRate, SensorConfig, SensorState, SystemParams};
use crate::steady::{evaluate_reduced, reduced_chain, PolicyEvaluation};

/// Doublings of `y` tried when the subgradient loop ends without a policy
/// under budget.
const MAX_DOUBLINGS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Subgradient step size.
    pub eta: f64,
    /// Multiplier convergence tolerance.
    pub epsilon: f64,
    /// Maximum subgradient iterations.
    pub i_stop: usize,
    /// Use `η / i` instead of a constant step.
    pub decay: bool,
    /// Bisection steps on `y` that tighten the final bracket.
    pub refine_steps: usize,
    /// Start each value iteration from the previous value table.
    pub warm_start: bool,
    /// Extra multipliers whose policies join the candidate pool.
    pub y_grid: Vec<f64>,
    pub vi: ViSettings,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            eta: 0.1,
            epsilon: 0.01,
            i_stop: 200,
            decay: false,
            refine_steps: 0,
            warm_start: true,
            y_grid: default_y_grid(),
            vi: ViSettings::default(),
        }
    }
}

/// `0.01 · 2^j` for `j = 0..16`.
pub fn default_y_grid() -> Vec<f64> {
    (0..16).map(|j| 0.01 * f64::from(1u32 << j)).collect()
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParams(format!("step size {} must be positive", self.eta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParams(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.i_stop == 0 {
            return Err(Error::InvalidParams("i_stop must be at least 1".into()));
        }
        if self.y_grid.iter().any(|y| !(*y >= 0.0 && y.is_finite())) {
            return Err(Error::InvalidParams("multiplier grid entries must be finite and non-negative".into()));
        }
        self.vi.validate()
    }

    fn step(&self, i: usize) -> f64 {
        if self.decay {
            self.eta / i as f64
        } else {
            self.eta
        }
    }
}

/// One multiplier visited by the solver and the averages of its policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YStep {
    pub y: f64,
    pub avg_aoi: f64,
    pub avg_cost: f64,
}

/// A randomized policy: `pi_low` with probability `θ`, else `pi_high`.
///
/// `pi_low` is solved at the smaller multiplier and spends more than the
/// budget; `pi_high` spends at most the budget.
#[derive(Clone, Debug)]
pub struct MixedPolicy {
    pub pi_low: DeterministicPolicy,
    pub pi_high: DeterministicPolicy,
    pub theta: f64,
    pub avg_aoi: f64,
    pub avg_cost: f64,
    pub lambda: SamplingRate,
    pub low_eval: PolicyEvaluation,
    pub high_eval: PolicyEvaluation,
    /// Every multiplier evaluated, in order.
    pub y_trace: Vec<YStep>,
}

impl MixedPolicy {
    /// A single deterministic policy viewed as a mixture with `θ = 1`.
    pub fn pure(policy: DeterministicPolicy, eval: PolicyEvaluation, lambda: SamplingRate) -> Self {
        Self {
            pi_high: policy.clone(),
            pi_low: policy,
            theta: 1.0,
            avg_aoi: eval.avg_aoi(),
            avg_cost: eval.avg_cost(),
            lambda,
            low_eval: eval,
            high_eval: eval,
            y_trace: Vec::new(),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.pi_low == self.pi_high
    }

    /// States whose two actions differ.
    pub fn differing_states(&self) -> usize {
        self.pi_low.differing_states(&self.pi_high)
    }

    /// Probability of transmitting `k` mini-slots in `s`, i.e. the expected
    /// `u·k` of the mixture.
    pub fn expected_occupancy(&self, s: &SensorState) -> f64 {
        let occ = |g: Action| if g.transmit { g.k as f64 } else { 0.0 };
        self.theta * occ(self.pi_low.action(s)) + (1.0 - self.theta) * occ(self.pi_high.action(s))
    }
}

impl ActionSource for MixedPolicy {
    fn choose<R: Rng + ?Sized>(&self, s: &SensorState, rng: &mut R) -> Action {
        mixed_action(self, s, rng)
    }
}

/// `θ = (C_max − c_low) / (c_high − c_low)`.
pub fn mixing_parameter(c_high: f64, c_low: f64, c_max: f64) -> Result<f64> {
    if !(c_high > c_max && c_max > c_low) {
        return Err(Error::InvalidBracket { c_high, c_max, c_low });
    }
    Ok(((c_max - c_low) / (c_high - c_low)).clamp(0.0, 1.0))
}

/// Draws `pi_low`'s action with probability `θ`, else `pi_high`'s.
pub fn mixed_action<R: Rng + ?Sized>(mixed: &MixedPolicy, s: &SensorState, rng: &mut R) -> Action {
    if rng.gen::<f64>() < mixed.theta {
        mixed.pi_low.action(s)
    } else {
        mixed.pi_high.action(s)
    }
}

struct Candidate {
    policy: DeterministicPolicy,
    eval: PolicyEvaluation,
}

/// Runs value iteration per multiplier and keeps one candidate per distinct
/// behaviour on the reachable states.
struct Solver<'a> {
    model: &'a MdpModel,
    settings: &'a SolverSettings,
    warm: Option<Vec<f64>>,
    trace: Vec<YStep>,
    seen: HashMap<Vec<Action>, usize>,
    pool: Vec<Candidate>,
}

impl Solver<'_> {
    /// Solves for `y` and returns the average cost of the resulting policy.
    fn solve(&mut self, y: f64) -> Result<f64> {
        let init = if self.settings.warm_start { self.warm.as_deref() } else { None };
        let (policy, table) = self.model.value_iteration_from(y, &self.settings.vi, init)?;
        if self.settings.warm_start {
            self.warm = Some(table.values);
        }
        let reduced = reduced_chain(self.model, &policy)?;
        let idx = match self.seen.get(reduced.signature()) {
            Some(&idx) => idx,
            None => {
                let eval = evaluate_reduced(self.model, &policy, &reduced)?;
                self.pool.push(Candidate { policy, eval });
                self.seen.insert(reduced.signature().to_vec(), self.pool.len() - 1);
                self.pool.len() - 1
            }
        };
        let eval = self.pool[idx].eval;
        self.trace.push(YStep { y, avg_aoi: eval.avg_aoi(), avg_cost: eval.avg_cost() });
        log::debug!("y = {y:.6}: aoi {:.4}, cost {:.4}", eval.avg_aoi(), eval.avg_cost());
        Ok(eval.avg_cost())
    }
}

/// Builds the model and solves the constrained problem.
pub fn solve_cmdp(params: &SystemParams, cfg: &SensorConfig, settings: &SolverSettings) -> Result<MixedPolicy> {
    cfg.validate()?;
    settings.validate()?;
    let model = MdpModel::new(params, cfg)?;
    solve_cmdp_on(&model, settings)
}

/// As [`solve_cmdp`] on a prebuilt model.
pub fn solve_cmdp_on(model: &MdpModel, settings: &SolverSettings) -> Result<MixedPolicy> {
    settings.validate()?;
    let cfg = model.cfg();
    let c_max = cfg.energy_budget;
    let lambda = cfg.rate;
    let mut solver = Solver {
        model,
        settings,
        warm: None,
        trace: Vec::new(),
        seen: HashMap::new(),
        pool: Vec::new(),
    };

    let first = solver.solve(0.0)?;
    if first <= c_max {
        let cand = solver.pool.swap_remove(0);
        let mut mixed = MixedPolicy::pure(cand.policy, cand.eval, lambda);
        mixed.y_trace = solver.trace;
        return Ok(mixed);
    }
    // At the floor only the never-transmitting policy fits, and its age is
    // unbounded once the truncation is lifted.
    if cfg.idle_cost_floor() >= c_max {
        return Err(Error::NoFeasiblePolicy { rate: lambda.to_string(), budget: c_max });
    }

    // Lowest-cost multiplier above the budget, highest-cost one below.
    let mut above = (0.0, first);
    let mut below: Option<(f64, f64)> = None;
    let track = |y: f64, cost: f64, above: &mut (f64, f64), below: &mut Option<(f64, f64)>| {
        if cost > c_max {
            if cost < above.1 {
                *above = (y, cost);
            }
        } else if below.is_none_or(|b| cost > b.1) {
            *below = Some((y, cost));
        }
    };

    let mut y = 0.0;
    let mut cost = above.1;
    for i in 1..=settings.i_stop {
        let next_y = (y + settings.step(i) * (cost - c_max)).max(0.0);
        cost = solver.solve(next_y)?;
        let dy = (next_y - y).abs();
        y = next_y;
        track(y, cost, &mut above, &mut below);
        if cost < c_max && dy < settings.epsilon {
            break;
        }
    }

    if below.is_none() {
        // The idle floor guarantees a policy under budget for large enough y.
        let mut y_try = (2.0 * y).max(1.0);
        for _ in 0..MAX_DOUBLINGS {
            let cost = solver.solve(y_try)?;
            track(y_try, cost, &mut above, &mut below);
            if below.is_some() {
                break;
            }
            y_try *= 2.0;
        }
    }
    let Some(mut below) = below else {
        return Err(Error::NoFeasiblePolicy { rate: lambda.to_string(), budget: c_max });
    };

    for _ in 0..settings.refine_steps {
        if below.0 <= above.0 {
            break;
        }
        let mid = 0.5 * (above.0 + below.0);
        let cost = solver.solve(mid)?;
        if cost > c_max {
            above = (mid, cost.min(above.1));
        } else {
            below = (mid, cost.max(below.1));
        }
    }

    for &y in &settings.y_grid {
        solver.solve(y)?;
    }

    let (hi, lo, theta) = best_pair(&solver.pool, c_max)?;
    let (hi, lo) = (&solver.pool[hi], &solver.pool[lo]);
    Ok(MixedPolicy {
        avg_aoi: theta * hi.eval.avg_aoi() + (1.0 - theta) * lo.eval.avg_aoi(),
        avg_cost: theta * hi.eval.avg_cost() + (1.0 - theta) * lo.eval.avg_cost(),
        theta,
        lambda,
        low_eval: hi.eval,
        high_eval: lo.eval,
        pi_low: hi.policy.clone(),
        pi_high: lo.policy.clone(),
        y_trace: solver.trace,
    })
}

/// The pair (over budget, within budget) whose budget-exhausting mixture has
/// the smallest age, with its `θ`. Ties keep the earliest pair.
fn best_pair(pool: &[Candidate], c_max: f64) -> Result<(usize, usize, f64)> {
    let mut best: Option<(f64, usize, usize, f64)> = None;
    for (i, hi) in pool.iter().enumerate().filter(|(_, c)| c.eval.avg_cost() > c_max) {
        for (j, lo) in pool.iter().enumerate().filter(|(_, c)| c.eval.avg_cost() <= c_max) {
            let (c_high, c_low) = (hi.eval.avg_cost(), lo.eval.avg_cost());
            let theta = if c_low >= c_max { 0.0 } else { mixing_parameter(c_high, c_low, c_max)? };
            let aoi = theta * hi.eval.avg_aoi() + (1.0 - theta) * lo.eval.avg_aoi();
            if best.is_none_or(|b| aoi < b.0) {
                best = Some((aoi, i, j, theta));
            }
        }
    }
    best.map(|(_, i, j, theta)| (i, j, theta))
        .ok_or(Error::InvalidBracket { c_high: f64::NAN, c_max, c_low: f64::NAN })
}
