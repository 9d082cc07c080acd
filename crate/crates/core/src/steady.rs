//! Policy-induced Markov chains, their stationary distributions, and the
//! long-run average age and energy of a policy.
//!
//! Two routes are provided. [`build_chain`] + [`solve_stationary`] +
//! [`policy_averages`] work on the full `M × M` chain over every grid state.
//! [`evaluate_policy`] is the route the solvers use: because the channel is
//! redrawn independently each epoch, the stationary law factorizes as
//! `β(x, h) = μ(x) · α_h`, so only the chain on channel-free states reachable
//! from the canonical initial state needs solving. Small reduced chains are
//! solved densely; large or multichain ones by lazy power iteration from the
//! initial state, whose limit is the Cesàro average of the chain started
//! there. The two routes agree whenever the full chain is unichain.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{DeterministicPolicy, MdpModel};
use crate::model::{Action, ChannelRedraw};
use crate::oracle;

/// Column-stochastic sparse transition matrix: column `m` lists the
/// probabilities of leaving state `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainMatrix {
    cols: Vec<Vec<(usize, f64)>>,
}

impl ChainMatrix {
    /// Builds the matrix from columns, merging repeated rows and checking
    /// that every column sums to one.
    pub fn from_columns(cols: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = cols.len();
        let mut merged = Vec::with_capacity(n);
        for (m, mut col) in cols.into_iter().enumerate() {
            col.sort_by_key(|&(r, _)| r);
            let mut out: Vec<(usize, f64)> = Vec::with_capacity(col.len());
            for (r, p) in col {
                if r >= n {
                    return Err(Error::InvalidParams(format!("row {r} out of range in column {m}")));
                }
                match out.last_mut() {
                    Some(last) if last.0 == r => last.1 += p,
                    _ => out.push((r, p)),
                }
            }
            let total: f64 = out.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidParams(format!("column {m} sums to {total}")));
            }
            merged.push(out);
        }
        Ok(Self { cols: merged })
    }

    /// Dense row-major input, `rows[i][j]` = probability of `j → i`.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let cols = (0..n)
            .map(|j| (0..n).filter(|&i| rows[i][j] != 0.0).map(|i| (i, rows[i][j])).collect())
            .collect();
        Self::from_columns(cols)
    }

    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn column(&self, m: usize) -> &[(usize, f64)] {
        &self.cols[m]
    }

    pub fn column_sum(&self, m: usize) -> f64 {
        self.cols[m].iter().map(|(_, p)| p).sum()
    }

    pub fn max_column_nonzeros(&self) -> usize {
        self.cols.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// `X v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (m, col) in self.cols.iter().enumerate() {
            for &(r, p) in col {
                out[r] += p * v[m];
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut x = DMatrix::zeros(n, n);
        for (m, col) in self.cols.iter().enumerate() {
            for &(r, p) in col {
                x[(r, m)] += p;
            }
        }
        x
    }
}

/// The chain over the full grid induced by a deterministic policy.
pub fn build_chain(model: &MdpModel, policy: &DeterministicPolicy) -> Result<ChainMatrix> {
    let space = model.space();
    if policy.space() != space {
        return Err(Error::Config("policy was solved on a different state grid".into()));
    }
    let w = space.channel_states();
    let probs = model.params().channel_probs();
    let cols = (0..space.len())
        .map(|m| {
            let next = model.successor(m / w, policy.action_by_id(m));
            probs
                .iter()
                .enumerate()
                .filter(|(_, &a)| a > 0.0)
                .map(|(h, &a)| (next * w + h, a))
                .collect()
        })
        .collect();
    ChainMatrix::from_columns(cols)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    /// Least squares on the stacked system `[X - I; 1ᵀ] β = [0; 1]`.
    StackedLeastSquares,
    /// Lazy power iteration `β ← (β + Xβ) / 2`.
    PowerIteration,
}

#[derive(Clone, Debug)]
pub struct StationaryDistribution {
    pub beta: Vec<f64>,
    /// `‖Xβ - β‖∞`.
    pub residual: f64,
    /// `|Σβ - 1|`.
    pub mass_residual: f64,
    /// Total-variation distance to the power-iteration solution, when the
    /// cross-check ran.
    pub cross_check_tv: Option<f64>,
    pub method: SolveMethod,
}

#[derive(Clone, Debug)]
pub struct StationaryOptions {
    /// Largest chain solved densely.
    pub dense_limit: usize,
    pub power_tol: f64,
    pub power_max_iterations: usize,
    /// Run power iteration alongside the dense solve.
    pub cross_check: bool,
}

impl Default for StationaryOptions {
    fn default() -> Self {
        Self { dense_limit: 1500, power_tol: 1e-14, power_max_iterations: 200_000, cross_check: true }
    }
}

pub fn solve_stationary(x: &ChainMatrix) -> Result<StationaryDistribution> {
    solve_stationary_with(x, &StationaryOptions::default())
}

pub fn solve_stationary_with(x: &ChainMatrix, opts: &StationaryOptions) -> Result<StationaryDistribution> {
    let n = x.len();
    if n == 0 {
        return Err(Error::InvalidParams("empty chain".into()));
    }
    let (beta, method, cross_check_tv) = if n <= opts.dense_limit {
        let beta = stacked_least_squares(x)?;
        let tv = if opts.cross_check {
            match power_iteration(x, opts.power_tol, opts.power_max_iterations) {
                Ok(p) => Some(total_variation(&beta, &p)),
                Err(_) => None,
            }
        } else {
            None
        };
        if let Some(tv) = tv {
            if tv > 1e-6 {
                log::warn!("stationary solve and power iteration differ by {tv:.2e} in total variation");
            }
        }
        (beta, SolveMethod::StackedLeastSquares, tv)
    } else {
        (power_iteration(x, opts.power_tol, opts.power_max_iterations)?, SolveMethod::PowerIteration, None)
    };
    let xb = x.apply(&beta);
    let residual = xb.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mass_residual = (beta.iter().sum::<f64>() - 1.0).abs();
    if residual > 1e-8 || mass_residual > 1e-10 {
        return Err(Error::NonUnichain(format!(
            "stationary residual {residual:.2e}, mass residual {mass_residual:.2e}"
        )));
    }
    Ok(StationaryDistribution { beta, residual, mass_residual, cross_check_tv, method })
}

fn stacked_least_squares(x: &ChainMatrix) -> Result<Vec<f64>> {
    let n = x.len();
    let mut a = DMatrix::zeros(n + 1, n);
    for m in 0..n {
        a[(m, m)] -= 1.0;
        for &(r, p) in x.column(m) {
            a[(r, m)] += p;
        }
        a[(n, m)] = 1.0;
    }
    let mut b = DVector::zeros(n + 1);
    b[n] = 1.0;
    let qr = a.qr();
    let r = qr.r();
    let diag_max = (0..n).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if let Some(i) = (0..n).find(|&i| r[(i, i)].abs() <= 1e-9 * diag_max.max(1.0)) {
        return Err(Error::NonUnichain(format!("stacked system is rank deficient at column {i}")));
    }
    let qtb = qr.q().transpose() * b;
    let sol = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::NonUnichain("singular triangular factor".into()))?;
    Ok(normalize(sol.iter().copied().collect()))
}

/// Clips round-off negatives and renormalizes.
fn normalize(mut beta: Vec<f64>) -> Vec<f64> {
    for b in beta.iter_mut() {
        if *b < 0.0 {
            *b = 0.0;
        }
    }
    let total: f64 = beta.iter().sum();
    beta.iter_mut().for_each(|b| *b /= total);
    beta
}

/// Lazy power iteration from the uniform vector. Laziness makes it converge
/// on periodic chains too.
pub fn power_iteration(x: &ChainMatrix, tol: f64, max_iterations: usize) -> Result<Vec<f64>> {
    let n = x.len();
    power_iteration_from(x, vec![1.0 / n as f64; n], tol, max_iterations)
}

/// Lazy power iteration from `init`. On a multichain matrix the limit is the
/// Cesàro average of the chain started from `init`.
pub fn power_iteration_from(x: &ChainMatrix, init: Vec<f64>, tol: f64, max_iterations: usize) -> Result<Vec<f64>> {
    if init.len() != x.len() {
        return Err(Error::InvalidParams(format!("start vector has {} entries for {} states", init.len(), x.len())));
    }
    let mut beta = init;
    let mut change = f64::INFINITY;
    for _ in 0..max_iterations {
        let xb = x.apply(&beta);
        let next: Vec<f64> = beta.iter().zip(&xb).map(|(b, xb)| 0.5 * (b + xb)).collect();
        change = next.iter().zip(&beta).map(|(a, b)| (a - b).abs()).sum();
        beta = next;
        if change < tol {
            return Ok(normalize(beta));
        }
    }
    Err(Error::ConvergenceFailure { iterations: max_iterations, delta: change })
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Long-run per-epoch averages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    /// Average destination age in mini-slots.
    pub avg_aoi: f64,
    /// Average energy per epoch.
    pub avg_cost: f64,
}

/// Averages of `policy` under a stationary distribution over the full grid.
pub fn policy_averages(model: &MdpModel, policy: &DeterministicPolicy, beta: &[f64]) -> Averages {
    let w = model.space().channel_states();
    let mut avg_aoi = 0.0;
    let mut avg_cost = 0.0;
    for (m, &b) in beta.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        avg_aoi += b * model.reward(m / w);
        avg_cost += b * model.cost((m % w) as u8 + 1, policy.action_by_id(m));
    }
    Averages { avg_aoi, avg_cost }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluationMethod {
    Analytic,
    /// Fallback when the reachable chain is not unichain.
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub averages: Averages,
    /// Channel-free states reachable from the initial state.
    pub support: usize,
    pub method: EvaluationMethod,
}

impl PolicyEvaluation {
    pub fn avg_aoi(&self) -> f64 {
        self.averages.avg_aoi
    }

    pub fn avg_cost(&self) -> f64 {
        self.averages.avg_cost
    }
}

/// Epochs simulated when the analytic route fails.
pub const FALLBACK_EPOCHS: u64 = 1_000_000;

/// Largest reduced chain the evaluator solves densely.
pub const EVAL_DENSE_LIMIT: usize = 1000;

/// L1 step size at which the evaluator's power iteration stops.
const EVAL_POWER_TOL: f64 = 1e-9;

/// Average age and energy of `policy` from the canonical initial state.
pub fn evaluate_policy(model: &MdpModel, policy: &DeterministicPolicy) -> Result<PolicyEvaluation> {
    let reduced = reduced_chain(model, policy)?;
    evaluate_reduced(model, policy, &reduced)
}

/// As [`evaluate_policy`] with the reduced chain already built. Falls back
/// to a Monte-Carlo estimate when no analytic route converges.
pub fn evaluate_reduced(
    model: &MdpModel,
    policy: &DeterministicPolicy,
    reduced: &ReducedChain,
) -> Result<PolicyEvaluation> {
    match evaluate_analytic(model, policy, reduced) {
        Ok(ev) => Ok(ev),
        Err(err @ (Error::NonUnichain(_) | Error::ConvergenceFailure { .. })) => {
            log::warn!("analytic evaluation failed ({err}); falling back to Monte-Carlo");
            let mc = oracle::monte_carlo_evaluate(
                model.params(),
                model.cfg(),
                policy,
                FALLBACK_EPOCHS,
                0,
                ChannelRedraw::PerEpoch,
            );
            Ok(PolicyEvaluation {
                averages: Averages { avg_aoi: mc.avg_aoi, avg_cost: mc.avg_cost },
                support: reduced.states.len(),
                method: EvaluationMethod::MonteCarlo,
            })
        }
        Err(err) => Err(err),
    }
}

/// The chain on channel-free states reachable from `(0, 0, 0)` in
/// breadth-first order, with its index map back to grid indices.
pub struct ReducedChain {
    pub states: Vec<usize>,
    pub chain: ChainMatrix,
    actions: Vec<Action>,
}

impl ReducedChain {
    /// The policy's actions on the reachable states in breadth-first order.
    /// Two policies with equal signatures have equal evaluations.
    pub fn signature(&self) -> &[Action] {
        &self.actions
    }
}

pub fn reduced_chain(model: &MdpModel, policy: &DeterministicPolicy) -> Result<ReducedChain> {
    let space = model.space();
    if policy.space() != space {
        return Err(Error::Config("policy was solved on a different state grid".into()));
    }
    let w = space.channel_states();
    let probs = model.params().channel_probs();
    let mut index = vec![u32::MAX; space.nonchannel_len()];
    let mut states = vec![space.initial_nonchannel()];
    index[states[0]] = 0;
    let mut cols = Vec::new();
    let mut actions = Vec::new();
    let mut head = 0;
    while head < states.len() {
        let x = states[head];
        let mut col = Vec::with_capacity(w);
        for (h, &a) in probs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let g = policy.action_by_id(x * w + h);
            actions.push(g);
            let next = model.successor(x, g);
            if index[next] == u32::MAX {
                index[next] = states.len() as u32;
                states.push(next);
            }
            col.push((index[next] as usize, a));
        }
        cols.push(col);
        head += 1;
    }
    Ok(ReducedChain { states, chain: ChainMatrix::from_columns(cols)?, actions })
}

/// Solves `(X - I)β = 0` with the last equation replaced by `Σβ = 1`.
fn square_lu(x: &ChainMatrix) -> Option<Vec<f64>> {
    let n = x.len();
    let mut a = x.to_dense();
    for m in 0..n {
        a[(m, m)] -= 1.0;
        a[(n - 1, m)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let sol = a.lu().solve(&b)?;
    sol.iter().all(|v| v.is_finite()).then(|| normalize(sol.iter().copied().collect()))
}

fn max_residual(x: &ChainMatrix, beta: &[f64]) -> f64 {
    x.apply(beta).iter().zip(beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn evaluate_analytic(model: &MdpModel, policy: &DeterministicPolicy, reduced: &ReducedChain) -> Result<PolicyEvaluation> {
    let n = reduced.states.len();
    let opts = StationaryOptions::default();
    let dense = if n <= EVAL_DENSE_LIMIT {
        square_lu(&reduced.chain).filter(|mu| max_residual(&reduced.chain, mu) <= 1e-10)
    } else {
        None
    };
    let mu = match dense {
        Some(mu) => mu,
        None => {
            let mut start = vec![0.0; n];
            start[0] = 1.0;
            power_iteration_from(&reduced.chain, start, EVAL_POWER_TOL, opts.power_max_iterations)?
        }
    };
    let residual = max_residual(&reduced.chain, &mu);
    if residual > 1e-8 {
        return Err(Error::NonUnichain(format!("reduced chain residual {residual:.2e}")));
    }
    let w = model.space().channel_states();
    let probs = model.params().channel_probs();
    let mut avg_aoi = 0.0;
    let mut avg_cost = 0.0;
    for (&x, &m) in reduced.states.iter().zip(&mu) {
        avg_aoi += m * model.reward(x);
        let cost: f64 = probs
            .iter()
            .enumerate()
            .map(|(h, a)| a * model.cost(h as u8 + 1, policy.action_by_id(x * w + h)))
            .sum();
        avg_cost += m * cost;
    }
    Ok(PolicyEvaluation {
        averages: Averages { avg_aoi, avg_cost },
        support: n,
        method: EvaluationMethod::Analytic,
    })
}
