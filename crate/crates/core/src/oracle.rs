//! Independent checks for the solvers: exhaustive policy search with exact
//! discounted evaluation on tiny instances, and Monte-Carlo estimation of
//! long-run averages.
//!
//! Nothing here calls value iteration or the stationary-distribution code;
//! dynamics come straight from [`step_state`].

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mdp::{enumerate_states, feasible_actions, ActionSource, DeterministicPolicy, PolicyMeta};
use crate::model::{
    epoch_cost, epoch_reward, sample_channel, step_state, Action, ChannelRedraw, SensorConfig, SensorState,
    SystemParams, SLOT_MINISLOTS,
};

/// Largest grid accepted for exhaustive search.
pub const TINY_STATE_LIMIT: usize = 200;
/// Largest number of deterministic policies enumerated.
pub const TINY_POLICY_LIMIT: u64 = 1_000_000;

/// An instance small enough to enumerate every deterministic policy over
/// the states reachable from the initial state.
#[derive(Clone, Debug)]
pub struct TinyInstance {
    pub params: SystemParams,
    pub cfg: SensorConfig,
    reachable: Vec<SensorState>,
    actions: Vec<Vec<Action>>,
}

impl TinyInstance {
    pub fn new(params: SystemParams, cfg: SensorConfig) -> Result<Self> {
        let grid = enumerate_states(&params, &cfg)?.len();
        if grid > TINY_STATE_LIMIT {
            return Err(Error::TooLarge(format!("{grid} states (limit {TINY_STATE_LIMIT})")));
        }
        if cfg.tti_cap > 2 {
            return Err(Error::TooLarge(format!("TTI cap {} (limit 2)", cfg.tti_cap)));
        }
        let reachable = reachable_under_any_policy(&params, &cfg)?;
        let actions: Vec<Vec<Action>> = reachable.iter().map(|s| feasible_actions(&cfg, s)).collect();
        let count = policy_count(&actions);
        if count > TINY_POLICY_LIMIT {
            return Err(Error::TooLarge(format!("{count} policies (limit {TINY_POLICY_LIMIT})")));
        }
        Ok(Self { params, cfg, reachable, actions })
    }

    /// States reachable from the initial state under some policy.
    pub fn reachable(&self) -> &[SensorState] {
        &self.reachable
    }

    pub fn policy_count(&self) -> u64 {
        policy_count(&self.actions)
    }
}

fn policy_count(actions: &[Vec<Action>]) -> u64 {
    actions
        .iter()
        .try_fold(1u64, |acc, a| acc.checked_mul(a.len() as u64))
        .unwrap_or(u64::MAX)
}

fn reachable_under_any_policy(params: &SystemParams, cfg: &SensorConfig) -> Result<Vec<SensorState>> {
    let probs = params.channel_probs();
    let channels: Vec<u8> = (1..=probs.len() as u8).filter(|&h| probs[h as usize - 1] > 0.0).collect();
    let mut seen: HashMap<SensorState, usize> = HashMap::new();
    let mut order = Vec::new();
    for &h in &channels {
        let s = SensorState::initial(h);
        seen.insert(s, order.len());
        order.push(s);
    }
    let mut head = 0;
    while head < order.len() {
        let s = order[head];
        for g in feasible_actions(cfg, &s) {
            for &h in &channels {
                let next = step_state(params, cfg, &s, g, h)?.next_state;
                if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(next) {
                    e.insert(order.len());
                    order.push(next);
                }
            }
        }
        head += 1;
    }
    Ok(order)
}

/// Exact discounted Lagrangian value of a policy (given as one action per
/// reachable state) from the initial state, averaged over the initial
/// channel.
fn discounted_value_of(inst: &TinyInstance, choice: &[Action], y: f64, gamma: f64) -> f64 {
    let n = inst.reachable.len();
    let index: HashMap<SensorState, usize> = inst.reachable.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let probs = inst.params.channel_probs();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (i, s) in inst.reachable.iter().enumerate() {
        let g = choice[i];
        b[i] = epoch_reward(s, inst.cfg.rate) + y * epoch_cost(&inst.params, &inst.cfg, s, g);
        for (hi, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let next = step_state(&inst.params, &inst.cfg, s, g, hi as u8 + 1)
                .expect("enumerated actions are feasible")
                .next_state;
            a[(i, index[&next])] -= gamma * p;
        }
    }
    let v = a.lu().solve(&b).expect("I - γP is nonsingular for γ < 1");
    inst.reachable
        .iter()
        .enumerate()
        .filter(|(_, s)| s.a_buf_scaled == 0 && s.d_scaled == 0 && s.q_scaled == 0)
        .map(|(i, s)| probs[s.h as usize - 1] * v[i])
        .sum()
}

/// Exact discounted value of `policy` on a tiny instance.
pub fn discounted_value(inst: &TinyInstance, policy: &DeterministicPolicy, y: f64, gamma: f64) -> f64 {
    let choice: Vec<Action> = inst.reachable.iter().map(|s| policy.action(s)).collect();
    discounted_value_of(inst, &choice, y, gamma)
}

#[derive(Clone, Debug)]
pub struct OracleSolution {
    /// Optimal actions on reachable states, idle elsewhere.
    pub policy: DeterministicPolicy,
    pub value: f64,
}

/// Evaluates every deterministic policy on the reachable states and returns
/// the one with the smallest expected discounted Lagrangian cost.
pub fn enumerate_best_policy(inst: &TinyInstance, y: f64, gamma: f64) -> Result<OracleSolution> {
    let count = inst.policy_count();
    if count > TINY_POLICY_LIMIT {
        return Err(Error::TooLarge(format!("{count} policies")));
    }
    let decode = |mut i: u64| -> Vec<Action> {
        inst.actions
            .iter()
            .map(|acts| {
                let r = acts.len() as u64;
                let a = acts[(i % r) as usize];
                i /= r;
                a
            })
            .collect()
    };
    let (best_index, value) = (0..count)
        .into_par_iter()
        .map(|i| (i, discounted_value_of(inst, &decode(i), y, gamma)))
        .reduce(
            || (u64::MAX, f64::INFINITY),
            |a, b| if b.1 < a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a },
        );
    let choice = decode(best_index);
    let space = enumerate_states(&inst.params, &inst.cfg)?;
    let mut actions = vec![Action::IDLE; space.len()];
    for (s, g) in inst.reachable.iter().zip(choice) {
        actions[space.id(s).expect("reachable states lie on the grid")] = g;
    }
    let meta = PolicyMeta { y, gamma, iterations: 0, final_delta: 0.0 };
    Ok(OracleSolution { policy: DeterministicPolicy::new(space, actions, meta)?, value })
}

/// Empirical long-run averages with batch-means standard errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonteCarloEstimate {
    pub avg_aoi: f64,
    pub avg_cost: f64,
    pub stderr_aoi: f64,
    pub stderr_cost: f64,
    pub epochs: u64,
}

const BATCHES: u64 = 50;

/// Simulates one sensor from the initial state for `epochs` decision epochs.
pub fn monte_carlo_evaluate<P: ActionSource>(
    params: &SystemParams,
    cfg: &SensorConfig,
    policy: &P,
    epochs: u64,
    seed: u64,
    redraw: ChannelRedraw,
) -> MonteCarloEstimate {
    let epochs = epochs.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SensorState::initial(sample_channel(params, &mut rng));
    let mut elapsed: u64 = 0;
    let batch_len = (epochs / BATCHES).max(1);
    let mut batch_aoi = Vec::new();
    let mut batch_cost = Vec::new();
    let (mut sum_aoi, mut sum_cost) = (0.0, 0.0);
    let (mut acc_aoi, mut acc_cost, mut in_batch) = (0.0, 0.0, 0u64);
    for _ in 0..epochs {
        let g = policy.choose(&s, &mut rng);
        let r = epoch_reward(&s, cfg.rate);
        let c = epoch_cost(params, cfg, &s, g);
        sum_aoi += r;
        sum_cost += c;
        acc_aoi += r;
        acc_cost += c;
        in_batch += 1;
        if in_batch == batch_len {
            batch_aoi.push(acc_aoi / batch_len as f64);
            batch_cost.push(acc_cost / batch_len as f64);
            acc_aoi = 0.0;
            acc_cost = 0.0;
            in_batch = 0;
        }
        let before = elapsed / SLOT_MINISLOTS as u64;
        elapsed += g.k as u64;
        let h_next = match redraw {
            ChannelRedraw::PerEpoch => sample_channel(params, &mut rng),
            ChannelRedraw::PerSlot if elapsed / SLOT_MINISLOTS as u64 != before => sample_channel(params, &mut rng),
            ChannelRedraw::PerSlot => s.h,
        };
        s = step_state(params, cfg, &s, g, h_next).expect("policy actions are feasible").next_state;
    }
    MonteCarloEstimate {
        avg_aoi: sum_aoi / epochs as f64,
        avg_cost: sum_cost / epochs as f64,
        stderr_aoi: batch_stderr(&batch_aoi),
        stderr_cost: batch_stderr(&batch_cost),
        epochs,
    }
}

fn batch_stderr(means: &[f64]) -> f64 {
    let n = means.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = means.iter().sum::<f64>() / n as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// A policy that picks uniformly among feasible actions; handy for fuzzing.
pub struct UniformRandomPolicy<'a> {
    pub cfg: &'a SensorConfig,
}

impl ActionSource for UniformRandomPolicy<'_> {
    fn choose<R: Rng + ?Sized>(&self, s: &SensorState, rng: &mut R) -> Action {
        let acts = feasible_actions(self.cfg, s);
        acts[rng.gen_range(0..acts.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SamplingRate;

    fn tiny(tenths: u32, q_max: u32, age_cap: u32, probs: Vec<f64>) -> TinyInstance {
        let snr = (0..probs.len()).map(|i| 10f64.powf(i as f64)).collect();
        let params = SystemParams::new(180e3, 8, snr, probs).unwrap();
        let cfg = SensorConfig {
            age_cap: Some(age_cap),
            tti_cap: 2,
            ..SensorConfig::new(SamplingRate::tenths(tenths).unwrap(), q_max, 1.0, 1.0)
        };
        TinyInstance::new(params, cfg).unwrap()
    }

    #[test]
    fn guard_rejects_large_instances() {
        let cfg = SensorConfig { tti_cap: 2, ..SensorConfig::new(SamplingRate::tenths(5).unwrap(), 3, 1.0, 1.0) };
        assert!(matches!(TinyInstance::new(SystemParams::table1(), cfg), Err(Error::TooLarge(_))));
    }

    #[test]
    fn prohibitive_price_gives_idle_optimum() {
        let inst = tiny(10, 2, 3, vec![0.5, 0.5]);
        assert!(inst.policy_count() > 1);
        let sol = enumerate_best_policy(&inst, 1e6, 0.9).unwrap();
        assert!(inst.reachable().iter().all(|s| !sol.policy.action(s).transmit));
    }

    #[test]
    fn myopic_oracle_idles() {
        // γ = 0, y = 0: every action has the same one-step value, so the
        // first (idle) action wins.
        let inst = tiny(10, 2, 3, vec![0.5, 0.5]);
        let sol = enumerate_best_policy(&inst, 0.0, 0.0).unwrap();
        assert!(sol.policy.actions().iter().all(|a| !a.transmit));
    }

    #[test]
    fn monte_carlo_idle_cost_is_exact() {
        let params = SystemParams::table1();
        let cfg = SensorConfig::new(SamplingRate::tenths(5).unwrap(), 3, 1.0, 1.0);
        let space = enumerate_states(&params, &cfg).unwrap();
        let idle = DeterministicPolicy::idle_always(space);
        let est = monte_carlo_evaluate(&params, &cfg, &idle, 10_000, 1, ChannelRedraw::PerEpoch);
        assert!((est.avg_cost - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_channel_is_deterministic() {
        let params = SystemParams::new(180e3, 8, vec![1.0, 2.0], vec![1.0, 0.0]).unwrap();
        let cfg = SensorConfig::new(SamplingRate::tenths(5).unwrap(), 3, 1.0, 1.0);
        let space = enumerate_states(&params, &cfg).unwrap();
        let mut actions = vec![Action::IDLE; space.len()];
        for (id, s) in space.iter().enumerate() {
            if s.whole_packets(cfg.rate) >= 2 {
                actions[id] = Action::transmit(2);
            }
        }
        let det = DeterministicPolicy::new(space, actions, PolicyMeta { y: 0.0, gamma: 0.0, iterations: 0, final_delta: 0.0 }).unwrap();
        let a = monte_carlo_evaluate(&params, &cfg, &det, 5_000, 1, ChannelRedraw::PerEpoch);
        let b = monte_carlo_evaluate(&params, &cfg, &det, 5_000, 99, ChannelRedraw::PerEpoch);
        assert_eq!(a, b);
    }
}
