//! Finite CMDP for one sensor: state enumeration, the transition kernel,
//! and discounted value iteration for a fixed Lagrange multiplier.
//!
//! States are laid out so that the channel index varies fastest:
//! `id = x · W + (h - 1)` where `x` indexes the channel-free part
//! `(a_buf, d, q)`. The channel is redrawn independently every epoch, so all
//! `W` states sharing an `x` have the same successor distribution up to the
//! action, and the expectation `Σ_w α_w V(x', w)` is computed once per `x'`
//! per sweep.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    advance_scheduled, advance_unscheduled, step_state, Action, SamplingRate, SensorConfig, SensorState,
    SystemParams, SLOT_MINISLOTS,
};

/// Default cap on the number of enumerated states.
pub const DEFAULT_STATE_LIMIT: usize = 1_000_000;

/// The Cartesian state grid. Cheap to clone; holds only dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    rate: SamplingRate,
    step: u32,
    a_cap: u32,
    q_cap: u32,
    n_a: usize,
    n_q: usize,
    w: usize,
}

impl StateSpace {
    pub fn len(&self) -> usize {
        self.nonchannel_len() * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `(a_buf, d, q)` combinations.
    pub fn nonchannel_len(&self) -> usize {
        self.n_a * 2 * self.n_q
    }

    pub fn channel_states(&self) -> usize {
        self.w
    }

    pub fn rate(&self) -> SamplingRate {
        self.rate
    }

    /// Whether this grid is the one `cfg` and `params` would enumerate.
    pub fn matches(&self, params: &SystemParams, cfg: &SensorConfig) -> bool {
        self.rate == cfg.rate
            && self.a_cap == cfg.a_cap_scaled()
            && self.q_cap == cfg.q_cap_scaled()
            && self.w == params.channel_states()
    }

    pub fn nonchannel_id(&self, s: &SensorState) -> Option<usize> {
        if s.a_buf_scaled > self.a_cap
            || s.q_scaled > self.q_cap
            || !s.a_buf_scaled.is_multiple_of(self.step)
            || !s.q_scaled.is_multiple_of(self.step)
        {
            return None;
        }
        let di = if s.d_scaled == 0 {
            0
        } else if s.d_scaled == self.rate.denom() {
            1
        } else {
            return None;
        };
        let ai = (s.a_buf_scaled / self.step) as usize;
        let qi = (s.q_scaled / self.step) as usize;
        Some((ai * 2 + di) * self.n_q + qi)
    }

    pub fn id(&self, s: &SensorState) -> Option<usize> {
        if s.h == 0 || s.h as usize > self.w {
            return None;
        }
        self.nonchannel_id(s).map(|x| x * self.w + (s.h as usize - 1))
    }

    /// The state with channel `h` and channel-free index `x`.
    pub fn nonchannel_state(&self, x: usize, h: u8) -> SensorState {
        let qi = x % self.n_q;
        let rest = x / self.n_q;
        let di = rest % 2;
        let ai = rest / 2;
        SensorState {
            a_buf_scaled: ai as u32 * self.step,
            d_scaled: if di == 1 { self.rate.denom() } else { 0 },
            q_scaled: qi as u32 * self.step,
            h,
        }
    }

    pub fn state(&self, id: usize) -> SensorState {
        self.nonchannel_state(id / self.w, (id % self.w) as u8 + 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = SensorState> + '_ {
        (0..self.len()).map(move |id| self.state(id))
    }

    /// Index of the canonical initial state `(0, 0, 0)` without channel.
    pub fn initial_nonchannel(&self) -> usize {
        0
    }
}

/// Enumerates the full grid, refusing spaces above [`DEFAULT_STATE_LIMIT`].
pub fn enumerate_states(params: &SystemParams, cfg: &SensorConfig) -> Result<StateSpace> {
    enumerate_states_with_limit(params, cfg, DEFAULT_STATE_LIMIT)
}

pub fn enumerate_states_with_limit(params: &SystemParams, cfg: &SensorConfig, limit: usize) -> Result<StateSpace> {
    cfg.validate()?;
    let rate = cfg.rate;
    let step = rate.grid_step();
    let a_cap = cfg.a_cap_scaled();
    let q_cap = cfg.q_cap_scaled();
    let space = StateSpace {
        rate,
        step,
        a_cap,
        q_cap,
        n_a: (a_cap / step) as usize + 1,
        n_q: (q_cap / step) as usize + 1,
        w: params.channel_states(),
    };
    let count = space.len();
    if count > limit {
        return Err(Error::SpaceTooLarge { count, limit });
    }
    Ok(space)
}

/// Idle always; transmit with any TTI up to the whole packets queued.
pub fn feasible_actions(cfg: &SensorConfig, s: &SensorState) -> Vec<Action> {
    let kmax = max_tti(cfg, s);
    std::iter::once(Action::IDLE).chain((1..=kmax).map(Action::transmit)).collect()
}

fn max_tti(cfg: &SensorConfig, s: &SensorState) -> u32 {
    s.whole_packets(cfg.rate).min(cfg.tti_cap).min(SLOT_MINISLOTS)
}

fn is_feasible(cfg: &SensorConfig, s: &SensorState, g: Action) -> bool {
    if g.transmit {
        g.k >= 1 && g.k <= max_tti(cfg, s)
    } else {
        g.k == 1
    }
}

/// Successor ids and probabilities of `(s, g)`; zero-probability channel
/// states are omitted.
pub fn transition_distribution(
    params: &SystemParams,
    cfg: &SensorConfig,
    space: &StateSpace,
    s: &SensorState,
    g: Action,
) -> Result<Vec<(usize, f64)>> {
    if !is_feasible(cfg, s, g) {
        return Err(Error::InfeasibleAction { state: s.to_string(), action: g.to_string() });
    }
    let mut out = Vec::with_capacity(params.channel_states());
    for (i, &alpha) in params.channel_probs().iter().enumerate() {
        if alpha == 0.0 {
            continue;
        }
        let next = step_state(params, cfg, s, g, i as u8 + 1)?.next_state;
        let id = space
            .id(&next)
            .ok_or_else(|| Error::InvalidParams(format!("successor {next} left the grid")))?;
        out.push((id, alpha));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViSettings {
    pub gamma: f64,
    pub zeta: f64,
    pub max_iterations: usize,
}

impl Default for ViSettings {
    fn default() -> Self {
        Self { gamma: 0.95, zeta: 0.01, max_iterations: 100_000 }
    }
}

impl ViSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParams(format!("discount {} outside [0, 1)", self.gamma)));
        }
        if !(self.zeta > 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidParams("zeta and max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Lagrangian value function from value iteration.
#[derive(Clone, Debug)]
pub struct ValueTable {
    pub values: Vec<f64>,
    pub y: f64,
    pub gamma: f64,
    /// Sup-norm change of every sweep, in order.
    pub deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub y: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub final_delta: f64,
}

/// A stationary deterministic policy: one action per state id.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicPolicy {
    space: StateSpace,
    actions: Vec<Action>,
    pub meta: PolicyMeta,
}

impl DeterministicPolicy {
    pub fn new(space: StateSpace, actions: Vec<Action>, meta: PolicyMeta) -> Result<Self> {
        if actions.len() != space.len() {
            return Err(Error::InvalidParams(format!(
                "{} actions for {} states",
                actions.len(),
                space.len()
            )));
        }
        Ok(Self { space, actions, meta })
    }

    /// The policy that never transmits.
    pub fn idle_always(space: StateSpace) -> Self {
        let actions = vec![Action::IDLE; space.len()];
        let meta = PolicyMeta { y: f64::INFINITY, gamma: 0.0, iterations: 0, final_delta: 0.0 };
        Self { space, actions, meta }
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn action_by_id(&self, id: usize) -> Action {
        self.actions[id]
    }

    /// Action for `s`; states off the grid get the idle action.
    pub fn action(&self, s: &SensorState) -> Action {
        self.space.id(s).map_or(Action::IDLE, |id| self.actions[id])
    }

    /// Every stored action is feasible in its state.
    pub fn is_feasible(&self, cfg: &SensorConfig) -> bool {
        self.actions
            .iter()
            .enumerate()
            .all(|(id, &g)| is_feasible(cfg, &self.space.state(id), g))
    }

    /// Number of states where the two policies disagree.
    pub fn differing_states(&self, other: &Self) -> usize {
        self.actions.iter().zip(&other.actions).filter(|(a, b)| a != b).count()
    }
}

/// Anything that picks an action for a state, possibly at random.
pub trait ActionSource {
    fn choose<R: Rng + ?Sized>(&self, s: &SensorState, rng: &mut R) -> Action;
}

impl ActionSource for DeterministicPolicy {
    fn choose<R: Rng + ?Sized>(&self, s: &SensorState, _rng: &mut R) -> Action {
        self.action(s)
    }
}

/// Precomputed dynamics of one sensor: rewards and successors per
/// channel-free state, and transmit energies per channel state.
#[derive(Clone, Debug)]
pub struct MdpModel {
    params: SystemParams,
    cfg: SensorConfig,
    space: StateSpace,
    reward: Vec<f64>,
    idle_next: Vec<u32>,
    tx_offsets: Vec<u32>,
    tx_next: Vec<u32>,
    sampling_per_minislot: f64,
}

impl MdpModel {
    pub fn new(params: &SystemParams, cfg: &SensorConfig) -> Result<Self> {
        Self::with_limit(params, cfg, DEFAULT_STATE_LIMIT)
    }

    pub fn with_limit(params: &SystemParams, cfg: &SensorConfig, limit: usize) -> Result<Self> {
        let space = enumerate_states_with_limit(params, cfg, limit)?;
        let nx = space.nonchannel_len();
        let mut reward = Vec::with_capacity(nx);
        let mut idle_next = Vec::with_capacity(nx);
        let mut tx_offsets = Vec::with_capacity(nx + 1);
        let mut tx_next = Vec::new();
        let nc = |s: &SensorState| space.nonchannel_id(s).expect("dynamics are closed on the grid") as u32;
        tx_offsets.push(0);
        for x in 0..nx {
            let s = space.nonchannel_state(x, 1);
            reward.push(s.a_des(cfg.rate));
            idle_next.push(nc(&advance_unscheduled(cfg, &s, 1, 1)));
            for k in 1..=max_tti(cfg, &s) {
                tx_next.push(nc(&advance_scheduled(cfg, &s, k, 1).1));
            }
            tx_offsets.push(tx_next.len() as u32);
        }
        Ok(Self {
            params: params.clone(),
            cfg: cfg.clone(),
            space,
            reward,
            idle_next,
            tx_offsets,
            tx_next,
            sampling_per_minislot: cfg.sampling_cost * cfg.rate.value(),
        })
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn cfg(&self) -> &SensorConfig {
        &self.cfg
    }

    /// Reward of any state with channel-free index `x`.
    pub fn reward(&self, x: usize) -> f64 {
        self.reward[x]
    }

    /// Energy of action `g` in channel state `h`.
    pub fn cost(&self, h: u8, g: Action) -> f64 {
        let k = g.k as f64;
        if g.transmit {
            (self.sampling_per_minislot + self.params.power(h)) * k
        } else {
            self.sampling_per_minislot * k
        }
    }

    /// Channel-free successor index of `(x, g)`.
    pub fn successor(&self, x: usize, g: Action) -> usize {
        if g.transmit {
            self.tx_next[self.tx_offsets[x] as usize + g.k as usize - 1] as usize
        } else {
            self.idle_next[x] as usize
        }
    }

    fn tx_successors(&self, x: usize) -> &[u32] {
        &self.tx_next[self.tx_offsets[x] as usize..self.tx_offsets[x + 1] as usize]
    }

    fn expected_next(&self, values: &[f64], ev: &mut [f64]) {
        let w = self.space.w;
        let probs = self.params.channel_probs();
        ev.par_iter_mut().enumerate().for_each(|(x, slot)| {
            let row = &values[x * w..(x + 1) * w];
            *slot = row.iter().zip(probs).map(|(v, p)| v * p).sum();
        });
    }

    /// Best Lagrangian action and value for every channel state of `x`,
    /// ties going to the lexicographically smallest `(u, k)`.
    fn bellman_block(&self, x: usize, y: f64, gamma: f64, ev: &[f64], out: &mut [f64], acts: Option<&mut [Action]>) {
        let r = self.reward[x];
        let idle_q = r + y * self.sampling_per_minislot + gamma * ev[self.idle_next[x] as usize];
        let tx = self.tx_successors(x);
        let mut acts = acts;
        for (hi, slot) in out.iter_mut().enumerate() {
            let per_minislot = self.sampling_per_minislot + self.params.power(hi as u8 + 1);
            let mut best = idle_q;
            let mut best_action = Action::IDLE;
            for (ki, &next) in tx.iter().enumerate() {
                let k = (ki + 1) as f64;
                let q = r + y * per_minislot * k + gamma * ev[next as usize];
                if q < best {
                    best = q;
                    best_action = Action::transmit(ki as u32 + 1);
                }
            }
            *slot = best;
            if let Some(a) = acts.as_deref_mut() {
                a[hi] = best_action;
            }
        }
    }

    /// Greedy actions with respect to `values`.
    pub fn greedy_actions(&self, values: &[f64], y: f64, gamma: f64) -> Vec<Action> {
        let w = self.space.w;
        let mut ev = vec![0.0; self.space.nonchannel_len()];
        self.expected_next(values, &mut ev);
        let mut actions = vec![Action::IDLE; self.space.len()];
        let mut scratch = vec![0.0; self.space.len()];
        scratch
            .par_chunks_mut(w)
            .zip(actions.par_chunks_mut(w))
            .enumerate()
            .for_each(|(x, (out, acts))| self.bellman_block(x, y, gamma, &ev, out, Some(acts)));
        actions
    }

    /// Discounted value iteration from `v⁰ = 0` until the sup-norm change of
    /// a sweep falls below `ζ`, then greedy extraction.
    pub fn value_iteration(&self, y: f64, settings: &ViSettings) -> Result<(DeterministicPolicy, ValueTable)> {
        self.value_iteration_from(y, settings, None)
    }

    /// As [`MdpModel::value_iteration`], optionally starting from `initial`.
    pub fn value_iteration_from(
        &self,
        y: f64,
        settings: &ViSettings,
        initial: Option<&[f64]>,
    ) -> Result<(DeterministicPolicy, ValueTable)> {
        settings.validate()?;
        if !(y >= 0.0 && y.is_finite()) {
            return Err(Error::InvalidParams(format!("Lagrange multiplier {y} must be finite and non-negative")));
        }
        let n = self.space.len();
        let w = self.space.w;
        let gamma = settings.gamma;
        let mut v = match initial {
            Some(init) if init.len() == n => init.to_vec(),
            _ => vec![0.0; n],
        };
        let mut next = vec![0.0; n];
        let mut ev = vec![0.0; self.space.nonchannel_len()];
        let mut deltas = Vec::new();
        loop {
            self.expected_next(&v, &mut ev);
            next.par_chunks_mut(w)
                .enumerate()
                .for_each(|(x, out)| self.bellman_block(x, y, gamma, &ev, out, None));
            let delta = next
                .par_iter()
                .zip(v.par_iter())
                .map(|(a, b)| (a - b).abs())
                .reduce(|| 0.0, f64::max);
            deltas.push(delta);
            std::mem::swap(&mut v, &mut next);
            if delta < settings.zeta {
                break;
            }
            if deltas.len() >= settings.max_iterations {
                return Err(Error::ConvergenceFailure { iterations: deltas.len(), delta });
            }
        }
        let actions = self.greedy_actions(&v, y, gamma);
        let meta = PolicyMeta {
            y,
            gamma,
            iterations: deltas.len(),
            final_delta: *deltas.last().unwrap_or(&0.0),
        };
        let policy = DeterministicPolicy::new(self.space.clone(), actions, meta)?;
        Ok((policy, ValueTable { values: v, y, gamma, deltas }))
    }
}

/// Builds the model and runs value iteration for multiplier `y`.
pub fn value_iteration(
    params: &SystemParams,
    cfg: &SensorConfig,
    y: f64,
    settings: &ViSettings,
) -> Result<(DeterministicPolicy, ValueTable)> {
    MdpModel::new(params, cfg)?.value_iteration(y, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::epoch_cost;
    use proptest::prelude::*;

    fn table1_cfg(tenths: u32, q_max: u32, age_cap: u32) -> SensorConfig {
        SensorConfig {
            age_cap: Some(age_cap),
            ..SensorConfig::new(SamplingRate::tenths(tenths).unwrap(), q_max, 1.0, 1.0)
        }
    }

    #[test]
    fn table1_grid_count() {
        let space = enumerate_states(&SystemParams::table1(), &table1_cfg(5, 3, 10)).unwrap();
        assert_eq!(space.len(), 770);
    }

    #[test]
    fn smallest_grid_count() {
        let p = SystemParams::new(180e3, 8, vec![1.0], vec![1.0]).unwrap();
        let space = enumerate_states(&p, &table1_cfg(10, 1, 1)).unwrap();
        assert_eq!(space.len(), 8);
    }

    #[test]
    fn space_limit_enforced() {
        let r = enumerate_states_with_limit(&SystemParams::table1(), &table1_cfg(5, 3, 10), 769);
        assert!(matches!(r, Err(Error::SpaceTooLarge { count: 770, limit: 769 })));
    }

    #[test]
    fn ids_are_a_bijection() {
        for cfg in [table1_cfg(5, 3, 10), table1_cfg(3, 2, 7), table1_cfg(10, 4, 9)] {
            let space = enumerate_states(&SystemParams::table1(), &cfg).unwrap();
            for id in 0..space.len() {
                assert_eq!(space.id(&space.state(id)), Some(id));
            }
        }
    }

    #[test]
    fn feasible_action_sets() {
        let cfg = table1_cfg(5, 20, 10);
        let s = |q| SensorState { a_buf_scaled: 0, d_scaled: 0, q_scaled: q, h: 1 };
        assert_eq!(feasible_actions(&cfg, &s(5)), vec![Action::IDLE]);
        assert_eq!(
            feasible_actions(&cfg, &s(20)),
            vec![Action::IDLE, Action::transmit(1), Action::transmit(2)]
        );
        let full = feasible_actions(&cfg, &s(200));
        assert_eq!(full.len(), 15);
        assert_eq!(full.last(), Some(&Action::transmit(14)));
    }

    #[test]
    fn transition_rows() {
        let p = SystemParams::table1();
        let cfg = table1_cfg(5, 3, 10);
        let space = enumerate_states(&p, &cfg).unwrap();
        for s in space.iter() {
            for g in feasible_actions(&cfg, &s) {
                let row = transition_distribution(&p, &cfg, &space, &s, g).unwrap();
                assert_eq!(row.len(), 5);
                let total: f64 = row.iter().map(|(_, pr)| pr).sum();
                assert!((total - 1.0).abs() < 1e-12);
                let first = space.state(row[0].0);
                for &(id, _) in &row {
                    let t = space.state(id);
                    assert_eq!((t.a_buf_scaled, t.d_scaled, t.q_scaled), (first.a_buf_scaled, first.d_scaled, first.q_scaled));
                }
            }
        }
        let degenerate = SystemParams::new(180e3, 8, vec![1.0, 2.0], vec![1.0, 0.0]).unwrap();
        let space = enumerate_states(&degenerate, &cfg).unwrap();
        let row = transition_distribution(&degenerate, &cfg, &space, &SensorState::initial(1), Action::IDLE).unwrap();
        assert_eq!(row.len(), 1);
        assert_eq!(row[0].1, 1.0);
    }

    #[test]
    fn myopic_policy_when_undiscounted() {
        let p = SystemParams::table1();
        let cfg = table1_cfg(5, 3, 10);
        let y = 0.7;
        let settings = ViSettings { gamma: 0.0, ..Default::default() };
        let (policy, _) = value_iteration(&p, &cfg, y, &settings).unwrap();
        for (id, s) in policy.space().clone().iter().enumerate() {
            // Reward does not depend on the action, so the myopic choice
            // minimizes energy: idle.
            let best = feasible_actions(&cfg, &s)
                .into_iter()
                .min_by(|a, b| {
                    (y * epoch_cost(&p, &cfg, &s, *a)).partial_cmp(&(y * epoch_cost(&p, &cfg, &s, *b))).unwrap()
                })
                .unwrap();
            assert_eq!(policy.action_by_id(id), best);
        }
    }

    #[test]
    fn contraction_and_greedy_consistency() {
        let p = SystemParams::table1();
        let cfg = table1_cfg(5, 3, 12);
        let model = MdpModel::new(&p, &cfg).unwrap();
        let settings = ViSettings::default();
        let (policy, table) = model.value_iteration(0.8, &settings).unwrap();
        for w in table.deltas.windows(2) {
            assert!(w[1] <= settings.gamma * w[0] + 1e-9, "{} > γ·{}", w[1], w[0]);
        }
        assert!(*table.deltas.last().unwrap() < settings.zeta);
        assert_eq!(model.greedy_actions(&table.values, 0.8, settings.gamma), policy.actions());
        assert!(policy.is_feasible(&cfg));
        assert_eq!(policy.meta.iterations, table.deltas.len());
    }

    #[test]
    fn huge_multiplier_never_transmits() {
        let p = SystemParams::table1();
        let cfg = table1_cfg(5, 2, 3);
        let (policy, _) = value_iteration(&p, &cfg, 1e6, &ViSettings::default()).unwrap();
        assert!(policy.actions().iter().all(|a| !a.transmit));
    }

    #[test]
    fn convergence_failure_reported() {
        let p = SystemParams::table1();
        let cfg = table1_cfg(5, 2, 3);
        let settings = ViSettings { max_iterations: 3, ..Default::default() };
        assert!(matches!(
            value_iteration(&p, &cfg, 0.0, &settings),
            Err(Error::ConvergenceFailure { iterations: 3, .. })
        ));
    }

    proptest! {
        #[test]
        fn model_successors_agree_with_step_state(tenths in 1u32..=10, q_max in 1u32..4, seed in 0usize..10_000) {
            let p = SystemParams::table1();
            let cfg = SensorConfig::new(SamplingRate::tenths(tenths).unwrap(), q_max, 1.0, 1.0);
            let model = MdpModel::new(&p, &cfg).unwrap();
            let space = model.space();
            let id = seed % space.len();
            let s = space.state(id);
            for g in feasible_actions(&cfg, &s) {
                let next = step_state(&p, &cfg, &s, g, 1).unwrap().next_state;
                prop_assert_eq!(Some(model.successor(id / space.channel_states(), g)), space.nonchannel_id(&next));
                prop_assert!((model.cost(s.h, g) - epoch_cost(&p, &cfg, &s, g)).abs() < 1e-12);
            }
        }
    }
}
