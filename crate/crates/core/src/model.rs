//! The single-sensor model: channel, transmit power, and the queue / age
//! dynamics that every solver and simulator shares.
//!
//! # Units
//!
//! Time is counted in mini-slots (1/14 ms); a slot is 14 mini-slots. The
//! sampling rate `λ = L / D` packets per mini-slot is a rational with
//! denominator `D` of 10 (the tenths grid) or 100 (the refinement grid).
//! States are stored as exact integers:
//!
//! | field          | meaning                     | stored as            |
//! |----------------|-----------------------------|----------------------|
//! | `a_buf_scaled` | head-of-line age (mini-slots) | `a_buf · L`        |
//! | `d_scaled`     | destination/buffer age gap  | `d · L ∈ {0, D}`     |
//! | `q_scaled`     | queue length (packets)      | `q · D`              |
//! | `h`            | channel state               | `1..=W`              |
//!
//! With these scalings one epoch of `k` mini-slots adds `L·k` to both the age
//! and the queue, and serving `b` packets removes `D·b` from both, so every
//! update is integral and no rounding ever happens.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mini-slots per slot.
pub const SLOT_MINISLOTS: u32 = 14;

/// Duration of one mini-slot in seconds (15 kHz subcarrier spacing).
pub const MINISLOT_SECONDS: f64 = 1.0 / 14_000.0;

/// A sampling rate `numer / denom` packets per mini-slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SamplingRate {
    numer: u32,
    denom: u32,
}

impl SamplingRate {
    pub fn new(numer: u32, denom: u32) -> Result<Self> {
        if denom != 10 && denom != 100 {
            return Err(Error::InvalidParams(format!(
                "sampling-rate denominator must be 10 or 100, got {denom}"
            )));
        }
        if numer == 0 || numer > denom {
            return Err(Error::InvalidParams(format!(
                "sampling rate {numer}/{denom} outside (0, 1]"
            )));
        }
        Ok(Self { numer, denom })
    }

    /// `tenths / 10` packets per mini-slot.
    pub fn tenths(tenths: u32) -> Result<Self> {
        Self::new(tenths, 10)
    }

    pub fn hundredths(hundredths: u32) -> Result<Self> {
        if hundredths.is_multiple_of(10) {
            Self::new(hundredths / 10, 10)
        } else {
            Self::new(hundredths, 100)
        }
    }

    /// Parses a decimal rate such as `0.5` or `0.37` onto the nearest grid.
    pub fn from_f64(value: f64) -> Result<Self> {
        let hundredths = (value * 100.0).round();
        if !(value.is_finite() && (value * 100.0 - hundredths).abs() < 1e-6) {
            return Err(Error::InvalidParams(format!(
                "sampling rate {value} is not on the 0.01 grid"
            )));
        }
        Self::hundredths(hundredths as u32)
    }

    pub fn numer(self) -> u32 {
        self.numer
    }

    pub fn denom(self) -> u32 {
        self.denom
    }

    pub fn value(self) -> f64 {
        self.numer as f64 / self.denom as f64
    }

    /// Rate expressed in hundredths, for ordering mixed grids.
    pub fn in_hundredths(self) -> u32 {
        self.numer * (100 / self.denom)
    }

    /// Spacing of the reachable grid for scaled ages and queue lengths.
    pub fn grid_step(self) -> u32 {
        gcd(self.numer, self.denom)
    }
}

impl Ord for SamplingRate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.in_hundredths().cmp(&other.in_hundredths())
    }
}

impl PartialOrd for SamplingRate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for SamplingRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom == 10 {
            write!(f, "{:.1}", self.value())
        } else {
            write!(f, "{:.2}", self.value())
        }
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// When a sensor's channel state is redrawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelRedraw {
    /// Every decision epoch (the MDP transition kernel).
    PerEpoch,
    /// At slot boundaries only (the channel holds for a slot).
    PerSlot,
}

impl fmt::Display for ChannelRedraw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelRedraw::PerEpoch => "per-epoch",
            ChannelRedraw::PerSlot => "per-slot",
        })
    }
}

/// Radio and channel parameters shared by all sensors.
#[derive(Clone, Debug, Serialize)]
pub struct SystemParams {
    pub minislot_seconds: f64,
    pub slot_minislots: u32,
    pub bandwidth_hz: f64,
    pub packet_bits: u32,
    channel_probs: Vec<f64>,
    snr_linear: Vec<f64>,
    power: Vec<f64>,
}

impl SystemParams {
    /// Builds and validates the parameters; the per-state power table is
    /// derived from the rate-power relation.
    pub fn new(
        bandwidth_hz: f64,
        packet_bits: u32,
        snr_linear: Vec<f64>,
        channel_probs: Vec<f64>,
    ) -> Result<Self> {
        if !(bandwidth_hz > 0.0 && bandwidth_hz.is_finite()) {
            return Err(Error::InvalidParams(format!("bandwidth {bandwidth_hz} must be positive")));
        }
        if packet_bits == 0 {
            return Err(Error::InvalidParams("packet size must be positive".into()));
        }
        if snr_linear.is_empty() || snr_linear.len() != channel_probs.len() {
            return Err(Error::InvalidParams(format!(
                "{} SNR values for {} channel probabilities",
                snr_linear.len(),
                channel_probs.len()
            )));
        }
        if channel_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParams("channel probabilities must lie in [0, 1]".into()));
        }
        let total: f64 = channel_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!("channel probabilities sum to {total}")));
        }
        if snr_linear.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParams("SNR values must be positive".into()));
        }
        if snr_linear.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParams("SNR must be strictly increasing in the channel index".into()));
        }
        let mut params = Self {
            minislot_seconds: MINISLOT_SECONDS,
            slot_minislots: SLOT_MINISLOTS,
            bandwidth_hz,
            packet_bits,
            channel_probs,
            snr_linear,
            power: Vec::new(),
        };
        params.power = (1..=params.channel_states())
            .map(|w| power_for_channel(&params, w))
            .collect::<Result<_>>()?;
        Ok(params)
    }

    /// Same as [`SystemParams::new`] with SNR given in dB.
    pub fn from_snr_db(
        bandwidth_hz: f64,
        packet_bits: u32,
        snr_db: &[f64],
        channel_probs: Option<Vec<f64>>,
    ) -> Result<Self> {
        let probs = channel_probs.unwrap_or_else(|| vec![1.0 / snr_db.len() as f64; snr_db.len()]);
        let snr = snr_db.iter().map(|db| 10f64.powf(db / 10.0)).collect();
        Self::new(bandwidth_hz, packet_bits, snr, probs)
    }

    /// The reference setup: 180 kHz, 8-bit packets, five equiprobable
    /// channel states at -20, -10, 0, 10, 20 dB.
    pub fn table1() -> Self {
        Self::from_snr_db(180e3, 8, &[-20.0, -10.0, 0.0, 10.0, 20.0], None)
            .expect("reference parameters are valid")
    }

    pub fn channel_states(&self) -> usize {
        self.snr_linear.len()
    }

    pub fn channel_probs(&self) -> &[f64] {
        &self.channel_probs
    }

    pub fn snr_linear(&self) -> &[f64] {
        &self.snr_linear
    }

    pub fn snr_db(&self) -> Vec<f64> {
        self.snr_linear.iter().map(|s| 10.0 * s.log10()).collect()
    }

    /// Energy per mini-slot for channel state `w` (1-based).
    pub fn power(&self, w: u8) -> f64 {
        self.power[w as usize - 1]
    }

    pub fn power_table(&self) -> &[f64] {
        &self.power
    }

    /// Required spectral efficiency `l / (B Δt)` in bit/s/Hz.
    pub fn spectral_efficiency(&self) -> f64 {
        self.packet_bits as f64 / (self.bandwidth_hz * self.minislot_seconds)
    }
}

/// Transmit power that delivers one packet per mini-slot in channel `w`:
/// `p_w = (2^(l / (B Δt)) - 1) / SNR_w`.
pub fn power_for_channel(params: &SystemParams, w: usize) -> Result<f64> {
    if w == 0 || w > params.channel_states() {
        return Err(Error::InvalidChannel { w, max: params.channel_states() });
    }
    let needed = params.spectral_efficiency().exp2() - 1.0;
    Ok(needed / params.snr_linear[w - 1])
}

/// Draws a channel state (1-based) from the channel distribution.
pub fn sample_channel<R: Rng + ?Sized>(params: &SystemParams, rng: &mut R) -> u8 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 1;
    for (i, &p) in params.channel_probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i + 1;
        }
        acc += p;
        if u < acc && p > 0.0 {
            return (i + 1) as u8;
        }
    }
    last_positive as u8
}

/// Per-sensor configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub rate: SamplingRate,
    /// Queue capacity in packets.
    pub queue_cap: u32,
    /// Age truncation in mini-slots; `None` means `⌈2·queue_cap/λ⌉`.
    pub age_cap: Option<u32>,
    /// Energy per sampled packet.
    pub sampling_cost: f64,
    /// Average energy allowed per epoch.
    pub energy_budget: f64,
    /// Longest TTI a sensor may request.
    pub tti_cap: u32,
}

impl SensorConfig {
    pub fn new(rate: SamplingRate, queue_cap: u32, sampling_cost: f64, energy_budget: f64) -> Self {
        Self {
            rate,
            queue_cap,
            age_cap: None,
            sampling_cost,
            energy_budget,
            tti_cap: SLOT_MINISLOTS,
        }
    }

    pub fn with_rate(&self, rate: SamplingRate) -> Self {
        Self { rate, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.queue_cap == 0 {
            return Err(Error::InvalidParams("queue capacity must be at least 1".into()));
        }
        if self.age_cap == Some(0) {
            return Err(Error::InvalidParams("age cap must be at least 1".into()));
        }
        if !(self.sampling_cost >= 0.0 && self.sampling_cost.is_finite()) {
            return Err(Error::InvalidParams("sampling cost must be non-negative".into()));
        }
        if !(self.energy_budget >= 0.0) {
            return Err(Error::InvalidParams("energy budget must be non-negative".into()));
        }
        if self.tti_cap == 0 || self.tti_cap > SLOT_MINISLOTS {
            return Err(Error::InvalidParams(format!("TTI cap must be in 1..={SLOT_MINISLOTS}")));
        }
        Ok(())
    }

    /// Age truncation in mini-slots.
    pub fn age_cap_minislots(&self) -> u32 {
        self.age_cap.unwrap_or_else(|| {
            let num = 2 * self.queue_cap * self.rate.denom();
            num.div_ceil(self.rate.numer())
        })
    }

    pub fn a_cap_scaled(&self) -> u32 {
        self.age_cap_minislots() * self.rate.numer()
    }

    pub fn q_cap_scaled(&self) -> u32 {
        self.queue_cap * self.rate.denom()
    }

    /// The per-epoch cost of the idle-always policy, `c_b · λ`.
    pub fn idle_cost_floor(&self) -> f64 {
        self.sampling_cost * self.rate.value()
    }
}

/// One sensor's CMDP state, in scaled integers (see the module docs).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SensorState {
    pub a_buf_scaled: u32,
    pub d_scaled: u32,
    pub q_scaled: u32,
    pub h: u8,
}

impl SensorState {
    /// Empty queue, synchronized ages.
    pub fn initial(h: u8) -> Self {
        Self { a_buf_scaled: 0, d_scaled: 0, q_scaled: 0, h }
    }

    pub fn a_buf(&self, rate: SamplingRate) -> f64 {
        self.a_buf_scaled as f64 / rate.numer() as f64
    }

    pub fn d(&self, rate: SamplingRate) -> f64 {
        self.d_scaled as f64 / rate.numer() as f64
    }

    /// Destination age `a_buf + d` in mini-slots.
    pub fn a_des(&self, rate: SamplingRate) -> f64 {
        (self.a_buf_scaled + self.d_scaled) as f64 / rate.numer() as f64
    }

    pub fn queue(&self, rate: SamplingRate) -> f64 {
        self.q_scaled as f64 / rate.denom() as f64
    }

    pub fn whole_packets(&self, rate: SamplingRate) -> u32 {
        self.q_scaled / rate.denom()
    }

    pub fn validate(&self, params: &SystemParams, cfg: &SensorConfig) -> Result<()> {
        let step = cfg.rate.grid_step();
        let ok = self.a_buf_scaled <= cfg.a_cap_scaled()
            && self.q_scaled <= cfg.q_cap_scaled()
            && (self.d_scaled == 0 || self.d_scaled == cfg.rate.denom())
            && self.a_buf_scaled.is_multiple_of(step)
            && self.q_scaled.is_multiple_of(step)
            && self.h >= 1
            && self.h as usize <= params.channel_states();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("state {self} is off the grid")))
        }
    }
}

impl fmt::Display for SensorState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(a={}, d={}, q={}, h={})", self.a_buf_scaled, self.d_scaled, self.q_scaled, self.h)
    }
}

/// Transmit flag and TTI length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub transmit: bool,
    pub k: u32,
}

impl Action {
    pub const IDLE: Action = Action { transmit: false, k: 1 };

    pub fn transmit(k: u32) -> Self {
        Self { transmit: true, k }
    }

    /// `u · k`, the number plotted for a policy.
    pub fn occupancy(&self) -> u32 {
        if self.transmit {
            self.k
        } else {
            0
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.transmit as u8, self.k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionOutcome {
    pub b_tra: u32,
    pub next_state: SensorState,
    pub epoch_cost: f64,
    pub epoch_reward: f64,
}

/// Age and queue after an epoch of `k` mini-slots in which the sensor was
/// not served.
pub fn advance_unscheduled(cfg: &SensorConfig, s: &SensorState, k: u32, h_next: u8) -> SensorState {
    let grow = cfg.rate.numer() * k;
    SensorState {
        a_buf_scaled: (s.a_buf_scaled + grow).min(cfg.a_cap_scaled()),
        d_scaled: s.d_scaled,
        q_scaled: (s.q_scaled + grow).min(cfg.q_cap_scaled()),
        h: h_next,
    }
}

/// Serves `min(k, ⌊q⌋)` packets during a TTI of `k` mini-slots. Returns the
/// packet count and the next state.
pub fn advance_scheduled(cfg: &SensorConfig, s: &SensorState, k: u32, h_next: u8) -> (u32, SensorState) {
    let rate = cfg.rate;
    let b_tra = k.min(s.whole_packets(rate));
    let grow = (rate.numer() * k) as i64;
    let served = (rate.denom() * b_tra) as i64;
    let clamp = |v: i64, cap: u32| v.clamp(0, cap as i64) as u32;
    let next = SensorState {
        a_buf_scaled: clamp(s.a_buf_scaled as i64 + grow - served, cfg.a_cap_scaled()),
        d_scaled: rate.denom(),
        q_scaled: clamp(s.q_scaled as i64 + grow - served, cfg.q_cap_scaled()),
        h: h_next,
    };
    (b_tra, next)
}

/// One decision epoch of the single-sensor model.
pub fn step_state(
    params: &SystemParams,
    cfg: &SensorConfig,
    s: &SensorState,
    g: Action,
    h_next: u8,
) -> Result<TransitionOutcome> {
    if h_next == 0 || h_next as usize > params.channel_states() {
        return Err(Error::InvalidChannel { w: h_next as usize, max: params.channel_states() });
    }
    let infeasible = || Error::InfeasibleAction { state: s.to_string(), action: g.to_string() };
    let (b_tra, next_state) = if g.transmit {
        if g.k == 0 || g.k > SLOT_MINISLOTS || s.whole_packets(cfg.rate) == 0 {
            return Err(infeasible());
        }
        advance_scheduled(cfg, s, g.k, h_next)
    } else {
        if g.k != 1 {
            return Err(infeasible());
        }
        (0, advance_unscheduled(cfg, s, 1, h_next))
    };
    Ok(TransitionOutcome {
        b_tra,
        next_state,
        epoch_cost: epoch_cost(params, cfg, s, g),
        epoch_reward: epoch_reward(s, cfg.rate),
    })
}

/// One-step reward `a_buf + d` in mini-slots.
pub fn epoch_reward(s: &SensorState, rate: SamplingRate) -> f64 {
    s.a_des(rate)
}

/// One-step energy `c_b λ k + p_h k u`.
pub fn epoch_cost(params: &SystemParams, cfg: &SensorConfig, s: &SensorState, g: Action) -> f64 {
    let k = g.k as f64;
    let sampling = cfg.sampling_cost * cfg.rate.value() * k;
    if g.transmit {
        sampling + params.power(s.h) * k
    } else {
        sampling
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_channel(snr_db: f64) -> SystemParams {
        SystemParams::from_snr_db(180e3, 8, &[snr_db], None).unwrap()
    }

    fn cfg(tenths: u32, q_max: u32) -> SensorConfig {
        SensorConfig::new(SamplingRate::tenths(tenths).unwrap(), q_max, 1.0, 1.0)
    }

    // 2^(28/45) - 1 evaluated to 30 digits.
    const P_0DB: f64 = 0.539_244_295_866_992_473_652_830_759_729;

    #[test]
    fn power_matches_high_precision_value() {
        assert_relative_eq!(power_for_channel(&single_channel(0.0), 1).unwrap(), P_0DB, max_relative = 1e-12);
        assert_relative_eq!(
            power_for_channel(&single_channel(20.0), 1).unwrap(),
            P_0DB / 100.0,
            max_relative = 1e-12
        );
        assert!(power_for_channel(&single_channel(200.0), 1).unwrap() < 1e-15);
    }

    #[test]
    fn power_rejects_bad_channel() {
        let p = SystemParams::table1();
        assert!(matches!(power_for_channel(&p, 0), Err(Error::InvalidChannel { .. })));
        assert!(matches!(power_for_channel(&p, 6), Err(Error::InvalidChannel { w: 6, max: 5 })));
    }

    #[test]
    fn power_table_strictly_decreasing() {
        let p = SystemParams::table1();
        assert!(p.power_table().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn params_validation() {
        assert!(SystemParams::new(180e3, 8, vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
        assert!(SystemParams::new(180e3, 8, vec![2.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(SystemParams::new(180e3, 8, vec![1.0], vec![0.5, 0.5]).is_err());
        assert!(SystemParams::new(180e3, 8, vec![1.0, 2.0], vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn degenerate_channel_always_first_state() {
        let p = SystemParams::new(180e3, 8, vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..10_000).all(|_| sample_channel(&p, &mut rng) == 1));
    }

    #[test]
    fn channel_frequencies_concentrate() {
        let p = SystemParams::new(180e3, 8, vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let ones = (0..n).filter(|_| sample_channel(&p, &mut rng) == 1).count();
        let f = ones as f64 / n as f64;
        assert!((0.498..=0.502).contains(&f), "{f}");

        let p = SystemParams::table1();
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sample_channel(&p, &mut rng) as usize - 1] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((0.195..=0.205).contains(&f), "{f}");
        }
    }

    #[test]
    fn channel_sampling_is_seeded() {
        let p = SystemParams::table1();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| sample_channel(&p, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn idle_step() {
        let p = SystemParams::table1();
        let c = cfg(5, 3);
        let s = SensorState { a_buf_scaled: 4, d_scaled: 0, q_scaled: 10, h: 2 };
        let out = step_state(&p, &c, &s, Action::IDLE, 3).unwrap();
        assert_eq!(out.next_state, SensorState { a_buf_scaled: 9, d_scaled: 0, q_scaled: 15, h: 3 });
        assert_eq!(out.b_tra, 0);
    }

    #[test]
    fn scheduled_step() {
        let p = SystemParams::table1();
        let c = cfg(5, 3);
        let s = SensorState { a_buf_scaled: 20, d_scaled: 0, q_scaled: 20, h: 4 };
        let out = step_state(&p, &c, &s, Action::transmit(2), 1).unwrap();
        assert_eq!(out.b_tra, 2);
        assert_eq!(out.next_state, SensorState { a_buf_scaled: 10, d_scaled: 10, q_scaled: 10, h: 1 });
        assert_eq!(out.next_state.a_buf(c.rate), 2.0);
        assert_eq!(out.next_state.d(c.rate), 2.0);
        assert_eq!(out.next_state.queue(c.rate), 1.0);
    }

    #[test]
    fn queue_saturates() {
        let p = SystemParams::table1();
        let c = cfg(5, 3);
        let s = SensorState { a_buf_scaled: 0, d_scaled: 0, q_scaled: 30, h: 1 };
        let out = step_state(&p, &c, &s, Action::IDLE, 1).unwrap();
        assert_eq!(out.next_state.q_scaled, 30);
    }

    #[test]
    fn transmit_with_empty_queue_is_rejected() {
        let p = SystemParams::table1();
        let c = cfg(5, 3);
        let s = SensorState { a_buf_scaled: 5, d_scaled: 0, q_scaled: 5, h: 1 };
        assert!(matches!(
            step_state(&p, &c, &s, Action::transmit(1), 1),
            Err(Error::InfeasibleAction { .. })
        ));
        assert!(step_state(&p, &c, &s, Action { transmit: false, k: 2 }, 1).is_err());
    }

    #[test]
    fn rewards() {
        let five = SamplingRate::tenths(5).unwrap();
        let ten = SamplingRate::tenths(10).unwrap();
        assert_eq!(epoch_reward(&SensorState::initial(1), five), 0.0);
        let s = SensorState { a_buf_scaled: 10, d_scaled: 10, q_scaled: 0, h: 1 };
        assert_eq!(epoch_reward(&s, five), 4.0);
        let s = SensorState { a_buf_scaled: 7, d_scaled: 10, q_scaled: 0, h: 1 };
        assert_relative_eq!(epoch_reward(&s, ten), 1.7, max_relative = 1e-12);
    }

    #[test]
    fn costs() {
        let p = single_channel(0.0);
        let c = cfg(5, 3);
        let s = SensorState { a_buf_scaled: 20, d_scaled: 0, q_scaled: 20, h: 1 };
        assert_relative_eq!(epoch_cost(&p, &c, &s, Action::IDLE), 0.5);
        assert_relative_eq!(epoch_cost(&p, &c, &s, Action::transmit(2)), 2.0 * P_0DB + 1.0, max_relative = 1e-12);
        let free = SensorConfig { sampling_cost: 0.0, ..c };
        assert_eq!(epoch_cost(&p, &free, &s, Action::IDLE), 0.0);
    }

    #[test]
    fn default_age_cap() {
        assert_eq!(cfg(5, 3).age_cap_minislots(), 12);
        assert_eq!(cfg(1, 10).age_cap_minislots(), 200);
        assert_eq!(cfg(7, 3).age_cap_minislots(), 9);
    }

    #[test]
    fn sampling_rate_parsing() {
        assert_eq!(SamplingRate::from_f64(0.5).unwrap(), SamplingRate::tenths(5).unwrap());
        assert_eq!(SamplingRate::from_f64(0.37).unwrap().denom(), 100);
        assert!(SamplingRate::from_f64(0.375).is_err());
        assert!(SamplingRate::tenths(0).is_err());
        assert!(SamplingRate::tenths(11).is_err());
        assert_eq!(SamplingRate::hundredths(37).unwrap().to_string(), "0.37");
        assert!(SamplingRate::hundredths(37).unwrap() < SamplingRate::tenths(4).unwrap());
        assert!(SamplingRate::hundredths(41).unwrap() > SamplingRate::tenths(4).unwrap());
    }

    proptest! {
        // Random feasible trajectories never leave the grid, d only moves
        // 0 -> D, and the rescaled state round-trips losslessly.
        #[test]
        fn trajectories_stay_on_grid(
            tenths in 1u32..=10,
            q_max in 1u32..6,
            seed in any::<u64>(),
        ) {
            let p = SystemParams::table1();
            let c = cfg(tenths, q_max);
            let rate = c.rate;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = SensorState::initial(sample_channel(&p, &mut rng));
            let mut served = false;
            for _ in 0..300 {
                let whole = s.whole_packets(rate);
                let g = if whole > 0 && rng.gen_bool(0.4) {
                    Action::transmit(rng.gen_range(1..=whole.min(14)))
                } else {
                    Action::IDLE
                };
                let h = sample_channel(&p, &mut rng);
                let out = step_state(&p, &c, &s, g, h).unwrap();
                prop_assert!(out.b_tra <= g.k);
                if !g.transmit { prop_assert_eq!(out.b_tra, 0); }
                let n = out.next_state;
                prop_assert!(n.validate(&p, &c).is_ok());
                served |= g.transmit;
                prop_assert_eq!(n.d_scaled, if served { rate.denom() } else { 0 });
                let back = (n.a_buf(rate) * rate.numer() as f64).round() as u32;
                prop_assert_eq!(back, n.a_buf_scaled);
                let back = (n.queue(rate) * rate.denom() as f64).round() as u32;
                prop_assert_eq!(back, n.q_scaled);
                s = n;
            }
        }

        #[test]
        fn cost_monotone_in_k(h in 1u8..=5, k in 1u32..14) {
            let p = SystemParams::table1();
            let c = cfg(5, 20);
            let s = SensorState { a_buf_scaled: 0, d_scaled: 0, q_scaled: 200, h };
            prop_assert!(epoch_cost(&p, &c, &s, Action::transmit(k)) <= epoch_cost(&p, &c, &s, Action::transmit(k + 1)));
        }
    }
}
