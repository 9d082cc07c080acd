//! Configuration files, experiment drivers and on-disk artifacts.
//!
//! The three drivers mirror the CLI subcommands:
//!
//! * [`cmd_solve_single`] picks the sampling rate, solves the constrained
//!   problem and writes `policy.json`, `summary.csv` and
//!   `lambda_profile.csv`;
//! * [`cmd_sweep`] walks one axis (`lambda`, `cmax`, `snr`, `n_sensors`) for
//!   every scheme and writes `sweep_<axis>.csv`;
//! * [`cmd_simulate`] runs the multi-sensor simulator over the configured
//!   seeds and writes one JSON report per seed plus aggregate tables.
//!
//! Every artifact is computed in memory first and written only when the whole
//! command succeeded, so a failing run leaves no partial files. Each file
//! embeds the resolved configuration: JSON files in a `config` field, CSV
//! files in a `# `-prefixed preamble that CSV readers skip as comments.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lagrange::{default_y_grid, solve_cmdp_on, MixedPolicy, SolverSettings, YStep};
use crate::mdp::{enumerate_states_with_limit, DeterministicPolicy, MdpModel, PolicyMeta, ViSettings, DEFAULT_STATE_LIMIT};
use crate::model::{Action, ChannelRedraw, SamplingRate, SensorConfig, SensorState, SystemParams, SLOT_MINISLOTS};
use crate::sampling::{
    grid_search, optimize_sampling_rate, refine_cliff, tenths_grid, uniform_grid_upper, LambdaReport, RateEvaluator,
    RateOutcome,
};
use crate::sim::{run_simulation, EpochRecord, Scenario, SchedulerKind, SensorPolicy, SimReport, SimSensor, SlotFit};
use crate::steady::PolicyEvaluation;

pub const POLICY_FORMAT_VERSION: u32 = 1;
pub const SUMMARY_SCHEMA: &str = "aoisched-summary/1";
pub const PROFILE_SCHEMA: &str = "aoisched-lambda-profile/1";
pub const SWEEP_SCHEMA: &str = "aoisched-sweep/1";
pub const SIM_AGGREGATE_SCHEMA: &str = "aoisched-sim-aggregate/1";
pub const SIM_SENSORS_SCHEMA: &str = "aoisched-sim-sensors/1";
pub const TRACE_SCHEMA: &str = "aoisched-trace/1";

/// Schedulers compared in the sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Optimized sampling rate, semi-distributed scheduling.
    Proposed,
    /// Fixed sampling rate, semi-distributed scheduling.
    #[serde(rename = "proposed-without-sc")]
    ProposedWithoutSc,
    /// Optimized sampling rate, whole-slot grants at slot boundaries.
    SlotBased,
    /// Fixed sampling rate, whole-slot grants at slot boundaries.
    #[serde(rename = "slot-based-without-sc")]
    SlotBasedWithoutSc,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Self::Proposed, Self::ProposedWithoutSc, Self::SlotBased, Self::SlotBasedWithoutSc];

    pub fn scheduler(self) -> SchedulerKind {
        match self {
            Self::Proposed | Self::ProposedWithoutSc => SchedulerKind::SemiDistributed,
            Self::SlotBased | Self::SlotBasedWithoutSc => SchedulerKind::SlotBased,
        }
    }

    /// Whether the sampling rate comes from the rate search.
    pub fn optimizes_rate(self) -> bool {
        matches!(self, Self::Proposed | Self::SlotBased)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Proposed => "proposed",
            Self::ProposedWithoutSc => "proposed-without-sc",
            Self::SlotBased => "slot-based",
            Self::SlotBasedWithoutSc => "slot-based-without-sc",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    Cmax,
    /// Offset in dB added to every channel state's SNR.
    Snr,
    NSensors,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lambda => "lambda",
            Self::Cmax => "cmax",
            Self::Snr => "snr",
            Self::NSensors => "n_sensors",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Self::Lambda),
            "cmax" => Ok(Self::Cmax),
            "snr" => Ok(Self::Snr),
            "n_sensors" | "n-sensors" => Ok(Self::NSensors),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateSearch {
    #[default]
    Bisection,
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub bandwidth_hz: f64,
    pub packet_bits: u32,
    pub snr_db: Vec<f64>,
    /// Equiprobable when absent.
    pub channel_probs: Option<Vec<f64>>,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            bandwidth_hz: 180e3,
            packet_bits: 8,
            snr_db: vec![-20.0, -10.0, 0.0, 10.0, 20.0],
            channel_probs: None,
        }
    }
}

impl SystemSection {
    pub fn params(&self, snr_offset_db: f64) -> Result<SystemParams> {
        let db: Vec<f64> = self.snr_db.iter().map(|d| d + snr_offset_db).collect();
        SystemParams::from_snr_db(self.bandwidth_hz, self.packet_bits, &db, self.channel_probs.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSection {
    pub queue_cap: u32,
    /// Mini-slots; defaults to `⌈2·queue_cap/λ⌉`.
    pub age_cap: Option<u32>,
    pub sampling_cost: f64,
    pub energy_budget: f64,
    pub tti_cap: u32,
    /// Fixed sampling rate; skips the rate search when present.
    pub lambda: Option<f64>,
}

impl Default for SensorSection {
    fn default() -> Self {
        Self { queue_cap: 3, age_cap: None, sampling_cost: 1.0, energy_budget: 1.0, tti_cap: SLOT_MINISLOTS, lambda: None }
    }
}

impl SensorSection {
    pub fn sensor_config(&self, rate: SamplingRate) -> SensorConfig {
        SensorConfig {
            rate,
            queue_cap: self.queue_cap,
            age_cap: self.age_cap,
            sampling_cost: self.sampling_cost,
            energy_budget: self.energy_budget,
            tti_cap: self.tti_cap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub eta: f64,
    pub epsilon: f64,
    pub i_stop: usize,
    pub decay: bool,
    pub refine_steps: usize,
    pub warm_start: bool,
    pub y_grid: Vec<f64>,
    pub gamma: f64,
    pub zeta: f64,
    pub max_iterations: usize,
    pub state_limit: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            eta: s.eta,
            epsilon: s.epsilon,
            i_stop: s.i_stop,
            decay: s.decay,
            refine_steps: s.refine_steps,
            warm_start: s.warm_start,
            y_grid: default_y_grid(),
            gamma: s.vi.gamma,
            zeta: s.vi.zeta,
            max_iterations: s.vi.max_iterations,
            state_limit: DEFAULT_STATE_LIMIT,
        }
    }
}

impl SolverSection {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings {
            eta: self.eta,
            epsilon: self.epsilon,
            i_stop: self.i_stop,
            decay: self.decay,
            refine_steps: self.refine_steps,
            warm_start: self.warm_start,
            y_grid: self.y_grid.clone(),
            vi: ViSettings { gamma: self.gamma, zeta: self.zeta, max_iterations: self.max_iterations },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub search: RateSearch,
    /// Largest tenths index searched; defaults to 10 for one sensor and to
    /// the uniform bound `λ < 1/N` otherwise.
    pub grid_upper: Option<u32>,
    /// Also try the 0.01 grid just below the feasibility cliff.
    pub refine_cliff: bool,
    /// Rate used by the fixed-sampling schemes.
    pub fixed_lambda: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self { search: RateSearch::Bisection, grid_upper: None, refine_cliff: false, fixed_lambda: 0.1 }
    }
}

impl SamplingSection {
    pub fn grid_upper(&self, n_sensors: u32) -> Result<u32> {
        match self.grid_upper {
            Some(u) => Ok(u),
            None if n_sensors == 1 => Ok(10),
            None => uniform_grid_upper(n_sensors),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub n_sensors: u32,
    pub horizon_slots: u64,
    pub seeds: Vec<u64>,
    pub scheme: Scheme,
    pub redraw: ChannelRedraw,
    pub slot_fit: SlotFit,
    /// Write a per-epoch trace CSV per seed.
    pub trace: bool,
    /// Policy file; defaults to `policy.json` in the output directory.
    pub policy: Option<PathBuf>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            n_sensors: 1,
            horizon_slots: 1000,
            seeds: (0..10).collect(),
            scheme: Scheme::Proposed,
            redraw: ChannelRedraw::PerSlot,
            slot_fit: SlotFit::Enforce,
            trace: false,
            policy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub axis: Option<SweepAxis>,
    pub values: Vec<f64>,
    pub schemes: Vec<Scheme>,
    /// Run the simulator at every point; always on for the `snr` and
    /// `n_sensors` axes.
    pub simulate: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { axis: None, values: Vec::new(), schemes: Scheme::ALL.to_vec(), simulate: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// A parsed experiment file. Every section and key is optional; missing
/// values take the reference defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub sensor: SensorSection,
    pub solver: SolverSection,
    pub sampling: SamplingSection,
    pub simulation: SimulationSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

/// Per-invocation overrides, matching the CLI flags.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub solve_first: bool,
    pub refine_cliff: bool,
    pub axis: Option<SweepAxis>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Applies CLI overrides and re-validates.
    pub fn with_options(mut self, opts: &RunOptions) -> Result<Self> {
        if let Some(out) = &opts.out {
            self.output.dir = out.clone();
        }
        if let Some(seed) = opts.seed {
            self.simulation.seeds = vec![seed];
        }
        if let Some(lambda) = opts.lambda {
            self.sensor.lambda = Some(lambda);
        }
        if opts.refine_cliff {
            self.sampling.refine_cliff = true;
        }
        if let Some(axis) = opts.axis {
            self.sweep.axis = Some(axis);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.system.params(0.0).map_err(invalid)?;
        self.sensor.sensor_config(SamplingRate::tenths(1).map_err(invalid)?).validate().map_err(invalid)?;
        if let Some(l) = self.sensor.lambda {
            SamplingRate::from_f64(l).map_err(invalid)?;
        }
        SamplingRate::from_f64(self.sampling.fixed_lambda).map_err(invalid)?;
        self.solver.settings().validate().map_err(invalid)?;
        if self.solver.state_limit == 0 {
            return Err(Error::Config("state_limit must be positive".into()));
        }
        if let Some(u) = self.sampling.grid_upper {
            if !(1..=10).contains(&u) {
                return Err(Error::Config(format!("grid_upper {u} outside 1..=10")));
            }
        }
        let sim = &self.simulation;
        if sim.n_sensors == 0 || sim.horizon_slots == 0 || sim.seeds.is_empty() {
            return Err(Error::Config("simulation needs at least one sensor, slot and seed".into()));
        }
        self.sampling.grid_upper(sim.n_sensors).map_err(invalid)?;
        if self.sweep.schemes.is_empty() {
            return Err(Error::Config("sweep needs at least one scheme".into()));
        }
        if let Some(axis) = self.sweep.axis {
            if self.sweep.values.is_empty() {
                return Err(Error::Config(format!("sweep axis {axis} has no values")));
            }
            for &v in &self.sweep.values {
                let ok = match axis {
                    SweepAxis::Lambda => SamplingRate::from_f64(v).is_ok(),
                    SweepAxis::Cmax => v >= 0.0 && v.is_finite(),
                    SweepAxis::Snr => v.is_finite(),
                    SweepAxis::NSensors => {
                        v.fract() == 0.0 && v >= 1.0 && self.sampling.grid_upper(v as u32).is_ok()
                    }
                };
                if !ok {
                    return Err(Error::Config(format!("invalid {axis} value {v}")));
                }
            }
        }
        Ok(())
    }

    /// The configuration as embedded in artifacts: everything except the
    /// output location, so reruns into different directories match.
    pub fn provenance_toml(&self) -> String {
        #[derive(Serialize)]
        struct Provenance<'a> {
            system: &'a SystemSection,
            sensor: &'a SensorSection,
            solver: &'a SolverSection,
            sampling: &'a SamplingSection,
            simulation: &'a SimulationSection,
            sweep: &'a SweepSection,
        }
        toml::to_string(&Provenance {
            system: &self.system,
            sensor: &self.sensor,
            solver: &self.solver,
            sampling: &self.sampling,
            simulation: &self.simulation,
            sweep: &self.sweep,
        })
        .expect("configuration serializes to TOML")
    }

    /// Digest of everything that determines a solved policy.
    pub fn solve_digest(&self) -> Result<String> {
        #[derive(Serialize)]
        struct SolveInputs<'a> {
            system: &'a SystemSection,
            sensor: &'a SensorSection,
            solver: &'a SolverSection,
            search: RateSearch,
            grid_upper: u32,
            refine_cliff: bool,
        }
        let inputs = SolveInputs {
            system: &self.system,
            sensor: &self.sensor,
            solver: &self.solver,
            search: self.sampling.search,
            grid_upper: self.sampling.grid_upper(self.simulation.n_sensors)?,
            refine_cliff: self.sampling.refine_cliff,
        };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&inputs)?)))
    }
}

/// Maps an error to the process exit code: 2 invalid configuration,
/// 3 infeasible, 4 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidParams(_) | Error::DigestMismatch { .. } => 2,
        Error::NoFeasiblePolicy { .. } | Error::AllInfeasible => 3,
        _ => 4,
    }
}

/// One state→action table; states not listed never transmit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    /// Multiplier the table was solved at; absent for the idle policy.
    pub y: Option<f64>,
    pub gamma: f64,
    pub iterations: usize,
    pub final_delta: f64,
    /// `[a_buf_scaled, d_scaled, q_scaled, h, k]` per transmitting state.
    pub transmit: Vec<[u32; 5]>,
}

impl PolicyTable {
    pub fn from_policy(policy: &DeterministicPolicy) -> Self {
        let transmit = policy
            .space()
            .iter()
            .zip(policy.actions())
            .filter(|(_, g)| g.transmit)
            .map(|(s, g)| [s.a_buf_scaled, s.d_scaled, s.q_scaled, s.h as u32, g.k])
            .collect();
        Self {
            y: policy.meta.y.is_finite().then_some(policy.meta.y),
            gamma: policy.meta.gamma,
            iterations: policy.meta.iterations,
            final_delta: policy.meta.final_delta,
            transmit,
        }
    }

    pub fn to_policy(&self, params: &SystemParams, cfg: &SensorConfig, limit: usize) -> Result<DeterministicPolicy> {
        let space = enumerate_states_with_limit(params, cfg, limit)?;
        let mut actions = vec![Action::IDLE; space.len()];
        for &[a, d, q, h, k] in &self.transmit {
            let s = SensorState { a_buf_scaled: a, d_scaled: d, q_scaled: q, h: h as u8 };
            let id = space.id(&s).ok_or_else(|| Error::Config(format!("policy state {s} is off the grid")))?;
            actions[id] = Action::transmit(k);
        }
        let meta = PolicyMeta {
            y: self.y.unwrap_or(f64::INFINITY),
            gamma: self.gamma,
            iterations: self.iterations,
            final_delta: self.final_delta,
        };
        let policy = DeterministicPolicy::new(space, actions, meta)?;
        if !policy.is_feasible(cfg) {
            return Err(Error::Config("policy file holds an infeasible action".into()));
        }
        Ok(policy)
    }
}

/// A solved mixed policy with everything needed to reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub format_version: u32,
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub lambda: String,
    pub gamma: f64,
    pub zeta: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub decay: bool,
    pub theta: f64,
    pub avg_aoi: f64,
    pub avg_cost: f64,
    pub y_trace: Vec<YStep>,
    pub low_eval: PolicyEvaluation,
    pub high_eval: PolicyEvaluation,
    pub pi_low: PolicyTable,
    pub pi_high: PolicyTable,
}

impl PolicyFile {
    pub fn new(config: &ExperimentConfig, policy: &MixedPolicy) -> Result<Self> {
        let mut config = config.clone();
        config.output = OutputSection::default();
        Ok(Self {
            format_version: POLICY_FORMAT_VERSION,
            config_digest: config.solve_digest()?,
            lambda: policy.lambda.to_string(),
            gamma: config.solver.gamma,
            zeta: config.solver.zeta,
            epsilon: config.solver.epsilon,
            eta: config.solver.eta,
            decay: config.solver.decay,
            theta: policy.theta,
            avg_aoi: policy.avg_aoi,
            avg_cost: policy.avg_cost,
            y_trace: policy.y_trace.clone(),
            low_eval: policy.low_eval,
            high_eval: policy.high_eval,
            pi_low: PolicyTable::from_policy(&policy.pi_low),
            pi_high: PolicyTable::from_policy(&policy.pi_high),
            config,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("policy file: {e}")))?;
        if file.format_version != POLICY_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported policy format {}", file.format_version)));
        }
        let found = file.config.solve_digest()?;
        if found != file.config_digest {
            return Err(Error::DigestMismatch { expected: file.config_digest.clone(), found });
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Rebuilds the mixed policy on a freshly enumerated state space.
    pub fn to_mixed(&self) -> Result<MixedPolicy> {
        let rate = SamplingRate::from_f64(self.lambda.parse().map_err(|_| Error::Config("bad lambda".into()))?)?;
        let params = self.config.system.params(0.0)?;
        let cfg = self.config.sensor.sensor_config(rate);
        let limit = self.config.solver.state_limit;
        Ok(MixedPolicy {
            pi_low: self.pi_low.to_policy(&params, &cfg, limit)?,
            pi_high: self.pi_high.to_policy(&params, &cfg, limit)?,
            theta: self.theta,
            avg_aoi: self.avg_aoi,
            avg_cost: self.avg_cost,
            lambda: rate,
            low_eval: self.low_eval,
            high_eval: self.high_eval,
            y_trace: self.y_trace.clone(),
        })
    }
}

/// Solved policies shared across the points of a session.
#[derive(Default)]
pub struct SolveCache {
    solved: Mutex<HashMap<String, Option<Arc<MixedPolicy>>>>,
}

impl SolveCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.solved.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The constrained optimum, or `None` when no policy meets the budget.
    pub fn solve(
        &self,
        params: &SystemParams,
        cfg: &SensorConfig,
        settings: &SolverSettings,
        state_limit: usize,
    ) -> Result<Option<Arc<MixedPolicy>>> {
        let key = serde_json::to_string(&(params, cfg, settings, state_limit))?;
        if let Some(hit) = self.solved.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let model = MdpModel::with_limit(params, cfg, state_limit)?;
        let solved = match solve_cmdp_on(&model, settings) {
            Ok(p) => Some(Arc::new(p)),
            Err(Error::NoFeasiblePolicy { .. }) => None,
            Err(e) => return Err(e),
        };
        log::info!(
            "solved lambda {} budget {}: {}",
            cfg.rate,
            cfg.energy_budget,
            solved.as_ref().map_or("infeasible".into(), |p| format!("aoi {:.4}", p.avg_aoi))
        );
        self.solved.lock().expect("cache lock").insert(key, solved.clone());
        Ok(solved)
    }
}

struct CachedEvaluator<'a> {
    cache: &'a SolveCache,
    params: &'a SystemParams,
    template: &'a SensorConfig,
    settings: &'a SolverSettings,
    state_limit: usize,
}

impl RateEvaluator for CachedEvaluator<'_> {
    fn evaluate(&self, rate: SamplingRate) -> Result<Option<RateOutcome>> {
        let cfg = self.template.with_rate(rate);
        Ok(self.cache.solve(self.params, &cfg, self.settings, self.state_limit)?.map(RateOutcome::from_policy))
    }
}

/// Runs the rate search of `config` for `n_sensors` sensors.
pub fn search_rate(
    cache: &SolveCache,
    config: &ExperimentConfig,
    params: &SystemParams,
    template: &SensorConfig,
    n_sensors: u32,
) -> Result<LambdaReport> {
    let settings = config.solver.settings();
    let evaluator = CachedEvaluator { cache, params, template, settings: &settings, state_limit: config.solver.state_limit };
    let upper = config.sampling.grid_upper(n_sensors)?;
    let mut report = match config.sampling.search {
        RateSearch::Bisection => optimize_sampling_rate(&evaluator, upper)?,
        RateSearch::Grid => grid_search(&evaluator, &tenths_grid(upper)?)?,
    };
    if config.sampling.refine_cliff {
        refine_cliff(&evaluator, &mut report)?;
    }
    Ok(report)
}

/// A file produced by a command, held in memory until the command succeeds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    fn text(name: impl Into<String>, text: String) -> Self {
        Self { name: name.into(), bytes: text.into_bytes() }
    }
}

fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    artifacts
        .iter()
        .map(|a| {
            let path = dir.join(&a.name);
            fs::write(&path, &a.bytes)?;
            Ok(path)
        })
        .collect()
}

/// CSV text with a commented preamble naming the schema and embedding the
/// configuration.
pub fn csv_with_preamble<T: Serialize>(schema: &str, config: &ExperimentConfig, rows: &[T]) -> Result<String> {
    let mut out = format!("# schema: {schema}\n");
    for line in config.provenance_toml().lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    out.push_str(std::str::from_utf8(&body).expect("CSV output is UTF-8"));
    Ok(out)
}

/// Reads rows back from a preamble CSV.
pub fn read_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub lambda_star: String,
    pub avg_aoi: f64,
    pub avg_cost: f64,
    pub theta: f64,
    pub differing_states: usize,
    pub support_low: usize,
    pub support_high: usize,
    pub multipliers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub lambda: String,
    pub feasible: bool,
    pub avg_aoi: Option<f64>,
    pub avg_cost: Option<f64>,
    pub theta: Option<f64>,
    pub note: String,
}

fn profile_rows(report: &LambdaReport) -> Vec<ProfileRow> {
    let mut rows: Vec<(SamplingRate, ProfileRow)> = report
        .rows()
        .into_iter()
        .zip(&report.points)
        .map(|(r, p)| {
            let note = if p.rate == report.lambda_star { "selected" } else { "" };
            let row = ProfileRow {
                lambda: r.lambda,
                feasible: r.feasible,
                avg_aoi: r.avg_aoi,
                avg_cost: r.avg_cost,
                theta: r.theta,
                note: note.into(),
            };
            (p.rate, row)
        })
        .collect();
    for (rate, why) in &report.skipped {
        let row = ProfileRow {
            lambda: rate.to_string(),
            feasible: false,
            avg_aoi: None,
            avg_cost: None,
            theta: None,
            note: format!("skipped: {why}"),
        };
        rows.push((*rate, row));
    }
    rows.sort_by_key(|(rate, _)| *rate);
    rows.into_iter().map(|(_, r)| r).collect()
}

/// Result of [`cmd_solve_single`].
#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub policy: Arc<MixedPolicy>,
    pub profile: Option<LambdaReport>,
    pub summary: SummaryRow,
    pub artifacts: Vec<Artifact>,
    pub written: Vec<PathBuf>,
}

/// A fresh cache plus the drivers; reuse one session to share solves
/// between commands.
#[derive(Default)]
pub struct Session {
    pub cache: SolveCache,
}

impl Session {
    pub fn new() -> Self {
        Self::default()
    }

    /// The policy the configuration asks for: the fixed rate when
    /// `sensor.lambda` is set, the rate search otherwise.
    fn solve_config(&self, config: &ExperimentConfig) -> Result<(Arc<MixedPolicy>, Option<LambdaReport>)> {
        let params = config.system.params(0.0)?;
        let settings = config.solver.settings();
        let limit = config.solver.state_limit;
        if let Some(l) = config.sensor.lambda {
            let rate = SamplingRate::from_f64(l)?;
            let cfg = config.sensor.sensor_config(rate);
            let policy = self.cache.solve(&params, &cfg, &settings, limit)?.ok_or_else(|| Error::NoFeasiblePolicy {
                rate: rate.to_string(),
                budget: cfg.energy_budget,
            })?;
            return Ok((policy, None));
        }
        let template = config.sensor.sensor_config(SamplingRate::tenths(1)?);
        let report = search_rate(&self.cache, config, &params, &template, config.simulation.n_sensors)?;
        let policy = report.star().outcome.as_ref().and_then(|o| o.policy.clone()).ok_or(Error::AllInfeasible)?;
        Ok((policy, Some(report)))
    }

    pub fn solve_single(&self, config_path: &Path, opts: &RunOptions) -> Result<SolveOutput> {
        let config = ExperimentConfig::load(config_path)?.with_options(opts)?;
        self.solve_single_config(&config)
    }

    pub fn solve_single_config(&self, config: &ExperimentConfig) -> Result<SolveOutput> {
        let (policy, profile) = self.solve_config(config)?;
        let summary = SummaryRow {
            lambda_star: policy.lambda.to_string(),
            avg_aoi: policy.avg_aoi,
            avg_cost: policy.avg_cost,
            theta: policy.theta,
            differing_states: policy.differing_states(),
            support_low: policy.low_eval.support,
            support_high: policy.high_eval.support,
            multipliers: policy.y_trace.len(),
        };
        let mut artifacts = vec![
            Artifact::text("policy.json", PolicyFile::new(config, &policy)?.to_json()?),
            Artifact::text("summary.csv", csv_with_preamble(SUMMARY_SCHEMA, config, std::slice::from_ref(&summary))?),
        ];
        if let Some(report) = &profile {
            artifacts.push(Artifact::text(
                "lambda_profile.csv",
                csv_with_preamble(PROFILE_SCHEMA, config, &profile_rows(report))?,
            ));
        }
        let written = write_artifacts(&config.output.dir, &artifacts)?;
        Ok(SolveOutput { policy, profile, summary, artifacts, written })
    }

    pub fn sweep(&self, config_path: &Path, opts: &RunOptions) -> Result<SweepOutput> {
        let config = ExperimentConfig::load(config_path)?.with_options(opts)?;
        self.sweep_config(&config)
    }

    pub fn sweep_config(&self, config: &ExperimentConfig) -> Result<SweepOutput> {
        let axis = config.sweep.axis.ok_or_else(|| Error::Config("no sweep axis given".into()))?;
        let simulate = config.sweep.simulate || matches!(axis, SweepAxis::Snr | SweepAxis::NSensors);
        let mut rows = Vec::new();
        for &value in &config.sweep.values {
            let mut point = config.clone();
            let mut offset = 0.0;
            match axis {
                SweepAxis::Lambda => {}
                SweepAxis::Cmax => point.sensor.energy_budget = value,
                SweepAxis::Snr => offset = value,
                SweepAxis::NSensors => point.simulation.n_sensors = value as u32,
            }
            for &scheme in &config.sweep.schemes {
                let fixed = (axis == SweepAxis::Lambda).then_some(value);
                rows.push(self.sweep_point(&point, axis, value, offset, scheme, fixed, simulate)?);
            }
        }
        let name = format!("sweep_{axis}.csv");
        let artifacts = vec![Artifact::text(name, csv_with_preamble(SWEEP_SCHEMA, config, &rows)?)];
        let written = write_artifacts(&config.output.dir, &artifacts)?;
        Ok(SweepOutput { rows, artifacts, written })
    }

    #[allow(clippy::too_many_arguments)]
    fn sweep_point(
        &self,
        config: &ExperimentConfig,
        axis: SweepAxis,
        value: f64,
        offset: f64,
        scheme: Scheme,
        axis_rate: Option<f64>,
        simulate: bool,
    ) -> Result<SweepRow> {
        let n = config.simulation.n_sensors;
        let mut row = SweepRow::empty(axis, value, scheme, n);
        let params = config.system.params(offset)?;
        let template = config.sensor.sensor_config(SamplingRate::tenths(1)?);
        let settings = config.solver.settings();
        let limit = config.solver.state_limit;
        let picked = if !scheme.optimizes_rate() {
            SamplingRate::from_f64(config.sampling.fixed_lambda).map(|r| (r, None))
        } else if let Some(l) = axis_rate {
            SamplingRate::from_f64(l).map(|r| (r, None))
        } else {
            search_rate(&self.cache, config, &params, &template, n).map(|report| {
                let policy = report.star().outcome.as_ref().and_then(|o| o.policy.clone());
                (report.lambda_star, policy)
            })
        };
        let (rate, mut policy) = match picked {
            Ok(p) => p,
            Err(e) if exit_code(&e) == 2 => return Err(e),
            Err(e) => {
                row.note = e.to_string();
                return Ok(row);
            }
        };
        row.lambda = Some(rate.to_string());
        let cfg = template.with_rate(rate);
        if scheme.scheduler() == SchedulerKind::SemiDistributed && policy.is_none() {
            match self.cache.solve(&params, &cfg, &settings, limit) {
                Ok(p) => policy = p,
                Err(e) if exit_code(&e) == 2 => return Err(e),
                Err(e) => {
                    row.note = e.to_string();
                    return Ok(row);
                }
            }
            if policy.is_none() {
                row.note = "no policy meets the energy budget".into();
                return Ok(row);
            }
        }
        row.feasible = true;
        if scheme.scheduler() == SchedulerKind::SemiDistributed {
            let p = policy.as_ref().expect("checked above");
            row.avg_aoi = Some(p.avg_aoi);
            row.avg_cost = Some(p.avg_cost);
            row.theta = Some(p.theta);
        }
        if simulate {
            let runs = simulate_scheme(&params, &cfg, n, scheme, policy, &config.simulation)?;
            let agg = aggregate(scheme, rate, &runs);
            row.sim_maoi = Some(agg.maoi_mean);
            row.sim_maoi_se = Some(agg.maoi_se);
            row.sim_maoi_time = Some(agg.maoi_time_mean);
            row.sim_energy = Some(agg.energy_mean);
            row.sim_sum_f = Some(agg.sum_f_mean);
            row.stable = Some(agg.stable);
        }
        Ok(row)
    }

    pub fn simulate(&self, config_path: &Path, opts: &RunOptions) -> Result<SimulateOutput> {
        let config = ExperimentConfig::load(config_path)?.with_options(opts)?;
        self.simulate_config(&config, opts.solve_first)
    }

    pub fn simulate_config(&self, config: &ExperimentConfig, solve_first: bool) -> Result<SimulateOutput> {
        let sim = &config.simulation;
        let scheme = sim.scheme;
        // The configuration whose policy this scheme needs.
        let mut solve_cfg = config.clone();
        if !scheme.optimizes_rate() {
            solve_cfg.sensor.lambda = Some(config.sampling.fixed_lambda);
        }
        let needs_policy = scheme.scheduler() == SchedulerKind::SemiDistributed || scheme.optimizes_rate();
        let mut artifacts = Vec::new();
        let (rate, policy) = if !needs_policy {
            (SamplingRate::from_f64(config.sampling.fixed_lambda)?, None)
        } else if solve_first {
            let (policy, _) = self.solve_config(&solve_cfg)?;
            artifacts.push(Artifact::text("policy.json", PolicyFile::new(&solve_cfg, &policy)?.to_json()?));
            (policy.lambda, Some(policy))
        } else {
            let path = sim.policy.clone().unwrap_or_else(|| config.output.dir.join("policy.json"));
            if !path.exists() {
                return Err(Error::Config(format!(
                    "policy file {} not found; run solve-single first or pass --solve-first",
                    path.display()
                )));
            }
            let file = PolicyFile::load(&path)?;
            let expected = solve_cfg.solve_digest()?;
            if file.config_digest != expected {
                return Err(Error::DigestMismatch { expected, found: file.config_digest });
            }
            let policy = Arc::new(file.to_mixed()?);
            (policy.lambda, Some(policy))
        };
        let params = config.system.params(0.0)?;
        let cfg = config.sensor.sensor_config(rate);
        let policy = policy.filter(|_| scheme.scheduler() == SchedulerKind::SemiDistributed);
        let runs = simulate_scheme(&params, &cfg, sim.n_sensors, scheme, policy, sim)?;
        let aggregate = aggregate(scheme, rate, &runs);
        let mut sensor_rows = Vec::new();
        for (seed, run) in sim.seeds.iter().zip(&runs) {
            let json = serde_json::to_string_pretty(&SeedReport {
                format_version: POLICY_FORMAT_VERSION,
                config: provenance(config),
                scheme,
                lambda: rate.to_string(),
                seed: *seed,
                report: &run.report,
            })?;
            artifacts.push(Artifact::text(format!("sim_seed_{seed}.json"), json + "\n"));
            for m in &run.report.sensors {
                sensor_rows.push(SensorRow {
                    seed: *seed,
                    sensor: m.id,
                    lambda: m.lambda.clone(),
                    avg_aoi: m.avg_aoi,
                    avg_aoi_time: m.avg_aoi_time,
                    avg_energy: m.avg_energy,
                    f: m.f,
                    tau: m.tau,
                    mean_queue: m.mean_queue,
                    max_queue: m.max_queue,
                    grants: m.grants,
                    packets_served: m.packets_served,
                });
            }
            if let Some(trace) = &run.trace {
                artifacts.push(Artifact::text(format!("trace_seed_{seed}.csv"), trace_csv(config, trace)?));
            }
        }
        artifacts.push(Artifact::text(
            "sim_aggregate.csv",
            csv_with_preamble(SIM_AGGREGATE_SCHEMA, config, std::slice::from_ref(&aggregate))?,
        ));
        artifacts.push(Artifact::text("sim_sensors.csv", csv_with_preamble(SIM_SENSORS_SCHEMA, config, &sensor_rows)?));
        let written = write_artifacts(&config.output.dir, &artifacts)?;
        let reports = runs.into_iter().map(|r| r.report).collect();
        Ok(SimulateOutput { aggregate, reports, artifacts, written })
    }
}

fn provenance(config: &ExperimentConfig) -> ExperimentConfig {
    let mut c = config.clone();
    c.output = OutputSection::default();
    c
}

#[derive(Serialize)]
struct SeedReport<'a> {
    format_version: u32,
    config: ExperimentConfig,
    scheme: Scheme,
    lambda: String,
    seed: u64,
    report: &'a SimReport,
}

/// One axis point for one scheme. Analytic columns are single-sensor
/// averages and stay empty for the slot-based schemes; `sim_*` columns are
/// means over the seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub scheme: Scheme,
    pub n_sensors: u32,
    pub lambda: Option<String>,
    pub feasible: bool,
    pub avg_aoi: Option<f64>,
    pub avg_cost: Option<f64>,
    pub theta: Option<f64>,
    pub sim_maoi: Option<f64>,
    pub sim_maoi_se: Option<f64>,
    pub sim_maoi_time: Option<f64>,
    pub sim_energy: Option<f64>,
    pub sim_sum_f: Option<f64>,
    pub stable: Option<bool>,
    pub note: String,
}

impl SweepRow {
    fn empty(axis: SweepAxis, value: f64, scheme: Scheme, n_sensors: u32) -> Self {
        Self {
            axis: axis.to_string(),
            value,
            scheme,
            n_sensors,
            lambda: None,
            feasible: false,
            avg_aoi: None,
            avg_cost: None,
            theta: None,
            sim_maoi: None,
            sim_maoi_se: None,
            sim_maoi_time: None,
            sim_energy: None,
            sim_sum_f: None,
            stable: None,
            note: String::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub artifacts: Vec<Artifact>,
    pub written: Vec<PathBuf>,
}

/// Means over seeds of one simulated scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimAggregate {
    pub scheme: Scheme,
    pub n_sensors: usize,
    pub lambda: String,
    pub seeds: usize,
    pub maoi_mean: f64,
    /// Standard error of the mean over seeds.
    pub maoi_se: f64,
    pub maoi_time_mean: f64,
    /// Energy per epoch, averaged over sensors and seeds.
    pub energy_mean: f64,
    pub sum_f_mean: f64,
    pub reports_per_epoch: f64,
    pub max_mean_queue: f64,
    /// Every seed passed the stability check.
    pub stable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorRow {
    pub seed: u64,
    pub sensor: usize,
    pub lambda: String,
    pub avg_aoi: f64,
    pub avg_aoi_time: f64,
    pub avg_energy: f64,
    pub f: f64,
    pub tau: f64,
    pub mean_queue: f64,
    pub max_queue: f64,
    pub grants: u64,
    pub packets_served: u64,
}

#[derive(Clone, Debug)]
pub struct SimulateOutput {
    pub aggregate: SimAggregate,
    pub reports: Vec<SimReport>,
    pub artifacts: Vec<Artifact>,
    pub written: Vec<PathBuf>,
}

/// Runs `n` identical sensors under `scheme` for every configured seed.
pub fn simulate_scheme(
    params: &SystemParams,
    cfg: &SensorConfig,
    n: u32,
    scheme: Scheme,
    policy: Option<Arc<MixedPolicy>>,
    sim: &SimulationSection,
) -> Result<Vec<crate::sim::SimOutcome>> {
    let sensor_policy = match (scheme.scheduler(), policy) {
        (SchedulerKind::SemiDistributed, Some(p)) => SensorPolicy::Mixed(p),
        (SchedulerKind::SemiDistributed, None) => return Err(Error::Config(format!("{scheme} needs a solved policy"))),
        (SchedulerKind::SlotBased, _) => SensorPolicy::None,
    };
    sim.seeds
        .par_iter()
        .map(|&seed| {
            let sensors = (0..n)
                .map(|i| SimSensor { cfg: cfg.clone(), policy: sensor_policy.clone(), stream: i as u64 })
                .collect();
            let scenario = Scenario {
                params: params.clone(),
                sensors,
                horizon_slots: sim.horizon_slots,
                seed,
                scheduler: scheme.scheduler(),
                redraw: sim.redraw,
                slot_fit: sim.slot_fit,
                record_trace: sim.trace,
            };
            run_simulation(&scenario)
        })
        .collect()
}

pub fn aggregate(scheme: Scheme, rate: SamplingRate, runs: &[crate::sim::SimOutcome]) -> SimAggregate {
    let n = runs.len() as f64;
    let mean = |f: &dyn Fn(&SimReport) -> f64| runs.iter().map(|r| f(&r.report)).sum::<f64>() / n;
    let maoi_mean = mean(&|r| r.maoi);
    let var = if runs.len() > 1 {
        runs.iter().map(|r| (r.report.maoi - maoi_mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    SimAggregate {
        scheme,
        n_sensors: runs.first().map_or(0, |r| r.report.sensors.len()),
        lambda: rate.to_string(),
        seeds: runs.len(),
        maoi_mean,
        maoi_se: (var / n).sqrt(),
        maoi_time_mean: mean(&|r| r.maoi_time),
        energy_mean: mean(&|r| r.sensors.iter().map(|m| m.avg_energy).sum::<f64>() / r.sensors.len() as f64),
        sum_f_mean: mean(&|r| r.sum_f),
        reports_per_epoch: mean(&|r| r.reports as f64 / r.epochs.max(1) as f64),
        max_mean_queue: runs
            .iter()
            .flat_map(|r| r.report.sensors.iter().map(|m| m.mean_queue))
            .fold(0.0, f64::max),
        stable: runs.iter().all(|r| r.report.stable),
    }
}

/// Per-epoch trace: fixed columns then `s<n>_a_buf, s<n>_a_des, s<n>_q,
/// s<n>_h, s<n>_energy` per sensor.
pub fn trace_csv(config: &ExperimentConfig, trace: &[EpochRecord]) -> Result<String> {
    let n = trace.first().map_or(0, |r| r.sensors.len());
    let mut out = format!("# schema: {TRACE_SCHEMA}\n");
    for line in config.provenance_toml().lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["epoch", "minislot", "winner", "k", "served", "reports"].map(String::from).to_vec();
    for i in 0..n {
        for f in ["a_buf", "a_des", "q", "h", "energy"] {
            header.push(format!("s{i}_{f}"));
        }
    }
    w.write_record(&header)?;
    for rec in trace {
        let mut fields = vec![
            rec.epoch.to_string(),
            rec.minislot.to_string(),
            rec.winner.map_or(String::new(), |w| w.to_string()),
            rec.k.to_string(),
            rec.served.to_string(),
            rec.reports.to_string(),
        ];
        for s in &rec.sensors {
            fields.extend([s.a_buf.to_string(), s.a_des.to_string(), s.queue.to_string(), s.h.to_string(), s.energy.to_string()]);
        }
        w.write_record(&fields)?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    out.push_str(std::str::from_utf8(&body).expect("CSV output is UTF-8"));
    Ok(out)
}

/// `solve-single`: rate search (or the fixed rate) and the constrained
/// solve, writing `policy.json`, `summary.csv` and `lambda_profile.csv`.
pub fn cmd_solve_single(config_path: &Path, opts: &RunOptions) -> Result<SolveOutput> {
    Session::new().solve_single(config_path, opts)
}

/// `sweep`: one row per axis value per scheme in `sweep_<axis>.csv`.
pub fn cmd_sweep(config_path: &Path, opts: &RunOptions) -> Result<SweepOutput> {
    Session::new().sweep(config_path, opts)
}

/// `simulate`: per-seed reports, `sim_aggregate.csv`, `sim_sensors.csv`
/// and optional traces.
pub fn cmd_simulate(config_path: &Path, opts: &RunOptions) -> Result<SimulateOutput> {
    Session::new().simulate(config_path, opts)
}
