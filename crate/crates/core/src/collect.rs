//! Data collection: behavior cloning, stochastic mixing, noise injection
//! and uncertainty-triggered switching, all driven by one tick loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    CollectSettings, ControlMode, Dataset, DatasetMeta, EndReason, EtaSchedule, Frame, LabelSource, Spawn, Strategy,
    Trajectory, UncertaintySettings, DATASET_FORMAT, DATASET_VERSION,
};
use crate::error::{Error, Result};
use crate::expert::{Oracle, RemoteExpert};
use crate::policy::{mc_sample, Action, Observation, PolicyParams};
use crate::rng::{self, derive_seed, Stream};
use crate::sim::{InfractionMonitor, Perturbation, SimState, World};
use crate::uncertainty::{combine_signals, uncertainty_score, BinSpec, SampleSet, SignalUncertainty, UncertaintyRecord, UncertaintyWindow};

/// Source of expert actions.
pub trait Expert {
    fn act(&mut self, world: &World, state: &SimState) -> Result<Action>;
    /// Whether a label can be obtained on frames the expert does not drive.
    fn labels_every_frame(&self) -> bool;
    fn label_source(&self) -> LabelSource;
}

impl Expert for Oracle {
    fn act(&mut self, world: &World, state: &SimState) -> Result<Action> {
        self.action(world, state)
    }

    fn labels_every_frame(&self) -> bool {
        true
    }

    fn label_source(&self) -> LabelSource {
        LabelSource::OracleEveryframe
    }
}

impl Expert for RemoteExpert {
    fn act(&mut self, _world: &World, _state: &SimState) -> Result<Action> {
        self.action()
    }

    fn labels_every_frame(&self) -> bool {
        false
    }

    fn label_source(&self) -> LabelSource {
        LabelSource::HumanInControl
    }
}

/// Sample sets carried from one tick to the next for the temporal term.
pub type AgentMemory = Option<(SampleSet, SampleSet)>;

#[derive(Debug, Clone)]
pub struct Proposal {
    pub action: Action,
    /// Steer and throttle uncertainty; `None` for agents that cannot score.
    pub signals: Option<(SignalUncertainty, SignalUncertainty)>,
    pub memory: AgentMemory,
}

/// A learner that proposes actions and scores its own uncertainty.
///
/// `propose` is side-effect free: the caller threads `memory` between ticks
/// so a tick can be retried after a pause.
pub trait Agent: Sync {
    fn propose(&self, obs: &Observation, prev: &AgentMemory, traj: u64, tick: u64) -> Result<Proposal>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSettings {
    pub n_samples: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub window: usize,
    pub steer_bins: BinSpec,
    pub throttle_bins: BinSpec,
    /// Reuse one set of dropout masks for a whole trajectory.
    pub shared_masks: bool,
}

impl Default for McSettings {
    fn default() -> Self {
        Self {
            n_samples: 20,
            lambda: 1.0,
            alpha: 0.6,
            window: 5,
            steer_bins: BinSpec::steering(),
            throttle_bins: BinSpec::throttle(),
            shared_masks: false,
        }
    }
}

/// Policy network scored with MC-Dropout; executes the modal sample.
#[derive(Debug, Clone)]
pub struct McAgent {
    pub params: PolicyParams,
    pub settings: McSettings,
    pub mc_seed: u64,
}

impl McAgent {
    pub fn frame_seed(&self, traj: u64, tick: u64) -> u64 {
        if self.settings.shared_masks {
            derive_seed(self.mc_seed, Stream::Dropout, &[traj])
        } else {
            derive_seed(self.mc_seed, Stream::Dropout, &[traj, tick])
        }
    }

    pub fn uncertainty_settings(&self) -> UncertaintySettings {
        UncertaintySettings {
            n_samples: self.settings.n_samples,
            lambda: self.settings.lambda,
            alpha: self.settings.alpha,
            window: self.settings.window,
            steer_bins: self.settings.steer_bins,
            throttle_bins: self.settings.throttle_bins,
            mc_seed: self.mc_seed,
            shared_masks: self.settings.shared_masks,
            policy_digest: policy_digest(&self.params),
        }
    }
}

pub fn policy_digest(p: &PolicyParams) -> String {
    let mut b = Vec::new();
    crate::policy::write_to(p, &mut b).expect("in-memory write");
    crate::config::sha256_hex(&b)
}

impl Agent for McAgent {
    fn propose(&self, obs: &Observation, prev: &AgentMemory, traj: u64, tick: u64) -> Result<Proposal> {
        let s = &self.settings;
        let mc = mc_sample(&self.params, obs, s.n_samples, (s.steer_bins, s.throttle_bins), self.frame_seed(traj, tick))?;
        let (ps, pt) = match prev {
            Some((a, b)) => (a, b),
            None => (&mc.steer, &mc.throttle),
        };
        let us = uncertainty_score(&mc.steer, ps, s.lambda)?;
        let ut = uncertainty_score(&mc.throttle, pt, s.lambda)?;
        Ok(Proposal { action: mc.action, signals: Some((us, ut)), memory: Some((mc.steer, mc.throttle)) })
    }
}

/// Maskless inference; used for benchmarking.
#[derive(Debug, Clone)]
pub struct DeterministicAgent(pub PolicyParams);

impl Agent for DeterministicAgent {
    fn propose(&self, obs: &Observation, _prev: &AgentMemory, _traj: u64, _tick: u64) -> Result<Proposal> {
        Ok(Proposal { action: self.0.forward(obs, None)?, signals: None, memory: None })
    }
}

/// Replays a fixed per-tick score sequence; steer carries the whole score.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    pub scores: Vec<f64>,
    pub action: Action,
}

impl Agent for ScriptedAgent {
    fn propose(&self, _obs: &Observation, _prev: &AgentMemory, _traj: u64, tick: u64) -> Result<Proposal> {
        let u = self.scores.get(tick as usize).copied().unwrap_or(0.0);
        let sig = SignalUncertainty { u, ..SignalUncertainty::default() };
        Ok(Proposal { action: self.action, signals: Some((sig, SignalUncertainty::default())), memory: None })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectParams {
    pub max_episode_ticks: u64,
    pub mix_p: f64,
    /// Ticks each mixing draw is held for; 1 = per-frame.
    pub mix_hold: u64,
    pub noise_period: u64,
    /// Noise bound in degrees of front-wheel angle.
    pub noise_bound_deg: f64,
    pub eta: EtaSchedule,
    pub spawn_lateral: f64,
    pub spawn_heading_deg: f64,
    pub spawn_speed: f64,
}

impl Default for CollectParams {
    fn default() -> Self {
        Self {
            max_episode_ticks: 600,
            mix_p: 0.4,
            mix_hold: 1,
            noise_period: 5,
            noise_bound_deg: 30.0,
            eta: EtaSchedule::constant(1.0),
            spawn_lateral: 0.5,
            spawn_heading_deg: 5.0,
            spawn_speed: 4.0,
        }
    }
}

/// One collection job.
#[derive(Debug, Clone)]
pub struct CollectJob<'a> {
    pub strategy: Strategy,
    pub worlds: &'a [World],
    pub budget: usize,
    pub seed: u64,
    pub params: CollectParams,
    pub perturbation: Option<Perturbation>,
    pub config_digest: String,
    /// Settings stamped into the header when frames carry MC records.
    pub uncertainty: Option<UncertaintySettings>,
    /// Weight of the throttle score in the combined score.
    pub alpha: f64,
    pub window: usize,
}

/// Uniform steer noise for tick `tick` of trajectory `traj`.
pub fn noise_draw(seed: u64, traj: u64, tick: u64, bound: f64) -> f64 {
    if bound == 0.0 {
        return 0.0;
    }
    rng::stream(seed, Stream::Noise, &[traj, tick]).random_range(-bound..=bound)
}

/// Whether the agent drives tick `tick` of trajectory `traj` under mixing.
pub fn mixing_draw(seed: u64, traj: u64, tick: u64, hold: u64, p: f64) -> bool {
    let slot = tick / hold.max(1);
    rng::stream(seed, Stream::Mixing, &[traj, slot]).random::<f64>() < p
}

/// Spawn for trajectory `traj`: a world index and a jittered start.
pub fn spawn_draw(seed: u64, traj: u64, worlds: &[World], p: &CollectParams) -> (usize, Spawn) {
    let mut r = rng::stream(seed, Stream::Spawn, &[traj]);
    let w = r.random_range(0..worlds.len());
    let t = worlds[w].track();
    let hi = if t.is_closed() { t.lane_length() } else { (t.lane_length() - 60.0).max(0.0) };
    let s = r.random_range(0.0..=hi.max(0.0));
    let lateral = if p.spawn_lateral > 0.0 { r.random_range(-p.spawn_lateral..=p.spawn_lateral) } else { 0.0 };
    let hd = p.spawn_heading_deg.to_radians();
    let heading_offset = if hd > 0.0 { r.random_range(-hd..=hd) } else { 0.0 };
    (w, Spawn { s, lateral, heading_offset, speed: p.spawn_speed })
}

/// What happened on one tick.
#[derive(Debug, Clone)]
pub struct TickOutcome {
    pub frame: Frame,
    pub traj: u64,
    /// Index into the job's worlds.
    pub world: usize,
    /// Set when this tick closed its trajectory.
    pub ended: Option<EndReason>,
}

struct Episode {
    traj: u64,
    world: usize,
    spawn: Spawn,
    state: SimState,
    end_progress: f64,
    monitor: InfractionMonitor,
    window: UncertaintyWindow,
    memory: AgentMemory,
    frames: Vec<Frame>,
}

/// Tick-by-tick collection state machine. A tick either commits a frame or
/// fails without side effects (e.g. a paused remote expert), so callers
/// can retry it.
pub struct Collector<'a> {
    job: CollectJob<'a>,
    agent: Option<&'a dyn Agent>,
    episode: Option<Episode>,
    next_traj: u64,
    done: Vec<Trajectory>,
    n_frames: usize,
    manual_override: bool,
}

impl<'a> Collector<'a> {
    pub fn new(job: CollectJob<'a>, agent: Option<&'a dyn Agent>) -> Result<Self> {
        if job.worlds.is_empty() {
            return Err(Error::InvalidInput("collection needs at least one track".into()));
        }
        let needs_agent = matches!(job.strategy, Strategy::Mixing | Strategy::Uail);
        if needs_agent && agent.is_none() {
            return Err(Error::InvalidInput(format!("strategy {} needs a policy", job.strategy.name())));
        }
        if !(0.0..=1.0).contains(&job.params.mix_p) {
            return Err(Error::InvalidInput(format!("mix_p must lie in [0, 1], got {}", job.params.mix_p)));
        }
        if job.params.noise_period == 0 {
            return Err(Error::InvalidInput("noise period must be at least 1".into()));
        }
        UncertaintyWindow::new(job.window)?;
        Ok(Self { job, agent, episode: None, next_traj: 0, done: Vec::new(), n_frames: 0, manual_override: false })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn is_done(&self) -> bool {
        self.n_frames >= self.job.budget
    }

    /// Hands control to the expert regardless of the strategy; affected
    /// frames carry the override flag.
    pub fn set_manual_override(&mut self, on: bool) {
        self.manual_override = on;
    }

    pub fn job(&self) -> &CollectJob<'a> {
        &self.job
    }

    /// Trajectory id of the episode in progress, or of the next one.
    pub fn current_traj(&self) -> u64 {
        self.episode.as_ref().map_or(self.next_traj, |e| e.traj)
    }

    pub fn current_world(&self) -> Option<&World> {
        self.episode.as_ref().map(|e| &self.job.worlds[e.world])
    }

    pub fn current_state(&self) -> Option<&SimState> {
        self.episode.as_ref().map(|e| &e.state)
    }

    fn start_episode(&mut self) -> Episode {
        let traj = self.next_traj;
        self.next_traj += 1;
        let (w, spawn) = spawn_draw(self.job.seed, traj, self.job.worlds, &self.job.params);
        let world = &self.job.worlds[w];
        let state = world.spawn(spawn.s, spawn.lateral, spawn.heading_offset, spawn.speed);
        let end_progress = if world.track().is_closed() { f64::INFINITY } else { world.track().lane_length() - 1.0 };
        Episode {
            traj,
            world: w,
            spawn,
            state,
            end_progress,
            monitor: InfractionMonitor::new(),
            window: UncertaintyWindow::new(self.job.window).expect("validated"),
            memory: None,
            frames: Vec::new(),
        }
    }

    fn observe(&self, ep: &Episode) -> Observation {
        let world = &self.job.worlds[ep.world];
        match &self.job.perturbation {
            Some(p) => world.observe_perturbed(&ep.state, p, self.job.seed, ep.traj),
            None => world.observe(&ep.state),
        }
    }

    /// Advances one tick.
    pub fn tick(&mut self, expert: &mut dyn Expert) -> Result<TickOutcome> {
        if self.is_done() {
            return Err(Error::InvalidInput("collection budget already reached".into()));
        }
        let mut ep = match self.episode.take() {
            Some(e) => e,
            None => self.start_episode(),
        };
        let r = self.tick_episode(&mut ep, expert);
        match r {
            Ok((frame, ended)) => {
                self.n_frames += 1;
                ep.frames.push(frame.clone());
                let ended = ended.or_else(|| self.is_done().then_some(EndReason::Budget));
                let traj = ep.traj;
                let world = ep.world;
                if let Some(end) = ended {
                    self.done.push(Trajectory {
                        id: ep.traj,
                        track: self.job.worlds[ep.world].track().id().to_string(),
                        spawn: ep.spawn,
                        end,
                        frames: std::mem::take(&mut ep.frames),
                    });
                } else {
                    self.episode = Some(ep);
                }
                Ok(TickOutcome { frame, traj, world, ended })
            }
            Err(Error::ExpertLost(msg)) => {
                // close the trajectory and keep collecting elsewhere
                if !ep.frames.is_empty() {
                    self.done.push(Trajectory {
                        id: ep.traj,
                        track: self.job.worlds[ep.world].track().id().to_string(),
                        spawn: ep.spawn,
                        end: EndReason::ExpertLost,
                        frames: std::mem::take(&mut ep.frames),
                    });
                }
                Err(Error::ExpertLost(msg))
            }
            Err(e) => {
                self.episode = Some(ep);
                Err(e)
            }
        }
    }

    fn tick_episode(&self, ep: &mut Episode, expert: &mut dyn Expert) -> Result<(Frame, Option<EndReason>)> {
        let job = &self.job;
        let world = &job.worlds[ep.world];
        let st = ep.state;
        let t = st.tick;
        let obs = self.observe(ep);
        let infraction = ep.monitor.clone().update(world, &st).map(|i| i.kind);

        let proposal = match (job.strategy, self.agent) {
            (Strategy::Mixing | Strategy::Uail, Some(a)) => Some(a.propose(&obs, &ep.memory, ep.traj, t)?),
            _ => None,
        };
        let mut window = ep.window.clone();
        let record = match proposal.as_ref().and_then(|p| p.signals) {
            Some((us, ut)) => {
                let combined = combine_signals(us.u, ut.u, job.alpha)?;
                window.record(t, combined);
                let (sum, fire) = window.test(job.params.eta.for_command(obs.command));
                let switched = job.strategy == Strategy::Uail && fire;
                Some(UncertaintyRecord { t, steer: us, throttle: ut, combined, window_sum: sum, switched })
            }
            None => None,
        };

        let mode = match job.strategy {
            Strategy::Bc => ControlMode::Expert,
            Strategy::Noise if t % job.params.noise_period == 0 => ControlMode::Noise,
            Strategy::Noise => ControlMode::Expert,
            Strategy::Mixing => {
                if mixing_draw(job.seed, ep.traj, t, job.params.mix_hold, job.params.mix_p) {
                    ControlMode::Agent
                } else {
                    ControlMode::Expert
                }
            }
            Strategy::Uail => {
                if record.is_some_and(|r| r.switched) {
                    ControlMode::Expert
                } else {
                    ControlMode::Agent
                }
            }
        };

        let manual = self.manual_override && mode == ControlMode::Agent;
        let mode = if manual { ControlMode::Expert } else { mode };

        let label = if mode != ControlMode::Agent || expert.labels_every_frame() {
            Some(expert.act(world, &st)?)
        } else {
            None
        };
        let action = match mode {
            ControlMode::Expert => label.expect("expert drives"),
            ControlMode::Noise => {
                let bound = job.params.noise_bound_deg / world.params().vehicle.max_steer_deg;
                let l = label.expect("expert drives");
                Action::new((l.steer + noise_draw(job.seed, ep.traj, t, bound)).clamp(-1.0, 1.0), l.throttle)
            }
            ControlMode::Agent => proposal.as_ref().expect("agent drives").action.clamped(),
        };
        let label_source = match label {
            Some(_) => expert.label_source(),
            None => LabelSource::None,
        };

        // commit
        ep.monitor.update(world, &st);
        ep.window = window;
        if let Some(p) = proposal {
            ep.memory = p.memory;
        }
        let frame = Frame {
            tick: t,
            obs,
            action,
            label,
            control_mode: mode,
            label_source,
            uncertainty: record,
            infraction,
            pose: st.pose,
            speed: st.speed,
            progress: st.progress,
            manual_override: manual,
        };
        let ended = if infraction.is_some() {
            Some(EndReason::Infraction)
        } else if st.progress >= ep.end_progress {
            Some(EndReason::RouteComplete)
        } else if t + 1 >= job.params.max_episode_ticks {
            Some(EndReason::TimeLimit)
        } else {
            None
        };
        if ended.is_none() {
            ep.state = world.step(&st, action);
        }
        Ok((frame, ended))
    }

    pub fn finish(self) -> Dataset {
        self.finish_with(EndReason::Budget)
    }

    /// Closes the episode in progress with `end` and builds the dataset.
    pub fn finish_with(mut self, end: EndReason) -> Dataset {
        if let Some(mut ep) = self.episode.take() {
            if !ep.frames.is_empty() {
                self.done.push(Trajectory {
                    id: ep.traj,
                    track: self.job.worlds[ep.world].track().id().to_string(),
                    spawn: ep.spawn,
                    end,
                    frames: std::mem::take(&mut ep.frames),
                });
            }
        }
        let job = &self.job;
        let mut tracks: Vec<String> = job.worlds.iter().map(|w| w.track().id().to_string()).collect();
        tracks.dedup();
        Dataset {
            meta: DatasetMeta {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                strategy: job.strategy,
                seed: job.seed,
                config_digest: job.config_digest.clone(),
                tracks,
                collect: CollectSettings {
                    budget: job.budget,
                    max_episode_ticks: job.params.max_episode_ticks,
                    mix_p: job.params.mix_p,
                    mix_hold: job.params.mix_hold,
                    noise_period: job.params.noise_period,
                    noise_bound: job.params.noise_bound_deg
                        / job.worlds[0].params().vehicle.max_steer_deg,
                    eta: job.params.eta.clone(),
                    spawn_lateral: job.params.spawn_lateral,
                    spawn_heading_deg: job.params.spawn_heading_deg,
                    spawn_speed: job.params.spawn_speed,
                },
                uncertainty: job.uncertainty.clone(),
                perturbation: job.perturbation,
            },
            trajectories: self.done,
        }
    }
}

/// Runs a job to its budget with an automated expert.
pub fn collect(job: CollectJob<'_>, agent: Option<&dyn Agent>, expert: &mut dyn Expert) -> Result<Dataset> {
    let mut c = Collector::new(job, agent)?;
    let mut lost_streak = 0;
    while !c.is_done() {
        match c.tick(expert) {
            Ok(_) => lost_streak = 0,
            Err(Error::ExpertLost(_)) if lost_streak < 100 => lost_streak += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(c.finish())
}
