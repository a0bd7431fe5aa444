//! Infraction-prediction ROC analysis, scenario score tables and the
//! junction benchmark.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collect::{Agent, DeterministicAgent};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::expert::Oracle;
use crate::policy::{Action, Command, Observation, PolicyParams};
use crate::rng::{self, Stream};
use crate::sim::{InfractionMonitor, Perturbation, SimState, Turn, World};
use crate::stats::{median, MeanCi};

/// Serializes infinite floats as `"inf"` / `"-inf"`.
mod signed_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad number {s:?}"))),
        }
    }
}

/// One scored frame of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    pub traj: u64,
    pub tick: u64,
    pub command: Command,
    pub infraction: bool,
    pub score: f64,
}

/// Positive iff an infraction happens at the frame's own tick or within the
/// next `k` ticks of the same trajectory.
pub fn label_with_buffer(trace: &[TraceFrame], k: u64) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::InvalidInput("buffer must be at least one tick".into()));
    }
    let mut out = vec![false; trace.len()];
    let mut next: Option<(u64, u64)> = None; // (traj, tick) of the nearest later infraction
    for i in (0..trace.len()).rev() {
        let f = &trace[i];
        if next.is_some_and(|(tr, _)| tr != f.traj) {
            next = None;
        }
        if f.infraction {
            next = Some((f.traj, f.tick));
        }
        out[i] = next.is_some_and(|(_, t)| t >= f.tick && t - f.tick <= k);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Frames scoring strictly above this value are flagged.
    #[serde(with = "signed_inf")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Threshold sweep over the distinct scores, from flag-nothing to flag-all.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedRoc(format!("{pos} positives and {neg} negatives")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = if i < idx.len() { (s + scores[idx[i]]) / 2.0 } else { f64::NEG_INFINITY };
        points.push(RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64, threshold });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum::<f64>()
        .clamp(0.0, 1.0);
    Ok(RocCurve { points, auc, positives: pos, negatives: neg })
}

pub fn trace_roc(trace: &[TraceFrame], k: u64) -> Result<RocCurve> {
    let labels = label_with_buffer(trace, k)?;
    let scores: Vec<f64> = trace.iter().map(|f| f.score).collect();
    roc(&scores, &labels)
}

/// ROC per active command; commands whose partition lacks either class
/// are left out.
pub fn per_command_roc(trace: &[TraceFrame], k: u64) -> Result<BTreeMap<Command, RocCurve>> {
    let labels = label_with_buffer(trace, k)?;
    let mut out = BTreeMap::new();
    for c in Command::ALL {
        let (s, l): (Vec<f64>, Vec<bool>) = trace
            .iter()
            .zip(&labels)
            .filter(|(f, _)| f.command == c)
            .map(|(f, &l)| (f.score, l))
            .unzip();
        match roc(&s, &l) {
            Ok(r) => {
                out.insert(c, r);
            }
            Err(Error::UndefinedRoc(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    SdSteer,
    SdThrottle,
    TotalU,
}

impl Signal {
    pub const ALL: [Signal; 3] = [Signal::SdSteer, Signal::SdThrottle, Signal::TotalU];

    pub fn name(self) -> &'static str {
        match self {
            Signal::SdSteer => "sd_steer",
            Signal::SdThrottle => "sd_throttle",
            Signal::TotalU => "total_u",
        }
    }
}

/// Per-frame values of every compared signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalFrame {
    pub traj: u64,
    pub tick: u64,
    pub command: Command,
    pub infraction: bool,
    pub sd_steer: f64,
    pub sd_throttle: f64,
    pub total_u: f64,
}

impl SignalFrame {
    pub fn value(&self, s: Signal) -> f64 {
        match s {
            Signal::SdSteer => self.sd_steer,
            Signal::SdThrottle => self.sd_throttle,
            Signal::TotalU => self.total_u,
        }
    }
}

/// Scored frames of every dataset, with trajectory ids made unique across
/// datasets.
pub fn signal_frames(sets: &[&Dataset]) -> Vec<SignalFrame> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for ds in sets {
        let mut max_id = 0;
        for t in &ds.trajectories {
            max_id = max_id.max(t.id + 1);
            for f in &t.frames {
                if let Some(r) = &f.uncertainty {
                    out.push(SignalFrame {
                        traj: offset + t.id,
                        tick: f.tick,
                        command: f.obs.command,
                        infraction: f.infraction.is_some(),
                        sd_steer: r.steer.sd,
                        sd_throttle: r.throttle.sd,
                        total_u: r.combined,
                    });
                }
            }
        }
        offset += max_id;
    }
    out
}

pub fn signal_trace(frames: &[SignalFrame], s: Signal) -> Vec<TraceFrame> {
    frames
        .iter()
        .map(|f| TraceFrame { traj: f.traj, tick: f.tick, command: f.command, infraction: f.infraction, score: f.value(s) })
        .collect()
}

pub const DEFAULT_BUFFERS: [u64; 3] = [3, 5, 10];

/// AUC for each signal and buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTable {
    pub buffers: Vec<u64>,
    pub auc: BTreeMap<Signal, Vec<f64>>,
}

impl SignalTable {
    pub fn get(&self, s: Signal, k: u64) -> Option<f64> {
        let i = self.buffers.iter().position(|&b| b == k)?;
        self.auc.get(&s).map(|v| v[i])
    }
}

pub fn compare_signals(frames: &[SignalFrame], buffers: &[u64]) -> Result<SignalTable> {
    let mut auc = BTreeMap::new();
    for s in Signal::ALL {
        let trace = signal_trace(frames, s);
        let row = buffers.iter().map(|&k| trace_roc(&trace, k).map(|r| r.auc)).collect::<Result<Vec<_>>>()?;
        auc.insert(s, row);
    }
    Ok(SignalTable { buffers: buffers.to_vec(), auc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCell {
    pub frames: usize,
    pub median: f64,
    pub mean: f64,
}

/// Combined-score statistics per scenario, per command and overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTable {
    pub rows: BTreeMap<String, ScenarioRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub per_command: BTreeMap<Command, ScenarioCell>,
    pub all: ScenarioCell,
}

fn cell(v: &[f64]) -> Option<ScenarioCell> {
    Some(ScenarioCell { frames: v.len(), median: median(v)?, mean: crate::stats::mean(v)? })
}

pub const MIN_SCENARIO_FRAMES: usize = 1000;

/// Median (headline) and mean combined score for each named scenario.
/// Each scenario may pool several datasets and must reach `min_frames`.
pub fn scenario_medians(scenarios: &[(String, Vec<&Dataset>)], min_frames: usize) -> Result<ScenarioTable> {
    let mut rows = BTreeMap::new();
    for (name, sets) in scenarios {
        let mut by_cmd: BTreeMap<Command, Vec<f64>> = BTreeMap::new();
        let mut all = Vec::new();
        for ds in sets {
            for f in ds.frames() {
                if let Some(r) = &f.uncertainty {
                    by_cmd.entry(f.obs.command).or_default().push(r.combined);
                    all.push(r.combined);
                }
            }
        }
        if all.len() < min_frames {
            return Err(Error::InvalidInput(format!(
                "scenario {name} has {} scored frames, at least {min_frames} required",
                all.len()
            )));
        }
        let per_command = by_cmd.iter().filter_map(|(c, v)| cell(v).map(|x| (*c, x))).collect();
        rows.insert(name.clone(), ScenarioRow { per_command, all: cell(&all).expect("non-empty") });
    }
    Ok(ScenarioTable { rows })
}

/// Anything that can drive a benchmark case.
pub trait Driver: Sync {
    fn drive(&self, world: &World, state: &SimState, obs: &Observation) -> Result<Action>;
}

impl Driver for Oracle {
    fn drive(&self, world: &World, state: &SimState, _obs: &Observation) -> Result<Action> {
        self.action(world, state)
    }
}

impl Driver for DeterministicAgent {
    fn drive(&self, _world: &World, _state: &SimState, obs: &Observation) -> Result<Action> {
        Ok(self.propose(obs, &None, 0, 0)?.action)
    }
}

impl Driver for PolicyParams {
    fn drive(&self, _world: &World, _state: &SimState, obs: &Observation) -> Result<Action> {
        self.forward(obs, None)
    }
}

/// Fixed-output driver.
#[derive(Debug, Clone, Copy)]
pub struct ConstantDriver(pub Action);

impl Driver for ConstantDriver {
    fn drive(&self, _: &World, _: &SimState, _: &Observation) -> Result<Action> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkSuite {
    pub name: String,
    pub worlds: Vec<World>,
    pub perturbation: Option<Perturbation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkParams {
    pub spawn_lateral: f64,
    pub spawn_heading_deg: f64,
    pub spawn_speed: f64,
    /// Time budget as a multiple of case length over `nominal_speed`.
    pub time_factor: f64,
    pub nominal_speed: f64,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self { spawn_lateral: 0.5, spawn_heading_deg: 5.0, spawn_speed: 4.0, time_factor: 2.0, nominal_speed: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub seed: u64,
    pub world: usize,
    pub case: usize,
    pub turn: Turn,
    pub success: bool,
    pub infraction: bool,
    pub distance: f64,
    pub ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub suite: String,
    pub seeds: Vec<u64>,
    /// Success rate of each seed.
    pub success_by_seed: Vec<f64>,
    pub success: MeanCi,
    pub per_turn: BTreeMap<Turn, MeanCi>,
    pub infractions: usize,
    pub distance_m: f64,
    /// Kilometers driven per infraction; `None` without infractions.
    pub km_per_infraction: Option<f64>,
    pub cases: Vec<CaseResult>,
}

fn check_balanced(suite: &BenchmarkSuite) -> Result<()> {
    let mut counts: BTreeMap<Turn, usize> = BTreeMap::new();
    for w in &suite.worlds {
        for c in w.track().cases() {
            *counts.entry(c.turn).or_insert(0) += 1;
        }
    }
    let vals: Vec<usize> = Turn::ALL.iter().map(|t| counts.get(t).copied().unwrap_or(0)).collect();
    if vals[0] == 0 || vals.iter().any(|&v| v != vals[0]) {
        return Err(Error::InvalidInput(format!(
            "suite {} is not turn-balanced: left {}, right {}, straight {}",
            suite.name, vals[0], vals[1], vals[2]
        )));
    }
    Ok(())
}

pub fn run_case(driver: &dyn Driver, suite: &BenchmarkSuite, wi: usize, ci: usize, seed: u64, p: &BenchmarkParams) -> CaseResult {
    let world = &suite.worlds[wi];
    let case = world.track().cases()[ci];
    let mut r = rng::stream(seed, Stream::Benchmark, &[wi as u64, ci as u64]);
    let lat = if p.spawn_lateral > 0.0 { r.random_range(-p.spawn_lateral..=p.spawn_lateral) } else { 0.0 };
    let hd = p.spawn_heading_deg.to_radians();
    let head = if hd > 0.0 { r.random_range(-hd..=hd) } else { 0.0 };
    let mut st = world.spawn(case.start_s, lat, head, p.spawn_speed);
    let budget = ((case.end_s - case.start_s) / p.nominal_speed * p.time_factor / world.params().dt).ceil() as u64;
    let mut mon = InfractionMonitor::new();
    let key = ((wi as u64) << 32) | ci as u64;
    let mut result = CaseResult {
        seed,
        world: wi,
        case: ci,
        turn: case.turn,
        success: false,
        infraction: false,
        distance: 0.0,
        ticks: 0,
    };
    loop {
        if mon.update(world, &st).is_some() {
            result.infraction = true;
            break;
        }
        if st.progress >= case.end_s {
            result.success = true;
            break;
        }
        if st.tick >= budget {
            break;
        }
        let obs = match &suite.perturbation {
            Some(pp) => world.observe_perturbed(&st, pp, seed, key),
            None => world.observe(&st),
        };
        let Ok(a) = driver.drive(world, &st, &obs) else { break };
        st = world.step(&st, a);
    }
    result.distance = st.odometer;
    result.ticks = st.tick;
    result
}

/// Runs every case of `suite` once per seed with maskless inference.
pub fn run_benchmark(driver: &dyn Driver, suite: &BenchmarkSuite, seeds: &[u64], p: &BenchmarkParams) -> Result<BenchmarkReport> {
    check_balanced(suite)?;
    if seeds.is_empty() {
        return Err(Error::InvalidInput("benchmark needs at least one seed".into()));
    }
    let jobs: Vec<(u64, usize, usize)> = seeds
        .iter()
        .flat_map(|&s| {
            suite
                .worlds
                .iter()
                .enumerate()
                .flat_map(move |(wi, w)| (0..w.track().cases().len()).map(move |ci| (s, wi, ci)))
        })
        .collect();
    let mut cases: Vec<CaseResult> =
        jobs.par_iter().map(|&(s, wi, ci)| run_case(driver, suite, wi, ci, s, p)).collect();
    cases.sort_by_key(|c| (seeds.iter().position(|&s| s == c.seed), c.world, c.case));

    let rate = |it: &mut dyn Iterator<Item = &CaseResult>| {
        let (n, k) = it.fold((0usize, 0usize), |(n, k), c| (n + 1, k + usize::from(c.success)));
        if n == 0 {
            0.0
        } else {
            k as f64 / n as f64
        }
    };
    let success_by_seed: Vec<f64> = seeds.iter().map(|&s| rate(&mut cases.iter().filter(|c| c.seed == s))).collect();
    let per_turn = Turn::ALL
        .iter()
        .map(|&t| {
            let v: Vec<f64> =
                seeds.iter().map(|&s| rate(&mut cases.iter().filter(|c| c.seed == s && c.turn == t))).collect();
            (t, MeanCi::of(&v))
        })
        .collect();
    let infractions = cases.iter().filter(|c| c.infraction).count();
    let distance_m: f64 = cases.iter().map(|c| c.distance).sum();
    Ok(BenchmarkReport {
        suite: suite.name.clone(),
        seeds: seeds.to_vec(),
        success: MeanCi::of(&success_by_seed),
        success_by_seed,
        per_turn,
        infractions,
        distance_m,
        km_per_infraction: (infractions > 0).then(|| distance_m / 1000.0 / infractions as f64),
        cases,
    })
}
