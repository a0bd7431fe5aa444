//! The reference world and the end-to-end experiments built on it:
//! threshold calibration, the aggregation loop and strategy comparison.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::collect::{collect, Agent, CollectJob, CollectParams, McAgent, McSettings};
use crate::dataset::{pooled_examples, Dataset, EtaSchedule, Strategy, Threshold};
use crate::error::{Error, Result};
use crate::evaluation::{label_with_buffer, roc, run_benchmark, BenchmarkParams, BenchmarkReport, BenchmarkSuite, TraceFrame};
use crate::expert::{Oracle, OracleParams};
use crate::policy::{train, Activation, PolicyParams, TrainHyper, N_COMMANDS, N_OUTPUTS};
use crate::rng::{derive_seed, Stream};
use crate::sim::{generate_track, Designation, Perturbation, SimParams, Track, TrackSpec, World};
use crate::stats::{mean, MeanCi};
use crate::uncertainty::{calibrate_lambda, combine_signals, SignalUncertainty, UncertaintyWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub seen_tracks: usize,
    pub unseen_tracks: usize,
    pub bench_tracks: usize,
    pub track: TrackSpec,
    pub sim: SimParams,
    /// Observation corruption used for the unseen-condition analog.
    pub unseen_perturbation: Perturbation,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            seen_tracks: 3,
            unseen_tracks: 2,
            bench_tracks: 2,
            track: TrackSpec::default(),
            sim: SimParams::default(),
            unseen_perturbation: Perturbation { ray_noise_sigma: 0.05, ray_dropout: 0.05 },
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceWorld {
    pub seen: Vec<World>,
    pub unseen: Vec<World>,
    pub bench: BenchmarkSuite,
}

impl ReferenceWorld {
    pub fn build(cfg: &WorldConfig) -> Result<Self> {
        let make = |kind: u64, prefix: &str, n: usize, d: Designation| -> Result<Vec<World>> {
            (0..n)
                .map(|i| {
                    let seed = derive_seed(cfg.seed, Stream::Track, &[kind, i as u64]);
                    let t = generate_track(&cfg.track, seed, &format!("{prefix}-{i}"), d)?;
                    Ok(World::new(Arc::new(t), cfg.sim))
                })
                .collect()
        };
        Ok(Self {
            seen: make(0, "seen", cfg.seen_tracks, Designation::Seen)?,
            unseen: make(1, "unseen", cfg.unseen_tracks, Designation::Unseen)?,
            bench: BenchmarkSuite { name: "bench".into(), worlds: make(2, "bench", cfg.bench_tracks, Designation::Seen)?, perturbation: None },
        })
    }

    pub fn all_worlds(&self) -> impl Iterator<Item = &World> {
        self.seen.iter().chain(&self.unseen).chain(&self.bench.worlds)
    }

    /// Worlds keyed by track id, as replay expects.
    pub fn by_id(&self) -> HashMap<String, World> {
        self.all_worlds().map(|w| (w.track().id().to_string(), w.clone())).collect()
    }

    pub fn tracks(&self) -> Vec<&Track> {
        self.all_worlds().map(|w| w.track()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub activation: Activation,
    pub train: TrainHyper,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], dropout: 0.1, activation: Activation::Tanh, train: TrainHyper::default() }
    }
}

impl PolicyConfig {
    pub fn arch(&self, sim: &SimParams) -> Vec<usize> {
        let mut a = vec![sim.sensor.n_rays + 1 + N_COMMANDS];
        a.extend(&self.hidden);
        a.push(N_OUTPUTS);
        a
    }
}

/// How the switch threshold is picked from a calibration rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub budget: usize,
    pub buffer: u64,
    /// Smallest true-positive rate the chosen threshold must reach.
    pub target_tpr: f64,
    /// Fallback quantile of window sums when the rollout has no infractions.
    pub fallback_quantile: f64,
    pub recalibrate_lambda: bool,
    pub per_command: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { budget: 3000, buffer: 5, target_tpr: 0.8, fallback_quantile: 0.9, recalibrate_lambda: true, per_command: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub policy: PolicyConfig,
    pub mc: McSettings,
    pub collect: CollectParams,
    pub oracle: OracleParams,
    pub calibration: CalibrationConfig,
    pub benchmark: BenchmarkParams,
    pub starter_budget: usize,
    pub batch_budget: usize,
    pub benchmark_seeds: Vec<u64>,
    /// Experiment repetitions.
    pub seeds: Vec<u64>,
    /// Train/collect rounds of the aggregation loop.
    pub episodes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            policy: PolicyConfig::default(),
            mc: McSettings::default(),
            collect: CollectParams::default(),
            oracle: OracleParams::default(),
            calibration: CalibrationConfig::default(),
            benchmark: BenchmarkParams::default(),
            starter_budget: 1000,
            batch_budget: 2000,
            benchmark_seeds: vec![0, 1, 2],
            seeds: vec![0, 1, 2, 3, 4],
            episodes: 3,
        }
    }
}

/// Derived seeds for each purpose of one experiment repetition.
fn purpose(seed: u64, tag: u64) -> u64 {
    derive_seed(seed, Stream::Init, &[0x5eed, tag])
}

const TAG_STARTER: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_CALIB: u64 = 3;
const TAG_COLLECT: u64 = 4;
const TAG_MC: u64 = 5;
const TAG_CORPUS: u64 = 6;

impl ExperimentConfig {
    pub fn oracle(&self) -> Oracle {
        Oracle::new(self.oracle)
    }

    pub fn job<'a>(&self, strategy: Strategy, worlds: &'a [World], budget: usize, seed: u64, digest: &str) -> CollectJob<'a> {
        CollectJob {
            strategy,
            worlds,
            budget,
            seed,
            params: self.collect.clone(),
            perturbation: None,
            config_digest: digest.to_string(),
            uncertainty: None,
            alpha: self.mc.alpha,
            window: self.mc.window,
        }
    }

    /// Trains a fresh network on `examples`; initialization depends only on `seed`.
    pub fn train_policy(&self, data: &[Dataset], seed: u64) -> Result<(PolicyParams, Vec<f64>)> {
        let arch = self.policy.arch(&self.world.sim);
        let init = PolicyParams::init(&arch, self.policy.dropout, self.policy.activation, derive_seed(seed, Stream::Init, &[]))?;
        let hyper = TrainHyper { seed: derive_seed(seed, Stream::Shuffle, &[]), ..self.policy.train };
        train(&init, &pooled_examples(data), &hyper)
    }

    pub fn mc_agent(&self, params: PolicyParams, seed: u64) -> McAgent {
        McAgent { params, settings: self.mc.clone(), mc_seed: seed }
    }
}

/// Result of scoring a calibration rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub lambda: f64,
    pub eta: EtaSchedule,
    pub frames: usize,
    pub infractions: usize,
    /// AUC of the window sum on the calibration rollout, if defined.
    pub auc: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

/// Re-scores stored per-signal terms under a new lambda and returns one
/// window-sum trace per frame.
fn window_trace(ds: &Dataset, lambda: f64, mc: &McSettings) -> Result<Vec<TraceFrame>> {
    let rescore = |s: &SignalUncertainty| {
        let inner = s.categorical_term() + lambda * s.sd;
        inner * inner
    };
    let mut out = Vec::new();
    for t in &ds.trajectories {
        let mut w = UncertaintyWindow::new(mc.window)?;
        for f in &t.frames {
            let Some(r) = &f.uncertainty else { continue };
            let c = combine_signals(rescore(&r.steer), rescore(&r.throttle), mc.alpha)?;
            w.record(f.tick, c);
            let (sum, _) = w.test(f64::INFINITY);
            out.push(TraceFrame { traj: t.id, tick: f.tick, command: f.obs.command, infraction: f.infraction.is_some(), score: sum });
        }
    }
    Ok(out)
}

fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let i = ((s.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    s[i]
}

/// Picks the threshold with the lowest false-positive rate whose
/// true-positive rate reaches `target`.
fn pick_eta(trace: &[TraceFrame], cfg: &CalibrationConfig) -> Result<(f64, Option<(f64, f64, f64)>)> {
    let labels = label_with_buffer(trace, cfg.buffer)?;
    let scores: Vec<f64> = trace.iter().map(|f| f.score).collect();
    if scores.is_empty() {
        return Err(Error::InvalidInput("calibration rollout produced no scored frames".into()));
    }
    match roc(&scores, &labels) {
        Ok(curve) => {
            let p = curve
                .points
                .iter()
                .find(|p| p.tpr >= cfg.target_tpr && p.threshold.is_finite())
                .or_else(|| curve.points.iter().rev().find(|p| p.threshold.is_finite()))
                .copied();
            match p {
                Some(p) => Ok((p.threshold.max(0.0), Some((curve.auc, p.tpr, p.fpr)))),
                None => Ok((quantile(&scores, cfg.fallback_quantile), Some((curve.auc, 1.0, 1.0)))),
            }
        }
        Err(Error::UndefinedRoc(_)) => Ok((quantile(&scores, cfg.fallback_quantile), None)),
        Err(e) => Err(e),
    }
}

/// Rolls the policy out without switching, then fits lambda and the
/// switch threshold to the rollout.
pub fn calibrate(cfg: &ExperimentConfig, params: &PolicyParams, worlds: &[World], seed: u64) -> Result<Calibration> {
    let agent = cfg.mc_agent(params.clone(), purpose(seed, TAG_MC));
    let mut job = cfg.job(Strategy::Uail, worlds, cfg.calibration.budget, purpose(seed, TAG_CALIB), "calibration");
    job.params.eta = EtaSchedule { global: Threshold::INF, per_command: Default::default() };
    let ds = collect(job, Some(&agent), &mut cfg.oracle())?;
    let recs: Vec<SignalUncertainty> =
        ds.frames().filter_map(|f| f.uncertainty).flat_map(|r| [r.steer, r.throttle]).collect();
    let lambda = if cfg.calibration.recalibrate_lambda { calibrate_lambda(&recs) } else { cfg.mc.lambda };
    let trace = window_trace(&ds, lambda, &cfg.mc)?;
    let (global, stats) = pick_eta(&trace, &cfg.calibration)?;
    let mut eta = EtaSchedule::constant(global);
    if cfg.calibration.per_command {
        for c in crate::policy::Command::ALL {
            let sub: Vec<TraceFrame> = trace.iter().copied().filter(|f| f.command == c).collect();
            if sub.iter().any(|f| f.infraction) && sub.len() > 50 {
                if let Ok((e, Some(_))) = pick_eta(&sub, &cfg.calibration) {
                    eta.per_command.insert(c, Threshold(e));
                }
            }
        }
    }
    Ok(Calibration {
        lambda,
        eta,
        frames: ds.n_frames(),
        infractions: ds.trajectories.iter().filter(|t| t.had_infraction()).count(),
        auc: stats.map(|s| s.0),
        tpr: stats.map(|s| s.1),
        fpr: stats.map(|s| s.2),
    })
}

/// Fraction of collection trajectories that ended in an infraction.
pub fn infraction_rate(ds: &Dataset) -> f64 {
    let n = ds.trajectories.len();
    if n == 0 {
        return 0.0;
    }
    ds.trajectories.iter().filter(|t| t.had_infraction()).count() as f64 / n as f64
}

pub fn switch_rate(ds: &Dataset) -> f64 {
    let n = ds.n_frames();
    if n == 0 {
        return 0.0;
    }
    ds.frames().filter(|f| f.uncertainty.is_some_and(|r| r.switched)).count() as f64 / n as f64
}

pub fn agent_fraction(ds: &Dataset) -> f64 {
    let n = ds.n_frames();
    if n == 0 {
        return 0.0;
    }
    ds.frames().filter(|f| f.control_mode == crate::dataset::ControlMode::Agent).count() as f64 / n as f64
}

/// Collects one batch with `strategy`, using `params` as the learner.
pub fn collect_batch(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    params: &PolicyParams,
    calib: Option<&Calibration>,
    worlds: &[World],
    budget: usize,
    seed: u64,
    digest: &str,
) -> Result<Dataset> {
    let mut settings = cfg.mc.clone();
    if let Some(c) = calib {
        settings.lambda = c.lambda;
    }
    let agent = McAgent { params: params.clone(), settings, mc_seed: purpose(seed, TAG_MC) };
    let mut job = cfg.job(strategy, worlds, budget, purpose(seed, TAG_COLLECT), digest);
    if let Some(c) = calib {
        job.params.eta = c.eta.clone();
    }
    let uses_agent = matches!(strategy, Strategy::Mixing | Strategy::Uail);
    if uses_agent {
        job.uncertainty = Some(agent.uncertainty_settings());
    }
    let agent_ref: Option<&dyn Agent> = if uses_agent { Some(&agent) } else { None };
    collect(job, agent_ref, &mut cfg.oracle())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub benchmark_success: f64,
    pub collection_infraction_rate: f64,
    pub switch_rate: f64,
    pub dataset_frames: usize,
    pub lambda: f64,
    pub eta: EtaSchedule,
}

pub struct LoopOutcome {
    pub policy: PolicyParams,
    pub datasets: Vec<Dataset>,
    pub metrics: Vec<EpisodeMetrics>,
}

/// `episodes` rounds of: train on everything so far, calibrate, collect
/// `batch` more frames with uncertainty-triggered switching.
pub fn run_uail_loop(
    cfg: &ExperimentConfig,
    world: &ReferenceWorld,
    d0: Vec<Dataset>,
    episodes: usize,
    batch: usize,
    seed: u64,
    digest: &str,
) -> Result<LoopOutcome> {
    if d0.iter().all(|d| d.n_frames() == 0) {
        return Err(Error::InvalidInput("initial dataset is empty".into()));
    }
    let mut data = d0;
    let mut metrics = Vec::new();
    let mut policy = None;
    for e in 0..episodes {
        let es = derive_seed(seed, Stream::Init, &[0x100, e as u64]);
        let (p, _) = cfg.train_policy(&data, seed)?;
        let calib = calibrate(cfg, &p, &world.seen, es)?;
        let bench = run_benchmark(&p, &world.bench, &cfg.benchmark_seeds, &cfg.benchmark)?;
        let ds = collect_batch(cfg, Strategy::Uail, &p, Some(&calib), &world.seen, batch, es, digest)?;
        data.push(ds);
        let last = data.last().unwrap();
        metrics.push(EpisodeMetrics {
            episode: e,
            benchmark_success: bench.success.mean,
            collection_infraction_rate: infraction_rate(last),
            switch_rate: switch_rate(last),
            dataset_frames: data.iter().map(Dataset::n_frames).sum(),
            lambda: calib.lambda,
            eta: calib.eta.clone(),
        });
        policy = Some(p);
    }
    let policy = match policy {
        Some(p) => p,
        None => cfg.train_policy(&data, seed)?.0,
    };
    Ok(LoopOutcome { policy, datasets: data, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: String,
    pub benchmark: BenchmarkReport,
    pub collection_infraction_rate: f64,
    pub agent_fraction: f64,
    pub switch_rate: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub calibration: Calibration,
    pub starter: StrategyResult,
    pub strategies: Vec<StrategyResult>,
}

impl Comparison {
    pub fn get(&self, name: &str) -> Option<&StrategyResult> {
        self.strategies.iter().find(|s| s.strategy == name)
    }
}

/// One-step comparison: from the same starter set and starter policy, each
/// strategy collects an equal budget, then a fresh network is trained on
/// starter + batch and benchmarked.
pub fn compare_strategies(cfg: &ExperimentConfig, world: &ReferenceWorld, seed: u64, digest: &str) -> Result<Comparison> {
    let oracle = cfg.oracle();
    let d0 = collect(
        cfg.job(Strategy::Bc, &world.seen, cfg.starter_budget, purpose(seed, TAG_STARTER), digest),
        None,
        &mut oracle.clone(),
    )?;
    let train_seed = purpose(seed, TAG_TRAIN);
    let (p0, _) = cfg.train_policy(std::slice::from_ref(&d0), train_seed)?;
    let calib = calibrate(cfg, &p0, &world.seen, seed)?;
    let bench = |p: &PolicyParams| run_benchmark(p, &world.bench, &cfg.benchmark_seeds, &cfg.benchmark);
    let starter = StrategyResult {
        strategy: "starter".into(),
        benchmark: bench(&p0)?,
        collection_infraction_rate: infraction_rate(&d0),
        agent_fraction: 0.0,
        switch_rate: 0.0,
        frames: d0.n_frames(),
    };
    let mut strategies = Vec::new();
    for s in [Strategy::Bc, Strategy::Mixing, Strategy::Noise, Strategy::Uail] {
        let batch = collect_batch(cfg, s, &p0, Some(&calib), &world.seen, cfg.batch_budget, seed, digest)?;
        let (p, _) = cfg.train_policy(&[d0.clone(), batch.clone()], train_seed)?;
        strategies.push(StrategyResult {
            strategy: s.name().into(),
            benchmark: bench(&p)?,
            collection_infraction_rate: infraction_rate(&batch),
            agent_fraction: agent_fraction(&batch),
            switch_rate: switch_rate(&batch),
            frames: d0.n_frames() + batch.n_frames(),
        });
    }
    Ok(Comparison { seed, calibration: calib, starter, strategies })
}

/// Mean and CI of a per-seed quantity.
pub fn summarize(values: &[f64]) -> MeanCi {
    MeanCi::of(values)
}

/// Expert-driven corpora scored by a trained policy: clean observations on
/// the training tracks and corrupted observations on held-out tracks.
pub struct ScenarioCorpora {
    pub policy: PolicyParams,
    pub seen: Dataset,
    pub unseen: Dataset,
}

pub fn scenario_corpora(cfg: &ExperimentConfig, world: &ReferenceWorld, seed: u64, frames: usize, digest: &str) -> Result<ScenarioCorpora> {
    let d0 = collect(
        cfg.job(Strategy::Bc, &world.seen, cfg.starter_budget, purpose(seed, TAG_STARTER), digest),
        None,
        &mut cfg.oracle(),
    )?;
    let (p, _) = cfg.train_policy(std::slice::from_ref(&d0), purpose(seed, TAG_TRAIN))?;
    let agent = cfg.mc_agent(p.clone(), purpose(seed, TAG_MC));
    let scored = |worlds: &[World], perturb: Option<Perturbation>, tag: u64| -> Result<Dataset> {
        let mut job = cfg.job(Strategy::Mixing, worlds, frames, purpose(seed, TAG_CORPUS + tag), digest);
        job.params.mix_p = 0.0;
        job.perturbation = perturb;
        job.uncertainty = Some(agent.uncertainty_settings());
        collect(job, Some(&agent), &mut cfg.oracle())
    };
    Ok(ScenarioCorpora {
        seen: scored(&world.seen, None, 0)?,
        unseen: scored(&world.unseen, Some(cfg.world.unseen_perturbation), 1)?,
        policy: p,
    })
}

/// Agent-driven rollouts (no switching) on seen and unseen tracks; the
/// corpus for infraction-prediction analysis.
pub fn rollout_corpus(cfg: &ExperimentConfig, world: &ReferenceWorld, seed: u64, frames: usize, digest: &str) -> Result<(PolicyParams, Vec<Dataset>)> {
    let d0 = collect(
        cfg.job(Strategy::Bc, &world.seen, cfg.starter_budget, purpose(seed, TAG_STARTER), digest),
        None,
        &mut cfg.oracle(),
    )?;
    let (p, _) = cfg.train_policy(std::slice::from_ref(&d0), purpose(seed, TAG_TRAIN))?;
    let calib = calibrate(cfg, &p, &world.seen, seed)?;
    let mut agent = cfg.mc_agent(p.clone(), purpose(seed, TAG_MC));
    agent.settings.lambda = calib.lambda;
    let mut out = Vec::new();
    for (i, (worlds, perturb)) in
        [(&world.seen, None), (&world.unseen, Some(cfg.world.unseen_perturbation))].into_iter().enumerate()
    {
        let mut job = cfg.job(Strategy::Uail, worlds, frames, purpose(seed, TAG_CORPUS + 10 + i as u64), digest);
        job.params.eta = EtaSchedule { global: Threshold::INF, per_command: Default::default() };
        job.perturbation = perturb;
        job.uncertainty = Some(agent.uncertainty_settings());
        out.push(collect(job, Some(&agent), &mut cfg.oracle())?);
    }
    Ok((p, out))
}

/// Mean of a slice, zero when empty.
pub fn mean_or_zero(v: &[f64]) -> f64 {
    mean(v).unwrap_or(0.0)
}
