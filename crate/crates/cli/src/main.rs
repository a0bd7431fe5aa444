use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use uail_cli::{exit_code, RunDir};
use uail_core::collect::{collect, Agent, McAgent};
use uail_core::config::{self, RunConfig};
use uail_core::dataset::{Dataset, Strategy, Threshold};
use uail_core::evaluation::{
    compare_signals, run_benchmark, scenario_medians, signal_frames, signal_trace, trace_roc, per_command_roc, Driver,
    Signal, DEFAULT_BUFFERS, MIN_SCENARIO_FRAMES,
};
use uail_core::experiment::{
    calibrate, compare_strategies, rollout_corpus, run_uail_loop, scenario_corpora, summarize, Calibration, ReferenceWorld,
};
use uail_core::policy::{self, PolicyParams};
use uail_core::replay::replay;
use uail_core::rng::{derive_seed, Stream};
use uail_core::sim::World;
use uail_core::teleop::{run_session, SessionParams};
use uail_core::{Error, Result};

/// Uncertainty-aware imitation-learning data aggregation in a 2D driving
/// sandbox.
///
/// Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
/// 3 expert error (lost route, remote session failure), 4 training
/// divergence, 5 degenerate ROC (single-class labels).
#[derive(Parser, Debug)]
#[command(name = "uail", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set mc.n_samples=30`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Write artifacts to exactly this directory instead.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Worker threads for parallel evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum TrackSet {
    Seen,
    Unseen,
    Bench,
}

#[derive(Clone, Copy, Debug, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum ExportKind {
    Frames,
    Trajectories,
}

#[derive(Subcommand, Debug, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
enum Cmd {
    /// Generate the reference tracks and write their definitions.
    GenTracks,
    /// Train a policy on datasets, or on a fresh starter set if none given.
    Train {
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Collect one dataset with a strategy.
    Collect {
        #[arg(long)]
        strategy: Strategy,
        /// Policy checkpoint; required by mixing and uail.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Switch threshold: a number, `inf`, or `calibrate`.
        #[arg(long)]
        eta: Option<String>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "seen")]
        tracks: TrackSet,
        /// Corrupt observations as in the unseen condition.
        #[arg(long)]
        perturb: bool,
    },
    /// Run the train/calibrate/collect loop from a fresh starter set.
    UailLoop {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Matched-budget comparison of all strategies over the configured seeds.
    Compare {
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Infraction-prediction ROC of the uncertainty signals.
    EvalRoc {
        /// Scored datasets; without any, a reference rollout corpus is built.
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frames per corpus half when building one.
        #[arg(long, default_value_t = 3000)]
        frames: usize,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUFFERS)]
        buffers: Vec<u64>,
        #[arg(long)]
        per_command: bool,
    },
    /// Benchmark a policy checkpoint, or `oracle`.
    Benchmark {
        #[arg(long)]
        policy: String,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_enum, default_value = "bench")]
        tracks: TrackSet,
    },
    /// Median combined uncertainty per scenario and command.
    ScenarioTable {
        /// `name=path[,path...]`; without any, seen/unseen corpora are built.
        #[arg(long)]
        scenario: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1500)]
        frames: usize,
    },
    /// Serve one remote-expert collection session over WebSocket.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8765")]
        listen: String,
        #[arg(long, default_value = "uail")]
        strategy: Strategy,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        eta: Option<String>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "session")]
        session: String,
        #[arg(long)]
        token: Option<String>,
        /// Sim rate; 0 runs as fast as inputs allow.
        #[arg(long, default_value_t = 20.0)]
        tick_hz: f64,
        #[arg(long, default_value_t = 5)]
        hold_budget: u32,
        #[arg(long, default_value_t = 200)]
        tick_timeout_ms: u64,
    },
    /// Re-simulate a dataset and re-verify its stored records.
    Replay {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Export a dataset as CSV.
    Export {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "frames")]
        what: ExportKind,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::GenTracks => "gen-tracks",
            Cmd::Train { .. } => "train",
            Cmd::Collect { .. } => "collect",
            Cmd::UailLoop { .. } => "uail-loop",
            Cmd::Compare { .. } => "compare",
            Cmd::EvalRoc { .. } => "eval-roc",
            Cmd::Benchmark { .. } => "benchmark",
            Cmd::ScenarioTable { .. } => "scenario-table",
            Cmd::Serve { .. } => "serve",
            Cmd::Replay { .. } => "replay",
            Cmd::Export { .. } => "export",
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn resolve_config(g: &Global, cmd: &Cmd) -> Result<RunConfig> {
    let base = match &g.config {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = g.overrides.clone();
    // flags that map onto configuration keys win over the file
    match cmd {
        Cmd::Collect { eta: Some(e), .. } | Cmd::Serve { eta: Some(e), .. } if e != "calibrate" => {
            e.parse::<Threshold>().map_err(|_| bad(format!("--eta: expected a number, inf or calibrate, got {e:?}")))?;
            overrides.push(format!("collect.eta.global={}", if e == "inf" { "\"inf\"".into() } else { e.clone() }));
        }
        Cmd::UailLoop { episodes, batch, .. } => {
            overrides.extend(episodes.map(|n| format!("episodes={n}")));
            overrides.extend(batch.map(|n| format!("batch_budget={n}")));
        }
        _ => {}
    }
    config::apply_overrides(&base, &overrides)
}

fn load_policy(p: &Path) -> Result<PolicyParams> {
    policy::load(p).map_err(|e| bad(format!("{}: {e}", p.display())))
}

fn load_dataset(p: &Path) -> Result<Dataset> {
    Dataset::load(p).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
        other => other,
    })
}

fn worlds_of(world: &ReferenceWorld, set: TrackSet) -> &[World] {
    match set {
        TrackSet::Seen => &world.seen,
        TrackSet::Unseen => &world.unseen,
        TrackSet::Bench => &world.bench.worlds,
    }
}

fn mc_agent(cfg: &RunConfig, params: PolicyParams, seed: u64, calib: Option<&Calibration>) -> McAgent {
    let mut a = cfg.mc_agent(params, derive_seed(seed, Stream::Dropout, &[]));
    if let Some(c) = calib {
        a.settings.lambda = c.lambda;
    }
    a
}

struct Ctx {
    cfg: RunConfig,
    digest: String,
    run: RunDir,
}

fn run(cli: Cli) -> Result<Value> {
    let cfg = resolve_config(&cli.global, &cli.cmd)?;
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            return Err(bad("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    let digest = config::digest(&cfg);
    let args = serde_json::to_value(&cli.cmd).unwrap_or(Value::Null);
    let mut run = RunDir::create(&cli.global.out, cli.global.run_dir.as_deref(), &digest, cli.cmd.name(), args)?;
    run.write("config.toml", config::to_toml(&cfg)?.as_bytes())?;
    let mut ctx = Ctx { cfg, digest, run };
    let mut summary = dispatch(&mut ctx, &cli.cmd)?;
    let (path, manifest) = ctx.run.finish()?;
    if let Value::Object(m) = &mut summary {
        m.insert("command".into(), json!(cli.cmd.name()));
        m.insert("config_digest".into(), json!(manifest.config_digest));
        m.insert("run_dir".into(), json!(path.display().to_string()));
        m.insert("files".into(), json!(manifest.files.iter().map(|f| &f.path).collect::<Vec<_>>()));
    }
    Ok(summary)
}

fn dispatch(ctx: &mut Ctx, cmd: &Cmd) -> Result<Value> {
    let cfg = ctx.cfg.clone();
    let digest = ctx.digest.clone();
    let world = ReferenceWorld::build(&cfg.world)?;
    let run = &mut ctx.run;
    match cmd {
        Cmd::GenTracks => {
            let mut tracks = Vec::new();
            for w in world.all_worlds() {
                let t = w.track();
                let mut bytes = serde_json::to_vec_pretty(t.def()).map_err(|e| Error::InvalidInput(e.to_string()))?;
                bytes.push(b'\n');
                run.write(&format!("tracks/{}.json", t.id()), &bytes)?;
                tracks.push(json!({"id": t.id(), "lane_length_m": t.lane_length(), "cases": t.cases().len()}));
            }
            Ok(json!({ "tracks": tracks }))
        }
        Cmd::Train { data, seed } => {
            run.add_seeds(&[*seed]);
            let sets = if data.is_empty() {
                let d0 = collect(
                    cfg.job(Strategy::Bc, &world.seen, cfg.starter_budget, derive_seed(*seed, Stream::Spawn, &[]), &digest),
                    None,
                    &mut cfg.oracle(),
                )?;
                run.write("starter.jsonl", &d0.to_bytes())?;
                vec![d0]
            } else {
                data.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?
            };
            let (p, losses) = cfg.train_policy(&sets, *seed)?;
            let mut bytes = Vec::new();
            policy::write_to(&p, &mut bytes)?;
            run.write("policy.bin", &bytes)?;
            run.write_json("train.json", &json!({ "epoch_loss": losses }))?;
            Ok(json!({
                "examples": sets.iter().map(|d| d.training_examples().len()).sum::<usize>(),
                "final_loss": losses.last(),
            }))
        }
        Cmd::Collect { strategy, policy, eta, budget, seed, tracks, perturb } => {
            run.add_seeds(&[*seed]);
            let worlds = worlds_of(&world, *tracks);
            let needs_policy = matches!(strategy, Strategy::Mixing | Strategy::Uail);
            let params = match (policy, needs_policy) {
                (Some(p), _) => Some(load_policy(p)?),
                (None, true) => return Err(bad(format!("strategy {} needs --policy", strategy.name()))),
                (None, false) => None,
            };
            let calib = match (eta.as_deref(), &params) {
                (Some("calibrate"), Some(p)) => {
                    let c = calibrate(&cfg, p, &world.seen, *seed)?;
                    run.write_json("calibration.json", &c)?;
                    Some(c)
                }
                (Some("calibrate"), None) => return Err(bad("--eta calibrate needs --policy")),
                _ => None,
            };
            let agent = params.map(|p| mc_agent(&cfg, p, *seed, calib.as_ref()));
            let mut job = cfg.job(*strategy, worlds, budget.unwrap_or(cfg.batch_budget), *seed, &digest);
            if let Some(c) = &calib {
                job.params.eta = c.eta.clone();
            }
            if *perturb {
                job.perturbation = Some(cfg.world.unseen_perturbation);
            }
            if let Some(a) = &agent {
                job.uncertainty = Some(a.uncertainty_settings());
            }
            let agent_ref = agent.as_ref().map(|a| a as &dyn Agent);
            let ds = collect(job, agent_ref, &mut cfg.oracle())?;
            run.write("dataset.jsonl", &ds.to_bytes())?;
            Ok(json!({
                "strategy": strategy.name(),
                "frames": ds.n_frames(),
                "trajectories": ds.trajectories.len(),
                "collection_infraction_rate": uail_core::experiment::infraction_rate(&ds),
                "switch_rate": uail_core::experiment::switch_rate(&ds),
                "eta": ds.meta.collect.eta,
            }))
        }
        Cmd::UailLoop { seed, .. } => {
            run.add_seeds(&[*seed]);
            let d0 = collect(
                cfg.job(Strategy::Bc, &world.seen, cfg.starter_budget, derive_seed(*seed, Stream::Spawn, &[]), &digest),
                None,
                &mut cfg.oracle(),
            )?;
            let out = run_uail_loop(&cfg, &world, vec![d0], cfg.episodes, cfg.batch_budget, *seed, &digest)?;
            for (i, d) in out.datasets.iter().enumerate() {
                let name = if i == 0 { "d0.jsonl".to_string() } else { format!("episode-{}.jsonl", i - 1) };
                run.write(&name, &d.to_bytes())?;
            }
            let mut bytes = Vec::new();
            policy::write_to(&out.policy, &mut bytes)?;
            run.write("policy.bin", &bytes)?;
            run.write_json("metrics.json", &out.metrics)?;
            Ok(json!({ "episodes": out.metrics }))
        }
        Cmd::Compare { seeds } => {
            let seeds = seeds.clone().unwrap_or_else(|| cfg.seeds.clone());
            run.add_seeds(&seeds);
            let mut results = Vec::new();
            for &s in &seeds {
                let c = compare_strategies(&cfg, &world, s, &digest)?;
                run.write_json(&format!("compare-seed-{s}.json"), &c)?;
                results.push(c);
            }
            let mut table = serde_json::Map::new();
            let names = ["starter", "bc", "mixing", "noise", "uail"];
            for name in names {
                let pick = |c: &uail_core::experiment::Comparison| {
                    if name == "starter" { Some(c.starter.clone()) } else { c.get(name).cloned() }
                };
                let rows: Vec<_> = results.iter().filter_map(pick).collect();
                let success: Vec<f64> = rows.iter().map(|r| r.benchmark.success.mean).collect();
                let infr: Vec<f64> = rows.iter().map(|r| r.collection_infraction_rate).collect();
                table.insert(
                    name.into(),
                    json!({ "benchmark_success": summarize(&success), "collection_infraction_rate": summarize(&infr) }),
                );
            }
            let table = Value::Object(table);
            run.write_json("summary.json", &table)?;
            Ok(json!({ "seeds": seeds, "summary": table }))
        }
        Cmd::EvalRoc { data, seed, frames, buffers, per_command } => {
            run.add_seeds(&[*seed]);
            let sets = if data.is_empty() {
                let (_, sets) = rollout_corpus(&cfg, &world, *seed, *frames, &digest)?;
                for (i, d) in sets.iter().enumerate() {
                    run.write(&format!("corpus-{i}.jsonl"), &d.to_bytes())?;
                }
                sets
            } else {
                data.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?
            };
            let refs: Vec<&Dataset> = sets.iter().collect();
            let frames = signal_frames(&refs);
            let table = compare_signals(&frames, buffers)?;
            run.write_json("signals.json", &table)?;
            let trace = signal_trace(&frames, Signal::TotalU);
            for &k in buffers {
                run.write_json(&format!("roc-total_u-k{k}.json"), &trace_roc(&trace, k)?)?;
                if *per_command {
                    run.write_json(&format!("roc-total_u-k{k}-per-command.json"), &per_command_roc(&trace, k)?)?;
                }
            }
            Ok(json!({ "scored_frames": frames.len(), "auc": table }))
        }
        Cmd::Benchmark { policy, seeds, tracks } => {
            let seeds = seeds.clone().unwrap_or_else(|| cfg.benchmark_seeds.clone());
            run.add_seeds(&seeds);
            let suite = match tracks {
                TrackSet::Bench => world.bench.clone(),
                other => uail_core::evaluation::BenchmarkSuite {
                    name: format!("{other:?}").to_lowercase(),
                    worlds: worlds_of(&world, *other).to_vec(),
                    perturbation: matches!(other, TrackSet::Unseen).then_some(cfg.world.unseen_perturbation),
                },
            };
            let oracle = cfg.oracle();
            let loaded;
            let driver: &dyn Driver = if policy == "oracle" {
                &oracle
            } else {
                loaded = load_policy(Path::new(policy))?;
                &loaded
            };
            let report = run_benchmark(driver, &suite, &seeds, &cfg.benchmark)?;
            run.write_json("report.json", &report)?;
            Ok(json!({
                "suite": report.suite,
                "success": report.success,
                "per_turn": report.per_turn,
                "infractions": report.infractions,
                "km_per_infraction": report.km_per_infraction,
            }))
        }
        Cmd::ScenarioTable { scenario, seed, frames } => {
            run.add_seeds(&[*seed]);
            let mut loaded: Vec<(String, Vec<Dataset>)> = Vec::new();
            if scenario.is_empty() {
                let c = scenario_corpora(&cfg, &world, *seed, *frames, &digest)?;
                run.write("seen.jsonl", &c.seen.to_bytes())?;
                run.write("unseen.jsonl", &c.unseen.to_bytes())?;
                loaded.push(("seen".into(), vec![c.seen]));
                loaded.push(("unseen".into(), vec![c.unseen]));
            } else {
                for s in scenario {
                    let (name, paths) = s.split_once('=').ok_or_else(|| bad(format!("--scenario {s:?}: expected name=path[,path]")))?;
                    let sets = paths.split(',').map(|p| load_dataset(Path::new(p))).collect::<Result<Vec<_>>>()?;
                    loaded.push((name.into(), sets));
                }
            }
            let refs: Vec<(String, Vec<&Dataset>)> = loaded.iter().map(|(n, v)| (n.clone(), v.iter().collect())).collect();
            let table = scenario_medians(&refs, MIN_SCENARIO_FRAMES)?;
            run.write_json("scenario-table.json", &table)?;
            Ok(json!({ "table": table }))
        }
        Cmd::Serve { listen, strategy, policy, eta, budget, seed, session, token, tick_hz, hold_budget, tick_timeout_ms } => {
            run.add_seeds(&[*seed]);
            let needs_policy = matches!(strategy, Strategy::Mixing | Strategy::Uail);
            let params = match (policy, needs_policy) {
                (Some(p), _) => Some(load_policy(p)?),
                (None, true) => return Err(bad(format!("strategy {} needs --policy", strategy.name()))),
                (None, false) => None,
            };
            let calib = match (eta.as_deref(), &params) {
                (Some("calibrate"), Some(p)) => Some(calibrate(&cfg, p, &world.seen, *seed)?),
                (Some("calibrate"), None) => return Err(bad("--eta calibrate needs --policy")),
                _ => None,
            };
            let agent = params.map(|p| mc_agent(&cfg, p, *seed, calib.as_ref()));
            let mut job = cfg.job(*strategy, &world.seen, budget.unwrap_or(cfg.batch_budget), *seed, &digest);
            if let Some(c) = &calib {
                job.params.eta = c.eta.clone();
            }
            if let Some(a) = &agent {
                job.uncertainty = Some(a.uncertainty_settings());
            }
            let listener = std::net::TcpListener::bind(listen)?;
            eprintln!("{}", json!({ "event": "listening", "addr": listener.local_addr()?.to_string() }));
            let ws = uail_cli::accept(&listener)?;
            let (link, io) = uail_cli::bridge(ws)?;
            let sp = SessionParams {
                session: session.clone(),
                token: token.clone(),
                tick_hz: *tick_hz,
                hold_budget: *hold_budget,
                tick_timeout: Duration::from_millis(*tick_timeout_ms),
                ..SessionParams::default()
            };
            let out = run_session(job, agent.as_ref().map(|a| a as &dyn Agent), link, &sp)?;
            let _ = io.join();
            run.write("dataset.jsonl", &out.dataset.to_bytes())?;
            let mut t = Vec::new();
            out.transcript.write_to(&mut t)?;
            run.write("transcript.log", &t)?;
            Ok(json!({
                "frames": out.dataset.n_frames(),
                "end_reason": out.end_reason,
                "switched_intervals": uail_core::teleop::switched_intervals(&out.dataset).len(),
            }))
        }
        Cmd::Replay { data, policy, tol } => {
            let ds = load_dataset(data)?;
            let params = policy.as_deref().map(load_policy).transpose()?;
            let report = replay(&ds, &world.by_id(), params.as_ref(), *tol)?;
            run.write_json("replay.json", &report)?;
            Ok(json!({ "certified": true, "report": report }))
        }
        Cmd::Export { data, what } => {
            let ds = load_dataset(data)?;
            let bytes = match what {
                ExportKind::Frames => frames_csv(&ds)?,
                ExportKind::Trajectories => trajectories_csv(&ds)?,
            };
            let name = match what {
                ExportKind::Frames => "frames.csv",
                ExportKind::Trajectories => "trajectories.csv",
            };
            run.write(name, &bytes)?;
            Ok(json!({ "rows": ds.n_frames(), "file": name }))
        }
    }
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(e.to_string())
}

fn frames_csv(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "traj", "tick", "x", "y", "heading", "speed", "progress", "command", "steer", "throttle", "label_steer",
        "label_throttle", "control_mode", "combined_u", "window_sum", "switched", "infraction",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let name = |v: &Value| v.as_str().unwrap_or_default().to_string();
    for t in &ds.trajectories {
        for f in &t.frames {
            let u = f.uncertainty.as_ref();
            w.write_record([
                t.id.to_string(),
                f.tick.to_string(),
                f.pose.x.to_string(),
                f.pose.y.to_string(),
                f.pose.heading.to_string(),
                f.speed.to_string(),
                f.progress.to_string(),
                name(&json!(f.obs.command)),
                f.action.steer.to_string(),
                f.action.throttle.to_string(),
                opt(f.label.map(|l| l.steer)),
                opt(f.label.map(|l| l.throttle)),
                name(&json!(f.control_mode)),
                opt(u.map(|r| r.combined)),
                opt(u.map(|r| r.window_sum)),
                u.map(|r| r.switched.to_string()).unwrap_or_default(),
                f.infraction.map(|k| name(&json!(k))).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(csv_err)
}

fn trajectories_csv(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["traj", "track", "frames", "end", "infraction"]).map_err(csv_err)?;
    for t in &ds.trajectories {
        w.write_record([
            t.id.to_string(),
            t.track.clone(),
            t.frames.len().to_string(),
            json!(t.end).as_str().unwrap_or_default().to_string(),
            t.had_infraction().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            println!("{}", json!({ "error": e.to_string(), "exit_code": code }));
            eprintln!("error: {e}");
            ExitCode::from(code as u8)
        }
    }
}
