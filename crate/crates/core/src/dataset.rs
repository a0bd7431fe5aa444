//! Line-delimited JSON dataset format.
//!
//! The first line is a header record; each trajectory is a trajectory
//! record followed by its frame records:
//!
//! ```text
//! {"type":"header","format":"uail-dataset","version":1,...}
//! {"type":"trajectory","id":0,"track":"seen-0",...,"n_frames":412}
//! {"type":"frame","tick":0,...}
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::policy::{Action, Command, Observation, TrainingExample};
use crate::sim::{InfractionKind, Perturbation, Pose};
use crate::uncertainty::{BinSpec, UncertaintyRecord};

pub const DATASET_FORMAT: &str = "uail-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Bc,
    Mixing,
    Noise,
    Uail,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Bc, Strategy::Mixing, Strategy::Noise, Strategy::Uail];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Bc => "bc",
            Strategy::Mixing => "mixing",
            Strategy::Noise => "noise",
            Strategy::Uail => "uail",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    Agent,
    Expert,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    OracleEveryframe,
    HumanInControl,
    None,
}

/// A threshold that may be infinite; infinity is written as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Threshold(pub f64);

impl Threshold {
    pub const INF: Threshold = Threshold(f64::INFINITY);
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Threshold(v)),
            Raw::Str(s) if s == "inf" => Ok(Threshold::INF),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad threshold {s:?}"))),
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "inf" {
            return Ok(Threshold::INF);
        }
        let v: f64 = s.parse().map_err(|_| Error::InvalidInput(format!("bad threshold {s:?}")))?;
        if v.is_nan() || v < 0.0 {
            return Err(Error::InvalidInput(format!("threshold must be >= 0, got {s}")));
        }
        Ok(Threshold(v))
    }
}

/// Switch threshold: a global value with optional per-command overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtaSchedule {
    pub global: Threshold,
    #[serde(default)]
    pub per_command: BTreeMap<Command, Threshold>,
}

impl EtaSchedule {
    pub fn constant(eta: f64) -> Self {
        Self { global: Threshold(eta), per_command: BTreeMap::new() }
    }

    pub fn for_command(&self, c: Command) -> f64 {
        self.per_command.get(&c).unwrap_or(&self.global).0
    }
}

/// Settings needed to recompute the stored uncertainty records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySettings {
    pub n_samples: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub window: usize,
    pub steer_bins: BinSpec,
    pub throttle_bins: BinSpec,
    pub mc_seed: u64,
    #[serde(default)]
    pub shared_masks: bool,
    /// sha256 of the policy checkpoint bytes.
    pub policy_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectSettings {
    pub budget: usize,
    pub max_episode_ticks: u64,
    pub mix_p: f64,
    pub mix_hold: u64,
    pub noise_period: u64,
    /// Noise half-width in normalized steer units.
    pub noise_bound: f64,
    pub eta: EtaSchedule,
    pub spawn_lateral: f64,
    pub spawn_heading_deg: f64,
    pub spawn_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub version: u32,
    pub strategy: Strategy,
    pub seed: u64,
    pub config_digest: String,
    pub tracks: Vec<String>,
    pub collect: CollectSettings,
    pub uncertainty: Option<UncertaintySettings>,
    pub perturbation: Option<Perturbation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spawn {
    pub s: f64,
    pub lateral: f64,
    pub heading_offset: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    RouteComplete,
    Infraction,
    TimeLimit,
    Budget,
    ExpertLost,
    /// The remote expert disconnected mid-episode.
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub tick: u64,
    pub obs: Observation,
    pub action: Action,
    pub label: Option<Action>,
    pub control_mode: ControlMode,
    pub label_source: LabelSource,
    pub uncertainty: Option<UncertaintyRecord>,
    pub infraction: Option<InfractionKind>,
    pub pose: Pose,
    pub speed: f64,
    pub progress: f64,
    /// Manual takeover outside the switch rule; excluded from training by default.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub manual_override: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub id: u64,
    pub track: String,
    pub spawn: Spawn,
    pub end: EndReason,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub track: String,
    pub spawn: Spawn,
    pub end: EndReason,
    pub frames: Vec<Frame>,
}

impl Trajectory {
    pub fn had_infraction(&self) -> bool {
        self.frames.iter().any(|f| f.infraction.is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Header(DatasetMeta),
    Trajectory(TrajectoryHeader),
    Frame(Box<Frame>),
}

fn fmt_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::DatasetFormat(format!("line {line}: {msg}"))
}

impl Dataset {
    pub fn n_frames(&self) -> usize {
        self.trajectories.iter().map(|t| t.frames.len()).sum()
    }

    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.trajectories.iter().flat_map(|t| t.frames.iter())
    }

    /// Labeled frames as supervised examples; manual overrides are skipped.
    pub fn training_examples(&self) -> Vec<TrainingExample> {
        self.frames()
            .filter(|f| !f.manual_override)
            .filter_map(|f| f.label.map(|l| TrainingExample { features: f.obs.features(), target: l }))
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let line = |w: &mut W, r: &Record| -> Result<()> {
            serde_json::to_writer(&mut *w, r).map_err(|e| Error::DatasetFormat(e.to_string()))?;
            w.write_all(b"\n")?;
            Ok(())
        };
        line(w, &Record::Header(self.meta.clone()))?;
        for t in &self.trajectories {
            let h = TrajectoryHeader {
                id: t.id,
                track: t.track.clone(),
                spawn: t.spawn,
                end: t.end,
                n_frames: t.frames.len(),
            };
            line(w, &Record::Trajectory(h))?;
            for f in &t.frames {
                line(w, &Record::Frame(Box::new(f.clone())))?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        self.write_to(&mut b).expect("in-memory write");
        b
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut meta = None;
        let mut trajectories: Vec<(usize, Trajectory)> = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let n = i + 1;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| fmt_err(n, e))?;
            match rec {
                Record::Header(m) => {
                    if meta.is_some() || n != 1 {
                        return Err(fmt_err(n, "header must be the first and only header line"));
                    }
                    if m.format != DATASET_FORMAT || m.version != DATASET_VERSION {
                        return Err(fmt_err(n, format!("unsupported dataset {}/{}", m.format, m.version)));
                    }
                    meta = Some(m);
                }
                Record::Trajectory(h) => {
                    if meta.is_none() {
                        return Err(fmt_err(n, "trajectory before header"));
                    }
                    trajectories.push((
                        h.n_frames,
                        Trajectory { id: h.id, track: h.track, spawn: h.spawn, end: h.end, frames: Vec::with_capacity(h.n_frames) },
                    ));
                }
                Record::Frame(f) => {
                    let Some((_, t)) = trajectories.last_mut() else {
                        return Err(fmt_err(n, "frame outside a trajectory"));
                    };
                    if t.frames.last().is_some_and(|p| p.tick >= f.tick) {
                        return Err(fmt_err(n, "frames must be strictly tick-ordered"));
                    }
                    t.frames.push(*f);
                }
            }
        }
        let meta = meta.ok_or_else(|| Error::DatasetFormat("missing header".into()))?;
        for (want, t) in &trajectories {
            if *want != t.frames.len() {
                return Err(Error::DatasetFormat(format!(
                    "trajectory {} declares {want} frames, holds {}",
                    t.id,
                    t.frames.len()
                )));
            }
        }
        Ok(Self { meta, trajectories: trajectories.into_iter().map(|(_, t)| t).collect() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::DatasetFormat(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Training examples pooled over several datasets, in order.
pub fn pooled_examples(sets: &[Dataset]) -> Vec<TrainingExample> {
    sets.iter().flat_map(|d| d.training_examples()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_serde() {
        assert_eq!(serde_json::to_string(&Threshold::INF).unwrap(), "\"inf\"");
        assert_eq!(serde_json::to_string(&Threshold(0.5)).unwrap(), "0.5");
        assert_eq!(serde_json::from_str::<Threshold>("\"inf\"").unwrap(), Threshold::INF);
        assert_eq!(serde_json::from_str::<Threshold>("2").unwrap(), Threshold(2.0));
        assert!(serde_json::from_str::<Threshold>("\"big\"").is_err());
        assert_eq!("inf".parse::<Threshold>().unwrap(), Threshold::INF);
        assert!("-1".parse::<Threshold>().is_err());
    }

    #[test]
    fn eta_overrides() {
        let mut e = EtaSchedule::constant(1.0);
        e.per_command.insert(Command::Left, Threshold(3.0));
        assert_eq!(e.for_command(Command::Left), 3.0);
        assert_eq!(e.for_command(Command::Right), 1.0);
    }

    #[test]
    fn reader_rejects_garbage() {
        assert!(matches!(Dataset::read_from("".as_bytes()), Err(Error::DatasetFormat(_))));
        assert!(matches!(Dataset::read_from("{\"type\":\"frame\"}\n".as_bytes()), Err(Error::DatasetFormat(_))));
    }
}
