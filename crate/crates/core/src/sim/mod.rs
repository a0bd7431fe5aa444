//! Deterministic 2D driving world.

pub mod geometry;
pub mod sensor;
pub mod track;
pub mod vehicle;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use geometry::{Circle, Polyline, Segment, Vec2};
pub use sensor::{cast_rays, Perturbation, SensorParams};
pub use track::{generate_track, Designation, RoadParams, RouteCase, Track, TrackDef, TrackSpec, Turn};
pub use vehicle::{kinematic_step, Pose, VehicleParams};

use crate::policy::{Action, Command, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub dt: f64,
    /// Route distance before a junction at which its turn command starts.
    pub approach_before: f64,
    /// Route distance past a junction at which its turn command ends.
    pub approach_after: f64,
    pub vehicle: VehicleParams,
    pub sensor: SensorParams,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 0.05,
            approach_before: 10.0,
            approach_after: 5.0,
            vehicle: VehicleParams::default(),
            sensor: SensorParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub pose: Pose,
    pub speed: f64,
    /// Unwrapped route progress in meters; grows past the lap length on
    /// closed tracks.
    pub progress: f64,
    /// Signed distance from the lane centerline, positive to the right.
    pub lateral: f64,
    pub command: Command,
    pub tick: u64,
    /// Distance driven, meters.
    pub odometer: f64,
}

impl SimState {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.pose.x, self.pose.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    OffLane,
    Collision,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Infraction {
    pub kind: InfractionKind,
    pub tick: u64,
    pub pose: Pose,
}

/// A track plus the physical constants used to drive on it.
#[derive(Debug, Clone)]
pub struct World {
    track: Arc<Track>,
    params: SimParams,
}

impl World {
    pub fn new(track: Arc<Track>, params: SimParams) -> Self {
        Self { track, params }
    }

    pub fn track(&self) -> &Track {
        &self.track
    }

    pub fn track_arc(&self) -> Arc<Track> {
        Arc::clone(&self.track)
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    /// State at route progress `s`, offset sideways and rotated from the lane
    /// tangent.
    pub fn spawn(&self, s: f64, lateral: f64, heading_offset: f64, speed: f64) -> SimState {
        let (p, d) = self.track.lane_at(s);
        let pos = p + d.right().scale(lateral);
        let mut st = SimState {
            pose: Pose { x: pos.x, y: pos.y, heading: d.heading() + heading_offset },
            speed,
            progress: s,
            lateral,
            command: Command::Follow,
            tick: 0,
            odometer: 0.0,
        };
        st.command = self.command_at(s);
        st
    }

    /// Turn command whose approach zone contains `progress`, else follow.
    pub fn command_at(&self, progress: f64) -> Command {
        let t = &self.track;
        for (node, &ns) in t.nodes().iter().zip(t.node_s()) {
            let d = t.route_delta(ns, t.wrap_s(progress));
            if d >= -self.params.approach_before && d <= self.params.approach_after {
                return node.turn.command();
            }
        }
        Command::Follow
    }

    pub fn step(&self, state: &SimState, action: Action) -> SimState {
        let dt = self.params.dt;
        let (pose, speed) = kinematic_step(state.pose, state.speed, action, dt, &self.params.vehicle);
        let pos = Vec2::new(pose.x, pose.y);
        let hint = self.track.wrap_s(state.progress);
        let (s, lateral) = self.track.project(pos, hint);
        let progress = state.progress + self.track.route_delta(hint, s);
        SimState {
            pose,
            speed,
            progress,
            lateral,
            command: self.command_at(progress),
            tick: state.tick + 1,
            odometer: state.odometer + state.speed * dt,
        }
    }

    pub fn observe(&self, state: &SimState) -> Observation {
        let p = &self.params;
        Observation {
            rays: cast_rays(&self.track, state.position(), state.pose.heading, &p.sensor),
            speed: (state.speed / p.vehicle.v_max).clamp(0.0, 1.0),
            command: state.command,
        }
    }

    /// Observation with rays corrupted by `perturb`, keyed on `(seed, key, tick)`.
    pub fn observe_perturbed(&self, state: &SimState, perturb: &Perturbation, seed: u64, key: u64) -> Observation {
        let mut obs = self.observe(state);
        perturb.apply(&mut obs.rays, seed, key, state.tick);
        obs
    }

    /// Current violation, if any, without edge triggering.
    pub fn violation(&self, state: &SimState) -> Option<InfractionKind> {
        if state.lateral.abs() > self.track.road().lane_half_width {
            return Some(InfractionKind::OffLane);
        }
        let pos = state.position();
        let r = self.params.vehicle.radius;
        if self.track.obstacles().iter().any(|o| o.center.dist(pos) < o.radius + r) {
            return Some(InfractionKind::Collision);
        }
        None
    }
}

/// Emits one infraction per contiguous run of violating states.
#[derive(Debug, Clone, Default)]
pub struct InfractionMonitor {
    active: Option<InfractionKind>,
}

impl InfractionMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.active = None;
    }

    pub fn update(&mut self, world: &World, state: &SimState) -> Option<Infraction> {
        let now = world.violation(state);
        let fire = now.is_some() && self.active.is_none();
        self.active = now;
        fire.then(|| Infraction { kind: now.unwrap(), tick: state.tick, pose: state.pose })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use track::{generate_track, Designation, TrackSpec};

    fn straight_world() -> World {
        let spec = TrackSpec { left: 0, right: 0, straight: 1, obstacle_density: 0.0, ..TrackSpec::default() };
        World::new(Arc::new(generate_track(&spec, 0, "s", Designation::Seen).unwrap()), SimParams::default())
    }

    #[test]
    fn centered_pose_has_no_infraction() {
        let w = straight_world();
        let st = w.spawn(10.0, 0.0, 0.0, 0.0);
        assert_eq!(w.violation(&st), None);
        assert_eq!(InfractionMonitor::new().update(&w, &st), None);
    }

    #[test]
    fn off_lane_boundary() {
        let w = straight_world();
        let hw = w.track().road().lane_half_width;
        let inside = w.step(&w.spawn(10.0, hw - 0.01, 0.0, 0.0), Action::default());
        assert_eq!(w.violation(&inside), None);
        let out = w.step(&w.spawn(10.0, hw + 0.01, 0.0, 0.0), Action::default());
        assert_eq!(w.violation(&out), Some(InfractionKind::OffLane));
        let out_left = w.step(&w.spawn(10.0, -hw - 0.01, 0.0, 0.0), Action::default());
        assert_eq!(w.violation(&out_left), Some(InfractionKind::OffLane));
    }

    #[test]
    fn monitor_is_edge_triggered() {
        let w = straight_world();
        let hw = w.track().road().lane_half_width;
        let mut m = InfractionMonitor::new();
        let bad = w.step(&w.spawn(10.0, hw + 0.5, 0.0, 0.0), Action::default());
        let good = w.step(&w.spawn(10.0, 0.0, 0.0, 0.0), Action::default());
        assert!(m.update(&w, &bad).is_some());
        assert!(m.update(&w, &bad).is_none());
        assert!(m.update(&w, &good).is_none());
        assert!(m.update(&w, &bad).is_some());
    }

    #[test]
    fn commands_follow_approach_zones() {
        let spec = TrackSpec { left: 1, right: 0, straight: 0, obstacle_density: 0.0, ..TrackSpec::default() };
        let w = World::new(Arc::new(generate_track(&spec, 0, "l", Designation::Seen).unwrap()), SimParams::default());
        let ns = w.track().node_s()[0];
        assert_eq!(w.command_at(ns - 10.5), Command::Follow);
        assert_eq!(w.command_at(ns - 9.5), Command::Left);
        assert_eq!(w.command_at(ns + 4.5), Command::Left);
        assert_eq!(w.command_at(ns + 5.5), Command::Follow);
    }
}
