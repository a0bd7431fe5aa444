//! Expert action sources: a scripted pure-pursuit oracle and a remote
//! human feeding controls through a mailbox.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Action, Command};
use crate::sim::geometry::{wrap_angle, Vec2};
use crate::sim::{SimState, World};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    /// Lookahead per m/s of speed.
    pub k_v: f64,
    pub lookahead_min: f64,
    pub lookahead_max: f64,
    pub v_ref: f64,
    /// Reference speed while a turn command is active.
    pub v_turn: f64,
    pub speed_gain: f64,
    /// Lateral distance from the route beyond which the oracle gives up.
    pub lost_distance: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            k_v: 0.8,
            lookahead_min: 3.0,
            lookahead_max: 8.0,
            v_ref: 6.0,
            v_turn: 4.5,
            speed_gain: 0.5,
            lost_distance: 10.0,
        }
    }
}

/// Pure pursuit on the lane centerline with a proportional speed governor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Oracle {
    pub params: OracleParams,
}

impl Oracle {
    pub fn new(params: OracleParams) -> Self {
        Self { params }
    }

    pub fn action(&self, world: &World, state: &SimState) -> Result<Action> {
        let p = &self.params;
        if state.lateral.abs() > p.lost_distance {
            return Err(Error::ExpertLost(format!(
                "tick {}: {:.2} m from route",
                state.tick, state.lateral
            )));
        }
        let veh = &world.params().vehicle;
        let look = (p.k_v * state.speed).clamp(p.lookahead_min, p.lookahead_max);
        let (target, _) = world.track().lane_at(state.progress + look);
        let to = target - Vec2::new(state.pose.x, state.pose.y);
        let ld = to.norm().max(1e-6);
        let alpha = wrap_angle(to.heading() - state.pose.heading);
        let delta = (2.0 * veh.wheelbase * alpha.sin() / ld).atan();
        let steer = (delta / veh.max_steer()).clamp(-1.0, 1.0);
        let v_ref = match state.command {
            Command::Left | Command::Right => p.v_turn,
            _ => p.v_ref,
        };
        let throttle = (veh.drag * state.speed / veh.a_max + p.speed_gain * (v_ref - state.speed)).clamp(0.0, 1.0);
        Ok(Action::new(steer, throttle))
    }
}

#[derive(Debug, Default)]
struct Slot {
    seq: u64,
    /// Sim tick the sender meant the input for.
    tick: u64,
    action: Option<Action>,
    closed: bool,
}

/// Latest-value mailbox between a network receiver and the sim loop.
#[derive(Debug, Default)]
pub struct ControlMailbox {
    slot: Mutex<Slot>,
    cv: Condvar,
}

impl ControlMailbox {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Publishes a control input, replacing any unread one.
    pub fn post(&self, action: Action) {
        self.post_for(0, action);
    }

    /// Publishes an input addressed to sim tick `tick`.
    pub fn post_for(&self, tick: u64, action: Action) {
        let mut s = self.slot.lock().unwrap();
        s.seq += 1;
        s.tick = tick;
        s.action = Some(action);
        self.cv.notify_all();
    }

    /// Marks the sender as gone; readers see no further input.
    pub fn close(&self) {
        self.slot.lock().unwrap().closed = true;
        self.cv.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.slot.lock().unwrap().closed
    }

    /// Waits up to `timeout` for an input newer than `after` that is
    /// addressed to tick `want` or later.
    pub fn wait_newer(&self, after: u64, want: u64, timeout: Duration) -> Option<(u64, Action)> {
        let guard = self.slot.lock().unwrap();
        let fresh = |s: &Slot| s.seq > after && s.tick >= want;
        let (s, _) = self.cv.wait_timeout_while(guard, timeout, |s| !fresh(s) && !s.closed).unwrap();
        fresh(&s).then(|| (s.seq, s.action.expect("posted input")))
    }
}

/// Human expert behind a mailbox with a zero-order hold.
#[derive(Debug)]
pub struct RemoteExpert {
    pub session: String,
    mailbox: Arc<ControlMailbox>,
    seen: u64,
    last: Option<Action>,
    missed: u32,
    want: u64,
    /// Consecutive ticks an input may be held before pausing.
    pub hold_budget: u32,
    pub tick_timeout: Duration,
}

impl RemoteExpert {
    pub fn new(session: impl Into<String>, mailbox: Arc<ControlMailbox>, hold_budget: u32, tick_timeout: Duration) -> Self {
        Self { session: session.into(), mailbox, seen: 0, last: None, missed: 0, want: 0, hold_budget, tick_timeout }
    }

    /// Whether the session has delivered input and is still connected.
    pub fn is_live(&self) -> bool {
        !self.mailbox.is_closed()
    }

    /// Only inputs addressed to `tick` or later count as fresh from now on.
    pub fn expect_tick(&mut self, tick: u64) {
        self.want = tick;
    }

    /// Input for the current tick. Fresh input passes through; a missing
    /// one repeats the previous input until the hold budget runs out.
    pub fn action(&mut self) -> Result<Action> {
        if let Some((seq, a)) = self.mailbox.wait_newer(self.seen, self.want, self.tick_timeout) {
            self.seen = seq;
            self.last = Some(a);
            self.missed = 0;
            return Ok(a);
        }
        if self.mailbox.is_closed() {
            return Err(Error::Paused(format!("session {} disconnected", self.session)));
        }
        self.missed += 1;
        match self.last {
            Some(a) if self.missed <= self.hold_budget => Ok(a),
            _ => Err(Error::Paused(format!(
                "session {}: no input for {} ticks",
                self.session, self.missed
            ))),
        }
    }

    /// Clears the miss counter after a pause is resolved.
    pub fn resume(&mut self) {
        self.missed = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_track, Designation, SimParams, TrackSpec};

    fn straight() -> World {
        let spec = TrackSpec { left: 0, right: 0, straight: 1, obstacle_density: 0.0, ..TrackSpec::default() };
        World::new(Arc::new(generate_track(&spec, 0, "s", Designation::Seen).unwrap()), SimParams::default())
    }

    #[test]
    fn centered_and_aligned_means_zero_steer() {
        let w = straight();
        let a = Oracle::default().action(&w, &w.spawn(20.0, 0.0, 0.0, 5.0)).unwrap();
        assert_eq!(a.steer, 0.0);
        assert!(a.in_bounds());
    }

    #[test]
    fn left_offset_steers_right() {
        let w = straight();
        let a = Oracle::default().action(&w, &w.spawn(20.0, -1.0, 0.0, 5.0)).unwrap();
        assert!(a.steer > 0.0);
        let a = Oracle::default().action(&w, &w.spawn(20.0, 1.0, 0.0, 5.0)).unwrap();
        assert!(a.steer < 0.0);
    }

    #[test]
    fn far_from_route_is_lost() {
        let w = straight();
        let mut st = w.spawn(20.0, 0.0, 0.0, 5.0);
        st.lateral = 12.0;
        assert!(matches!(Oracle::default().action(&w, &st), Err(Error::ExpertLost(_))));
    }

    #[test]
    fn remote_hold_and_pause() {
        let mb = ControlMailbox::new();
        let mut r = RemoteExpert::new("s", Arc::clone(&mb), 2, Duration::from_millis(1));
        assert!(matches!(r.action(), Err(Error::Paused(_))), "nothing held yet");
        mb.post(Action::new(0.3, 0.5));
        assert_eq!(r.action().unwrap(), Action::new(0.3, 0.5));
        mb.post(Action::new(-0.2, 0.1));
        assert_eq!(r.action().unwrap(), Action::new(-0.2, 0.1));
        assert_eq!(r.action().unwrap(), Action::new(-0.2, 0.1));
        assert_eq!(r.action().unwrap(), Action::new(-0.2, 0.1));
        assert!(matches!(r.action(), Err(Error::Paused(_))));
        mb.post(Action::new(0.0, 0.0));
        r.resume();
        assert_eq!(r.action().unwrap(), Action::new(0.0, 0.0));
        mb.close();
        assert!(!r.is_live());
        assert!(matches!(r.action(), Err(Error::Paused(_))));
    }

    #[test]
    fn inputs_for_earlier_ticks_are_stale() {
        let mb = ControlMailbox::new();
        let mut r = RemoteExpert::new("s", Arc::clone(&mb), 1, Duration::from_millis(1));
        mb.post_for(3, Action::new(0.1, 0.2));
        r.expect_tick(3);
        assert_eq!(r.action().unwrap(), Action::new(0.1, 0.2));
        mb.post_for(3, Action::new(0.9, 0.9));
        r.expect_tick(4);
        // the late input for tick 3 is not taken; the held one is repeated
        assert_eq!(r.action().unwrap(), Action::new(0.1, 0.2));
        mb.post_for(4, Action::new(-0.4, 0.3));
        assert_eq!(r.action().unwrap(), Action::new(-0.4, 0.3));
    }

    fn drive(w: &World, mut st: SimState, ticks: usize, until: f64) -> (usize, SimState) {
        let o = Oracle::default();
        let mut mon = crate::sim::InfractionMonitor::new();
        let mut n = 0;
        for _ in 0..ticks {
            st = w.step(&st, o.action(w, &st).unwrap());
            n += usize::from(mon.update(w, &st).is_some());
            if st.progress >= until {
                break;
            }
        }
        (n, st)
    }

    #[test]
    fn oracle_laps_the_oval_cleanly() {
        let w = World::new(Arc::new(crate::sim::Track::oval("o", 60.0, Default::default()).unwrap()), SimParams::default());
        let (n, st) = drive(&w, w.spawn(0.0, 0.0, 0.0, 0.0), 2000, f64::INFINITY);
        assert_eq!(n, 0);
        assert!(st.progress > w.track().lane_length(), "completed a lap: {}", st.progress);
    }

    #[test]
    fn oracle_drives_generated_routes_cleanly() {
        for seed in 0..3 {
            let spec = TrackSpec { obstacle_density: 2.0, ..TrackSpec::default() };
            let w = World::new(Arc::new(generate_track(&spec, seed, "g", Designation::Seen).unwrap()), SimParams::default());
            let len = w.track().lane_length();
            let (n, st) = drive(&w, w.spawn(0.0, 0.0, 0.0, 0.0), 20_000, len - 1.0);
            assert_eq!(n, 0, "seed {seed}");
            assert!(st.progress >= len - 1.0);
        }
    }
}
