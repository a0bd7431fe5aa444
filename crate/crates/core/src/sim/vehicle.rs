//! Kinematic bicycle model.

use serde::{Deserialize, Serialize};

use crate::policy::Action;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    pub wheelbase: f64,
    /// Front-wheel angle at full steer, degrees.
    pub max_steer_deg: f64,
    pub a_max: f64,
    pub drag: f64,
    pub v_max: f64,
    /// Radius of the disc used for collision checks.
    pub radius: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self { wheelbase: 2.5, max_steer_deg: 30.0, a_max: 3.0, drag: 0.3, v_max: 10.0, radius: 0.9 }
    }
}

impl VehicleParams {
    pub fn max_steer(&self) -> f64 {
        self.max_steer_deg.to_radians()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Explicit Euler update. Position advances along the pre-step heading.
pub fn kinematic_step(pose: Pose, speed: f64, action: Action, dt: f64, p: &VehicleParams) -> (Pose, f64) {
    let a = action.clamped();
    let (s, c) = pose.heading.sin_cos();
    let next = Pose {
        x: pose.x + speed * c * dt,
        y: pose.y + speed * s * dt,
        heading: pose.heading + speed / p.wheelbase * (a.steer * p.max_steer()).tan() * dt,
    };
    let v = (speed + (a.throttle * p.a_max - p.drag * speed) * dt).max(0.0);
    (next, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rest_is_a_fixed_point() {
        let p = VehicleParams::default();
        let pose = Pose { x: 3.0, y: -2.0, heading: 0.7 };
        assert_eq!(kinematic_step(pose, 0.0, Action::new(0.0, 0.0), 0.05, &p), (pose, 0.0));
    }

    #[test]
    fn straight_throttle_has_no_drift() {
        let p = VehicleParams::default();
        let (mut pose, mut v) = (Pose::default(), 0.0);
        for _ in 0..200 {
            (pose, v) = kinematic_step(pose, v, Action::new(0.0, 0.8), 0.05, &p);
        }
        assert!(pose.x > 10.0 && v > 0.0);
        assert_eq!((pose.y, pose.heading), (0.0, 0.0));
    }

    #[test]
    fn speed_never_negative() {
        let p = VehicleParams { drag: 50.0, ..VehicleParams::default() };
        let (_, v) = kinematic_step(Pose::default(), 1.0, Action::new(0.0, 0.0), 0.05, &p);
        assert_eq!(v, 0.0);
    }
}
