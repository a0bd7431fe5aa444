//! Ray-fan range sensor and its optional corruption.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometry::{ray_circle, ray_segment, Vec2};
use super::track::Track;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorParams {
    pub n_rays: usize,
    /// Total fan width, degrees, centered on the heading.
    pub fov_deg: f64,
    pub max_range: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self { n_rays: 15, fov_deg: 180.0, max_range: 25.0 }
    }
}

impl SensorParams {
    /// Bearing of ray `k` relative to the heading; positive is to the right.
    pub fn bearing(&self, k: usize) -> f64 {
        let fov = self.fov_deg.to_radians();
        if self.n_rays == 1 {
            return 0.0;
        }
        -fov / 2.0 + fov * k as f64 / (self.n_rays - 1) as f64
    }
}

/// Additive ray noise and random dropouts (a dropped ray reads max range).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Perturbation {
    pub ray_noise_sigma: f64,
    pub ray_dropout: f64,
}

impl Perturbation {
    pub fn is_none(&self) -> bool {
        self.ray_noise_sigma == 0.0 && self.ray_dropout == 0.0
    }

    /// Corrupts normalized rays in place; draws depend only on `(seed, key, tick)`.
    pub fn apply(&self, rays: &mut [f64], seed: u64, key: u64, tick: u64) {
        if self.is_none() {
            return;
        }
        let mut rng = rng::stream(seed, Stream::Perturb, &[key, tick]);
        let normal = Normal::new(0.0, self.ray_noise_sigma.max(0.0)).expect("finite sigma");
        for r in rays.iter_mut() {
            let noise = normal.sample(&mut rng);
            let dropped = rng.random::<f64>() < self.ray_dropout;
            *r = if dropped { 1.0 } else { (*r + noise).clamp(0.0, 1.0) };
        }
    }
}

/// Normalized distances along each ray to the nearest wall or obstacle.
pub fn cast_rays(track: &Track, origin: Vec2, heading: f64, p: &SensorParams) -> Vec<f64> {
    let walls: Vec<_> = track.walls_near(origin, p.max_range).collect();
    (0..p.n_rays)
        .map(|k| {
            let dir = Vec2::from_heading(heading + p.bearing(k));
            let mut best = p.max_range;
            for w in &walls {
                if let Some(t) = ray_segment(origin, dir, w) {
                    best = best.min(t);
                }
            }
            for o in track.obstacles() {
                if let Some(t) = ray_circle(origin, dir, o) {
                    best = best.min(t);
                }
            }
            best / p.max_range
        })
        .collect()
}
