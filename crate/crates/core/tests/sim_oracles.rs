use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uail_core::expert::Oracle;
use uail_core::policy::{Action, Command};
use uail_core::sim::{generate_track, kinematic_step, Designation, Pose, SimParams, Track, TrackSpec, Turn, VehicleParams, World};

/// Smallest `t >= 0` with `o + t d` on segment `ab`, by Cramer's rule on
/// `t d - u (b - a) = a - o`.
fn hit_segment(o: (f64, f64), d: (f64, f64), a: (f64, f64), b: (f64, f64)) -> Option<f64> {
    let (ex, ey) = (b.0 - a.0, b.1 - a.1);
    let det = d.0 * -ey - (-ex) * d.1;
    if det.abs() < 1e-15 {
        return None;
    }
    let (rx, ry) = (a.0 - o.0, a.1 - o.1);
    let t = (rx * -ey - (-ex) * ry) / det;
    let u = (d.0 * ry - d.1 * rx) / det;
    (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
}

fn hit_circle(o: (f64, f64), d: (f64, f64), c: (f64, f64), r: f64) -> Option<f64> {
    let (px, py) = (o.0 - c.0, o.1 - c.1);
    if px * px + py * py <= r * r {
        return Some(0.0);
    }
    // t^2 + 2 b t + cc = 0 with |d| = 1
    let b = px * d.0 + py * d.1;
    let cc = px * px + py * py - r * r;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

#[test]
fn rays_match_a_brute_force_intersection_oracle() {
    let spec = TrackSpec { obstacle_density: 3.0, ..TrackSpec::default() };
    let track = Arc::new(generate_track(&spec, 5, "g", Designation::Seen).unwrap());
    let w = World::new(Arc::clone(&track), SimParams::default());
    let sp = w.params().sensor;
    let mut r = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..50 {
        let s = r.random_range(0.0..track.lane_length());
        let st = w.spawn(s, r.random_range(-1.8..1.8), r.random_range(-0.6..0.6), 0.0);
        let got = w.observe(&st).rays;
        let o = (st.pose.x, st.pose.y);
        for (k, g) in got.iter().enumerate() {
            let ang = st.pose.heading - sp.fov_deg.to_radians() / 2.0 + sp.fov_deg.to_radians() * k as f64 / (sp.n_rays - 1) as f64;
            let d = (ang.cos(), ang.sin());
            let mut best = sp.max_range;
            for seg in track.walls() {
                if let Some(t) = hit_segment(o, d, (seg.a.x, seg.a.y), (seg.b.x, seg.b.y)) {
                    best = best.min(t);
                }
            }
            for c in track.obstacles() {
                if let Some(t) = hit_circle(o, d, (c.center.x, c.center.y), c.radius) {
                    best = best.min(t);
                }
            }
            assert!((g - best / sp.max_range).abs() < 1e-9, "ray {k}: {g} vs {}", best / sp.max_range);
        }
    }
}

#[test]
fn constant_steer_traces_the_bicycle_circle() {
    let p = VehicleParams::default();
    let (v, steer, dt) = (5.0, 0.4, 0.01);
    let throttle = p.drag * v / p.a_max;
    let mut pose = Pose { x: 1.0, y: -2.0, heading: 0.3 };
    let mut speed = v;
    let mut pts = vec![(pose.x, pose.y)];
    for _ in 0..100 {
        (pose, speed) = kinematic_step(pose, speed, Action::new(steer, throttle), dt, &p);
        pts.push((pose.x, pose.y));
    }
    assert!((speed - v).abs() < 1e-12);
    // circumcircle of first, middle and last points
    let (a, b, c) = (pts[0], pts[50], pts[100]);
    let dd = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
    let sq = |q: (f64, f64)| q.0 * q.0 + q.1 * q.1;
    let ux = (sq(a) * (b.1 - c.1) + sq(b) * (c.1 - a.1) + sq(c) * (a.1 - b.1)) / dd;
    let uy = (sq(a) * (c.0 - b.0) + sq(b) * (a.0 - c.0) + sq(c) * (b.0 - a.0)) / dd;
    let want = p.wheelbase / (steer * p.max_steer()).tan();
    for q in &pts {
        let r = ((q.0 - ux).powi(2) + (q.1 - uy).powi(2)).sqrt();
        assert!((r - want).abs() / want < 0.01, "radius {r} vs {want}");
    }
}

#[test]
fn straight_corridor_rays_are_symmetric() {
    let spec = TrackSpec { left: 0, right: 0, straight: 1, obstacle_density: 0.0, ..TrackSpec::default() };
    let w = World::new(Arc::new(generate_track(&spec, 2, "c", Designation::Seen).unwrap()), SimParams::default());
    // lane centers sit to the right of the road center; a road-centered pose is symmetric
    let off = -w.track().road().lane_offset;
    let rays = w.observe(&w.spawn(5.0, off, 0.0, 0.0)).rays;
    let n = rays.len();
    for k in 0..n / 2 {
        assert!((rays[k] - rays[n - 1 - k]).abs() < 1e-9, "{rays:?}");
    }
}

#[test]
fn route_commands_follow_the_hand_trace() {
    let spec = TrackSpec { left: 1, right: 1, straight: 0, obstacle_density: 0.0, ..TrackSpec::default() };
    let track = generate_track(&spec, 3, "r", Designation::Seen).unwrap();
    let turns: Vec<Turn> = track.nodes().iter().map(|n| n.turn).collect();
    let node_s = track.node_s().to_vec();
    let w = World::new(Arc::new(track), SimParams::default());
    let (before, after) = (w.params().approach_before, w.params().approach_after);
    let o = Oracle::default();
    let mut st = w.spawn(0.0, 0.0, 0.0, 0.0);
    let mut seen: Vec<(Command, f64)> = vec![(st.command, st.progress)];
    let end = w.track().lane_length() - 1.0;
    while st.progress < end {
        st = w.step(&st, o.action(&w, &st).unwrap());
        if st.command != seen.last().unwrap().0 {
            seen.push((st.command, st.progress));
        }
    }
    let mut expected = vec![Command::Follow];
    for t in &turns {
        expected.push(t.command());
        expected.push(Command::Follow);
    }
    let cmds: Vec<Command> = seen.iter().map(|x| x.0).collect();
    assert_eq!(cmds, expected);
    // each switch happens within one step of its zone edge
    let step = 0.6;
    for (i, s) in node_s.iter().enumerate() {
        let on = seen[1 + 2 * i].1;
        let off = seen[2 + 2 * i].1;
        assert!(on >= s - before && on < s - before + step, "zone {i} starts at {on}, node at {s}");
        assert!(off > s + after && off <= s + after + step, "zone {i} ends at {off}, node at {s}");
    }
}

#[test]
fn oval_lap_under_the_oracle_is_clean() {
    let w = World::new(Arc::new(Track::oval("o", 60.0, Default::default()).unwrap()), SimParams::default());
    let o = Oracle::default();
    let mut mon = uail_core::sim::InfractionMonitor::new();
    let mut st = w.spawn(0.0, 0.0, 0.0, 0.0);
    for _ in 0..2000 {
        st = w.step(&st, o.action(&w, &st).unwrap());
        assert!(mon.update(&w, &st).is_none(), "infraction at tick {}", st.tick);
    }
}
