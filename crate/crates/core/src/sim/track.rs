//! Lane-graph tracks: a route threaded through four-way junctions.
//!
//! Roads are two lanes wide. The ego lane is the right-hand one, so the
//! route centerline sits `lane_offset` to the right of the road centerline
//! and crossing it to the left means entering the opposite lane. Junction
//! curbs are rounded with quarter-circle fillets; turning lanes are arcs
//! that keep a full lane half-width from the curbs.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{Circle, Polyline, Segment, Vec2};
use crate::error::{Error, Result};
use crate::policy::Command;
use crate::rng::{self, Stream};

pub const TRACK_FORMAT: &str = "uail-track";
pub const TRACK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    Left,
    Right,
    Straight,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Left, Turn::Right, Turn::Straight];

    pub fn command(self) -> Command {
        match self {
            Turn::Left => Command::Left,
            Turn::Right => Command::Right,
            Turn::Straight => Command::Straight,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Turn::Left => "left",
            Turn::Right => "right",
            Turn::Straight => "straight",
        }
    }

    /// Quarter-turn change in heading (positive = right).
    fn quarter_turns(self) -> i32 {
        match self {
            Turn::Left => -1,
            Turn::Right => 1,
            Turn::Straight => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Designation {
    Seen,
    Unseen,
}

/// Axis direction, `k * 90deg` clockwise from `+x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dir4(pub u8);

impl Dir4 {
    pub fn vec(self) -> Vec2 {
        match self.0 % 4 {
            0 => Vec2::new(1.0, 0.0),
            1 => Vec2::new(0.0, 1.0),
            2 => Vec2::new(-1.0, 0.0),
            _ => Vec2::new(0.0, -1.0),
        }
    }

    pub fn heading(self) -> f64 {
        (self.0 % 4) as f64 * FRAC_PI_2
    }

    pub fn rotate(self, quarter_turns: i32) -> Self {
        Dir4(((self.0 as i32 + quarter_turns).rem_euclid(4)) as u8)
    }
}

/// Fixed cross-section and clearance constants of the road network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoadParams {
    pub road_half_width: f64,
    /// Ego-lane centerline offset to the right of the road centerline.
    pub lane_offset: f64,
    pub lane_half_width: f64,
    pub fillet_radius: f64,
    pub stub_length: f64,
    pub obstacle_radius: f64,
    /// Obstacle center offset to the right of the road centerline.
    pub obstacle_offset: f64,
}

impl Default for RoadParams {
    fn default() -> Self {
        Self {
            road_half_width: 4.0,
            lane_offset: 2.0,
            lane_half_width: 2.0,
            fillet_radius: 4.0,
            stub_length: 20.0,
            obstacle_radius: 0.6,
            obstacle_offset: 4.2,
        }
    }
}

impl RoadParams {
    /// Distance from a junction center to where its fillets meet the arms.
    pub fn junction_reach(&self) -> f64 {
        self.road_half_width + self.fillet_radius
    }

    fn right_turn_radius(&self) -> f64 {
        self.junction_reach() - self.lane_offset
    }

    fn left_turn_radius(&self) -> f64 {
        self.road_half_width + self.lane_offset
    }
}

/// Recipe for a generated track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackSpec {
    pub left: usize,
    pub right: usize,
    pub straight: usize,
    /// Junction-to-junction distance range in meters.
    pub leg_min: f64,
    pub leg_max: f64,
    /// Expected obstacles per 100 m of usable leg.
    pub obstacle_density: f64,
    pub road: RoadParams,
}

impl Default for TrackSpec {
    fn default() -> Self {
        Self {
            left: 4,
            right: 4,
            straight: 4,
            leg_min: 45.0,
            leg_max: 70.0,
            obstacle_density: 1.0,
            road: RoadParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub center: Vec2,
    pub incoming: Dir4,
    pub turn: Turn,
    /// Whether the arms the route does not use are open roads.
    pub stubs: bool,
}

impl Node {
    pub fn outgoing(&self) -> Dir4 {
        self.incoming.rotate(self.turn.quarter_turns())
    }
}

/// One benchmark case: drive the route from `start_s` to `end_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteCase {
    pub node: usize,
    pub turn: Turn,
    pub start_s: f64,
    pub end_s: f64,
}

/// Serializable definition of a track; geometry is derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackDef {
    pub format: String,
    pub version: u32,
    pub id: String,
    pub designation: Designation,
    pub road: RoadParams,
    pub start: Vec2,
    pub start_dir: Dir4,
    pub nodes: Vec<Node>,
    /// Length of the leg after the last node; ignored for closed tracks.
    pub final_leg: f64,
    pub closed: bool,
    pub obstacles: Vec<Circle>,
    /// Distance before / after a junction covered by each route case.
    pub case_before: f64,
    pub case_after: f64,
}

/// A track with its derived lane, walls and spatial index.
#[derive(Debug, Clone)]
pub struct Track {
    def: TrackDef,
    lane: Polyline,
    node_s: Vec<f64>,
    walls: Vec<Segment>,
    grid: WallGrid,
    cases: Vec<RouteCase>,
}

const GRID_CELL: f64 = 10.0;

#[derive(Debug, Clone, Default)]
struct WallGrid {
    cells: HashMap<(i64, i64), Vec<u32>>,
}

impl WallGrid {
    fn cell(v: f64) -> i64 {
        (v / GRID_CELL).floor() as i64
    }

    fn build(walls: &[Segment]) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, w) in walls.iter().enumerate() {
            let (x0, x1) = (Self::cell(w.a.x.min(w.b.x)), Self::cell(w.a.x.max(w.b.x)));
            let (y0, y1) = (Self::cell(w.a.y.min(w.b.y)), Self::cell(w.a.y.max(w.b.y)));
            for cx in x0..=x1 {
                for cy in y0..=y1 {
                    cells.entry((cx, cy)).or_default().push(i as u32);
                }
            }
        }
        Self { cells }
    }

    fn query(&self, c: Vec2, r: f64) -> Vec<u32> {
        let mut out = Vec::new();
        for cx in Self::cell(c.x - r)..=Self::cell(c.x + r) {
            for cy in Self::cell(c.y - r)..=Self::cell(c.y + r) {
                if let Some(v) = self.cells.get(&(cx, cy)) {
                    out.extend_from_slice(v);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn arc_points(center: Vec2, from: Vec2, sweep: f64, steps: usize) -> Vec<Vec2> {
    let r = from - center;
    (1..=steps)
        .map(|k| {
            let (s, c) = (sweep * k as f64 / steps as f64).sin_cos();
            center + Vec2::new(r.x * c - r.y * s, r.x * s + r.y * c)
        })
        .collect()
}

const ARC_STEPS: usize = 24;
const FILLET_STEPS: usize = 8;

impl Track {
    pub fn from_def(def: TrackDef) -> Result<Self> {
        if def.format != TRACK_FORMAT || def.version != TRACK_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported track document {}/{}",
                def.format, def.version
            )));
        }
        if def.nodes.is_empty() {
            return Err(Error::InvalidInput("track needs at least one junction".into()));
        }
        let (lane, node_s) = build_lane(&def);
        let lane_end = *lane.points().last().expect("non-empty lane");
        let walls = build_walls(&def, lane_end);
        let grid = WallGrid::build(&walls);
        let len = lane.length();
        let cases = def
            .nodes
            .iter()
            .zip(&node_s)
            .enumerate()
            .map(|(i, (n, &s))| RouteCase {
                node: i,
                turn: n.turn,
                start_s: (s - def.case_before).max(0.0),
                end_s: (s + def.case_after).min(len),
            })
            .collect();
        Ok(Self { def, lane, node_s, walls, grid, cases })
    }

    pub fn def(&self) -> &TrackDef {
        &self.def
    }

    pub fn id(&self) -> &str {
        &self.def.id
    }

    pub fn designation(&self) -> Designation {
        self.def.designation
    }

    pub fn road(&self) -> &RoadParams {
        &self.def.road
    }

    pub fn is_closed(&self) -> bool {
        self.def.closed
    }

    pub fn lane(&self) -> &Polyline {
        &self.lane
    }

    pub fn lane_length(&self) -> f64 {
        self.lane.length()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.def.nodes
    }

    /// Route arc length at which each junction is crossed.
    pub fn node_s(&self) -> &[f64] {
        &self.node_s
    }

    pub fn walls(&self) -> &[Segment] {
        &self.walls
    }

    pub fn obstacles(&self) -> &[Circle] {
        &self.def.obstacles
    }

    pub fn cases(&self) -> &[RouteCase] {
        &self.cases
    }

    pub fn turn_counts(&self) -> HashMap<Turn, usize> {
        let mut m = HashMap::new();
        for n in &self.def.nodes {
            *m.entry(n.turn).or_insert(0) += 1;
        }
        m
    }

    /// Wall segments that may lie within `r` of `c`.
    pub fn walls_near(&self, c: Vec2, r: f64) -> impl Iterator<Item = &Segment> {
        self.grid.query(c, r).into_iter().map(move |i| &self.walls[i as usize])
    }

    /// Wraps an arc length onto a closed route.
    pub fn wrap_s(&self, s: f64) -> f64 {
        if self.def.closed {
            s.rem_euclid(self.lane.length())
        } else {
            s
        }
    }

    /// Signed route distance from `from` to `to`, shortest way round on
    /// closed routes.
    pub fn route_delta(&self, from: f64, to: f64) -> f64 {
        let d = to - from;
        if self.def.closed {
            let len = self.lane.length();
            let d = d.rem_euclid(len);
            if d > len / 2.0 {
                d - len
            } else {
                d
            }
        } else {
            d
        }
    }

    /// Lane point and tangent at route arc length `s`.
    pub fn lane_at(&self, s: f64) -> (Vec2, Vec2) {
        self.lane.at(self.wrap_s(s))
    }

    /// Projects `p` onto the lane near `s_hint`. Returns `(s, lateral)`,
    /// lateral positive to the right.
    pub fn project(&self, p: Vec2, s_hint: f64) -> (f64, f64) {
        let (lo, hi) = (s_hint - 6.0, s_hint + 10.0);
        let len = self.lane.length();
        if !self.def.closed || (lo >= 0.0 && hi <= len) {
            return self.lane.project_window(p, lo, hi);
        }
        let a = self.lane.project_window(p, lo.rem_euclid(len).min(len), len);
        let b = self.lane.project_window(p, 0.0, hi.rem_euclid(len));
        if a.1.abs() <= b.1.abs() {
            a
        } else {
            b
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.def).map_err(|e| Error::InvalidInput(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let def: TrackDef =
            serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        Self::from_def(def)
    }

    /// Closed loop of four right-hand corners with no side roads.
    pub fn oval(id: &str, side: f64, road: RoadParams) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut pos = Vec2::new(side / 2.0, 0.0);
        let mut dir = Dir4(0);
        for _ in 0..4 {
            nodes.push(Node { center: pos, incoming: dir, turn: Turn::Right, stubs: false });
            dir = dir.rotate(1);
            pos = pos + dir.vec().scale(side);
        }
        Self::from_def(TrackDef {
            format: TRACK_FORMAT.into(),
            version: TRACK_VERSION,
            id: id.into(),
            designation: Designation::Seen,
            road,
            start: Vec2::default(),
            start_dir: Dir4(0),
            nodes,
            final_leg: 0.0,
            closed: true,
            obstacles: Vec::new(),
            case_before: 30.0,
            case_after: 25.0,
        })
    }
}

/// Lane polyline and the arc length at each junction crossing.
fn build_lane(def: &TrackDef) -> (Polyline, Vec<f64>) {
    let road = &def.road;
    let o = road.lane_offset;
    let lane_start = def.start + def.start_dir.vec().right().scale(o);
    let mut pts = vec![lane_start];
    // index into `pts` of each node's reference point
    let mut marks = Vec::with_capacity(def.nodes.len());
    for n in &def.nodes {
        let d = n.incoming.vec();
        let r = d.right();
        match n.turn {
            Turn::Straight => {
                marks.push((pts.len(), None));
                pts.push(n.center + r.scale(o));
            }
            Turn::Right | Turn::Left => {
                let (center, radius, sweep) = if n.turn == Turn::Right {
                    let k = road.junction_reach();
                    (n.center - d.scale(k) + r.scale(k), road.right_turn_radius(), FRAC_PI_2)
                } else {
                    let k = o - road.left_turn_radius();
                    (n.center + d.scale(k) + r.scale(k), road.left_turn_radius(), -FRAC_PI_2)
                };
                let start = if n.turn == Turn::Right {
                    center - r.scale(radius)
                } else {
                    center + r.scale(radius)
                };
                pts.push(start);
                let arc = arc_points(center, start, sweep, ARC_STEPS);
                marks.push((pts.len() + ARC_STEPS / 2 - 1, Some(())));
                pts.extend(arc);
            }
        }
    }
    if def.closed {
        pts.push(lane_start);
    } else {
        let last = def.nodes.last().expect("at least one node");
        let d = last.outgoing().vec();
        let end = *pts.last().unwrap() + d.scale(def.final_leg);
        pts.push(end);
    }
    // drop zero-length steps (a straight crossing can coincide with nothing, but be safe)
    let mut clean: Vec<Vec2> = Vec::with_capacity(pts.len());
    let mut remap = Vec::with_capacity(pts.len());
    for p in pts {
        if clean.last().is_none_or(|q: &Vec2| q.dist(p) > 1e-9) {
            clean.push(p);
        }
        remap.push(clean.len() - 1);
    }
    let lane = Polyline::new(clean);
    let node_s = marks.into_iter().map(|(i, _)| lane.vertex_s(remap[i])).collect();
    (lane, node_s)
}

fn build_walls(def: &TrackDef, lane_end: Vec2) -> Vec<Segment> {
    let road = &def.road;
    let hw = road.road_half_width;
    let reach = road.junction_reach();
    let mut walls = Vec::new();
    let push_line = |walls: &mut Vec<Segment>, a: Vec2, b: Vec2| {
        if a.dist(b) > 1e-9 {
            walls.push(Segment::new(a, b));
        }
    };

    // Road legs between consecutive anchors (start, junctions, end).
    let n = def.nodes.len();
    let mut anchors: Vec<(Vec2, f64)> = Vec::with_capacity(n + 2);
    if !def.closed {
        anchors.push((def.start, 0.0));
    }
    for node in &def.nodes {
        anchors.push((node.center, reach));
    }
    if def.closed {
        anchors.push((def.nodes[0].center, reach));
    } else {
        let d = def.nodes[n - 1].outgoing().vec();
        anchors.push((lane_end - d.right().scale(road.lane_offset), 0.0));
    }
    for w in anchors.windows(2) {
        let ((a, ma), (b, mb)) = (w[0], w[1]);
        let len = a.dist(b);
        let d = (b - a).scale(1.0 / len);
        let r = d.right();
        let (p, q) = (a + d.scale(ma), b - d.scale(mb));
        for side in [-1.0, 1.0] {
            push_line(&mut walls, p + r.scale(side * hw), q + r.scale(side * hw));
        }
    }
    if !def.closed {
        let (a, b) = (anchors[0].0, anchors[anchors.len() - 1].0);
        let d0 = def.start_dir.vec();
        push_line(&mut walls, a - d0.right().scale(hw), a + d0.right().scale(hw));
        let d1 = def.nodes[n - 1].outgoing().vec();
        push_line(&mut walls, b - d1.right().scale(hw), b + d1.right().scale(hw));
    }

    // Junction interiors.
    for node in &def.nodes {
        let c = node.center;
        let route_arms = [node.incoming.rotate(2), node.outgoing()];
        let exists = |k: u8| node.stubs || route_arms.contains(&Dir4(k));
        for k in 0..4u8 {
            let a = Dir4(k).vec();
            if !exists(k) {
                push_line(&mut walls, c + a.scale(hw) - a.right().scale(hw), c + a.scale(hw) + a.right().scale(hw));
            } else if !route_arms.contains(&Dir4(k)) {
                // side road stub with an end cap
                let end = c + a.scale(road.stub_length);
                for side in [-1.0, 1.0] {
                    let off = a.right().scale(side * hw);
                    push_line(&mut walls, c + a.scale(reach) + off, end + off);
                }
                push_line(&mut walls, end - a.right().scale(hw), end + a.right().scale(hw));
            }
            // quadrant between arm k and the arm clockwise of it
            let k2 = (k + 1) % 4;
            let b = Dir4(k2).vec();
            match (exists(k), exists(k2)) {
                (true, true) => {
                    let center = c + (a + b).scale(reach);
                    let from = c + a.scale(reach) + b.scale(hw);
                    let mut prev = from;
                    // rotate from -b towards -a: counter-clockwise in this frame
                    for p in arc_points(center, from, -FRAC_PI_2, FILLET_STEPS) {
                        push_line(&mut walls, prev, p);
                        prev = p;
                    }
                }
                (true, false) => push_line(&mut walls, c + a.scale(reach) + b.scale(hw), c + a.scale(hw) + b.scale(hw)),
                (false, true) => push_line(&mut walls, c + b.scale(reach) + a.scale(hw), c + b.scale(hw) + a.scale(hw)),
                (false, false) => {}
            }
        }
    }
    walls
}

/// Axis-aligned footprint used to keep generated roads apart.
#[derive(Debug, Clone, Copy)]
struct Piece {
    min: Vec2,
    max: Vec2,
    /// Junction indices this piece touches; `usize::MAX` marks the start.
    tags: [usize; 2],
}

impl Piece {
    fn around(a: Vec2, b: Vec2, half: f64, tags: [usize; 2]) -> Self {
        Self {
            min: Vec2::new(a.x.min(b.x) - half, a.y.min(b.y) - half),
            max: Vec2::new(a.x.max(b.x) + half, a.y.max(b.y) + half),
            tags,
        }
    }

    fn overlaps(&self, o: &Piece, margin: f64) -> bool {
        self.min.x < o.max.x + margin
            && o.min.x < self.max.x + margin
            && self.min.y < o.max.y + margin
            && o.min.y < self.max.y + margin
    }

    fn shares(&self, o: &Piece) -> bool {
        self.tags.iter().any(|t| *t != usize::MAX - 1 && o.tags.contains(t))
    }
}

const START_TAG: usize = usize::MAX;
const NO_TAG: usize = usize::MAX - 1;
const CLEARANCE: f64 = 6.0;

/// Generates a track whose junction labels match `spec` exactly.
pub fn generate_track(spec: &TrackSpec, seed: u64, id: &str, designation: Designation) -> Result<Track> {
    if spec.left + spec.right + spec.straight == 0 {
        return Err(Error::GenerationFailed("spec asks for zero junctions".into()));
    }
    let road = spec.road;
    let reach = road.junction_reach();
    if !(spec.leg_min >= 2.0 * reach + 10.0 && spec.leg_max >= spec.leg_min) {
        return Err(Error::GenerationFailed(format!(
            "leg range [{}, {}] too short for junction reach {reach}",
            spec.leg_min, spec.leg_max
        )));
    }
    let mut rng = rng::stream(seed, Stream::Track, &[]);
    let total = spec.left + spec.right + spec.straight;
    'attempt: for _ in 0..200 {
        let mut remaining = [(Turn::Left, spec.left), (Turn::Right, spec.right), (Turn::Straight, spec.straight)];
        let mut pieces: Vec<Piece> = Vec::new();
        let mut nodes: Vec<Node> = Vec::new();
        let start = Vec2::default();
        let mut pos = start;
        let mut dir = Dir4(0);
        let mut prev_tag = START_TAG;
        for i in 0..total {
            let mut placed = false;
            for _ in 0..30 {
                let len = rng.random_range(spec.leg_min..=spec.leg_max);
                let choices: Vec<Turn> = remaining.iter().filter(|(_, c)| *c > 0).map(|(t, _)| *t).collect();
                let weights: Vec<(Turn, usize)> =
                    remaining.iter().filter(|(_, c)| *c > 0).copied().collect();
                let turn = weights
                    .choose_weighted(&mut rng, |(_, c)| *c as f64)
                    .map(|(t, _)| *t)
                    .unwrap_or(choices[0]);
                let center = pos + dir.vec().scale(len);
                let node = Node { center, incoming: dir, turn, stubs: true };
                let out = node.outgoing();
                let mut fresh = vec![
                    Piece::around(pos, center, road.road_half_width, [prev_tag, i]),
                    Piece::around(center, center, reach, [i, NO_TAG]),
                ];
                for k in 0..4u8 {
                    let a = Dir4(k);
                    if a != dir.rotate(2) && a != out {
                        fresh.push(Piece::around(center, center + a.vec().scale(road.stub_length), road.road_half_width, [i, NO_TAG]));
                    }
                }
                // room for the next leg to leave the junction
                let probe_end = center + out.vec().scale(spec.leg_min);
                fresh.push(Piece::around(center + out.vec().scale(reach), probe_end, road.road_half_width, [i, NO_TAG]));
                let clash = fresh.iter().any(|f| pieces.iter().any(|p| !f.shares(p) && f.overlaps(p, CLEARANCE)));
                if clash {
                    continue;
                }
                fresh.pop();
                pieces.extend(fresh);
                nodes.push(node);
                for r in remaining.iter_mut() {
                    if r.0 == turn {
                        r.1 -= 1;
                    }
                }
                pos = center;
                dir = out;
                prev_tag = i;
                placed = true;
                break;
            }
            if !placed {
                continue 'attempt;
            }
        }
        let final_leg = spec.leg_min;
        let end = pos + dir.vec().scale(final_leg);
        let tail = Piece::around(pos, end, road.road_half_width, [prev_tag, NO_TAG]);
        if pieces.iter().any(|p| !tail.shares(p) && tail.overlaps(p, CLEARANCE)) {
            continue;
        }
        let mut def = TrackDef {
            format: TRACK_FORMAT.into(),
            version: TRACK_VERSION,
            id: id.into(),
            designation,
            road,
            start,
            start_dir: Dir4(0),
            nodes,
            final_leg,
            closed: false,
            obstacles: Vec::new(),
            case_before: 30.0,
            case_after: 25.0,
        };
        def.obstacles = place_obstacles(&def, spec.obstacle_density, &mut rng)?;
        return Track::from_def(def);
    }
    Err(Error::GenerationFailed(format!("no non-overlapping layout for {total} junctions after 200 attempts")))
}

fn place_obstacles<R: Rng>(def: &TrackDef, density: f64, rng: &mut R) -> Result<Vec<Circle>> {
    if density <= 0.0 {
        return Ok(Vec::new());
    }
    let probe = Track::from_def(TrackDef { obstacles: Vec::new(), ..def.clone() })?;
    let road = def.road;
    let keep_clear = road.junction_reach() + 6.0;
    let spacing = 10.0;
    let mut out: Vec<Circle> = Vec::new();
    let spawns: Vec<f64> = probe.cases().iter().map(|c| c.start_s).chain([0.0]).collect();
    let len = probe.lane_length();
    let usable: Vec<f64> = (0..(len as usize))
        .map(|s| s as f64)
        .filter(|&s| {
            probe.node_s().iter().all(|&n| (s - n).abs() > keep_clear)
                && spawns.iter().all(|&sp| (s - sp).abs() > 8.0)
                && s < len - 5.0
        })
        .collect();
    let expected = density * usable.len() as f64 / 100.0;
    let count = expected.floor() as usize + usize::from(rng.random::<f64>() < expected.fract());
    let mut tries = 0;
    while out.len() < count && tries < 50 * count.max(1) {
        tries += 1;
        let Some(&s) = usable.choose(rng) else { break };
        let (p, d) = probe.lane_at(s);
        // lane point sits `lane_offset` right of the road centerline
        let center = p + d.right().scale(road.obstacle_offset - road.lane_offset);
        if out.iter().all(|o| o.center.dist(center) > spacing) {
            out.push(Circle { center, radius: road.obstacle_radius });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(l: usize, r: usize, s: usize) -> TrackSpec {
        TrackSpec { left: l, right: r, straight: s, ..TrackSpec::default() }
    }

    #[test]
    fn single_straight_is_a_straight_lane() {
        let t = generate_track(&spec(0, 0, 1), 1, "t", Designation::Seen).unwrap();
        assert_eq!(t.nodes().len(), 1);
        let pts = t.lane().points();
        let d0 = (pts[1] - pts[0]).heading();
        assert!(pts.windows(2).all(|w| ((w[1] - w[0]).heading() - d0).abs() < 1e-12));
    }

    #[test]
    fn label_counts_are_exact() {
        for seed in 0..5 {
            let t = generate_track(&spec(4, 4, 4), seed, "t", Designation::Seen).unwrap();
            let c = t.turn_counts();
            assert_eq!((c[&Turn::Left], c[&Turn::Right], c[&Turn::Straight]), (4, 4, 4));
            assert_eq!(t.cases().len(), 12);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_track(&spec(2, 2, 2), 7, "t", Designation::Seen).unwrap();
        let b = generate_track(&spec(2, 2, 2), 7, "t", Designation::Seen).unwrap();
        let c = generate_track(&spec(2, 2, 2), 8, "t", Designation::Seen).unwrap();
        assert_eq!(a.def(), b.def());
        assert_eq!(a.walls(), b.walls());
        assert_ne!(a.def(), c.def());
    }

    #[test]
    fn infeasible_spec_fails() {
        let bad = TrackSpec { leg_min: 5.0, leg_max: 6.0, ..spec(1, 0, 0) };
        assert!(matches!(generate_track(&bad, 0, "t", Designation::Seen), Err(Error::GenerationFailed(_))));
        assert!(generate_track(&spec(0, 0, 0), 0, "t", Designation::Seen).is_err());
    }

    #[test]
    fn turn_lanes_keep_clear_of_curbs() {
        let t = generate_track(&spec(3, 3, 3), 2, "t", Designation::Seen).unwrap();
        let road = t.road();
        // every lane point stays at least a lane half-width from every wall
        // the first and last meters touch the end caps
        let step = 0.25;
        let mut s = 2.0;
        while s <= t.lane_length() - 2.0 {
            let (p, _) = t.lane_at(s);
            let d = t.walls().iter().map(|w| w.distance(p)).fold(f64::INFINITY, f64::min);
            assert!(d >= road.lane_half_width - 0.01, "s={s}: wall at {d}");
            s += step;
        }
    }

    #[test]
    fn obstacles_stay_off_the_lane() {
        let t = generate_track(&TrackSpec { obstacle_density: 4.0, ..spec(2, 2, 2) }, 3, "t", Designation::Seen).unwrap();
        assert!(!t.obstacles().is_empty());
        for o in t.obstacles() {
            let (_, lat) = t.lane().project(o.center);
            assert!(lat > 0.0, "obstacles sit on the curb side");
            assert!(lat - o.radius > 0.5);
        }
    }

    #[test]
    fn track_file_round_trip() {
        let t = generate_track(&spec(1, 1, 1), 4, "rt", Designation::Unseen).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        t.save(&path).unwrap();
        let back = Track::load(&path).unwrap();
        assert_eq!(back.def(), t.def());
        assert_eq!(back.walls(), t.walls());
    }

    #[test]
    fn oval_closes() {
        let t = Track::oval("oval", 60.0, RoadParams::default()).unwrap();
        let pts = t.lane().points();
        assert!(pts[0].dist(*pts.last().unwrap()) < 1e-9);
        assert!((t.route_delta(1.0, t.lane_length() - 1.0) + 2.0).abs() < 1e-9);
    }
}
