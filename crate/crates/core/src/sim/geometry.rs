//! Planar primitives. The world frame is screen-like: `y` points to the
//! right of `x`, so a positive heading change is a right turn.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_heading(h: f64) -> Self {
        let (s, c) = h.sin_cos();
        Self { x: c, y: s }
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Self) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Self) -> f64 {
        (self - o).norm()
    }

    pub fn scale(self, k: f64) -> Self {
        Self { x: self.x * k, y: self.y * k }
    }

    /// Unit normal pointing to the right of this direction.
    pub fn right(self) -> Self {
        Self { x: -self.y, y: self.x }
    }

    pub fn heading(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub fn new(a: Vec2, b: Vec2) -> Self {
        Self { a, b }
    }

    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }

    /// Closest-point parameter in `[0, 1]` and the distance to it.
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let d = self.b - self.a;
        let len2 = d.dot(d);
        let t = if len2 > 0.0 { ((p - self.a).dot(d) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let q = self.a + d.scale(t);
        (t, p.dist(q))
    }

    pub fn distance(&self, p: Vec2) -> f64 {
        self.project(p).1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: Vec2,
    pub radius: f64,
}

/// Distance along a unit-direction ray to a segment, if it is hit.
pub fn ray_segment(origin: Vec2, dir: Vec2, s: &Segment) -> Option<f64> {
    let e = s.b - s.a;
    let denom = dir.cross(e);
    if denom.abs() < 1e-15 {
        return None;
    }
    let w = s.a - origin;
    let t = w.cross(e) / denom;
    let u = w.cross(dir) / denom;
    (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
}

/// Distance along a unit-direction ray to the first crossing of a circle.
/// An origin inside the circle reports zero.
pub fn ray_circle(origin: Vec2, dir: Vec2, c: &Circle) -> Option<f64> {
    let oc = origin - c.center;
    let b = oc.dot(dir);
    let cc = oc.dot(oc) - c.radius * c.radius;
    if cc <= 0.0 {
        return Some(0.0);
    }
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut r = a.rem_euclid(tau);
    if r > std::f64::consts::PI {
        r -= tau;
    }
    r
}

/// Arc-length parametrized polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pts: Vec<Vec2>,
    /// Cumulative arc length at each vertex.
    s: Vec<f64>,
}

impl Polyline {
    pub fn new(pts: Vec<Vec2>) -> Self {
        let mut s = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        for (i, p) in pts.iter().enumerate() {
            if i > 0 {
                acc += p.dist(pts[i - 1]);
            }
            s.push(acc);
        }
        Self { pts, s }
    }

    pub fn points(&self) -> &[Vec2] {
        &self.pts
    }

    pub fn length(&self) -> f64 {
        *self.s.last().unwrap_or(&0.0)
    }

    pub fn segment_count(&self) -> usize {
        self.pts.len().saturating_sub(1)
    }

    pub fn segment(&self, i: usize) -> Segment {
        Segment::new(self.pts[i], self.pts[i + 1])
    }

    pub fn vertex_s(&self, i: usize) -> f64 {
        self.s[i]
    }

    fn index_at(&self, s: f64) -> usize {
        match self.s.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => i.min(self.segment_count().saturating_sub(1)),
            Err(i) => i.saturating_sub(1).min(self.segment_count().saturating_sub(1)),
        }
    }

    /// Point and unit tangent at arc length `s`, clamped to the ends.
    pub fn at(&self, s: f64) -> (Vec2, Vec2) {
        let s = s.clamp(0.0, self.length());
        let i = self.index_at(s);
        let seg = self.segment(i);
        let len = seg.length();
        let dir = (seg.b - seg.a).scale(1.0 / len);
        (seg.a + dir.scale(s - self.s[i]), dir)
    }

    /// Closest point among segments whose span intersects `[lo, hi]`.
    /// Returns `(s, signed lateral offset, positive to the right)`.
    pub fn project_window(&self, p: Vec2, lo: f64, hi: f64) -> (f64, f64) {
        let first = self.index_at(lo.max(0.0));
        let last = self.index_at(hi.min(self.length()));
        self.project_range(p, first, last)
    }

    pub fn project(&self, p: Vec2) -> (f64, f64) {
        self.project_range(p, 0, self.segment_count().saturating_sub(1))
    }

    fn project_range(&self, p: Vec2, first: usize, last: usize) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in first..=last {
            let seg = self.segment(i);
            let (t, d) = seg.project(p);
            if d < best.0 {
                let dir = seg.b - seg.a;
                let side = dir.cross(p - seg.a).signum();
                best = (d, self.s[i] + t * seg.length(), if side == 0.0 { 0.0 } else { side * d });
            }
        }
        (best.1, best.2)
    }
}
