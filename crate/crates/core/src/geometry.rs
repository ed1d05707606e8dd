//! Planar primitives and a uniform-grid index over line segments.

use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Self::new(c, s)
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

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Self::new(self.x / n, self.y / n)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub const fn new(a: Vec2, b: Vec2) -> Self {
        Self { a, b }
    }

    /// Closest point parameter in [0, 1] and the squared distance to `p`.
    pub fn closest(&self, p: Vec2) -> (f64, f64) {
        let d = self.b - self.a;
        let len_sq = d.norm_sq();
        let u = if len_sq > 0.0 { ((p - self.a).dot(d) / len_sq).clamp(0.0, 1.0) } else { 0.0 };
        let q = self.a + d * u;
        (u, (p - q).norm_sq())
    }
}

/// Distance along a ray (`origin + t * dir`, `dir` unit length) to the segment,
/// or `None` if the ray misses it.
pub fn ray_segment(origin: Vec2, dir: Vec2, seg: &Segment) -> Option<f64> {
    let e = seg.b - seg.a;
    let denom = dir.cross(e);
    if denom == 0.0 {
        return None;
    }
    let w = seg.a - origin;
    let t = w.cross(e) / denom;
    let u = w.cross(dir) / denom;
    if t >= 0.0 && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test, touching and colinear overlap included.
pub fn segments_intersect(s: &Segment, t: &Segment) -> bool {
    let d1 = orient(t.a, t.b, s.a);
    let d2 = orient(t.a, t.b, s.b);
    let d3 = orient(s.a, s.b, t.a);
    let d4 = orient(s.a, s.b, t.b);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(t.a, t.b, s.a))
        || (d2 == 0.0 && on_segment(t.a, t.b, s.b))
        || (d3 == 0.0 && on_segment(s.a, s.b, t.a))
        || (d4 == 0.0 && on_segment(s.a, s.b, t.b))
}

/// Uniform grid over a set of segments. Each segment is registered in every
/// cell its (slightly padded) bounding box touches.
#[derive(Debug, Clone)]
pub struct SegmentGrid {
    segments: Vec<Segment>,
    origin: Vec2,
    cell: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

const GRID_PAD: f64 = 1e-7;

impl SegmentGrid {
    pub fn new(segments: Vec<Segment>, cell: f64) -> Self {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for s in &segments {
            for p in [s.a, s.b] {
                lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
                hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
            }
        }
        if segments.is_empty() {
            lo = Vec2::default();
            hi = Vec2::default();
        }
        let origin = lo - Vec2::new(cell, cell);
        let nx = ((hi.x - origin.x) / cell).ceil() as usize + 2;
        let ny = ((hi.y - origin.y) / cell).ceil() as usize + 2;
        let mut cells = vec![Vec::new(); nx * ny];
        for (i, s) in segments.iter().enumerate() {
            let x0 = ((s.a.x.min(s.b.x) - GRID_PAD - origin.x) / cell).floor() as usize;
            let x1 = ((s.a.x.max(s.b.x) + GRID_PAD - origin.x) / cell).floor() as usize;
            let y0 = ((s.a.y.min(s.b.y) - GRID_PAD - origin.y) / cell).floor() as usize;
            let y1 = ((s.a.y.max(s.b.y) + GRID_PAD - origin.y) / cell).floor() as usize;
            for cy in y0..=y1.min(ny - 1) {
                for cx in x0..=x1.min(nx - 1) {
                    cells[cy * nx + cx].push(i as u32);
                }
            }
        }
        Self { segments, origin, cell, nx, ny, cells }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    fn cell_range(&self, v: f64, o: f64, n: usize) -> isize {
        (((v - o) / self.cell).floor() as isize).clamp(-1, n as isize)
    }

    /// Indices of segments registered in cells overlapping the box.
    pub fn query_box(&self, lo: Vec2, hi: Vec2, out: &mut Vec<u32>) {
        out.clear();
        let x0 = self.cell_range(lo.x, self.origin.x, self.nx).max(0) as usize;
        let x1 = self.cell_range(hi.x, self.origin.x, self.nx).min(self.nx as isize - 1);
        let y0 = self.cell_range(lo.y, self.origin.y, self.ny).max(0) as usize;
        let y1 = self.cell_range(hi.y, self.origin.y, self.ny).min(self.ny as isize - 1);
        if x1 < 0 || y1 < 0 {
            return;
        }
        for cy in y0..=y1 as usize {
            for cx in x0..=x1 as usize {
                out.extend_from_slice(&self.cells[cy * self.nx + cx]);
            }
        }
        out.sort_unstable();
        out.dedup();
    }

    /// Nearest hit along the ray within `max_range` by walking the grid cells
    /// the ray passes through.
    pub fn raycast(&self, origin: Vec2, dir: Vec2, max_range: f64) -> Option<f64> {
        let w = self.cell * self.nx as f64;
        let h = self.cell * self.ny as f64;
        // Clip the ray against the grid bounds.
        let (mut t_min, mut t_max) = (0.0f64, max_range);
        for (o, d, lo, ext) in [(origin.x, dir.x, self.origin.x, w), (origin.y, dir.y, self.origin.y, h)] {
            if d == 0.0 {
                if o < lo || o > lo + ext {
                    return None;
                }
            } else {
                let t0 = (lo - o) / d;
                let t1 = (lo + ext - o) / d;
                t_min = t_min.max(t0.min(t1));
                t_max = t_max.min(t0.max(t1));
            }
        }
        if t_min > t_max {
            return None;
        }
        let start = origin + dir * t_min;
        let mut cx = (((start.x - self.origin.x) / self.cell).floor() as isize).clamp(0, self.nx as isize - 1);
        let mut cy = (((start.y - self.origin.y) / self.cell).floor() as isize).clamp(0, self.ny as isize - 1);
        let step_x: isize = if dir.x > 0.0 { 1 } else { -1 };
        let step_y: isize = if dir.y > 0.0 { 1 } else { -1 };
        let next_boundary = |c: isize, step: isize, o: f64| o + (c + if step > 0 { 1 } else { 0 }) as f64 * self.cell;
        let mut t_next_x = if dir.x != 0.0 {
            (next_boundary(cx, step_x, self.origin.x) - origin.x) / dir.x
        } else {
            f64::INFINITY
        };
        let mut t_next_y = if dir.y != 0.0 {
            (next_boundary(cy, step_y, self.origin.y) - origin.y) / dir.y
        } else {
            f64::INFINITY
        };
        let dt_x = if dir.x != 0.0 { self.cell / dir.x.abs() } else { f64::INFINITY };
        let dt_y = if dir.y != 0.0 { self.cell / dir.y.abs() } else { f64::INFINITY };

        let mut best: Option<f64> = None;
        loop {
            for &i in &self.cells[cy as usize * self.nx + cx as usize] {
                if let Some(t) = ray_segment(origin, dir, &self.segments[i as usize]) {
                    if best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                }
            }
            let t_exit = t_next_x.min(t_next_y);
            if let Some(b) = best {
                if b <= t_exit + GRID_PAD {
                    break;
                }
            }
            if t_exit > t_max {
                break;
            }
            if t_next_x < t_next_y {
                cx += step_x;
                t_next_x += dt_x;
            } else {
                cy += step_y;
                t_next_y += dt_y;
            }
            if cx < 0 || cy < 0 || cx >= self.nx as isize || cy >= self.ny as isize {
                break;
            }
        }
        best.filter(|&b| b <= max_range)
    }
}
