//! Closed racetracks: centerline with per-point widths, derived walls, and the
//! geometric queries the environment needs (projection, progress, collision).

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{segments_intersect, Segment, SegmentGrid, Vec2};
use crate::vehicle::{VehicleParams, VehicleState};
use crate::{Result, SimError};

pub const CSV_HEADER: &str = "# x_m,y_m,w_tr_left_m,w_tr_right_m";

/// Spacing of generated centerlines.
pub const CENTERLINE_SPACING: f64 = 0.1;
/// Cell size of the wall index used for raycasting and collision queries.
pub const WALL_GRID_CELL: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Track {
    pub name: String,
    /// Closed polyline; the last point repeats the first.
    pub centerline: Vec<Vec2>,
    pub w_left: Vec<f64>,
    pub w_right: Vec<f64>,
    pub left_wall: Vec<Vec2>,
    pub right_wall: Vec<Vec2>,
    pub arclength: Vec<f64>,
    pub total_length: f64,
    pub curvature: Vec<f64>,
    walls: SegmentGrid,
}

/// Result of projecting a point onto the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arclength of the projected point in [0, total_length).
    pub s: f64,
    /// Signed lateral offset, positive to the left of the driving direction.
    pub d: f64,
    /// Index of the centerline segment holding the projection.
    pub idx: usize,
    /// Position along that segment in [0, 1].
    pub u: f64,
    pub point: Vec2,
    /// Heading of the segment.
    pub heading: f64,
}

impl Track {
    /// Builds a track from an open list of centerline points (the closing
    /// segment back to the first point is implied).
    pub fn new(name: impl Into<String>, points: &[Vec2], w_left: &[f64], w_right: &[f64]) -> Result<Self> {
        let n = points.len();
        if n < 3 {
            return Err(SimError::InvalidTrack(format!("need at least 3 centerline points, got {n}")));
        }
        if w_left.len() != n || w_right.len() != n {
            return Err(SimError::InvalidTrack("width columns do not match the number of points".into()));
        }
        if w_left.iter().chain(w_right).any(|w| !(*w > 0.0)) {
            return Err(SimError::InvalidTrack("widths must be positive".into()));
        }
        let mut centerline: Vec<Vec2> = points.to_vec();
        centerline.push(points[0]);
        let mut wl = w_left.to_vec();
        wl.push(w_left[0]);
        let mut wr = w_right.to_vec();
        wr.push(w_right[0]);

        let mut arclength = Vec::with_capacity(n + 1);
        arclength.push(0.0);
        for i in 0..n {
            let len = (centerline[i + 1] - centerline[i]).norm();
            if !(len > 0.0) {
                return Err(SimError::InvalidTrack(format!("duplicate centerline point at index {i}")));
            }
            arclength.push(arclength[i] + len);
        }
        let total_length = arclength[n];

        let curvature: Vec<f64> = (0..=n).map(|i| {
            let k = i % n;
            menger_curvature(points[(k + n - 1) % n], points[k], points[(k + 1) % n])
        }).collect();

        let mut left_wall = Vec::with_capacity(n + 1);
        let mut right_wall = Vec::with_capacity(n + 1);
        for i in 0..n {
            let t = (points[(i + 1) % n] - points[(i + n - 1) % n]).normalized();
            let normal = t.perp();
            left_wall.push(points[i] + normal * w_left[i]);
            right_wall.push(points[i] - normal * w_right[i]);
        }
        left_wall.push(left_wall[0]);
        right_wall.push(right_wall[0]);

        let segments = left_wall
            .windows(2)
            .chain(right_wall.windows(2))
            .map(|w| Segment::new(w[0], w[1]))
            .collect();
        let walls = SegmentGrid::new(segments, WALL_GRID_CELL);

        Ok(Self {
            name: name.into(),
            centerline,
            w_left: wl,
            w_right: wr,
            left_wall,
            right_wall,
            arclength,
            total_length,
            curvature,
            walls,
        })
    }

    /// Number of centerline segments.
    pub fn n_segments(&self) -> usize {
        self.centerline.len() - 1
    }

    pub fn wall_grid(&self) -> &SegmentGrid {
        &self.walls
    }

    pub fn wall_segments(&self) -> &[Segment] {
        self.walls.segments()
    }

    pub fn segment_heading(&self, idx: usize) -> f64 {
        (self.centerline[idx + 1] - self.centerline[idx]).angle()
    }

    pub fn widths_at(&self, idx: usize, u: f64) -> (f64, f64) {
        let wl = self.w_left[idx] + (self.w_left[idx + 1] - self.w_left[idx]) * u;
        let wr = self.w_right[idx] + (self.w_right[idx + 1] - self.w_right[idx]) * u;
        (wl, wr)
    }

    /// Closest point on the centerline polyline.
    pub fn project(&self, p: Vec2) -> Projection {
        let mut best = (usize::MAX, 0.0, f64::INFINITY);
        for i in 0..self.n_segments() {
            let (u, d2) = Segment::new(self.centerline[i], self.centerline[i + 1]).closest(p);
            if d2 < best.2 {
                best = (i, u, d2);
            }
        }
        let (idx, u, d2) = best;
        let a = self.centerline[idx];
        let dir = self.centerline[idx + 1] - a;
        let point = a + dir * u;
        let side = dir.cross(p - a);
        let d = if side >= 0.0 { d2.sqrt() } else { -d2.sqrt() };
        let mut s = self.arclength[idx] + u * (self.arclength[idx + 1] - self.arclength[idx]);
        if s >= self.total_length {
            s -= self.total_length;
        }
        Projection { s, d, idx, u, point, heading: dir.angle() }
    }

    /// Signed arclength advance from `s_prev` to `s_next`, taking the
    /// representative of minimum magnitude so finish-line crossings count.
    pub fn progress_delta(&self, s_prev: f64, s_next: f64) -> f64 {
        let l = self.total_length;
        let mut d = (s_next - s_prev).rem_euclid(l);
        if d > 0.5 * l {
            d -= l;
        }
        d
    }

    /// Centerline point and heading at arclength `s` (wrapped into the lap).
    pub fn pose_at(&self, s: f64) -> (Vec2, f64) {
        let s = s.rem_euclid(self.total_length);
        let idx = match self.arclength.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => i.min(self.n_segments() - 1),
            Err(i) => i - 1,
        };
        let seg_len = self.arclength[idx + 1] - self.arclength[idx];
        let u = (s - self.arclength[idx]) / seg_len;
        let a = self.centerline[idx];
        let b = self.centerline[idx + 1];
        (a + (b - a) * u, (b - a).angle())
    }

    /// Point at arclength `s` and lateral offset `d` along the segment normal.
    pub fn point_at(&self, s: f64, d: f64) -> Vec2 {
        let (p, heading) = self.pose_at(s);
        p + Vec2::from_angle(heading).perp() * d
    }

    /// True when the vehicle footprint touches a wall or leaves the corridor.
    pub fn collision_check(&self, state: &VehicleState, params: &VehicleParams) -> bool {
        let corners = footprint(state, params);
        if self.rectangle_hits_walls(&corners) {
            return true;
        }
        let proj = self.project(Vec2::new(state.x, state.y));
        let (wl, wr) = self.widths_at(proj.idx, proj.u);
        let rel = state.psi - proj.heading;
        let half = 0.5 * params.length * rel.sin().abs() + 0.5 * params.width * rel.cos().abs();
        proj.d + half > wl || proj.d - half < -wr
    }

    /// Edge test of a closed quadrilateral against the wall index.
    pub fn rectangle_hits_walls(&self, corners: &[Vec2; 4]) -> bool {
        let lo = Vec2::new(
            corners.iter().map(|c| c.x).fold(f64::INFINITY, f64::min),
            corners.iter().map(|c| c.y).fold(f64::INFINITY, f64::min),
        );
        let hi = Vec2::new(
            corners.iter().map(|c| c.x).fold(f64::NEG_INFINITY, f64::max),
            corners.iter().map(|c| c.y).fold(f64::NEG_INFINITY, f64::max),
        );
        let mut candidates = Vec::new();
        self.walls.query_box(lo, hi, &mut candidates);
        let segs = self.walls.segments();
        (0..4).any(|k| {
            let edge = Segment::new(corners[k], corners[(k + 1) % 4]);
            candidates.iter().any(|&i| segments_intersect(&edge, &segs[i as usize]))
        })
    }

    /// Moves a (crashed) vehicle onto the nearest centerline point, aligned
    /// with the track and at rest.
    pub fn relocate_to_centerline(&self, state: &VehicleState) -> VehicleState {
        let proj = self.project(Vec2::new(state.x, state.y));
        VehicleState::at_pose(proj.point.x, proj.point.y, proj.heading)
    }

    /// Start pose at arclength `s` on the centerline.
    pub fn start_state(&self, s: f64) -> VehicleState {
        let (p, heading) = self.pose_at(s);
        VehicleState::at_pose(p.x, p.y, heading)
    }

    pub fn bounding_box(&self) -> (Vec2, Vec2) {
        let pts = self.left_wall.iter().chain(&self.right_wall).chain(&self.centerline);
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in pts {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        (lo, hi)
    }

    /// Checks that neither wall crosses itself or the other wall.
    pub fn walls_are_simple(&self) -> bool {
        walls_simple(&self.left_wall, &self.right_wall)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("track").to_string();
        let io_err = |source| SimError::Io { path: path.display().to_string(), source };
        let file = std::fs::File::open(path).map_err(io_err)?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(file);
        let mut points = Vec::new();
        let mut wl = Vec::new();
        let mut wr = Vec::new();
        for record in reader.deserialize::<(f64, f64, f64, f64)>() {
            let (x, y, l, r) = record.map_err(|source| SimError::Csv { path: path.display().to_string(), source })?;
            points.push(Vec2::new(x, y));
            wl.push(l);
            wr.push(r);
        }
        // Tolerate files that repeat the first point at the end.
        if points.len() > 3 && (points[0] - points[points.len() - 1]).norm() < 1e-9 {
            points.pop();
            wl.pop();
            wr.pop();
        }
        Track::new(name, &points, &wl, &wr)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let io_err = |source| SimError::Io { path: path.display().to_string(), source };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        writeln!(out, "{CSV_HEADER}").map_err(io_err)?;
        for i in 0..self.n_segments() {
            let p = self.centerline[i];
            writeln!(out, "{},{},{},{}", p.x, p.y, self.w_left[i], self.w_right[i]).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

/// Corners of the vehicle rectangle, counter-clockwise from front-left.
pub fn footprint(state: &VehicleState, params: &VehicleParams) -> [Vec2; 4] {
    let c = Vec2::new(state.x, state.y);
    let fwd = Vec2::from_angle(state.psi) * (0.5 * params.length);
    let left = Vec2::from_angle(state.psi).perp() * (0.5 * params.width);
    [c + fwd + left, c - fwd + left, c - fwd - left, c + fwd - left]
}

/// Signed curvature of the circle through three points.
pub fn menger_curvature(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    let ab = b - a;
    let bc = c - b;
    let ca = a - c;
    let denom = ab.norm() * bc.norm() * ca.norm();
    if denom == 0.0 {
        0.0
    } else {
        2.0 * ab.cross(bc) / denom
    }
}

fn bbox(s: &Segment) -> (Vec2, Vec2) {
    (Vec2::new(s.a.x.min(s.b.x), s.a.y.min(s.b.y)), Vec2::new(s.a.x.max(s.b.x), s.a.y.max(s.b.y)))
}

fn polyline_segments(p: &[Vec2]) -> Vec<Segment> {
    p.windows(2).map(|w| Segment::new(w[0], w[1])).collect()
}

fn boxes_overlap(a: &(Vec2, Vec2), b: &(Vec2, Vec2)) -> bool {
    a.0.x <= b.1.x && b.0.x <= a.1.x && a.0.y <= b.1.y && b.0.y <= a.1.y
}

fn closed_polyline_simple(segs: &[Segment]) -> bool {
    let n = segs.len();
    let boxes: Vec<_> = segs.iter().map(bbox).collect();
    for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if boxes_overlap(&boxes[i], &boxes[j]) && segments_intersect(&segs[i], &segs[j]) {
                return false;
            }
        }
    }
    true
}

fn walls_simple(left: &[Vec2], right: &[Vec2]) -> bool {
    let ls = polyline_segments(left);
    let rs = polyline_segments(right);
    if !closed_polyline_simple(&ls) || !closed_polyline_simple(&rs) {
        return false;
    }
    let rb: Vec<_> = rs.iter().map(bbox).collect();
    ls.iter().all(|l| {
        let lb = bbox(l);
        rs.iter().zip(&rb).all(|(r, b)| !boxes_overlap(&lb, b) || !segments_intersect(l, r))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackGenSpec {
    pub seed: u64,
    /// Number of control points; 0 draws a count in [12, 20].
    pub n_control_points: usize,
    pub mean_width_min: f64,
    pub mean_width_max: f64,
    /// Relative per-point width variation around the mean.
    pub width_variation: f64,
    /// Diameter of the control-point circle.
    pub extent: f64,
    pub min_corner_radius: f64,
    pub max_attempts: usize,
}

impl Default for TrackGenSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_control_points: 0,
            mean_width_min: 1.5,
            mean_width_max: 1.8,
            width_variation: 0.2,
            extent: 16.0,
            min_corner_radius: 0.4,
            max_attempts: 200,
        }
    }
}

impl TrackGenSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(1.5..=1.8).contains(&self.mean_width_min)
            || !(1.5..=1.8).contains(&self.mean_width_max)
            || self.mean_width_min > self.mean_width_max
        {
            return Err(SimError::InvalidParameter("mean width range must lie within [1.5, 1.8] m".into()));
        }
        if !(0.0..=0.2).contains(&self.width_variation) {
            return Err(SimError::InvalidParameter("width variation must lie within [0, 0.2]".into()));
        }
        if self.n_control_points != 0 && self.n_control_points < 4 {
            return Err(SimError::InvalidParameter("need at least 4 control points".into()));
        }
        if !(self.extent > 0.0) || !(self.min_corner_radius > 0.0) || self.max_attempts == 0 {
            return Err(SimError::InvalidParameter("extent, corner radius and attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Centripetal Catmull-Rom point between `p1` and `p2` at `t` in [0, 1].
fn catmull_rom(p0: Vec2, p1: Vec2, p2: Vec2, p3: Vec2, t: f64) -> Vec2 {
    let knot = |a: Vec2, b: Vec2| (b - a).norm().sqrt().max(1e-9);
    let t0 = 0.0;
    let t1 = t0 + knot(p0, p1);
    let t2 = t1 + knot(p1, p2);
    let t3 = t2 + knot(p2, p3);
    let t = t1 + (t2 - t1) * t;
    let lerp = |a: Vec2, b: Vec2, ta: f64, tb: f64| a * ((tb - t) / (tb - ta)) + b * ((t - ta) / (tb - ta));
    let a1 = lerp(p0, p1, t0, t1);
    let a2 = lerp(p1, p2, t1, t2);
    let a3 = lerp(p2, p3, t2, t3);
    let b1 = lerp(a1, a2, t0, t2);
    let b2 = lerp(a2, a3, t1, t3);
    lerp(b1, b2, t1, t2)
}

/// Resamples a closed dense polyline at (nearly) uniform spacing.
fn resample_closed(dense: &[Vec2], spacing: f64) -> Vec<Vec2> {
    let mut cum = vec![0.0];
    for i in 0..dense.len() {
        let next = dense[(i + 1) % dense.len()];
        cum.push(cum[i] + (next - dense[i]).norm());
    }
    let total = cum[dense.len()];
    let n = (total / spacing).round().max(3.0) as usize;
    let step = total / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for k in 0..n {
        let s = k as f64 * step;
        while cum[j + 1] < s {
            j += 1;
        }
        let seg = cum[j + 1] - cum[j];
        let u = if seg > 0.0 { (s - cum[j]) / seg } else { 0.0 };
        let a = dense[j];
        let b = dense[(j + 1) % dense.len()];
        out.push(a + (b - a) * u);
    }
    out
}

fn circular_moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let n = v.len();
    let half = window / 2;
    (0..n)
        .map(|i| {
            let sum: f64 = (0..=2 * half).map(|k| v[(i + n + k - half) % n]).sum();
            sum / (2 * half + 1) as f64
        })
        .collect()
}

/// Generates a random closed track from a jittered circle of control points.
/// Candidates that self-intersect or have too tight corners are redrawn from
/// the same random stream, so the result depends only on the seed.
pub fn generate_track(spec: &TrackGenSpec) -> Result<Track> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut last_reason = String::new();
    for _ in 0..spec.max_attempts {
        match try_generate(spec, &mut rng) {
            Ok(track) => return Ok(track),
            Err(reason) => last_reason = reason,
        }
    }
    Err(SimError::TrackGeneration { attempts: spec.max_attempts, reason: last_reason })
}

fn try_generate(spec: &TrackGenSpec, rng: &mut ChaCha8Rng) -> std::result::Result<Track, String> {
    let n = if spec.n_control_points == 0 { rng.random_range(12..=20) } else { spec.n_control_points };
    let radius = 0.5 * spec.extent;
    let stretch = rng.random_range(1.0..1.5);
    let rotation = rng.random_range(0.0..2.0 * PI);
    let thetas: Vec<f64> = (0..n).map(|i| 2.0 * PI * (i as f64 + rng.random_range(-0.25..0.25)) / n as f64).collect();
    let raw_r: Vec<f64> = (0..n).map(|_| rng.random_range(0.45..1.0)).collect();
    // A [1, 2, 1] filter on the radii keeps large-scale shape variety while
    // limiting the kinks between neighbouring control points.
    let (s, c) = rotation.sin_cos();
    let control: Vec<Vec2> = (0..n)
        .map(|i| {
            let r = radius * 0.25 * (raw_r[(i + n - 1) % n] + 2.0 * raw_r[i] + raw_r[(i + 1) % n]);
            let local = Vec2::new(r * thetas[i].cos() * stretch, r * thetas[i].sin() / stretch);
            Vec2::new(c * local.x - s * local.y, s * local.x + c * local.y)
        })
        .collect();

    let samples_per_span = 64;
    let mut dense = Vec::with_capacity(n * samples_per_span);
    for i in 0..n {
        let p0 = control[(i + n - 1) % n];
        let p1 = control[i];
        let p2 = control[(i + 1) % n];
        let p3 = control[(i + 2) % n];
        for k in 0..samples_per_span {
            dense.push(catmull_rom(p0, p1, p2, p3, k as f64 / samples_per_span as f64));
        }
    }
    let points = resample_closed(&dense, CENTERLINE_SPACING);
    let m = points.len();

    let mean_width = if spec.mean_width_max > spec.mean_width_min {
        rng.random_range(spec.mean_width_min..spec.mean_width_max)
    } else {
        spec.mean_width_min
    };
    let raw: Vec<f64> = (0..m)
        .map(|_| {
            let u = if spec.width_variation > 0.0 {
                rng.random_range(-spec.width_variation..spec.width_variation)
            } else {
                0.0
            };
            mean_width * (1.0 + u)
        })
        .collect();
    let window = (2.0 / CENTERLINE_SPACING).round() as usize;
    let width = circular_moving_average(&raw, window);
    let half: Vec<f64> = width.iter().map(|w| 0.5 * w).collect();

    let mut max_curv = 0.0f64;
    for i in 0..m {
        let k = menger_curvature(points[(i + m - 1) % m], points[i], points[(i + 1) % m]).abs();
        if k * half[i] >= 0.9 {
            return Err(format!("inner wall folds at point {i}"));
        }
        max_curv = max_curv.max(k);
    }
    if max_curv > 0.0 && 1.0 / max_curv < spec.min_corner_radius {
        return Err(format!("corner radius {:.3} m below minimum", 1.0 / max_curv));
    }
    let track = Track::new(format!("gen-{}", spec.seed), &points, &half, &half).map_err(|e| e.to_string())?;
    if !track.walls_are_simple() {
        return Err("walls intersect".into());
    }
    Ok(track)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Axis-aligned rectangle track: straight sections joined by sharp corners.
    pub(crate) fn square_track(side: f64, half_width: f64) -> Track {
        let n_side = (side / 0.1) as usize;
        let mut pts = Vec::new();
        let corners = [Vec2::new(0.0, 0.0), Vec2::new(side, 0.0), Vec2::new(side, side), Vec2::new(0.0, side)];
        for k in 0..4 {
            let a = corners[k];
            let b = corners[(k + 1) % 4];
            for i in 0..n_side {
                pts.push(a + (b - a) * (i as f64 / n_side as f64));
            }
        }
        let w = vec![half_width; pts.len()];
        Track::new("square", &pts, &w, &w).unwrap()
    }

    fn circle_track(radius: f64, n: usize, half_width: f64) -> Track {
        let pts: Vec<Vec2> =
            (0..n).map(|i| Vec2::from_angle(2.0 * PI * i as f64 / n as f64) * radius).collect();
        let w = vec![half_width; n];
        Track::new("circle", &pts, &w, &w).unwrap()
    }

    #[test]
    fn closed_and_increasing() {
        let t = circle_track(5.0, 300, 0.8);
        assert_eq!(t.centerline[0], *t.centerline.last().unwrap());
        assert!(t.arclength.windows(2).all(|w| w[1] > w[0]));
        assert!(t.total_length > 0.0);
        assert!(t.walls_are_simple());
        // Curvature of a CCW circle is positive and close to 1/r.
        assert!((t.curvature[10] - 0.2).abs() < 1e-3);
    }

    #[test]
    fn projection_vertex_and_offset() {
        let t = circle_track(5.0, 300, 0.8);
        let k = 37;
        let p = t.project(t.centerline[k]);
        assert!((p.s - t.arclength[k]).abs() < 1e-9);
        assert!(p.d.abs() < 1e-12);
        assert!(p.idx == k || (p.idx + 1 == k && (p.u - 1.0).abs() < 1e-12));

        let sq = square_track(10.0, 0.8);
        let mid = Vec2::new(5.05, 0.0);
        let left = sq.project(mid + Vec2::new(0.0, 0.3));
        assert!((left.d - 0.3).abs() < 1e-12);
        let right = sq.project(mid - Vec2::new(0.0, 0.3));
        assert!((right.d + 0.3).abs() < 1e-12);
    }

    #[test]
    fn progress_delta_examples() {
        let t = circle_track(5.0, 300, 0.8);
        let l = t.total_length;
        assert!((t.progress_delta(10.0, 10.2) - 0.2).abs() < 1e-12);
        assert!((t.progress_delta(l - 0.1, 0.1) - 0.2).abs() < 1e-9);
        assert!((t.progress_delta(0.1, l - 0.1) + 0.2).abs() < 1e-9);
        assert_eq!(t.progress_delta(5.0, 5.0), 0.0);
    }

    #[test]
    fn collision_examples() {
        let p = VehicleParams::default();
        let sq = square_track(10.0, 0.8);
        let on_line = VehicleState::at_pose(5.0, 0.0, 0.0);
        assert!(!sq.collision_check(&on_line, &p));
        let on_wall = VehicleState::at_pose(5.0, 0.8, 0.0);
        assert!(sq.collision_check(&on_wall, &p));
        let outside = VehicleState::at_pose(5.0, -3.0, 0.0);
        assert!(sq.collision_check(&outside, &p));
    }

    #[test]
    fn relocation() {
        let sq = square_track(10.0, 0.8);
        let crashed = VehicleState { x: 5.0, y: 0.4, v: 3.0, delta: 0.2, psi: 1.0, psi_dot: 2.0, beta: 0.1 };
        let r = sq.relocate_to_centerline(&crashed);
        assert!((r.x - 5.0).abs() < 1e-12 && r.y.abs() < 1e-12);
        assert_eq!((r.v, r.delta, r.psi_dot, r.beta, r.psi), (0.0, 0.0, 0.0, 0.0, 0.0));
        let on = VehicleState { x: 5.0, y: 0.0, v: 2.0, ..Default::default() };
        let r = sq.relocate_to_centerline(&on);
        assert_eq!((r.x, r.y, r.v), (5.0, 0.0, 0.0));
    }

    #[test]
    fn generated_tracks_respect_width_bounds() {
        for seed in 0..4 {
            let t = generate_track(&TrackGenSpec::with_seed(seed)).unwrap();
            let total: Vec<f64> = t.w_left.iter().zip(&t.w_right).map(|(l, r)| l + r).collect();
            let mean = total[..total.len() - 1].iter().sum::<f64>() / (total.len() - 1) as f64;
            assert!((1.5 * 0.8..=1.8 * 1.2).contains(&mean));
            let lo = total.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = total.iter().cloned().fold(0.0, f64::max);
            assert!(lo >= 0.8 * 1.5 && hi <= 1.2 * 1.8, "{lo} {hi}");
            assert!(t.walls_are_simple());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_track(&TrackGenSpec::with_seed(11)).unwrap();
        let b = generate_track(&TrackGenSpec::with_seed(11)).unwrap();
        assert_eq!(a.arclength, b.arclength);
        assert_eq!(a.centerline, b.centerline);
        assert_eq!(a.w_left, b.w_left);
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = TrackGenSpec { mean_width_min: 1.0, ..TrackGenSpec::default() };
        assert!(matches!(generate_track(&spec), Err(SimError::InvalidParameter(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = generate_track(&TrackGenSpec::with_seed(3)).unwrap();
        let path = dir.path().join("t.csv");
        t.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        let u = Track::load_csv(&path).unwrap();
        assert_eq!(t.centerline, u.centerline);
        assert_eq!(t.w_right, u.w_right);
    }

    proptest::proptest! {
        #[test]
        fn progress_delta_is_antisymmetric(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let t = square_track(10.0, 1.0);
            let (a, b) = (a * t.total_length, b * t.total_length);
            let f = t.progress_delta(a, b);
            let r = t.progress_delta(b, a);
            proptest::prop_assert!(f.abs() <= 0.5 * t.total_length);
            proptest::prop_assert!((f + r).abs() < 1e-9 || (f.abs() - 0.5 * t.total_length).abs() < 1e-9);
        }
    }
}
