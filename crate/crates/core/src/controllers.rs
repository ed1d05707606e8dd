//! Classical base policies. Both emit actions in the normalized `[-1, 1]²`
//! action space of the environment: `[steering, speed]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::ActionLimits;
use crate::geometry::{Segment, Vec2};
use crate::sensors::{LidarConfig, Scan};
use crate::track::{menger_curvature, Track};
use crate::vehicle::{wrap_angle, TireParams, VehicleParams, VehicleState, GRAVITY};
use crate::{Result, SimError};

/// Closed reference path with a target speed per waypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLine {
    /// Closed polyline; the last point repeats the first.
    pub waypoints: Vec<Vec2>,
    pub speed_profile: Vec<f64>,
    pub arclength: Vec<f64>,
    pub curvature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineProjection {
    pub idx: usize,
    pub u: f64,
    pub s: f64,
    /// Signed offset of the query point, positive left of the line.
    pub d: f64,
    pub heading: f64,
}

impl ReferenceLine {
    /// Builds a line through the open point list with a constant speed.
    pub fn from_points(points: &[Vec2], speed: f64) -> Result<Self> {
        let n = points.len();
        if n < 3 {
            return Err(SimError::InvalidTrack("reference line needs at least 3 points".into()));
        }
        let mut waypoints = points.to_vec();
        waypoints.push(points[0]);
        let mut arclength = vec![0.0];
        for w in waypoints.windows(2) {
            arclength.push(arclength.last().unwrap() + (w[1] - w[0]).norm());
        }
        let curvature = (0..=n)
            .map(|i| {
                let k = i % n;
                menger_curvature(points[(k + n - 1) % n], points[k], points[(k + 1) % n])
            })
            .collect();
        Ok(Self { waypoints, speed_profile: vec![speed; n + 1], arclength, curvature })
    }

    pub fn centerline(track: &Track) -> Self {
        let pts = &track.centerline[..track.centerline.len() - 1];
        Self::from_points(pts, 0.0).expect("tracks have at least 3 points")
    }

    pub fn total_length(&self) -> f64 {
        *self.arclength.last().unwrap()
    }

    pub fn project(&self, p: Vec2) -> LineProjection {
        let mut best = (0, 0.0, f64::INFINITY);
        for i in 0..self.waypoints.len() - 1 {
            let (u, d2) = Segment::new(self.waypoints[i], self.waypoints[i + 1]).closest(p);
            if d2 < best.2 {
                best = (i, u, d2);
            }
        }
        let (idx, u, d2) = best;
        let a = self.waypoints[idx];
        let dir = self.waypoints[idx + 1] - a;
        let d = if dir.cross(p - a) >= 0.0 { d2.sqrt() } else { -d2.sqrt() };
        let s = self.arclength[idx] + u * (self.arclength[idx + 1] - self.arclength[idx]);
        LineProjection { idx, u, s, d, heading: dir.angle() }
    }

    /// Linearly interpolated profile speed at arclength `s` (wrapped).
    pub fn speed_at(&self, s: f64) -> f64 {
        let s = s.rem_euclid(self.total_length());
        let i = match self.arclength.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => i.min(self.arclength.len() - 2),
            Err(i) => i - 1,
        };
        let u = (s - self.arclength[i]) / (self.arclength[i + 1] - self.arclength[i]);
        self.speed_profile[i] + u * (self.speed_profile[i + 1] - self.speed_profile[i])
    }

    /// Minimum profile speed over `[s, s + horizon]`.
    pub fn min_speed_ahead(&self, s: f64, horizon: f64) -> f64 {
        let mut v = self.speed_at(s);
        let l = self.total_length();
        let n = self.waypoints.len() - 1;
        let start = match self.arclength.binary_search_by(|x| x.total_cmp(&s.rem_euclid(l))) {
            Ok(i) | Err(i) => i % n,
        };
        let mut covered = 0.0;
        let mut i = start;
        while covered < horizon {
            v = v.min(self.speed_profile[i]);
            covered += self.arclength[i + 1] - self.arclength[i];
            i = (i + 1) % n;
        }
        v.min(self.speed_at(s + horizon))
    }

    /// Imports a line in the track CSV layout with an extra `v_mps` column:
    /// `x_m, y_m, w_tr_left_m, w_tr_right_m, v_mps`.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| SimError::Io { path: path.display().to_string(), source })?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(file);
        let mut pts = Vec::new();
        let mut speeds = Vec::new();
        for rec in reader.deserialize::<(f64, f64, f64, f64, f64)>() {
            let (x, y, _, _, v) = rec.map_err(|source| SimError::Csv { path: path.display().to_string(), source })?;
            pts.push(Vec2::new(x, y));
            speeds.push(v);
        }
        let mut line = Self::from_points(&pts, 0.0)?;
        speeds.push(speeds[0]);
        line.speed_profile = speeds;
        Ok(line)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StanleyConfig {
    /// Cross-track gain [1/s].
    pub k_e: f64,
    /// Softening speed [m/s].
    pub k_soft: f64,
    /// Lateral acceleration cap of the speed profile [m/s²].
    pub a_lat_max: f64,
    /// Upper bound of the speed profile [m/s].
    pub v_cap: f64,
    /// The commanded speed is the profile minimum over this preview time.
    pub preview_time: f64,
}

impl Default for StanleyConfig {
    fn default() -> Self {
        Self::for_tires(&TireParams::default())
    }
}

impl StanleyConfig {
    pub fn for_tires(tires: &TireParams) -> Self {
        Self { k_e: 1.5, k_soft: 1.0, a_lat_max: 0.8 * tires.mu * GRAVITY, v_cap: 6.0, preview_time: 0.6 }
    }
}

/// Steering angle from heading error `theta_e` and cross-track error `e`.
/// `e` is the lateral distance from the vehicle to the line, positive when
/// the line lies to the vehicle's left; positive steering turns left.
pub fn stanley_law(e: f64, theta_e: f64, v: f64, cfg: &StanleyConfig) -> f64 {
    theta_e + (cfg.k_e * e / (cfg.k_soft + v)).atan()
}

/// Curvature-limited speed profile with forward (acceleration) and backward
/// (braking) feasibility passes around the closed line.
pub fn build_speed_profile(
    line: &ReferenceLine,
    params: &VehicleParams,
    cfg: &StanleyConfig,
) -> ReferenceLine {
    let n = line.waypoints.len() - 1;
    let cap = cfg.v_cap.min(params.v_max);
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            let k = line.curvature[i].abs();
            let lim = if k > 0.0 { (cfg.a_lat_max / k).sqrt() } else { f64::INFINITY };
            lim.min(cap).max(params.v_min)
        })
        .collect();
    let ds: Vec<f64> = (0..n).map(|i| line.arclength[i + 1] - line.arclength[i]).collect();
    let brake = params.a_min.abs();
    // Passes only ever lower speeds, so this reaches a fixed point quickly.
    for _ in 0..64 {
        let mut changed = false;
        for k in 0..n {
            let (i, j) = (k, (k + 1) % n);
            let lim = (v[i] * v[i] + 2.0 * params.a_max * ds[i]).sqrt();
            if v[j] > lim {
                v[j] = lim;
                changed = true;
            }
        }
        for k in (0..n).rev() {
            let (i, j) = (k, (k + 1) % n);
            let lim = (v[j] * v[j] + 2.0 * brake * ds[i]).sqrt();
            if v[i] > lim {
                v[i] = lim;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    v.push(v[0]);
    ReferenceLine { speed_profile: v, ..line.clone() }
}

/// Stanley tracking of the reference line from the front axle.
pub fn stanley_action(
    state: &VehicleState,
    line: &ReferenceLine,
    cfg: &StanleyConfig,
    params: &VehicleParams,
) -> [f64; 2] {
    let limits = ActionLimits::from(params);
    let front = Vec2::new(state.x, state.y) + Vec2::from_angle(state.psi) * params.l_f;
    let proj = line.project(front);
    let theta_e = wrap_angle(proj.heading - state.psi);
    let delta = stanley_law(-proj.d, theta_e, state.v, cfg).clamp(-params.delta_max, params.delta_max);
    let horizon = state.v.max(1.0) * cfg.preview_time;
    let v_cmd = line.min_speed_ahead(proj.s, horizon);
    limits.normalize(delta, v_cmd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FtgConfig {
    pub bubble_radius: f64,
    pub clip_range: f64,
    /// Gaps narrower than this many beams are ignored.
    pub min_gap_width: usize,
    /// Only beams within this angle of the heading are considered [rad].
    pub field_half_angle: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Half-width of the cone used to measure forward clearance [rad].
    pub forward_cone: f64,
    /// Lateral acceleration allowed at the commanded steering angle [m/s²].
    pub a_lat_max: f64,
    /// Distance kept to the obstacle ahead when braking [m].
    pub stop_margin: f64,
    /// Steering angle per radian of gap-center bearing.
    pub steer_gain: f64,
}

impl Default for FtgConfig {
    fn default() -> Self {
        Self {
            bubble_radius: 0.3,
            clip_range: 6.0,
            min_gap_width: 5,
            field_half_angle: 60f64.to_radians(),
            v_min: 1.0,
            v_max: 6.0,
            forward_cone: 5f64.to_radians(),
            a_lat_max: 0.8 * 0.5 * 9.81,
            stop_margin: 0.5,
            steer_gain: 0.5,
        }
    }
}

/// Index range `[start, end)` of the widest run of nonzero values no shorter
/// than `min_width`; earlier runs win ties.
pub fn widest_gap(ranges: &[f64], min_width: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < ranges.len() {
        if ranges[i] > 0.0 {
            let start = i;
            while i < ranges.len() && ranges[i] > 0.0 {
                i += 1;
            }
            let width = i - start;
            if width >= min_width.max(1) && best.is_none_or(|(s, e)| width > e - s) {
                best = Some((start, i));
            }
        } else {
            i += 1;
        }
    }
    best
}

/// Follow-the-Gap: bubble out the closest obstacle, then steer to the center
/// of the widest remaining gap. Reacts to the scan only.
pub fn ftg_action(scan: &Scan, lidar: &LidarConfig, cfg: &FtgConfig, params: &VehicleParams) -> [f64; 2] {
    let limits = ActionLimits::from(params);
    let n = scan.ranges.len();
    let step = lidar.fov / (n - 1) as f64;
    let mut r: Vec<f64> = scan
        .ranges
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let angle = -0.5 * lidar.fov + step * i as f64;
            if angle.abs() <= cfg.field_half_angle + 1e-12 { x.clamp(0.0, cfg.clip_range) } else { 0.0 }
        })
        .collect();

    let nearest = r.iter().cloned().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min);
    if nearest.is_finite() {
        let spread = (cfg.bubble_radius / nearest).min(1.0).asin();
        let half_beams = (spread / step).ceil() as isize;
        let centers: Vec<usize> = (0..n).filter(|&i| r[i] == nearest).collect();
        for c in centers {
            let lo = (c as isize - half_beams).max(0) as usize;
            let hi = ((c as isize + half_beams) as usize).min(n - 1);
            r[lo..=hi].iter_mut().for_each(|x| *x = 0.0);
        }
    }

    let delta = match widest_gap(&r, cfg.min_gap_width) {
        Some((s, e)) => {
            // Center of the run; for even widths this is the midpoint between the two middle beams.
            let center = 0.5 * (s + e - 1) as f64;
            cfg.steer_gain * (-0.5 * lidar.fov + step * center)
        }
        None => 0.0,
    }
    .clamp(-params.delta_max, params.delta_max);

    let cone = (cfg.forward_cone / step).round() as usize;
    let mid = n / 2;
    let forward = scan.ranges[mid.saturating_sub(cone)..=(mid + cone).min(n - 1)]
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .min(cfg.clip_range);
    // Kinematic curvature of the command and the braking distance ahead.
    let wheelbase = params.l_f + params.l_r;
    let v_turn = (cfg.a_lat_max * wheelbase / delta.abs().tan().max(1e-9)).sqrt();
    let v_stop = (2.0 * params.a_min.abs() * (forward - cfg.stop_margin).max(0.0)).sqrt();
    let v = v_turn.min(v_stop).clamp(cfg.v_min, cfg.v_max);
    limits.normalize(delta, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    fn straight_line() -> ReferenceLine {
        let mut pts: Vec<Vec2> = (0..200).map(|i| Vec2::new(0.1 * i as f64, 0.0)).collect();
        pts.extend((0..200).map(|i| Vec2::new(20.0 - 0.1 * i as f64, 10.0)));
        ReferenceLine::from_points(&pts, 3.0).unwrap()
    }

    #[test]
    fn stanley_zero_error() {
        let line = straight_line();
        let s = VehicleState { x: 5.0 - 0.1625, y: 0.0, v: 3.0, ..Default::default() };
        let a = stanley_action(&s, &line, &StanleyConfig::default(), &params());
        assert!(a[0].abs() < 1e-12);
    }

    #[test]
    fn stanley_steers_back_to_line() {
        let line = straight_line();
        let cfg = StanleyConfig::default();
        let left = VehicleState { x: 5.0, y: 0.3, v: 3.0, ..Default::default() };
        assert!(stanley_action(&left, &line, &cfg, &params())[0] < 0.0);
        let right = VehicleState { x: 5.0, y: -0.3, v: 3.0, ..Default::default() };
        assert!(stanley_action(&right, &line, &cfg, &params())[0] > 0.0);
    }

    #[test]
    fn stanley_formula() {
        let cfg = StanleyConfig { k_e: 1.5, k_soft: 1.0, ..Default::default() };
        let d = stanley_law(0.2, 0.1, 3.0, &cfg);
        assert!((d - (0.1 + (0.3f64 / 4.0).atan())).abs() < 1e-15);
        assert!((d - 0.17485984771076685).abs() < 1e-15);
    }

    #[test]
    fn speed_profile_pre_pass() {
        let cfg = StanleyConfig { a_lat_max: 3.0, v_cap: 8.0, ..Default::default() };
        // Circle of radius 2: kappa = 0.5 everywhere.
        let pts: Vec<Vec2> = (0..400).map(|i| Vec2::from_angle(i as f64 * std::f64::consts::TAU / 400.0) * 2.0).collect();
        let line = build_speed_profile(&ReferenceLine::from_points(&pts, 0.0).unwrap(), &params(), &cfg);
        for v in &line.speed_profile {
            assert!((v - 6f64.sqrt()).abs() < 1e-6, "{v}");
        }
        let straight = build_speed_profile(&straight_line(), &params(), &cfg);
        assert!((straight.speed_profile[100] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn speed_profile_feasible_and_idempotent() {
        let track = crate::track::generate_track(&crate::track::TrackGenSpec::with_seed(5)).unwrap();
        let p = params();
        let cfg = StanleyConfig { v_cap: 8.0, ..Default::default() };
        let line = build_speed_profile(&ReferenceLine::centerline(&track), &p, &cfg);
        let n = line.waypoints.len() - 1;
        for i in 0..n {
            let ds = line.arclength[i + 1] - line.arclength[i];
            let rate = (line.speed_profile[i + 1].powi(2) - line.speed_profile[i].powi(2)) / (2.0 * ds);
            assert!(rate <= p.a_max + 1e-9 && rate >= p.a_min - 1e-9, "{i}: {rate}");
        }
        let again = build_speed_profile(&line, &p, &cfg);
        assert_eq!(again.speed_profile, line.speed_profile);
    }

    #[test]
    fn ftg_symmetric_scan_goes_straight() {
        let lidar = LidarConfig::default();
        let ranges: Vec<f64> = (0..1081)
            .map(|i| {
                let a = lidar.beam_angle(i);
                let a = if i > 540 { lidar.beam_angle(1080 - i) } else { a };
                (1.0 / a.sin().abs()).min(10.0)
            })
            .collect();
        let scan = Scan { ranges, stamp: 0 };
        let a = ftg_action(&scan, &lidar, &FtgConfig::default(), &params());
        assert!(a[0].abs() < 1e-12, "{:?}", a);
    }

    #[test]
    fn ftg_blocked_right_turns_left() {
        let lidar = LidarConfig::default();
        let ranges: Vec<f64> = (0..1081).map(|i| if i < 540 { 0.5 } else { 8.0 }).collect();
        let a = ftg_action(&Scan { ranges, stamp: 0 }, &lidar, &FtgConfig::default(), &params());
        assert!(a[0] > 0.0);
    }

    #[test]
    fn ftg_picks_widest_gap() {
        let lidar = LidarConfig::default();
        // Two gaps in the front field: 50 beams wide at [380, 430) and 120 beams at [560, 680).
        let mut ranges = vec![1.0; 1081];
        ranges[380..430].iter_mut().for_each(|r| *r = 5.0);
        ranges[560..680].iter_mut().for_each(|r| *r = 5.0);
        let cfg = FtgConfig { bubble_radius: 1e-6, steer_gain: 1.0, ..Default::default() };
        // Brute force: enumerate every run of beams above the obstacle level.
        let mut best = (0, 0);
        for s in 0..1081 {
            for e in s + 1..=1081 {
                if ranges[s..e].iter().all(|&r| r > 1.0) && e - s > best.1 - best.0 {
                    best = (s, e);
                }
            }
        }
        assert_eq!(best, (560, 680));
        let expected = lidar.beam_angle(560) + 0.5 * (119.0 * lidar.angular_step());
        let a = ftg_action(&Scan { ranges: ranges.clone(), stamp: 0 }, &lidar, &cfg, &params());
        // The low-range beams are bubbled out around the closest reading; the two gaps survive.
        assert!((a[0] * 0.45 - expected.clamp(-0.45, 0.45)).abs() < 1e-12, "{} vs {}", a[0] * 0.45, expected);
    }

    proptest! {
        #[test]
        fn controllers_stay_in_bounds(x in -2.0f64..22.0, y in -3.0f64..13.0, psi in -3.2f64..3.2, v in 0.0f64..8.0,
                                      seed in 0u64..1000) {
            let p = params();
            let line = build_speed_profile(&straight_line(), &p, &StanleyConfig::default());
            let s = VehicleState { x, y, psi, v, ..Default::default() };
            let a = stanley_action(&s, &line, &StanleyConfig::default(), &p);
            prop_assert!(a.iter().all(|c| (-1.0..=1.0).contains(c)));
            let lidar = LidarConfig::default();
            let ranges: Vec<f64> = (0..1081u64).map(|i| ((i * 2654435761 ^ seed) % 1000) as f64 / 100.0).collect();
            let a = ftg_action(&Scan { ranges, stamp: 0 }, &lidar, &FtgConfig::default(), &p);
            prop_assert!(a.iter().all(|c| (-1.0..=1.0).contains(c)));
        }

        #[test]
        fn stanley_is_odd(e in -2.0f64..2.0, th in -1.0f64..1.0, v in 0.0f64..8.0) {
            let cfg = StanleyConfig::default();
            prop_assert!((stanley_law(-e, -th, v, &cfg) + stanley_law(e, th, v, &cfg)).abs() < 1e-15);
        }
    }
}
