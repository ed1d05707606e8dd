//! Simulated planar LiDAR and noisy odometry.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{ray_segment, Vec2};
use crate::track::Track;
use crate::vehicle::VehicleState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub n_beams: usize,
    /// Field of view in radians.
    pub fov: f64,
    pub max_range: f64,
    pub rate_hz: f64,
    pub noise_std: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self { n_beams: 1081, fov: 270f64.to_radians(), max_range: 10.0, rate_hz: 40.0, noise_std: 0.01 }
    }
}

impl LidarConfig {
    /// Beam angle relative to the vehicle heading. Beam 0 is the rightmost
    /// beam and angles increase counter-clockwise.
    pub fn beam_angle(&self, i: usize) -> f64 {
        -0.5 * self.fov + self.fov * i as f64 / (self.n_beams - 1) as f64
    }

    pub fn angular_step(&self) -> f64 {
        self.fov / (self.n_beams - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdometryNoise {
    pub v_std: f64,
    pub yaw_std: f64,
}

impl Default for OdometryNoise {
    fn default() -> Self {
        Self { v_std: 0.05, yaw_std: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub ranges: Vec<f64>,
    pub stamp: u64,
}

/// Distance from `origin` to the nearest wall along `angle`, or `max_range`.
pub fn raycast(origin: Vec2, angle: f64, track: &Track, max_range: f64) -> f64 {
    track
        .wall_grid()
        .raycast(origin, Vec2::from_angle(angle), max_range)
        .unwrap_or(max_range)
}

/// Same query answered by testing every wall segment.
pub fn raycast_exhaustive(origin: Vec2, angle: f64, track: &Track, max_range: f64) -> f64 {
    let dir = Vec2::from_angle(angle);
    track
        .wall_segments()
        .iter()
        .filter_map(|s| ray_segment(origin, dir, s))
        .fold(max_range, f64::min)
}

fn gaussian(std: f64) -> Option<Normal<f64>> {
    (std > 0.0).then(|| Normal::new(0.0, std).expect("finite std"))
}

pub fn simulate_scan<R: Rng + ?Sized>(
    state: &VehicleState,
    track: &Track,
    cfg: &LidarConfig,
    stamp: u64,
    rng: &mut R,
) -> Scan {
    let origin = Vec2::new(state.x, state.y);
    let noise = gaussian(cfg.noise_std);
    let ranges = (0..cfg.n_beams)
        .map(|i| {
            let r = raycast(origin, state.psi + cfg.beam_angle(i), track, cfg.max_range);
            match &noise {
                Some(n) => (r + n.sample(rng)).clamp(0.0, cfg.max_range),
                None => r,
            }
        })
        .collect();
    Scan { ranges, stamp }
}

/// Noisy longitudinal speed (clamped non-negative) and yaw rate.
pub fn measure_state<R: Rng + ?Sized>(state: &VehicleState, noise: &OdometryNoise, rng: &mut R) -> (f64, f64) {
    let v = match gaussian(noise.v_std) {
        Some(n) => (state.v + n.sample(rng)).max(0.0),
        None => state.v,
    };
    let yaw = match gaussian(noise.yaw_std) {
        Some(n) => state.psi_dot + n.sample(rng),
        None => state.psi_dot,
    };
    (v, yaw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::Track;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Long straight corridor along +x, 2 m wide, closed by a far return leg.
    fn corridor() -> Track {
        let mut pts = Vec::new();
        for i in 0..400 {
            pts.push(Vec2::new(-20.0 + 0.1 * i as f64, 0.0));
        }
        for i in 0..400 {
            pts.push(Vec2::new(20.0 - 0.1 * i as f64, 30.0));
        }
        let w = vec![1.0; pts.len()];
        Track::new("corridor", &pts, &w, &w).unwrap()
    }

    #[test]
    fn flat_wall_distance() {
        let t = corridor();
        let r = raycast(Vec2::new(0.0, 0.0), std::f64::consts::FRAC_PI_2, &t, 10.0);
        assert!((r - 1.0).abs() < 1e-9, "{r}");
        let r = raycast(Vec2::new(0.0, -0.5), std::f64::consts::FRAC_PI_2, &t, 10.0);
        assert!((r - 1.5).abs() < 1e-9, "{r}");
    }

    #[test]
    fn open_straight_clips() {
        let t = corridor();
        assert_eq!(raycast(Vec2::new(-5.0, 0.0), 0.0, &t, 10.0), 10.0);
    }

    #[test]
    fn noiseless_scan_is_per_beam_raycast_and_symmetric() {
        let t = corridor();
        let cfg = LidarConfig { noise_std: 0.0, ..Default::default() };
        let s = VehicleState::at_pose(0.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scan = simulate_scan(&s, &t, &cfg, 0, &mut rng);
        assert_eq!(scan.ranges.len(), 1081);
        for i in (0..1081).step_by(37) {
            assert_eq!(scan.ranges[i], raycast(Vec2::default(), cfg.beam_angle(i), &t, 10.0));
        }
        for i in 0..540 {
            assert!((scan.ranges[i] - scan.ranges[1080 - i]).abs() < 1e-9);
        }
    }

    #[test]
    fn odometry_noise() {
        let s = VehicleState { v: 0.0, psi_dot: 0.3, ..Default::default() };
        let off = OdometryNoise { v_std: 0.0, yaw_std: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(measure_state(&s, &off, &mut rng), (0.0, 0.3));
        let on = OdometryNoise::default();
        for _ in 0..1000 {
            assert!(measure_state(&s, &on, &mut rng).0 >= 0.0);
        }
    }

    #[test]
    fn noise_std_monte_carlo() {
        let t = corridor();
        let cfg = LidarConfig { n_beams: 3, noise_std: 0.05, ..Default::default() };
        let s = VehicleState::at_pose(0.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Beam 1 points straight ahead (10 m, clipped) so use the left beam at +135 deg.
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|k| simulate_scan(&s, &t, &cfg, k, &mut rng).ranges[2]).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() / 0.05 - 1.0).abs() < 0.05);

        let st = VehicleState { v: 3.0, psi_dot: 0.1, ..Default::default() };
        let noise = OdometryNoise { v_std: 0.05, yaw_std: 0.02 };
        let draws: Vec<(f64, f64)> = (0..n).map(|_| measure_state(&st, &noise, &mut rng)).collect();
        for (k, std) in [(0usize, 0.05), (1, 0.02)] {
            let xs: Vec<f64> = draws.iter().map(|d| if k == 0 { d.0 } else { d.1 }).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!((sd / std - 1.0).abs() < 0.05);
        }
    }

    proptest::proptest! {
        #[test]
        fn raycast_is_bounded_and_exact(fx in 0.0f64..1.0, fy in 0.0f64..1.0, angle in -3.2f64..3.2) {
            let t = crate::track::generate_track(&crate::track::TrackGenSpec::with_seed(3)).unwrap();
            let (lo, hi) = t.bounding_box();
            let p = Vec2::new(lo.x + fx * (hi.x - lo.x), lo.y + fy * (hi.y - lo.y));
            let r = raycast(p, angle, &t, 10.0);
            proptest::prop_assert!((0.0..=10.0).contains(&r));
            proptest::prop_assert!((r - raycast_exhaustive(p, angle, &t, 10.0)).abs() < 1e-9);
        }
    }
}
