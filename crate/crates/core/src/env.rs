//! The racing MDP: observation pipeline, reward, episode handling, vectorized
//! stepping and the evaluation race protocol.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{ftg_action, stanley_action, FtgConfig, ReferenceLine, StanleyConfig};
use crate::geometry::Vec2;
use crate::sensors::{measure_state, simulate_scan, LidarConfig, OdometryNoise, Scan};
use crate::track::Track;
use crate::vehicle::{integrate_step, TireParams, VehicleParams, VehicleState, CONTROL_DT};
use crate::{Result, SimError};

pub const N_FRAMES: usize = 4;
pub const RAW_BEAMS: usize = 1081;
pub const CROP_LEN: usize = 1024;
pub const CROP_START: usize = (RAW_BEAMS - CROP_LEN) / 2;
pub const LIDAR_FEATURES: usize = CROP_LEN / 2;
/// Scalars per frame besides the LiDAR: previous action (2), speed, yaw rate.
pub const STATE_FEATURES: usize = 4;
pub const FRAME_LEN: usize = LIDAR_FEATURES + STATE_FEATURES;

/// Time added to the race clock for every crash.
pub const CRASH_PENALTY_S: f64 = 5.0;

/// Affine map between normalized actions and physical targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionLimits {
    pub delta_max: f64,
    pub v_max: f64,
}

impl From<&VehicleParams> for ActionLimits {
    fn from(p: &VehicleParams) -> Self {
        Self { delta_max: p.delta_max, v_max: p.v_max }
    }
}

impl ActionLimits {
    /// `[-1, 1]²` to (steering angle, target speed).
    pub fn rescale(&self, a: [f64; 2]) -> (f64, f64) {
        let a0 = a[0].clamp(-1.0, 1.0);
        let a1 = a[1].clamp(-1.0, 1.0);
        (a0 * self.delta_max, 0.5 * (a1 + 1.0) * self.v_max)
    }

    pub fn normalize(&self, delta: f64, v: f64) -> [f64; 2] {
        [
            (delta / self.delta_max).clamp(-1.0, 1.0),
            (2.0 * v / self.v_max - 1.0).clamp(-1.0, 1.0),
        ]
    }
}

/// Crops the central 1024 beams, normalizes by `max_range` and average-pools
/// pairs of beams into 512 features in [0, 1].
pub fn preprocess_lidar(raw: &[f64], max_range: f64) -> Result<Vec<f64>> {
    if raw.len() != RAW_BEAMS {
        return Err(SimError::ScanLength { got: raw.len(), expected: RAW_BEAMS });
    }
    Ok(raw[CROP_START..CROP_START + CROP_LEN]
        .chunks_exact(2)
        .map(|p| 0.5 * ((p[0] / max_range).clamp(0.0, 1.0) + (p[1] / max_range).clamp(0.0, 1.0)))
        .collect())
}

pub fn compute_reward(d_cl: f64, delta_next: f64, delta_prev: f64, collided: bool) -> f64 {
    0.1 * d_cl - 0.001 * (delta_next - delta_prev).abs() - if collided { 5.0 } else { 0.0 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub lidar: Vec<f64>,
    pub prev_action: [f64; 2],
    /// Measured speed divided by the speed normalizer.
    pub v_long: f64,
    /// Measured yaw rate divided by the yaw-rate normalizer.
    pub yaw_rate: f64,
}

/// The `N_FRAMES` most recent observations, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedState {
    pub frames: VecDeque<Observation>,
}

impl StackedState {
    pub fn filled(obs: Observation) -> Self {
        Self { frames: std::iter::repeat_n(obs, N_FRAMES).collect() }
    }

    pub fn push(&mut self, obs: Observation) {
        self.frames.pop_front();
        self.frames.push_back(obs);
    }

    pub fn newest(&self) -> &Observation {
        self.frames.back().expect("stack is never empty")
    }

    /// Frame-major LiDAR block `[N_FRAMES][LIDAR_FEATURES]`.
    pub fn lidar_block(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().flat_map(|f| f.lidar.iter().copied())
    }

    /// Per frame: previous steering, previous speed action, speed, yaw rate.
    pub fn state_block(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().flat_map(|f| [f.prev_action[0], f.prev_action[1], f.v_long, f.yaw_rate])
    }

    /// All scalars, LiDAR block first then the state block.
    pub fn to_vec(&self) -> Vec<f64> {
        self.lidar_block().chain(self.state_block()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    pub progress_m: f64,
    pub collision: bool,
    pub lap_count: u32,
    pub speed: f64,
    /// Set when the step failed and the environment was reset.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: StackedState,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub control_rate_hz: f64,
    pub max_episode_steps: u32,
    pub start_lateral_jitter: f64,
    pub start_heading_jitter: f64,
    pub speed_norm: f64,
    pub yaw_rate_norm: f64,
    pub vehicle: VehicleParams,
    pub tires: TireParams,
    pub lidar: LidarConfig,
    pub odometry: OdometryNoise,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            control_rate_hz: 1.0 / CONTROL_DT,
            max_episode_steps: 4000,
            start_lateral_jitter: 0.1,
            start_heading_jitter: 0.05,
            speed_norm: 8.0,
            yaw_rate_norm: 4.0,
            vehicle: VehicleParams::default(),
            tires: TireParams::default(),
            lidar: LidarConfig::default(),
            odometry: OdometryNoise::default(),
        }
    }
}

impl EnvConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.control_rate_hz
    }

    pub fn noiseless(mut self) -> Self {
        self.lidar.noise_std = 0.0;
        self.odometry = OdometryNoise { v_std: 0.0, yaw_std: 0.0 };
        self
    }

    pub fn limits(&self) -> ActionLimits {
        ActionLimits::from(&self.vehicle)
    }
}

/// Everything a policy may look at: the stacked observation plus the
/// privileged simulator state available during training.
pub struct PolicyInput<'a> {
    pub state: &'a StackedState,
    pub scan: &'a Scan,
    pub vehicle: &'a VehicleState,
    pub track: &'a Track,
}

pub trait Policy {
    fn act(&mut self, input: &PolicyInput<'_>) -> [f64; 2];
    fn reset(&mut self) {}
}

/// Stanley tracking of a (centerline) reference line.
#[derive(Debug, Clone)]
pub struct StanleyPolicy {
    pub line: ReferenceLine,
    pub cfg: StanleyConfig,
    pub params: VehicleParams,
}

impl StanleyPolicy {
    pub fn new(track: &Track, cfg: StanleyConfig, params: VehicleParams) -> Self {
        let line = crate::controllers::build_speed_profile(&ReferenceLine::centerline(track), &params, &cfg);
        Self { line, cfg, params }
    }

    pub fn action(&self, vehicle: &VehicleState) -> [f64; 2] {
        stanley_action(vehicle, &self.line, &self.cfg, &self.params)
    }
}

impl Policy for StanleyPolicy {
    fn act(&mut self, input: &PolicyInput<'_>) -> [f64; 2] {
        self.action(input.vehicle)
    }
}

#[derive(Debug, Clone)]
pub struct FtgPolicy {
    pub lidar: LidarConfig,
    pub cfg: FtgConfig,
    pub params: VehicleParams,
}

impl Policy for FtgPolicy {
    fn act(&mut self, input: &PolicyInput<'_>) -> [f64; 2] {
        ftg_action(input.scan, &self.lidar, &self.cfg, &self.params)
    }
}

/// One race car on one track with its own random stream.
#[derive(Debug, Clone)]
pub struct RacingEnv {
    pub cfg: EnvConfig,
    track: Arc<Track>,
    rng: ChaCha8Rng,
    vehicle: VehicleState,
    frames: Option<StackedState>,
    scan: Scan,
    steps: u32,
    s_prev: f64,
    prev_delta_cmd: f64,
    total_progress: f64,
    stamp: u64,
}

impl RacingEnv {
    pub fn new(track: Arc<Track>, cfg: EnvConfig, seed: u64) -> Self {
        Self {
            cfg,
            track,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vehicle: VehicleState::default(),
            frames: None,
            scan: Scan { ranges: vec![0.0; cfg.lidar.n_beams], stamp: 0 },
            steps: 0,
            s_prev: 0.0,
            prev_delta_cmd: 0.0,
            total_progress: 0.0,
            stamp: 0,
        }
    }

    pub fn track(&self) -> &Arc<Track> {
        &self.track
    }

    pub fn vehicle(&self) -> &VehicleState {
        &self.vehicle
    }

    pub fn scan(&self) -> &Scan {
        &self.scan
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn total_progress(&self) -> f64 {
        self.total_progress
    }

    pub fn state(&self) -> Result<&StackedState> {
        self.frames.as_ref().ok_or(SimError::NotReset)
    }

    pub fn policy_input(&self) -> Result<PolicyInput<'_>> {
        Ok(PolicyInput { state: self.state()?, scan: &self.scan, vehicle: &self.vehicle, track: &self.track })
    }

    fn observe(&mut self, prev_action: [f64; 2]) -> Observation {
        self.stamp += 1;
        self.scan = simulate_scan(&self.vehicle, &self.track, &self.cfg.lidar, self.stamp, &mut self.rng);
        let (v, yaw) = measure_state(&self.vehicle, &self.cfg.odometry, &mut self.rng);
        let lidar = preprocess_lidar(&self.scan.ranges, self.cfg.lidar.max_range)
            .expect("simulated scans have the configured beam count");
        Observation { lidar, prev_action, v_long: v / self.cfg.speed_norm, yaw_rate: yaw / self.cfg.yaw_rate_norm }
    }

    /// Places the car at rest on `vehicle`'s pose and refills the frame stack.
    fn place(&mut self, vehicle: VehicleState) -> StackedState {
        self.vehicle = vehicle;
        self.s_prev = self.track.project(Vec2::new(vehicle.x, vehicle.y)).s;
        self.prev_delta_cmd = 0.0;
        let obs = self.observe([0.0, -1.0]);
        let stacked = StackedState::filled(obs);
        self.frames = Some(stacked.clone());
        stacked
    }

    fn reset_counters(&mut self) {
        self.steps = 0;
        self.total_progress = 0.0;
    }

    /// Evaluation start: pose `start_index` of `n_starts` evenly spaced
    /// centerline poses, `s_k = k * L / n_starts`, no jitter.
    pub fn reset(&mut self, start_index: usize, n_starts: usize) -> StackedState {
        self.reset_counters();
        let s = start_index as f64 * self.track.total_length / n_starts.max(1) as f64;
        let v = self.track.start_state(s);
        self.place(v)
    }

    /// Training start: uniform random arclength with small lateral and
    /// heading jitter.
    pub fn reset_random(&mut self) -> StackedState {
        self.reset_counters();
        let s = self.rng.random_range(0.0..self.track.total_length);
        let lat = if self.cfg.start_lateral_jitter > 0.0 {
            self.rng.random_range(-self.cfg.start_lateral_jitter..self.cfg.start_lateral_jitter)
        } else {
            0.0
        };
        let head = if self.cfg.start_heading_jitter > 0.0 {
            self.rng.random_range(-self.cfg.start_heading_jitter..self.cfg.start_heading_jitter)
        } else {
            0.0
        };
        let (_, heading) = self.track.pose_at(s);
        let p = self.track.point_at(s, lat);
        self.place(VehicleState::at_pose(p.x, p.y, heading + head))
    }

    /// Puts a crashed car back onto the nearest centerline point.
    pub fn relocate(&mut self) -> StackedState {
        let v = self.track.relocate_to_centerline(&self.vehicle);
        self.place(v)
    }

    pub fn step(&mut self, action: [f64; 2]) -> Result<StepResult> {
        if self.frames.is_none() {
            return Err(SimError::NotReset);
        }
        let (delta_cmd, v_cmd) = self.cfg.limits().rescale(action);
        self.vehicle = integrate_step(&self.vehicle, delta_cmd, v_cmd, &self.cfg.vehicle, &self.cfg.tires, self.cfg.dt())?;
        let collision = self.track.collision_check(&self.vehicle, &self.cfg.vehicle);
        let s_next = self.track.project(Vec2::new(self.vehicle.x, self.vehicle.y)).s;
        let progress = self.track.progress_delta(self.s_prev, s_next);
        self.s_prev = s_next;
        self.total_progress += progress;
        let reward = compute_reward(progress, delta_cmd, self.prev_delta_cmd, collision);
        self.prev_delta_cmd = delta_cmd;
        let obs = self.observe(action);
        let frames = self.frames.as_mut().expect("checked above");
        frames.push(obs);
        self.steps += 1;
        let lap_count = (self.total_progress / self.track.total_length).floor().max(0.0) as u32;
        Ok(StepResult {
            state: frames.clone(),
            reward,
            terminated: collision,
            truncated: !collision && self.steps >= self.cfg.max_episode_steps,
            info: StepInfo { progress_m: progress, collision, lap_count, speed: self.vehicle.v, failed: false },
        })
    }
}

/// A set of independent environments stepped together.
#[derive(Debug, Clone)]
pub struct VecEnv {
    pub envs: Vec<RacingEnv>,
}

impl VecEnv {
    pub fn new(envs: Vec<RacingEnv>) -> Self {
        Self { envs }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn reset_random(&mut self) -> Vec<StackedState> {
        self.envs.iter_mut().map(|e| e.reset_random()).collect()
    }

    /// Steps every environment with its action. Results equal stepping each
    /// environment on its own in index order. A failing environment is reset
    /// and reported with `info.failed` and `truncated` set.
    pub fn step(&mut self, actions: &[[f64; 2]]) -> Vec<StepResult> {
        assert_eq!(actions.len(), self.envs.len(), "one action per environment");
        self.envs
            .par_iter_mut()
            .zip(actions.par_iter())
            .map(|(env, &a)| match env.step(a) {
                Ok(r) => r,
                Err(_) => {
                    let state = env.reset_random();
                    StepResult {
                        state,
                        reward: 0.0,
                        terminated: false,
                        truncated: true,
                        info: StepInfo { failed: true, ..StepInfo::default() },
                    }
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub lap: u32,
    pub crash: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceOutcome {
    pub start_index: usize,
    /// Driving time plus the crash penalties [s].
    pub total_race_time: f64,
    pub driving_time: f64,
    pub collisions: u32,
    pub collisions_per_lap: f64,
    pub max_speed: f64,
    pub lap_times: Vec<f64>,
    /// Set when the step budget ran out before the last lap was completed.
    pub aborted: bool,
    pub trajectory: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaceConfig {
    pub n_laps: u32,
    pub n_starts: usize,
    /// Maximum simulated steps before the race is aborted.
    pub max_steps: u64,
}

impl Default for RaceConfig {
    fn default() -> Self {
        Self { n_laps: 5, n_starts: 10, max_steps: 40 * 60 * 10 }
    }
}

/// Against-the-clock race. On a crash the car is relocated to the nearest
/// centerline point, the penalty is added and the race resumes.
pub fn run_race(env: &mut RacingEnv, policy: &mut dyn Policy, start_index: usize, race: &RaceConfig) -> Result<RaceOutcome> {
    let dt = env.cfg.dt();
    env.reset(start_index, race.n_starts);
    policy.reset();
    let lap_len = env.track().total_length;
    let mut progress = 0.0;
    let mut t = 0.0;
    let mut lap_marks = Vec::new();
    let mut collisions = 0u32;
    let mut max_speed: f64 = 0.0;
    let mut trajectory = Vec::new();
    let mut aborted = false;
    let mut steps = 0u64;
    while (lap_marks.len() as u32) < race.n_laps {
        if steps >= race.max_steps {
            aborted = true;
            break;
        }
        let action = policy.act(&env.policy_input()?);
        let res = env.step(action)?;
        steps += 1;
        let before = progress;
        progress += res.info.progress_m;
        t += dt;
        max_speed = max_speed.max(res.info.speed);
        while (lap_marks.len() as u32) < race.n_laps && progress >= lap_len * (lap_marks.len() + 1) as f64 {
            let target = lap_len * (lap_marks.len() + 1) as f64;
            let frac = if progress > before { (target - before) / (progress - before) } else { 1.0 };
            lap_marks.push(t - dt + frac * dt);
        }
        let v = env.vehicle();
        trajectory.push(TrajectoryPoint {
            t,
            x: v.x,
            y: v.y,
            speed: v.v,
            lap: lap_marks.len() as u32,
            crash: res.terminated,
        });
        if res.terminated && (lap_marks.len() as u32) < race.n_laps {
            collisions += 1;
            env.relocate();
            policy.reset();
        }
    }
    let driving_time = lap_marks.last().copied().unwrap_or(t);
    let lap_times = lap_marks
        .iter()
        .scan(0.0, |prev, &m| {
            let d = m - *prev;
            *prev = m;
            Some(d)
        })
        .collect();
    Ok(RaceOutcome {
        start_index,
        total_race_time: driving_time + CRASH_PENALTY_S * collisions as f64,
        driving_time,
        collisions,
        collisions_per_lap: collisions as f64 / race.n_laps as f64,
        max_speed,
        lap_times,
        aborted,
        trajectory,
    })
}
