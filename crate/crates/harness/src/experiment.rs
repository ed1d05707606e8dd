//! Desk-scale learning experiment: α-RPO against DRL from scratch on two
//! generated training tracks, raced on a held-out track against the
//! classical controllers.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use arpo_core::env::{FtgPolicy, Policy, RaceConfig, StanleyPolicy};
use arpo_core::track::{generate_track, Track, TrackGenSpec};
use arpo_learn::agent::NeuralPolicy;
use arpo_learn::distribution::FusionMode;
use arpo_learn::network::Checkpoint;
use arpo_learn::trainer::{read_csv, train, EpisodeRecord, IterationMetrics, RunFiles, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::results::{aggregate_results, race_all_starts, read_rows, write_rows, RaceRow};
use crate::{create_dir, io_err, load_track, Manifest, RaceSettings, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskSpec {
    /// Generator seeds of the training tracks.
    pub train_tracks: Vec<u64>,
    /// Generator seeds of the held-out tracks; must not overlap the training set.
    pub test_tracks: Vec<u64>,
    /// Training seeds. One seed keeps the flat `arpo/`, `drl/` layout.
    pub seeds: Vec<u64>,
    pub total_steps: u64,
    pub n_envs: usize,
    pub traj_len: usize,
    /// Share of the training steps that counts as early training.
    pub early_fraction: f64,
    pub race: RaceSettings,
    pub train: TrainConfig,
}

impl Default for DeskSpec {
    fn default() -> Self {
        Self {
            train_tracks: vec![1, 2],
            test_tracks: vec![100],
            seeds: vec![0],
            total_steps: 500_000,
            n_envs: 8,
            traj_len: 256,
            early_fraction: 0.1,
            race: RaceSettings { laps: 5, starts: 10, ..RaceSettings::default() },
            train: TrainConfig::default(),
        }
    }
}

impl DeskSpec {
    pub fn train_config(&self, mode: FusionMode, seed: u64) -> TrainConfig {
        TrainConfig {
            total_steps: self.total_steps,
            n_envs: self.n_envs,
            traj_len: self.traj_len,
            seed,
            mode,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(crate::HarnessError::Invalid(m));
        if self.train_tracks.is_empty() || self.test_tracks.is_empty() || self.seeds.is_empty() {
            return bad("experiment needs at least one training track, test track and seed".into());
        }
        if let Some(t) = self.test_tracks.iter().find(|t| self.train_tracks.contains(t)) {
            return bad(format!("track seed {t} is both a training and a test track"));
        }
        for &s in &self.seeds {
            self.train_config(FusionMode::Arpo, s).validate()?;
        }
        Ok(())
    }
}

pub const METHODS: [&str; 4] = ["arpo", "drl", "stanley", "ftg"];
pub const LEARNED: [(&str, FusionMode); 2] = [("arpo", FusionMode::Arpo), ("drl", FusionMode::Drl)];

/// Criterion values on the test tracks, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskSummary {
    pub arpo_crashes: f64,
    pub drl_crashes: f64,
    pub early_progress_arpo: f64,
    pub early_progress_drl: f64,
    pub race_time_arpo: f64,
    pub race_time_drl: f64,
    pub race_time_stanley: f64,
    pub race_time_ftg: f64,
    /// (a) α-RPO crashes at most half as often as DRL during training.
    pub crashes_ok: bool,
    /// (b) α-RPO beats FTG and is within 5 % of Stanley on the test tracks.
    pub race_ok: bool,
    /// (c) early progress-return of α-RPO at least three times DRL's.
    pub early_ok: bool,
}

pub struct DeskPaths {
    pub dir: PathBuf,
}

impl DeskPaths {
    pub fn tracks(&self) -> PathBuf {
        self.dir.join("tracks")
    }
    pub fn train_track(&self, seed: u64) -> PathBuf {
        self.tracks().join(format!("train_{seed:03}.csv"))
    }
    pub fn test_track(&self, seed: u64) -> PathBuf {
        self.tracks().join(format!("test_{seed:03}.csv"))
    }
    /// Training run of `method` with `seed`; flat when the spec has one seed.
    pub fn run(&self, method: &str, seed: u64, spec: &DeskSpec) -> PathBuf {
        if spec.seeds.len() == 1 {
            self.dir.join(method)
        } else {
            self.dir.join(format!("{method}_seed{seed}"))
        }
    }
    pub fn races(&self) -> PathBuf {
        self.dir.join("races.csv")
    }
    pub fn results(&self) -> PathBuf {
        self.dir.join("results.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
    pub fn spec(&self) -> PathBuf {
        self.dir.join("spec.json")
    }
}

fn ensure_track(path: &Path, seed: u64) -> Result<Arc<Track>> {
    if !path.exists() {
        generate_track(&TrackGenSpec::with_seed(seed))?.save_csv(path)?;
    }
    Ok(Arc::new(load_track(path)?))
}

pub fn track_name(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("track").to_string()
}

/// Races one method on `track` from every start of the protocol. Learned
/// methods drive their checkpoint in `run_dir` without a base controller.
pub fn race_method(method: &str, track: &Arc<Track>, spec: &DeskSpec, seed: u64, run_dir: Option<&Path>) -> Result<Vec<RaceRow>> {
    let cfg = &spec.train;
    let race: RaceConfig = spec.race.into();
    let mut policy: Box<dyn Policy> = match method {
        "stanley" => Box::new(StanleyPolicy::new(track, cfg.stanley, cfg.env.vehicle)),
        "ftg" => Box::new(FtgPolicy { lidar: cfg.env.lidar, cfg: cfg.ftg, params: cfg.env.vehicle }),
        _ => {
            let dir = run_dir.ok_or_else(|| crate::HarnessError::Invalid(format!("no run directory for {method}")))?;
            let ck = Checkpoint::<f32>::load(&RunFiles { dir: dir.to_path_buf() }.checkpoint())?;
            Box::new(NeuralPolicy::standalone(ck.network))
        }
    };
    let outcomes = race_all_starts(track, cfg.env, policy.as_mut(), &race, seed)?;
    let name = track.name.clone();
    Ok(outcomes.iter().map(|o| RaceRow::from_outcome(&name, method, seed, o)).collect())
}

/// Runs (or resumes) the whole experiment in `dir`: track generation,
/// training of every learned method and seed, races on all tracks, the
/// `results.csv` table and the criterion summary.
pub fn run_desk(dir: &Path, spec: &DeskSpec, mut log: impl FnMut(&str)) -> Result<DeskSummary> {
    spec.validate()?;
    let paths = DeskPaths { dir: dir.to_path_buf() };
    create_dir(&paths.tracks())?;
    std::fs::write(paths.spec(), serde_json::to_string_pretty(spec)?).map_err(io_err(&paths.spec()))?;
    Manifest::new("experiment", spec.seeds[0], spec, &[])?.write(dir)?;
    let train_tracks: Vec<Arc<Track>> =
        spec.train_tracks.iter().map(|&s| ensure_track(&paths.train_track(s), s)).collect::<Result<_>>()?;
    let test_tracks: Vec<Arc<Track>> =
        spec.test_tracks.iter().map(|&s| ensure_track(&paths.test_track(s), s)).collect::<Result<_>>()?;

    for &seed in &spec.seeds {
        for (name, mode) in LEARNED {
            let cfg = spec.train_config(mode, seed);
            let out = paths.run(name, seed, spec);
            let total = cfg.iterations();
            Manifest::new("train", seed, &cfg, &[])?.write(&out)?;
            train(cfg, &train_tracks, &out, None, |m| {
                log(&format!(
                    "{name} seed {seed} iter {}/{} step {} alpha {:.3} progress_return {} crashes {}",
                    m.iteration + 1,
                    total,
                    m.step,
                    m.alpha,
                    m.progress_return.map_or("-".into(), |v| format!("{v:.2}")),
                    m.cum_crashes
                ))
            })?;
        }
    }

    let mut rows = Vec::new();
    for track in train_tracks.iter().chain(&test_tracks) {
        for method in METHODS {
            // Classical controllers are deterministic apart from sensor noise;
            // they are raced once with the first seed.
            let seeds = if LEARNED.iter().any(|(m, _)| *m == method) { &spec.seeds[..] } else { &spec.seeds[..1] };
            for &seed in seeds {
                let run = paths.run(method, seed, spec);
                let r = race_method(method, track, spec, seed, Some(&run))?;
                let mean = r.iter().map(|x| x.total_race_time_s).sum::<f64>() / r.len() as f64;
                log(&format!("race {} {method} seed {seed}: mean total time {mean:.2} s", track.name));
                rows.extend(r);
            }
        }
    }
    write_rows(&paths.races(), &rows)?;
    let names = |t: &[Arc<Track>]| t.iter().map(|t| t.name.clone()).collect::<Vec<_>>();
    let table = aggregate_results(&rows, &names(&train_tracks), &names(&test_tracks));
    write_rows(&paths.results(), &table.all_rows())?;
    log(&table.render());
    let summary = summarize(dir, spec)?;
    std::fs::write(paths.summary(), serde_json::to_string_pretty(&summary)?).map_err(io_err(&paths.summary()))?;
    Ok(summary)
}

/// Mean progress-return of episodes that ended within the first
/// `fraction` of the training steps.
pub fn early_progress(episodes: &[EpisodeRecord], total_steps: u64, fraction: f64) -> f64 {
    let limit = fraction * total_steps as f64;
    let early: Vec<f64> = episodes.iter().filter(|e| e.global_step as f64 <= limit).map(|e| e.progress_return).collect();
    if early.is_empty() {
        0.0
    } else {
        early.iter().sum::<f64>() / early.len() as f64
    }
}

/// Recomputes the criteria from the stored logs and race rows.
pub fn summarize(dir: &Path, spec: &DeskSpec) -> Result<DeskSummary> {
    let paths = DeskPaths { dir: dir.to_path_buf() };
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let per_seed = |method: &str| -> Result<(f64, f64)> {
        let mut crashes = Vec::new();
        let mut early = Vec::new();
        for &seed in &spec.seeds {
            let f = RunFiles { dir: paths.run(method, seed, spec) };
            let m: Vec<IterationMetrics> = read_csv(&f.metrics())?;
            let e: Vec<EpisodeRecord> = read_csv(&f.episodes())?;
            crashes.push(m.last().map_or(0, |x| x.cum_crashes) as f64);
            early.push(early_progress(&e, spec.total_steps, spec.early_fraction));
        }
        Ok((mean(&crashes), mean(&early)))
    };
    let (arpo_crashes, early_arpo) = per_seed("arpo")?;
    let (drl_crashes, early_drl) = per_seed("drl")?;
    let test: Vec<String> = spec.test_tracks.iter().map(|&s| track_name(&paths.test_track(s))).collect();
    let rows: Vec<RaceRow> = read_rows(&paths.races())?;
    let time = |method: &str| {
        let r: Vec<f64> = rows.iter().filter(|r| r.method == method && test.contains(&r.track)).map(|r| r.total_race_time_s).collect();
        mean(&r)
    };
    let s = DeskSummary {
        arpo_crashes,
        drl_crashes,
        early_progress_arpo: early_arpo,
        early_progress_drl: early_drl,
        race_time_arpo: time("arpo"),
        race_time_drl: time("drl"),
        race_time_stanley: time("stanley"),
        race_time_ftg: time("ftg"),
        crashes_ok: false,
        race_ok: false,
        early_ok: false,
    };
    Ok(DeskSummary {
        crashes_ok: s.arpo_crashes <= 0.5 * s.drl_crashes,
        race_ok: s.race_time_arpo < s.race_time_ftg && s.race_time_arpo <= 1.05 * s.race_time_stanley,
        early_ok: s.early_progress_arpo >= 3.0 * s.early_progress_drl && s.early_progress_arpo > 0.0,
        ..s
    })
}
