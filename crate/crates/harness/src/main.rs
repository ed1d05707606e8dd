use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use arpo_core::env::{FtgPolicy, Policy, RaceConfig, StanleyPolicy};
use arpo_core::track::{generate_track, TrackGenSpec};
use arpo_harness::experiment::{run_desk, track_name, DeskSpec};
use arpo_harness::plot::{plot_run, TrajectoryFile};
use arpo_harness::results::{aggregate_results, append_rows, race_all_starts, read_rows, write_rows, RaceRow};
use arpo_harness::{create_dir, io_err, load_track, track_files, FileConfig, HarnessError, Manifest, Result};
use arpo_learn::agent::NeuralPolicy;
use arpo_learn::distribution::FusionMode;
use arpo_learn::network::Checkpoint;
use arpo_learn::trainer::{finetune, train, IterationMetrics, TrainConfig};

#[derive(Parser)]
#[command(name = "arpo", version, about = "Residual policy training and racing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with `[train]` and `[race]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Controller {
    Ftg,
    Stanley,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Arpo,
    Rpl,
    Drl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate random tracks with generator seeds seed, seed+1, ...
    GenTracks {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Train a policy from scratch (resumes when the output holds a checkpoint).
    Train {
        #[command(flatten)]
        common: Common,
        /// Track file or directory of track files.
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Update α before collecting the rollout instead of after.
        #[arg(long)]
        no_sync: bool,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Continue training a checkpoint on one track with α = 1.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Race a checkpoint on every track from several start positions.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        starts: Option<usize>,
        #[arg(long)]
        laps: Option<u32>,
        /// Method name written to the result rows.
        #[arg(long, default_value = "arpo")]
        method: String,
        /// Which average row the tracks feed.
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Race a classical controller; rows are appended to `races.csv`.
    Race {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        controller: Controller,
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        laps: Option<u32>,
        #[arg(long)]
        starts: Option<usize>,
    },
    /// Trajectory and learning-curve figures for a run directory.
    Plot {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
    },
    /// Desk-scale comparison of α-RPO, DRL and the classical controllers.
    /// `--config` takes a TOML experiment spec, whose seed list then
    /// replaces `--seed`.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        })
    }
}

fn load_config(common: &Common) -> Result<FileConfig> {
    if let Some(p) = &common.config {
        require(p)?;
    }
    let mut c = FileConfig::load_or_default(common.config.as_deref())?;
    c.train.seed = common.seed;
    Ok(c)
}

fn log_iteration(m: &IterationMetrics, total: u64) {
    eprintln!(
        "iter {}/{} step {} alpha {:.3} progress_return {} crashes {}",
        m.iteration + 1,
        total,
        m.step,
        m.alpha,
        m.progress_return.map_or("-".into(), |v| format!("{v:.2}")),
        m.cum_crashes
    );
}

fn inputs(paths: &[&Path]) -> Vec<PathBuf> {
    paths.iter().map(|p| p.to_path_buf()).collect()
}

/// Races `policy` on one track, saves the start-0 trajectory and returns
/// the per-start rows.
fn race_track(
    track_file: &Path,
    method: &str,
    policy: &mut dyn Policy,
    cfg: &FileConfig,
    seed: u64,
    out: &Path,
) -> Result<Vec<RaceRow>> {
    let track = Arc::new(load_track(track_file)?);
    let race: RaceConfig = cfg.race.into();
    let outcomes = race_all_starts(&track, cfg.train.env, policy, &race, seed)?;
    if let Some(o) = outcomes.first() {
        let path = out.join(format!("trajectory_{}_{method}.json", track_name(track_file)));
        TrajectoryFile::new(track_file, method, race.n_starts, o).save(&path)?;
    }
    Ok(outcomes.iter().map(|o| RaceRow::from_outcome(&track.name, method, seed, o)).collect())
}

fn write_results(out: &Path, rows: &[RaceRow], train: &[String], test: &[String]) -> Result<()> {
    let summary = aggregate_results(rows, train, test);
    write_rows(&out.join("results.csv"), &summary.all_rows())?;
    print!("{}", summary.render());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenTracks { common, count } => {
            let cfg = load_config(&common)?;
            create_dir(&common.out)?;
            Manifest::new("gen-tracks", common.seed, &cfg, &[])?.write(&common.out)?;
            for i in 0..count {
                let seed = common.seed + i;
                let path = common.out.join(format!("track_{seed:03}.csv"));
                let track = generate_track(&TrackGenSpec::with_seed(seed))?;
                track.save_csv(&path)?;
                println!("{} length {:.1} m", path.display(), track.total_length);
            }
        }
        Cmd::Train { common, tracks, mode, no_sync, steps } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = mode {
                cfg.train.mode = match m {
                    Mode::Arpo => FusionMode::Arpo,
                    Mode::Rpl => FusionMode::Rpl,
                    Mode::Drl => FusionMode::Drl,
                };
            }
            if no_sync {
                cfg.train.sync_trick = false;
            }
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            cfg.train.validate()?;
            let files = track_files(&tracks)?;
            let loaded = files.iter().map(|f| load_track(f).map(Arc::new)).collect::<Result<Vec<_>>>()?;
            Manifest::new("train", common.seed, &cfg, &files)?.write(&common.out)?;
            let total = cfg.train.iterations();
            let t = train(cfg.train, &loaded, &common.out, None, |m| log_iteration(m, total))?;
            println!("trained {} iterations, {} steps, {} crashes", t.iteration, t.collector.global_step, t.collector.cum_crashes);
        }
        Cmd::Finetune { common, checkpoint, track, steps } => {
            require(&checkpoint)?;
            let mut cfg = load_config(&common)?;
            if common.config.is_none() {
                cfg.train = TrainConfig { seed: common.seed, ..cfg.train.finetune() };
            }
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            let t = Arc::new(load_track(&track)?);
            Manifest::new("finetune", common.seed, &cfg, &inputs(&[&checkpoint, &track]))?.write(&common.out)?;
            let total = cfg.train.iterations();
            let t = finetune(cfg.train, &checkpoint, t, &common.out, |m| log_iteration(m, total))?;
            println!("fine-tuned {} iterations, {} crashes", t.iteration, t.collector.cum_crashes);
        }
        Cmd::Evaluate { common, checkpoint, tracks, starts, laps, method, split } => {
            require(&checkpoint)?;
            let mut cfg = load_config(&common)?;
            if let Some(s) = starts {
                cfg.race.starts = s;
            }
            if let Some(l) = laps {
                cfg.race.laps = l;
            }
            let files = track_files(&tracks)?;
            let mut all = files.clone();
            all.push(checkpoint.clone());
            Manifest::new("evaluate", common.seed, &cfg, &all)?.write(&common.out)?;
            let ck = Checkpoint::<f32>::load(&checkpoint)?;
            let mut policy = NeuralPolicy::standalone(ck.network);
            let mut rows = Vec::new();
            for f in &files {
                rows.extend(race_track(f, &method, &mut policy, &cfg, common.seed, &common.out)?);
            }
            write_rows(&common.out.join("races.csv"), &rows)?;
            let names: Vec<String> = rows.iter().map(|r| r.track.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            match split {
                Split::Train => write_results(&common.out, &rows, &names, &[])?,
                Split::Test => write_results(&common.out, &rows, &[], &names)?,
            }
        }
        Cmd::Race { common, controller, track, laps, starts } => {
            let mut cfg = load_config(&common)?;
            if let Some(l) = laps {
                cfg.race.laps = l;
            }
            if let Some(s) = starts {
                cfg.race.starts = s;
            }
            let t = load_track(&track)?;
            create_dir(&common.out)?;
            Manifest::new("race", common.seed, &cfg, &inputs(&[&track]))?.write(&common.out)?;
            let (name, mut policy): (&str, Box<dyn Policy>) = match controller {
                Controller::Stanley => ("stanley", Box::new(StanleyPolicy::new(&t, cfg.train.stanley, cfg.train.env.vehicle))),
                Controller::Ftg => (
                    "ftg",
                    Box::new(FtgPolicy { lidar: cfg.train.env.lidar, cfg: cfg.train.ftg, params: cfg.train.env.vehicle }),
                ),
            };
            let rows = race_track(&track, name, policy.as_mut(), &cfg, common.seed, &common.out)?;
            let races = common.out.join("races.csv");
            append_rows(&races, &rows)?;
            write_results(&common.out, &read_rows(&races)?, &[], &[])?;
        }
        Cmd::Plot { seed, config, out, run } => {
            if let Some(p) = &config {
                require(p)?;
            }
            let out = out.unwrap_or_else(|| run.clone());
            let cfg = FileConfig::load_or_default(config.as_deref())?;
            let files = plot_run(&run, &out)?;
            Manifest::new("plot", seed, &cfg, &inputs(&[&run]))?.write(&out)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Cmd::Experiment { common } => {
            let mut spec: DeskSpec = match &common.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                    toml::from_str(&text).map_err(|e| HarnessError::Config {
                        path: p.display().to_string(),
                        msg: e.to_string().lines().collect::<Vec<_>>().join(" "),
                    })?
                }
                None => DeskSpec::default(),
            };
            if common.config.is_none() {
                spec.seeds = vec![common.seed];
            }
            let s = run_desk(&common.out, &spec, |l| eprintln!("{l}"))?;
            println!("{}", serde_json::to_string(&s)?);
        }
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                std::process::exit(if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 });
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            std::process::exit(2);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
        std::process::exit(1);
    }
}
