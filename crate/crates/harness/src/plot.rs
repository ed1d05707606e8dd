//! Plot data (JSON/CSV) and static SVG figures: race trajectories coloured
//! by speed and learning curves.

use std::path::{Path, PathBuf};

use arpo_core::env::{RaceOutcome, TrajectoryPoint};
use arpo_core::track::Track;
use arpo_learn::trainer::{read_csv, IterationMetrics, RunFiles};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::{learning_curve_export, Curves};
use crate::{io_err, load_track, HarnessError, Result};

/// Points closer than this to the launch or to a crash relocation are not
/// candidates for the minimum-speed marker [s].
pub const MIN_SPEED_SKIP_S: f64 = 2.0;
pub const CURVE_WINDOW: usize = 10;

/// One raced trajectory as stored by `race` and `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub track_file: String,
    pub method: String,
    pub start_index: usize,
    pub n_starts: usize,
    pub points: Vec<TrajectoryPoint>,
}

impl TrajectoryFile {
    pub fn new(track_file: &Path, method: &str, n_starts: usize, o: &RaceOutcome) -> Self {
        Self {
            track_file: track_file.display().to_string(),
            method: method.into(),
            start_index: o.start_index,
            n_starts,
            points: o.trajectory.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub kind: String,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPlot {
    pub method: String,
    pub track: String,
    pub start_index: usize,
    pub pois: Vec<Poi>,
    /// Endpoints of the start/finish line, left wall to right wall.
    pub finish_line: [[f64; 2]; 2],
}

/// Max- and min-speed points plus the finish line of a trajectory.
pub fn trajectory_pois(points: &[TrajectoryPoint], track: &Track, start_s: f64) -> Result<(Vec<Poi>, [[f64; 2]; 2])> {
    let first = points.first().ok_or_else(|| HarnessError::Invalid("empty trajectory".into()))?;
    let poi = |kind: &str, p: &TrajectoryPoint| Poi { kind: kind.into(), x: p.x, y: p.y, speed: p.speed, t: p.t };
    let max = points.iter().max_by(|a, b| a.speed.total_cmp(&b.speed)).unwrap_or(first);
    let crash_times: Vec<f64> = points.iter().filter(|p| p.crash).map(|p| p.t).collect();
    let settled = |p: &&TrajectoryPoint| {
        p.t >= first.t + MIN_SPEED_SKIP_S && !crash_times.iter().any(|&c| p.t >= c && p.t < c + MIN_SPEED_SKIP_S)
    };
    let min = points
        .iter()
        .filter(settled)
        .min_by(|a, b| a.speed.total_cmp(&b.speed))
        .or_else(|| points.iter().min_by(|a, b| a.speed.total_cmp(&b.speed)))
        .unwrap_or(first);
    let (c, _) = track.pose_at(start_s);
    let idx = track.arclength.partition_point(|&s| s <= start_s).saturating_sub(1).min(track.n_segments() - 1);
    let (wl, wr) = track.widths_at(idx, 0.0);
    let l = track.point_at(start_s, wl);
    let r = track.point_at(start_s, -wr);
    let finish = Poi { kind: "finish_line".into(), x: c.x, y: c.y, speed: 0.0, t: 0.0 };
    Ok((vec![poi("max_speed", max), poi("min_speed", min), finish], [[l.x, l.y], [r.x, r.y]]))
}

fn speed_colour(v: f64, lo: f64, hi: f64) -> RGBColor {
    let u = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    // Blue (slow) through green to red (fast).
    let (r, g, b) = if u < 0.5 {
        let k = u / 0.5;
        (0.0, k, 1.0 - k)
    } else {
        let k = (u - 0.5) / 0.5;
        (k, 1.0 - k, 0.0)
    };
    RGBColor((255.0 * r) as u8, (255.0 * g) as u8, (255.0 * b) as u8)
}

fn plot_err<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

fn draw_trajectory(path: &Path, track: &Track, traj: &TrajectoryFile, plot: &TrajectoryPlot) -> Result<()> {
    let (lo, hi) = track.bounding_box();
    let pad = 1.0;
    let (w, h) = (hi.x - lo.x + 2.0 * pad, hi.y - lo.y + 2.0 * pad);
    let px = 900u32;
    let py = ((px as f64 * h / w).round() as u32).clamp(200, 1600);
    let root = SVGBackend::new(path, (px, py + 60)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let vmin = traj.points.iter().map(|p| p.speed).fold(f64::INFINITY, f64::min);
    let vmax = traj.points.iter().map(|p| p.speed).fold(f64::NEG_INFINITY, f64::max);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} on {}: speed {vmin:.1} to {vmax:.1} m/s", traj.method, plot.track), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(lo.x - pad..hi.x + pad, lo.y - pad..hi.y + pad)
        .map_err(plot_err)?;
    chart.configure_mesh().disable_mesh().x_desc("x [m]").y_desc("y [m]").draw().map_err(plot_err)?;
    for wall in [&track.left_wall, &track.right_wall] {
        chart.draw_series(LineSeries::new(wall.iter().map(|p| (p.x, p.y)), &BLACK)).map_err(plot_err)?;
    }
    chart
        .draw_series(traj.points.iter().map(|p| Circle::new((p.x, p.y), 2, speed_colour(p.speed, vmin, vmax).filled())))
        .map_err(plot_err)?;
    let [a, b] = plot.finish_line;
    chart.draw_series(LineSeries::new([(a[0], a[1]), (b[0], b[1])], MAGENTA.stroke_width(3))).map_err(plot_err)?;
    for p in plot.pois.iter().filter(|p| p.kind != "finish_line") {
        let style = if p.kind == "max_speed" { RED.stroke_width(3) } else { BLUE.stroke_width(3) };
        chart.draw_series([Cross::new((p.x, p.y), 8, style)]).map_err(plot_err)?;
        chart
            .draw_series([Text::new(format!("{} {:.2} m/s", p.kind, p.speed), (p.x, p.y), ("sans-serif", 14))])
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Writes `<stem>.svg`, `<stem>_points.csv` and `<stem>_pois.json` into
/// `dir`.
pub fn plot_trajectory(file: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let traj = TrajectoryFile::load(file)?;
    let track = load_track(Path::new(&traj.track_file))?;
    let start_s = traj.start_index as f64 * track.total_length / traj.n_starts.max(1) as f64;
    let (pois, finish_line) = trajectory_pois(&traj.points, &track, start_s)?;
    let plot = TrajectoryPlot {
        method: traj.method.clone(),
        track: track.name.clone(),
        start_index: traj.start_index,
        pois,
        finish_line,
    };
    crate::create_dir(dir)?;
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectory");
    let svg = dir.join(format!("{stem}.svg"));
    let csv_path = dir.join(format!("{stem}_points.csv"));
    let json = dir.join(format!("{stem}_pois.json"));
    crate::results::write_rows(&csv_path, &traj.points)?;
    std::fs::write(&json, serde_json::to_string_pretty(&plot)?).map_err(io_err(&json))?;
    draw_trajectory(&svg, &track, &traj, &plot)?;
    Ok(vec![svg, csv_path, json])
}

const PALETTE: [RGBColor; 4] = [RGBColor(200, 30, 30), RGBColor(30, 90, 200), RGBColor(20, 150, 60), RGBColor(150, 60, 170)];

/// One SVG per metric with mean ± std of every named run.
pub fn draw_curves(dir: &Path, runs: &[(String, Curves)]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let Some((_, first)) = runs.first() else { return Ok(out) };
    for (k, metric) in first.curves.iter().map(|c| c.metric.clone()).enumerate() {
        let path = dir.join(format!("{metric}.svg"));
        let all = || runs.iter().map(|(_, c)| &c.curves[k]);
        let finite = |v: &f64| v.is_finite();
        let x_hi = all().flat_map(|c| c.steps.iter().copied()).fold(1.0, f64::max);
        let ys: Vec<f64> = all()
            .flat_map(|c| c.mean.iter().zip(&c.std).flat_map(|(m, s)| [m - s, m + s]))
            .filter(finite)
            .collect();
        let (mut y_lo, mut y_hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
        if !y_lo.is_finite() {
            (y_lo, y_hi) = (0.0, 1.0);
        }
        if y_hi - y_lo < 1e-9 {
            y_hi = y_lo + 1.0;
        }
        let root = SVGBackend::new(&path, (800, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{metric} (window {})", first.smoothing_window), ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(60)
            .build_cartesian_2d(0.0..x_hi, y_lo..y_hi)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("environment steps").y_desc(metric.as_str()).draw().map_err(plot_err)?;
        for (i, (name, c)) in runs.iter().enumerate() {
            let c = &c.curves[k];
            let colour = PALETTE[i % PALETTE.len()];
            let mut band: Vec<(f64, f64)> =
                c.steps.iter().zip(c.mean.iter().zip(&c.std)).map(|(&x, (m, s))| (x, m + s)).collect();
            band.extend(c.steps.iter().zip(c.mean.iter().zip(&c.std)).rev().map(|(&x, (m, s))| (x, m - s)));
            if band.iter().all(|p| p.1.is_finite()) {
                chart.draw_series([Polygon::new(band, colour.mix(0.2).filled())]).map_err(plot_err)?;
            }
            chart
                .draw_series(LineSeries::new(
                    c.steps.iter().zip(&c.mean).filter(|(_, m)| m.is_finite()).map(|(&x, &m)| (x, m)),
                    colour.stroke_width(2),
                ))
                .map_err(plot_err)?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], colour.stroke_width(2)));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        root.present().map_err(plot_err)?;
        drop(chart);
        drop(root);
        out.push(path);
    }
    Ok(out)
}

/// Training runs below `dir`: `dir` itself when it holds a metrics log,
/// and every direct subdirectory that does.
pub fn find_runs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut runs = Vec::new();
    let name = |p: &Path| p.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string();
    if dir.join("metrics.csv").exists() {
        runs.push((name(dir), dir.to_path_buf()));
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("metrics.csv").exists())
        .collect();
    subdirs.sort();
    runs.extend(subdirs.into_iter().map(|p| (name(&p), p)));
    Ok(runs)
}

/// Everything `plot --run DIR` emits into `out`: trajectory figures for
/// each `trajectory*.json` in `dir` and learning curves for each training
/// run.
pub fn plot_run(dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(HarnessError::Io {
            path: dir.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
        });
    }
    let mut written = Vec::new();
    let mut trajs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let n = p.file_name().and_then(|s| s.to_str()).unwrap_or("");
            n.starts_with("trajectory") && n.ends_with(".json") && !n.ends_with("_pois.json")
        })
        .collect();
    trajs.sort();
    for t in &trajs {
        written.extend(plot_trajectory(t, out_dir)?);
    }
    let runs = find_runs(dir)?;
    if !runs.is_empty() {
        let out = out_dir.join("curves");
        let mut curves = Vec::new();
        for (name, run) in &runs {
            let log: Vec<IterationMetrics> = read_csv(&RunFiles { dir: run.clone() }.metrics())?;
            let c = learning_curve_export(&[log], CURVE_WINDOW)?;
            c.write(&out.join(name))?;
            written.push(out.join(name).join("curves.json"));
            curves.push((name.clone(), c));
        }
        written.extend(draw_curves(&out, &curves)?);
    }
    if written.is_empty() {
        return Err(HarnessError::Invalid(format!("nothing to plot in {}: no trajectory*.json and no metrics.csv", dir.display())));
    }
    Ok(written)
}
