//! Learning-curve export from per-seed metrics logs.
//!
//! Each curve is smoothed per seed with a trailing moving average over
//! `window` logged iterations, then averaged across seeds. The reported
//! spread is the population standard deviation (divisor = number of seeds).

use std::path::Path;

use arpo_learn::trainer::IterationMetrics;
use serde::{Deserialize, Serialize};

use crate::{io_err, HarnessError, Result};

pub const METRICS: [&str; 3] = ["progress_return", "total_return", "cum_crashes"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub metric: String,
    pub steps: Vec<f64>,
    /// `per_seed[s][i]` is seed `s` at `steps[i]`.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub smoothing_window: usize,
    pub std_kind: String,
    pub seeds: usize,
    /// Set when the logs had different step grids and were linearly
    /// interpolated onto a common one.
    pub resampled: bool,
    pub curves: Vec<Curve>,
}

fn value(m: &IterationMetrics, metric: &str) -> Option<f64> {
    match metric {
        "progress_return" => m.progress_return,
        "total_return" => m.total_return,
        "cum_crashes" => Some(m.cum_crashes as f64),
        _ => None,
    }
}

/// Series on the log's own step grid. Iterations without a finished
/// episode carry the previous value forward; leading gaps take the first
/// logged value. A log without any value yields NaN.
fn series(log: &[IterationMetrics], metric: &str) -> Vec<f64> {
    let raw: Vec<Option<f64>> = log.iter().map(|m| value(m, metric)).collect();
    let first = raw.iter().flatten().next().copied().unwrap_or(f64::NAN);
    let mut last = first;
    raw.iter()
        .map(|v| {
            if let Some(v) = v {
                last = *v;
            }
            last
        })
        .collect()
}

pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let j = xs.partition_point(|&v| v < x);
    if j == 0 {
        return ys[0];
    }
    if j == xs.len() {
        return ys[xs.len() - 1];
    }
    let (x0, x1) = (xs[j - 1], xs[j]);
    if x1 == x0 {
        return ys[j];
    }
    ys[j - 1] + (ys[j] - ys[j - 1]) * (x - x0) / (x1 - x0)
}

/// Mean and population standard deviation across seeds per grid point.
pub fn mean_std(per_seed: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = per_seed.len() as f64;
    let len = per_seed.first().map_or(0, Vec::len);
    (0..len)
        .map(|i| {
            let mean = per_seed.iter().map(|s| s[i]).sum::<f64>() / n;
            let var = per_seed.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .unzip()
}

pub fn learning_curve_export(logs: &[Vec<IterationMetrics>], window: usize) -> Result<Curves> {
    if logs.is_empty() || logs.iter().any(Vec::is_empty) {
        return Err(HarnessError::Invalid("learning curves need at least one non-empty metrics log".into()));
    }
    let grids: Vec<Vec<f64>> = logs.iter().map(|l| l.iter().map(|m| m.step as f64).collect()).collect();
    let resampled = grids.iter().any(|g| g != &grids[0]);
    let grid = if resampled {
        // Overlap of all runs, at the coarsest resolution among them.
        let lo = grids.iter().map(|g| g[0]).fold(f64::NEG_INFINITY, f64::max);
        let hi = grids.iter().map(|g| g[g.len() - 1]).fold(f64::INFINITY, f64::min);
        if hi < lo {
            return Err(HarnessError::Invalid("metrics logs have no overlapping step range".into()));
        }
        let n = grids.iter().map(Vec::len).min().unwrap_or(1).max(2);
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    } else {
        grids[0].clone()
    };
    let curves = METRICS
        .iter()
        .map(|&metric| {
            let per_seed: Vec<Vec<f64>> = logs
                .iter()
                .zip(&grids)
                .map(|(log, g)| {
                    let s = smooth(&series(log, metric), window);
                    if resampled {
                        grid.iter().map(|&x| interp(g, &s, x)).collect()
                    } else {
                        s
                    }
                })
                .collect();
            let (mean, std) = mean_std(&per_seed);
            Curve { metric: metric.into(), steps: grid.clone(), per_seed, mean, std }
        })
        .collect();
    Ok(Curves { smoothing_window: window.max(1), std_kind: "population".into(), seeds: logs.len(), resampled, curves })
}

impl Curves {
    /// `curves.json` with everything, plus one `curve_<metric>.csv` per
    /// metric with columns `step,mean,std,seed_0,...`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::create_dir(dir)?;
        let json = dir.join("curves.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(io_err(&json))?;
        for c in &self.curves {
            let path = dir.join(format!("curve_{}.csv", c.metric));
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec!["step".to_string(), "mean".into(), "std".into()];
            header.extend((0..c.per_seed.len()).map(|s| format!("seed_{s}")));
            w.write_record(&header)?;
            for i in 0..c.steps.len() {
                let mut rec = vec![c.steps[i].to_string(), c.mean[i].to_string(), c.std[i].to_string()];
                rec.extend(c.per_seed.iter().map(|s| s[i].to_string()));
                w.write_record(&rec)?;
            }
            w.flush().map_err(io_err(&path))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(steps: &[u64], progress: &[Option<f64>], crashes: &[u64]) -> Vec<IterationMetrics> {
        steps
            .iter()
            .enumerate()
            .map(|(i, &step)| IterationMetrics {
                iteration: i as u64,
                step,
                progress_return: progress[i],
                total_return: progress[i].map(|p| p - 1.0),
                cum_crashes: crashes[i],
                ..IterationMetrics::default()
            })
            .collect()
    }

    #[test]
    fn one_seed_has_zero_std() {
        let c = learning_curve_export(&[log(&[10, 20, 30], &[Some(1.0), Some(4.0), Some(2.0)], &[0, 3, 3])], 2).unwrap();
        for curve in &c.curves {
            assert!(curve.std.iter().all(|&s| s == 0.0));
        }
        assert!(!c.resampled);
        assert_eq!(c.curves[0].mean, vec![1.0, 2.5, 3.0]);
    }

    #[test]
    fn constant_logs_are_flat() {
        let l = log(&[1, 2, 3, 4], &[Some(7.5); 4], &[2; 4]);
        let c = learning_curve_export(&[l.clone(), l], 3).unwrap();
        assert!(c.curves[0].mean.iter().all(|&m| m == 7.5));
        assert!(c.curves[2].mean.iter().all(|&m| m == 2.0));
    }

    #[test]
    fn two_seed_fixture() {
        // Window 1: no smoothing. Seed 0 progress 1,3,5; seed 1 progress 3,3,- (carried).
        let a = log(&[100, 200, 300], &[Some(1.0), Some(3.0), Some(5.0)], &[0, 2, 4]);
        let b = log(&[100, 200, 300], &[Some(3.0), Some(3.0), None], &[1, 1, 6]);
        let c = learning_curve_export(&[a, b], 1).unwrap();
        let p = &c.curves[0];
        assert_eq!(p.mean, vec![2.0, 3.0, 4.0]);
        assert_eq!(p.std, vec![1.0, 0.0, 1.0]);
        let k = &c.curves[2];
        assert_eq!(k.mean, vec![0.5, 1.5, 5.0]);
        assert_eq!(k.std, vec![0.5, 0.5, 1.0]);
    }

    #[test]
    fn mismatched_grids_are_resampled() {
        let a = log(&[0, 100, 200], &[Some(0.0), Some(1.0), Some(2.0)], &[0, 1, 2]);
        let b = log(&[0, 50, 100, 150, 200], &[Some(0.0), Some(0.5), Some(1.0), Some(1.5), Some(2.0)], &[0; 5]);
        let c = learning_curve_export(&[a, b], 1).unwrap();
        assert!(c.resampled);
        assert_eq!(c.curves[0].steps, vec![0.0, 100.0, 200.0]);
        assert_eq!(c.curves[0].std, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = learning_curve_export(&[log(&[1, 2], &[Some(1.0), None], &[0, 1])], 5).unwrap();
        c.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("curve_cum_crashes.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,mean,std,seed_0");
        assert!(std::fs::read_to_string(dir.path().join("curves.json")).unwrap().contains("\"smoothing_window\": 5"));
    }

    proptest::proptest! {
        #[test]
        fn mean_lies_between_seeds(a in proptest::collection::vec(-50.0f64..50.0, 5), b in proptest::collection::vec(-50.0f64..50.0, 5), w in 1usize..4) {
            let steps = [10, 20, 30, 40, 50];
            let la = log(&steps, &a.iter().map(|&x| Some(x)).collect::<Vec<_>>(), &[0; 5]);
            let lb = log(&steps, &b.iter().map(|&x| Some(x)).collect::<Vec<_>>(), &[0; 5]);
            let c = learning_curve_export(&[la, lb], w).unwrap();
            let p = &c.curves[0];
            for i in 0..5 {
                let (lo, hi) = (p.per_seed[0][i].min(p.per_seed[1][i]), p.per_seed[0][i].max(p.per_seed[1][i]));
                proptest::prop_assert!(p.mean[i] >= lo - 1e-12 && p.mean[i] <= hi + 1e-12);
                proptest::prop_assert!((p.std[i] - (hi - lo) / 2.0).abs() < 1e-9);
            }
        }
    }
}
