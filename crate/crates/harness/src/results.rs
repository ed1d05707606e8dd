//! Race results and their aggregation into per-track tables.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use arpo_core::env::{run_race, EnvConfig, Policy, RaceConfig, RaceOutcome, RacingEnv};
use arpo_core::track::Track;
use serde::{Deserialize, Serialize};

use crate::{io_err, HarnessError, Result};

/// One race from one start position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceRow {
    pub track: String,
    pub method: String,
    pub seed: u64,
    pub start_index: usize,
    pub total_race_time_s: f64,
    pub collisions_per_lap: f64,
    pub max_speed_mps: f64,
    pub laps_completed: usize,
    pub aborted: bool,
    /// Lap times separated by `;`.
    pub lap_times_s: String,
}

impl RaceRow {
    pub fn from_outcome(track: &str, method: &str, seed: u64, o: &RaceOutcome) -> Self {
        Self {
            track: track.into(),
            method: method.into(),
            seed,
            start_index: o.start_index,
            total_race_time_s: o.total_race_time,
            collisions_per_lap: o.collisions_per_lap,
            max_speed_mps: o.max_speed,
            laps_completed: o.lap_times.len(),
            aborted: o.aborted,
            lap_times_s: o.lap_times.iter().map(|t| format!("{t:.4}")).collect::<Vec<_>>().join(";"),
        }
    }
}

/// A `results.csv` row: one track and method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub track: String,
    pub method: String,
    pub total_race_time_s: f64,
    pub collisions_per_lap: f64,
    pub max_speed_mps: f64,
}

/// Races `policy` from `starts` evenly spaced positions. The environment is
/// noise-free apart from its configured sensor noise, seeded by `seed`.
pub fn race_all_starts(
    track: &std::sync::Arc<Track>,
    env_cfg: EnvConfig,
    policy: &mut dyn Policy,
    race: &RaceConfig,
    seed: u64,
) -> Result<Vec<RaceOutcome>> {
    (0..race.n_starts)
        .map(|k| {
            let mut env = RacingEnv::new(track.clone(), env_cfg, seed.wrapping_add(k as u64));
            Ok(run_race(&mut env, policy, k, race)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    /// Per track and method, means over seeds and starts.
    pub rows: Vec<ResultRow>,
    /// Per method: `(train average, test average)` rows, when the sets are
    /// given and complete.
    pub averages: Vec<(String, Option<ResultRow>, Option<ResultRow>)>,
    /// `(track, method)` cells without any race.
    pub missing: Vec<(String, String)>,
}

/// Means over all rows of each `(track, method)` cell and over the train and
/// test track sets. Order of the input rows does not matter.
pub fn aggregate_results(rows: &[RaceRow], train: &[String], test: &[String]) -> Summary {
    let mut cells: BTreeMap<(String, String), Vec<&RaceRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.track.clone(), r.method.clone())).or_default().push(r);
    }
    let tracks: BTreeSet<&String> = rows.iter().map(|r| &r.track).chain(train).chain(test).collect();
    let methods: BTreeSet<&String> = rows.iter().map(|r| &r.method).collect();
    let mut summary = Summary::default();
    let mean = |v: &[f64]| {
        // Sorted summation keeps the result independent of row order.
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / v.len() as f64
    };
    let mut by_cell = BTreeMap::new();
    for ((track, method), rs) in &cells {
        let row = ResultRow {
            track: track.clone(),
            method: method.clone(),
            total_race_time_s: mean(&rs.iter().map(|r| r.total_race_time_s).collect::<Vec<_>>()),
            collisions_per_lap: mean(&rs.iter().map(|r| r.collisions_per_lap).collect::<Vec<_>>()),
            max_speed_mps: mean(&rs.iter().map(|r| r.max_speed_mps).collect::<Vec<_>>()),
        };
        by_cell.insert((track.clone(), method.clone()), row.clone());
        summary.rows.push(row);
    }
    for t in &tracks {
        for m in &methods {
            if !cells.contains_key(&((*t).clone(), (*m).clone())) {
                summary.missing.push(((*t).clone(), (*m).clone()));
            }
        }
    }
    for m in methods {
        let avg = |set: &[String], label: &str| -> Option<ResultRow> {
            let rs: Vec<&ResultRow> = set.iter().map(|t| by_cell.get(&(t.clone(), m.clone()))).collect::<Option<_>>()?;
            if rs.is_empty() {
                return None;
            }
            Some(ResultRow {
                track: label.into(),
                method: m.clone(),
                total_race_time_s: mean(&rs.iter().map(|r| r.total_race_time_s).collect::<Vec<_>>()),
                collisions_per_lap: mean(&rs.iter().map(|r| r.collisions_per_lap).collect::<Vec<_>>()),
                max_speed_mps: mean(&rs.iter().map(|r| r.max_speed_mps).collect::<Vec<_>>()),
            })
        };
        summary.averages.push((m.clone(), avg(train, "Average Train"), avg(test, "Average Test")));
    }
    summary
}

impl Summary {
    /// Aligned text table with one column group per method.
    pub fn render(&self) -> String {
        let mut out = format!("{:<24} {:<12} {:>12} {:>12} {:>10}\n", "track", "method", "time [s]", "coll/lap", "vmax");
        let all = self.rows.iter().chain(self.averages.iter().flat_map(|(_, a, b)| a.iter().chain(b.iter())));
        for r in all {
            out += &format!(
                "{:<24} {:<12} {:>12.2} {:>12.2} {:>10.2}\n",
                r.track, r.method, r.total_race_time_s, r.collisions_per_lap, r.max_speed_mps
            );
        }
        for (t, m) in &self.missing {
            out += &format!("{t:<24} {m:<12} {:>12} {:>12} {:>10}\n", "missing", "missing", "missing");
        }
        out
    }

    pub fn all_rows(&self) -> Vec<ResultRow> {
        let mut rows = self.rows.clone();
        rows.extend(self.averages.iter().flat_map(|(_, a, b)| a.iter().chain(b.iter()).cloned()));
        rows
    }
}

pub fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

/// Appends rows, writing the header only when the file is new.
pub fn append_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let exists = path.exists() && std::fs::metadata(path).map_err(io_err(path))?.len() > 0;
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_rows<R: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    if !path.exists() {
        return Err(HarnessError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        });
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(HarnessError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(track: &str, method: &str, seed: u64, time: f64) -> RaceRow {
        RaceRow {
            track: track.into(),
            method: method.into(),
            seed,
            start_index: 0,
            total_race_time_s: time,
            collisions_per_lap: 0.2 * seed as f64,
            max_speed_mps: 5.0,
            laps_completed: 5,
            aborted: false,
            lap_times_s: String::new(),
        }
    }

    #[test]
    fn single_row_is_identity() {
        let s = aggregate_results(&[row("a", "arpo", 0, 41.5)], &[], &[]);
        assert_eq!(s.rows, vec![ResultRow {
            track: "a".into(),
            method: "arpo".into(),
            total_race_time_s: 41.5,
            collisions_per_lap: 0.0,
            max_speed_mps: 5.0
        }]);
        assert!(s.missing.is_empty());
    }

    #[test]
    fn two_seeds_average() {
        let s = aggregate_results(&[row("a", "arpo", 0, 40.0), row("a", "arpo", 1, 50.0)], &[], &[]);
        assert_eq!(s.rows[0].total_race_time_s, 45.0);
        assert_eq!(s.rows[0].collisions_per_lap, 0.1);
    }

    #[test]
    fn train_test_averages_and_missing_cells() {
        let rows = vec![
            row("t1", "arpo", 0, 40.0),
            row("t2", "arpo", 0, 44.0),
            row("t3", "arpo", 0, 50.0),
            row("t1", "ftg", 0, 60.0),
        ];
        let s = aggregate_results(&rows, &["t1".into(), "t2".into()], &["t3".into()]);
        let arpo = s.averages.iter().find(|a| a.0 == "arpo").unwrap();
        assert_eq!(arpo.1.as_ref().unwrap().total_race_time_s, 42.0);
        assert_eq!(arpo.2.as_ref().unwrap().total_race_time_s, 50.0);
        let ftg = s.averages.iter().find(|a| a.0 == "ftg").unwrap();
        assert!(ftg.1.is_none() && ftg.2.is_none());
        assert_eq!(s.missing, vec![("t2".into(), "ftg".into()), ("t3".into(), "ftg".into())]);
        assert!(s.render().contains("missing"));
    }

    #[test]
    fn permutation_invariant() {
        let rows: Vec<RaceRow> = (0..30).map(|i| row(["a", "b", "c"][i % 3], ["x", "y"][i % 2], i as u64, 0.1 * i as f64 + 1.0 / 3.0)).collect();
        let base = aggregate_results(&rows, &["a".into()], &["b".into(), "c".into()]);
        let mut rev = rows.clone();
        rev.reverse();
        rev.swap(3, 17);
        assert_eq!(aggregate_results(&rev, &["a".into()], &["b".into(), "c".into()]), base);
    }

    #[test]
    fn csv_append_keeps_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        append_rows(&p, &[row("a", "x", 0, 1.0)]).unwrap();
        append_rows(&p, &[row("b", "x", 0, 2.0)]).unwrap();
        let back: Vec<RaceRow> = read_rows(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].track, "b");
    }

    proptest::proptest! {
        #[test]
        fn aggregation_ignores_row_order(times in proptest::collection::vec(1.0f64..100.0, 1..40), seed in 0u64..1000) {
            let rows: Vec<RaceRow> = times.iter().enumerate().map(|(i, &t)| row(["a", "b"][i % 2], ["x", "y", "z"][i % 3], i as u64, t)).collect();
            let mut shuffled = rows.clone();
            let n = shuffled.len();
            for i in 0..n {
                shuffled.swap(i, (seed as usize * 31 + i * 17) % n);
            }
            proptest::prop_assert_eq!(aggregate_results(&shuffled, &["a".into()], &["b".into()]), aggregate_results(&rows, &["a".into()], &["b".into()]));
        }
    }
}
