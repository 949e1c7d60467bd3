//! Cartesian-product grid search over config keys.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{LawnError, Result};
use crate::rng::derive_key;

use super::config::RunConfig;
use super::metrics::MetricsRow;
use super::runner::run_experiment;

const GRID_SEED_SALT: u64 = 0x6D1D;

/// Grid axes in file order: `key = v1, v2, v3` per line.
#[derive(Clone, Debug, Default)]
pub struct GridSpec {
    pub entries: Vec<(String, Vec<String>)>,
}

impl GridSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, Vec<String>)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| LawnError::Parse {
                line,
                msg: format!("expected `key = v1, v2, ...`, got {trimmed:?}"),
            })?;
            let key = key.trim().to_string();
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(LawnError::Parse {
                    line,
                    msg: format!("duplicate grid key {key:?}"),
                });
            }
            let values: Vec<String> = value
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(LawnError::Parse {
                    line,
                    msg: format!("grid key {key:?} has no values"),
                });
            }
            entries.push((key, values));
        }
        Ok(Self { entries })
    }

    /// Number of grid points (1 for an empty grid).
    pub fn len(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Assignments of the idx-th point; the last key varies fastest, so
    /// ascending indices enumerate points in lexicographic order.
    pub fn assignments(&self, idx: usize) -> Vec<(String, String)> {
        let mut rem = idx;
        let mut picks = vec![0usize; self.entries.len()];
        for (slot, (_, values)) in self.entries.iter().enumerate().rev() {
            picks[slot] = rem % values.len();
            rem /= values.len();
        }
        self.entries
            .iter()
            .zip(picks)
            .map(|((k, vs), p)| (k.clone(), vs[p].clone()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct GridRunResult {
    pub index: usize,
    pub assignments: Vec<(String, String)>,
    pub final_test_metric: f64,
    pub diverged: bool,
    pub rows: Vec<MetricsRow>,
}

#[derive(Clone, Debug)]
pub struct GridSearchOutput {
    pub best_index: usize,
    pub best_config: RunConfig,
    pub runs: Vec<GridRunResult>,
}

fn configure_point(base: &RunConfig, grid: &GridSpec, idx: usize) -> Result<RunConfig> {
    let mut cfg = base.clone();
    for (key, value) in grid.assignments(idx) {
        cfg.apply(&key, &value, 0)?;
    }
    // every run is independently seeded by (base seed, run index)
    cfg.seed = derive_key(base.seed, idx as u64, GRID_SEED_SALT);
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the full Cartesian product. The best point maximizes the final test
/// metric; ties resolve to the lexicographically first point. `LAWN_THREADS`
/// caps the number of parallel runs (default 1).
pub fn grid_search(base: &RunConfig, grid: &GridSpec) -> Result<GridSearchOutput> {
    let n = grid.len();
    // validate every point before spending any compute
    for idx in 0..n {
        configure_point(base, grid, idx)?;
    }
    let threads = std::env::var("LAWN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(1)
        .min(n.max(1));

    let results: Mutex<Vec<Option<GridRunResult>>> = Mutex::new(vec![None; n]);
    let next = AtomicUsize::new(0);
    let first_error: Mutex<Option<LawnError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= n {
                    break;
                }
                let outcome = configure_point(base, grid, idx).and_then(|cfg| {
                    run_experiment(&cfg).map(|out| GridRunResult {
                        index: idx,
                        assignments: grid.assignments(idx),
                        final_test_metric: out.summary.final_test_metric,
                        diverged: out.summary.diverged,
                        rows: out.rows,
                    })
                });
                match outcome {
                    Ok(r) => results.lock().unwrap()[idx] = Some(r),
                    Err(e) => {
                        let mut slot = first_error.lock().unwrap();
                        if slot.is_none() {
                            *slot = Some(e);
                        }
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let runs: Vec<GridRunResult> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("all runs completed"))
        .collect();

    let mut best_index = 0;
    let mut best_metric = f64::NEG_INFINITY;
    for r in &runs {
        let metric = if r.diverged || r.final_test_metric.is_nan() {
            f64::NEG_INFINITY
        } else {
            r.final_test_metric
        };
        if metric > best_metric {
            best_metric = metric;
            best_index = r.index;
        }
    }
    let best_config = configure_point(base, grid, best_index)?;
    Ok(GridSearchOutput {
        best_index,
        best_config,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_base() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.apply("optim.family", "adam", 0).unwrap();
        cfg.apply("schedule.e_warmup", "2", 0).unwrap();
        cfg.apply("schedule.e_total", "10", 0).unwrap();
        cfg
    }

    #[test]
    fn grid_enumeration_is_lexicographic() {
        let grid = GridSpec::parse("a.x = 1, 2\nb.y = u, v, w\n").unwrap();
        assert_eq!(grid.len(), 6);
        let a0 = grid.assignments(0);
        assert_eq!(a0[0].1, "1");
        assert_eq!(a0[1].1, "u");
        let a1 = grid.assignments(1);
        assert_eq!(a1[0].1, "1");
        assert_eq!(a1[1].1, "v");
        let a5 = grid.assignments(5);
        assert_eq!(a5[0].1, "2");
        assert_eq!(a5[1].1, "w");
    }

    #[test]
    fn two_point_grid_runs_twice() {
        let base = quick_base();
        let grid = GridSpec::parse("schedule.eta_peak = 0.01, 0.05\n").unwrap();
        let out = grid_search(&base, &grid).unwrap();
        assert_eq!(out.runs.len(), 2);
        assert_eq!(out.runs[0].assignments[0].1, "0.01");
        assert_eq!(out.runs[1].assignments[0].1, "0.05");
    }

    #[test]
    fn empty_grid_runs_base_once() {
        let base = quick_base();
        let grid = GridSpec::parse("").unwrap();
        let out = grid_search(&base, &grid).unwrap();
        assert_eq!(out.runs.len(), 1);
        assert_eq!(out.best_index, 0);
    }

    #[test]
    fn repeat_invocations_pick_the_same_best() {
        let base = quick_base();
        let grid = GridSpec::parse("schedule.eta_peak = 0.002, 0.02, 0.2\n").unwrap();
        let a = grid_search(&base, &grid).unwrap();
        let b = grid_search(&base, &grid).unwrap();
        assert_eq!(a.best_index, b.best_index);
        for (x, y) in a.runs.iter().zip(&b.runs) {
            assert_eq!(x.final_test_metric.to_bits(), y.final_test_metric.to_bits());
        }
    }

    #[test]
    fn invalid_grid_key_fails_before_running() {
        let base = quick_base();
        let grid = GridSpec::parse("not.a.key = 1\n").unwrap();
        assert!(matches!(
            grid_search(&base, &grid),
            Err(LawnError::Config(_))
        ));
    }
}
