//! Experiment cells and the resumable matrix driver.
//!
//! A cell is one configuration trained with one seed. It owns a directory
//! `<root>/<cell id>/` holding `config.snapshot`, `log.csv`,
//! `checkpoints/` and, once finished, a `done` marker. Rerunning a matrix
//! skips cells whose marker exists.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use toml::{Table, Value};

use vexp_core::agents::{train, Record, RecordKind, Sink};

use crate::config::{read_table, RunConfig};
use crate::error::{LabError, Result};
use crate::log::CellSink;

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DONE_FILE: &str = "done";

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    /// The configuration with `seeds == [seed]`.
    pub config: RunConfig,
    pub seed: u64,
}

impl Cell {
    pub fn new(config: &RunConfig, seed: u64) -> Self {
        let mut config = config.clone();
        config.seeds = vec![seed];
        Cell { config, seed }
    }

    /// Readable label without the seed.
    pub fn label(&self) -> String {
        let c = &self.config;
        format!(
            "{}-{}-{}-{}-h{}",
            c.env, c.algorithm, c.mode, c.model, c.horizon
        )
    }

    /// Unique directory name: label, config hash prefix and seed.
    pub fn id(&self) -> String {
        format!(
            "{}-{}-s{}",
            self.label(),
            &self.config.hash()[..12],
            self.seed
        )
    }

    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(self.id())
    }

    pub fn is_done(&self, root: &Path) -> bool {
        self.dir(root).join(DONE_FILE).is_file()
    }
}

/// One cell per seed of `config`.
pub fn cells(config: &RunConfig) -> Vec<Cell> {
    config.seeds.iter().map(|&s| Cell::new(config, s)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    /// Trained to the end or stopped early on a non-finite value; holds the
    /// recorded termination reason.
    Finished(String),
    /// Already complete from an earlier invocation.
    Skipped,
    /// Stopped by an error; the reason is also in the cell's log.
    Failed(String),
}

fn meta_rows(cell: &Cell) -> Vec<Record> {
    let c = &cell.config;
    let text = |name: &str, v: String| Record::text(RecordKind::RunMeta, 0, 0, name, v);
    vec![
        text("config_hash", c.hash()),
        text("seed", cell.seed.to_string()),
        text("cell_seed", c.cell_seed(cell.seed).to_string()),
        text("version", crate::VERSION.to_string()),
        text("env", c.env.clone()),
        text("algorithm", c.algorithm.clone()),
        text("mode", c.mode.clone()),
        text("model", c.model.clone()),
        text("horizon", c.horizon.to_string()),
        text("gamma", format!("{:?}", c.gamma)),
        text("particles", c.particles.to_string()),
    ]
}

/// Trains one cell into `root`, unless it is already complete. A partial
/// directory from an interrupted run is discarded first.
pub fn run_cell(cell: &Cell, root: &Path) -> Result<CellStatus> {
    if cell.is_done(root) {
        return Ok(CellStatus::Skipped);
    }
    let dir = cell.dir(root);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    let snap = dir.join(SNAPSHOT_FILE);
    fs::write(&snap, cell.config.to_toml()).map_err(|e| LabError::io(&snap, e))?;
    let mut sink = CellSink::create(&dir.join(LOG_FILE), &dir.join(CHECKPOINT_DIR))?;
    for r in meta_rows(cell) {
        sink.record(r)?;
    }
    sink.flush()?;
    let tc = cell.config.train_config();
    match train(&tc, cell.config.cell_seed(cell.seed), &mut sink) {
        Ok(out) => {
            let reason = out.termination.describe();
            let done = dir.join(DONE_FILE);
            fs::write(&done, format!("{reason}\n")).map_err(|e| LabError::io(&done, e))?;
            Ok(CellStatus::Finished(reason))
        }
        Err(e) => Ok(CellStatus::Failed(e.to_string())),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatrixReport {
    /// Status per cell, in input order.
    pub cells: Vec<(String, CellStatus)>,
}

impl MatrixReport {
    pub fn failures(&self) -> usize {
        self.cells
            .iter()
            .filter(|(_, s)| matches!(s, CellStatus::Failed(_)))
            .count()
    }

    pub fn executed(&self) -> usize {
        self.cells
            .iter()
            .filter(|(_, s)| !matches!(s, CellStatus::Skipped))
            .count()
    }
}

/// Runs `cells` on `jobs` worker threads. A failing cell is reported and
/// the rest continue; errors writing a cell's directory are reported as
/// failures of that cell.
pub fn run_matrix(
    cells: &[Cell],
    root: &Path,
    jobs: usize,
    progress: &(dyn Fn(&Cell, &CellStatus) + Sync),
) -> MatrixReport {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellStatus>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let status =
                    run_cell(cell, root).unwrap_or_else(|e| CellStatus::Failed(e.to_string()));
                progress(cell, &status);
                results.lock().expect("no poisoned workers")[i] = Some(status);
            });
        }
    });
    let results = results.into_inner().expect("no poisoned workers");
    MatrixReport {
        cells: cells
            .iter()
            .zip(results)
            .map(|(c, s)| (c.id(), s.expect("every cell visited")))
            .collect(),
    }
}

/// A matrix file: top-level keys form the base configuration and an
/// optional `[grid]` table lists values to sweep. Every combination of
/// grid values is a configuration; combinations whose settings are
/// incompatible (say `vanilla` with a model) are dropped and counted.
/// Optional `[[cell]]` entries each overlay the base before the grid is
/// applied, so a file can list hand-picked configurations.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion {
    pub configs: Vec<RunConfig>,
    pub dropped: usize,
}

pub fn expand_grid(base: &Table, grid: &Table, overrides: &Table) -> Result<Expansion> {
    let axes: Vec<(String, Vec<Value>)> = grid
        .iter()
        .map(|(k, v)| match v {
            Value::Array(items) if items.is_empty() => {
                Err(LabError::config(k, "grid axis is empty"))
            }
            Value::Array(items) => Ok((k.clone(), items.clone())),
            other => Ok((k.clone(), vec![other.clone()])),
        })
        .collect::<Result<_>>()?;
    let total: usize = axes.iter().map(|(_, v)| v.len()).product();
    let mut seen = BTreeSet::new();
    let mut out = Expansion {
        configs: Vec::new(),
        dropped: 0,
    };
    for mut idx in 0..total {
        let mut combo = Table::new();
        for (k, vals) in axes.iter().rev() {
            combo.insert(k.clone(), vals[idx % vals.len()].clone());
            idx /= vals.len();
        }
        match RunConfig::resolve(&[base.clone(), combo, overrides.clone()]) {
            Ok(c) => {
                if seen.insert(c.to_toml()) {
                    out.configs.push(c);
                }
            }
            Err(LabError::Combination(_)) => out.dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn load_matrix(path: Option<&Path>, overrides: &Table) -> Result<Expansion> {
    let mut base = match path {
        Some(p) => read_table(p)?,
        None => Table::new(),
    };
    let grid = match base.remove("grid") {
        None => Table::new(),
        Some(Value::Table(t)) => t,
        Some(_) => return Err(LabError::config("grid", "must be a table")),
    };
    let entries = match base.remove("cell") {
        None => return expand_grid(&base, &grid, overrides),
        Some(Value::Array(items)) if !items.is_empty() => items,
        Some(_) => {
            return Err(LabError::config(
                "cell",
                "must be a non-empty array of tables",
            ))
        }
    };
    let mut seen = BTreeSet::new();
    let mut out = Expansion {
        configs: Vec::new(),
        dropped: 0,
    };
    for entry in entries {
        let Value::Table(entry) = entry else {
            return Err(LabError::config("cell", "entries must be tables"));
        };
        let mut layer = base.clone();
        layer.extend(entry);
        let exp = expand_grid(&layer, &grid, overrides)?;
        out.dropped += exp.dropped;
        for c in exp.configs {
            if seen.insert(c.to_toml()) {
                out.configs.push(c);
            }
        }
    }
    Ok(out)
}

/// Copies of `base` differing only in the discount factor.
pub fn discount_ablation(base: &RunConfig, gammas: &[f64]) -> Result<Vec<RunConfig>> {
    if gammas.is_empty() {
        return Err(LabError::config("gamma", "no discount factors given"));
    }
    gammas
        .iter()
        .map(|&g| {
            if !(0.0..1.0).contains(&g) {
                return Err(LabError::config(
                    "gamma",
                    format!("{g} lies outside [0, 1)"),
                ));
            }
            let mut c = base.clone();
            c.gamma = g;
            c.validate()?;
            Ok(c)
        })
        .collect()
}
