//! Per-cell result summaries: final return, steps to a return threshold
//! and how the run ended.

use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::load_cell;
use crate::error::{LabError, Result};
use crate::log::{eval_curve, meta, read_log};
use crate::matrix::{DONE_FILE, LOG_FILE, SNAPSHOT_FILE};

/// Written in place of a step count when the threshold was never met.
pub const NOT_REACHED: &str = "not reached";
pub const SUMMARY_COLUMNS: [&str; 13] = [
    "cell",
    "env",
    "algorithm",
    "mode",
    "model",
    "horizon",
    "gamma",
    "seed",
    "final_step",
    "final_return",
    "threshold",
    "steps_to_threshold",
    "termination",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub cell: String,
    pub env: String,
    pub algorithm: String,
    pub mode: String,
    pub model: String,
    pub horizon: usize,
    pub gamma: f64,
    pub seed: u64,
    pub final_step: Option<u64>,
    pub final_return: Option<f64>,
    pub threshold: f64,
    pub steps_to_threshold: Option<u64>,
    /// Recorded termination reason, or `incomplete` for a cell that never
    /// finished.
    pub termination: String,
}

impl CellSummary {
    /// Cell identity without the seed, shared by all seeds of a config.
    pub fn group(&self) -> String {
        self.cell
            .rsplit_once("-s")
            .map_or(self.cell.clone(), |(g, _)| g.to_string())
    }

    pub fn terminated_early(&self) -> bool {
        self.termination != "completed"
    }

    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<String>, none: &str| v.unwrap_or_else(|| none.to_string());
        vec![
            self.cell.clone(),
            self.env.clone(),
            self.algorithm.clone(),
            self.mode.clone(),
            self.model.clone(),
            self.horizon.to_string(),
            format!("{:?}", self.gamma),
            self.seed.to_string(),
            opt(self.final_step.map(|s| s.to_string()), ""),
            opt(self.final_return.map(|r| format!("{r:?}")), ""),
            format!("{:?}", self.threshold),
            opt(self.steps_to_threshold.map(|s| s.to_string()), NOT_REACHED),
            self.termination.clone(),
        ]
    }
}

/// First evaluation step whose mean return reaches `threshold`.
pub fn steps_to_threshold(curve: &[(u64, f64)], threshold: f64) -> Option<u64> {
    curve.iter().find(|(_, r)| *r >= threshold).map(|(s, _)| *s)
}

/// Median of step counts where `None` ranks above every count. Even-sized
/// inputs average the two middle values.
pub fn median_steps(values: &[Option<u64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<Option<u64>> = values.to_vec();
    v.sort_by_key(|x| x.unwrap_or(u64::MAX));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2].map(|x| x as f64)
    } else {
        Some((v[n / 2 - 1]? as f64 + v[n / 2]? as f64) / 2.0)
    }
}

/// Summarizes the cell in `dir`; `fraction` of the environment's best
/// return is the threshold.
pub fn summarize_cell(dir: &Path, fraction: f64) -> Result<CellSummary> {
    let (cfg, seed) = load_cell(dir)?;
    let records = read_log(&dir.join(LOG_FILE))?;
    let curve = eval_curve(&records);
    let threshold = fraction * cfg.max_return();
    let termination = if dir.join(DONE_FILE).is_file() {
        meta(&records, "termination")
            .unwrap_or("incomplete")
            .to_string()
    } else {
        match meta(&records, "termination") {
            Some(t) if t.starts_with("error") => t.to_string(),
            _ => "incomplete".to_string(),
        }
    };
    Ok(CellSummary {
        cell: dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string(),
        env: cfg.env,
        algorithm: cfg.algorithm,
        mode: cfg.mode,
        model: cfg.model,
        horizon: cfg.horizon,
        gamma: cfg.gamma,
        seed,
        final_step: curve.last().map(|c| c.0),
        final_return: curve.last().map(|c| c.1),
        threshold,
        steps_to_threshold: steps_to_threshold(&curve, threshold),
        termination,
    })
}

/// Cell directories directly below `root`, sorted by name.
pub fn cell_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(root).map_err(|e| LabError::io(root, e))? {
        let p = e.map_err(|e| LabError::io(root, e))?.path();
        if p.join(SNAPSHOT_FILE).is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn summarize(root: &Path, fraction: f64) -> Result<Vec<CellSummary>> {
    let dirs = cell_dirs(root)?;
    if dirs.is_empty() {
        return Err(LabError::Usage(format!(
            "no cells under {}",
            root.display()
        )));
    }
    dirs.iter().map(|d| summarize_cell(d, fraction)).collect()
}

pub fn summary_csv(rows: &[CellSummary]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_COLUMNS).expect("in-memory write");
    for r in rows {
        w.write_record(r.fields()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 fields")
}

/// Fixed-width text rendering of the summary.
pub fn summary_table(rows: &[CellSummary]) -> String {
    let shown = [0usize, 9, 11, 12];
    let head = ["cell", "final_return", "steps_to_threshold", "termination"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let f = r.fields();
            let mut v: Vec<String> = shown.iter().map(|&i| f[i].clone()).collect();
            if let Some(x) = r.final_return {
                v[1] = format!("{x:.2}");
            }
            v
        })
        .collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|j| {
            body.iter()
                .map(|r| r[j].len())
                .chain([head[j].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(head.to_vec());
    for r in &body {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

/// Writes `summary.csv` and `summary.txt` into `root`.
pub fn write_summary(root: &Path, rows: &[CellSummary]) -> Result<()> {
    for (name, body) in [
        ("summary.csv", summary_csv(rows)),
        ("summary.txt", summary_table(rows)),
    ] {
        let p = root.join(name);
        fs::write(&p, body).map_err(|e| LabError::io(&p, e))?;
    }
    Ok(())
}
