//! Offline comparison of expansion targets with Monte-Carlo returns over a
//! cell's checkpoints.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use vexp_core::agents::{Record, RecordKind, Snapshot};
use vexp_core::diagnostics::{analyze_targets, AnalysisConfig, TargetAnalysis};
use vexp_core::rng::{mix, stream, Stream};

use crate::config::RunConfig;
use crate::error::{LabError, Result};
use crate::log::{list_checkpoints, read_checkpoint, RunLog};
use crate::matrix::{CHECKPOINT_DIR, SNAPSHOT_FILE};

pub const ANALYSIS_FILE: &str = "analysis.csv";

/// The configuration and seed stored in a cell directory.
pub fn load_cell(dir: &Path) -> Result<(RunConfig, u64)> {
    let p = dir.join(SNAPSHOT_FILE);
    let text = fs::read_to_string(&p).map_err(|e| LabError::io(&p, e))?;
    let cfg = RunConfig::from_toml(&text)?;
    let seed = match cfg.seeds.as_slice() {
        [s] => *s,
        _ => {
            return Err(LabError::config(
                "seeds",
                format!("{} must hold exactly one seed", p.display()),
            ))
        }
    };
    Ok((cfg, seed))
}

pub fn load_snapshot(cfg: &RunConfig, path: &Path) -> Result<Snapshot> {
    Ok(Snapshot::from_params(
        &cfg.train_config(),
        &read_checkpoint(path)?,
    )?)
}

/// Targets are bootstrapped with the target critic, as in training.
pub fn analyze_snapshot(
    cfg: &RunConfig,
    snap: &Snapshot,
    acfg: &AnalysisConfig,
    seed: u64,
) -> Result<Vec<TargetAnalysis>> {
    let agent = &snap.agent;
    let mut rng = stream(seed, Stream::Analysis);
    Ok(analyze_targets(
        acfg,
        &cfg.env_spec(),
        agent.policy(),
        agent.target_critic(),
        agent.alpha(),
        &snap.buffer,
        &mut rng,
    )?)
}

pub fn analysis_records(env_step: u64, update: u64, rows: &[TargetAnalysis]) -> Vec<Record> {
    let num =
        |name: String, v: f64| Record::num(RecordKind::TargetAnalysis, env_step, update, name, v);
    let mut out = Vec::new();
    for r in rows {
        out.push(num(format!("wasserstein/h{}", r.horizon), r.wasserstein));
        out.push(num(format!("mean/h{}", r.horizon), r.mean));
        out.push(num(format!("variance/h{}", r.horizon), r.variance));
    }
    if let Some(r) = rows.first() {
        out.push(num("mc_mean".into(), r.mc_mean));
        out.push(num("mc_variance".into(), r.mc_variance));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointAnalysis {
    pub env_step: u64,
    pub update: u64,
    pub rows: Vec<TargetAnalysis>,
}

/// Analyses every checkpoint of the cell in `dir` on `jobs` threads and
/// writes `analysis.csv` next to its log. The discount is the cell's own.
pub fn analyze_cell(
    dir: &Path,
    acfg: &AnalysisConfig,
    jobs: usize,
) -> Result<Vec<CheckpointAnalysis>> {
    let (cfg, seed) = load_cell(dir)?;
    let acfg = AnalysisConfig {
        gamma: cfg.gamma,
        ..acfg.clone()
    };
    let base = cfg.cell_seed(seed);
    let ckpts = list_checkpoints(&dir.join(CHECKPOINT_DIR))?;
    if ckpts.is_empty() {
        return Err(LabError::Usage(format!(
            "{} holds no checkpoints",
            dir.display()
        )));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CheckpointAnalysis>>>> =
        Mutex::new((0..ckpts.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(ckpts.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((step, path)) = ckpts.get(i) else {
                    break;
                };
                let res = load_snapshot(&cfg, path).and_then(|snap| {
                    let rows = analyze_snapshot(&cfg, &snap, &acfg, mix(base, *step))?;
                    Ok(CheckpointAnalysis {
                        env_step: *step,
                        update: snap.agent.updates(),
                        rows,
                    })
                });
                results.lock().expect("no poisoned workers")[i] = Some(res);
            });
        }
    });
    let out: Vec<CheckpointAnalysis> = results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every checkpoint visited"))
        .collect::<Result<_>>()?;
    let path = dir.join(ANALYSIS_FILE);
    let mut log = RunLog::create(&path)?;
    let csv_err = |e: csv::Error| LabError::Log {
        path: path.clone(),
        message: e.to_string(),
    };
    for a in &out {
        for r in analysis_records(a.env_step, a.update, &a.rows) {
            log.write(&r).map_err(csv_err)?;
        }
    }
    log.flush().map_err(|e| LabError::io(&path, e))?;
    Ok(out)
}
