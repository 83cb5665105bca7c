//! Versioned CSV run logs and cell checkpoints.
//!
//! Every row has the columns `schema_version, record, env_step, update,
//! name, value`. `run_meta` values are text; all other record types carry
//! a float written in shortest round-trip form.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use vexp_core::agents::{Component, Observer, Record, RecordKind, Sink, Value};
use vexp_core::autodiff::Tensor;
use vexp_core::checkpoint::ParamMap;
use vexp_core::error::Error as CoreError;

use crate::error::{LabError, Result};

pub const SCHEMA_VERSION: &str = "1";
pub const COLUMNS: [&str; 6] = [
    "schema_version",
    "record",
    "env_step",
    "update",
    "name",
    "value",
];

pub fn format_value(v: &Value) -> String {
    match v {
        Value::Num(x) => format!("{x:?}"),
        Value::Text(s) => s.clone(),
    }
}

/// Append-only CSV writer.
pub struct RunLog<W: Write> {
    out: csv::Writer<W>,
}

impl RunLog<File> {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| LabError::io(path, e))?;
        RunLog::new(f).map_err(|e| LabError::Log {
            path: path.into(),
            message: e.to_string(),
        })
    }
}

impl<W: Write> RunLog<W> {
    pub fn new(w: W) -> std::result::Result<Self, csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(COLUMNS)?;
        Ok(RunLog { out })
    }

    pub fn write(&mut self, r: &Record) -> std::result::Result<(), csv::Error> {
        let env_step = r.env_step.to_string();
        let update = r.update.to_string();
        let value = format_value(&r.value);
        self.out.write_record([
            SCHEMA_VERSION,
            r.kind.as_str(),
            &env_step,
            &update,
            &r.name,
            &value,
        ])
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
            .into_inner()
            .map_err(|e| e.into_error())
            .expect("flushed writer")
    }
}

/// Reads a log, rejecting unknown schema versions and malformed rows.
pub fn read_log(path: &Path) -> Result<Vec<Record>> {
    let f = File::open(path).map_err(|e| LabError::io(path, e))?;
    parse_log(f, path)
}

pub fn parse_log<R: std::io::Read>(r: R, path: &Path) -> Result<Vec<Record>> {
    let bad = |message: String| LabError::Log {
        path: path.into(),
        message,
    };
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(COLUMNS) {
        return Err(bad(format!(
            "unexpected header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if &row[0] != SCHEMA_VERSION {
            return Err(LabError::Schema {
                path: path.into(),
                found: row[0].to_string(),
            });
        }
        let kind = RecordKind::from_name(&row[1])
            .ok_or_else(|| bad(format!("unknown record type `{}`", &row[1])))?;
        let env_step = row[2]
            .parse()
            .map_err(|_| bad(format!("bad env_step `{}`", &row[2])))?;
        let update = row[3]
            .parse()
            .map_err(|_| bad(format!("bad update `{}`", &row[3])))?;
        let value = if kind == RecordKind::RunMeta {
            Value::Text(row[5].to_string())
        } else {
            Value::Num(
                row[5]
                    .parse()
                    .map_err(|_| bad(format!("bad value `{}`", &row[5])))?,
            )
        };
        out.push(Record {
            kind,
            env_step,
            update,
            name: row[4].to_string(),
            value,
        });
    }
    Ok(out)
}

/// `(env_step, mean)` of every evaluation in `records`.
pub fn eval_curve(records: &[Record]) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter(|r| r.kind == RecordKind::EvalReturn && r.name == "mean")
        .filter_map(|r| r.as_num().map(|v| (r.env_step, v)))
        .collect()
}

/// Last `run_meta` value named `name`.
pub fn meta<'a>(records: &'a [Record], name: &str) -> Option<&'a str> {
    records
        .iter()
        .rev()
        .find_map(|r| match (&r.kind, &r.value) {
            (RecordKind::RunMeta, Value::Text(t)) if r.name == name => Some(t.as_str()),
            _ => None,
        })
}

pub fn checkpoint_path(dir: &Path, env_step: u64) -> PathBuf {
    dir.join(format!("step_{env_step:010}.ckpt"))
}

/// Checkpoint files in `dir`, ordered by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| LabError::io(dir, e))?;
    for e in entries {
        let p = e.map_err(|e| LabError::io(dir, e))?.path();
        let step = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse().ok());
        if let Some(s) = step {
            out.push((s, p));
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_checkpoint(path: &Path) -> Result<ParamMap> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    Ok(ParamMap::decode(&text)?)
}

/// Writes the log of one cell and its checkpoints. The log is flushed at
/// every evaluation and every checkpoint.
pub struct CellSink {
    log: RunLog<File>,
    log_path: PathBuf,
    checkpoints: PathBuf,
}

impl CellSink {
    pub fn create(log_path: &Path, checkpoints: &Path) -> Result<Self> {
        fs::create_dir_all(checkpoints).map_err(|e| LabError::io(checkpoints, e))?;
        Ok(CellSink {
            log: RunLog::create(log_path)?,
            log_path: log_path.into(),
            checkpoints: checkpoints.into(),
        })
    }

    fn sink_err(&self, e: impl std::fmt::Display) -> CoreError {
        CoreError::Sink(format!("{}: {e}", self.log_path.display()))
    }
}

impl Observer for CellSink {
    fn gradients(&mut self, _c: Component, _update: u64, _grads: &[Tensor]) {}
}

impl Sink for CellSink {
    fn record(&mut self, rec: Record) -> vexp_core::error::Result<()> {
        self.log.write(&rec).map_err(|e| self.sink_err(e))
    }

    fn checkpoint(&mut self, env_step: u64, snapshot: &ParamMap) -> vexp_core::error::Result<()> {
        let path = checkpoint_path(&self.checkpoints, env_step);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, snapshot.encode()).map_err(|e| self.sink_err(e))?;
        fs::rename(&tmp, &path).map_err(|e| self.sink_err(e))?;
        self.flush()
    }

    fn flush(&mut self) -> vexp_core::error::Result<()> {
        self.log.flush().map_err(|e| self.sink_err(e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        for x in [
            0.1,
            -1e-300,
            1e300,
            f64::MIN_POSITIVE,
            123456.789,
            f64::NAN,
            f64::INFINITY,
        ] {
            let s = format_value(&Value::Num(x));
            let back: f64 = s.parse().unwrap();
            assert!(back.to_bits() == x.to_bits() || (x.is_nan() && back.is_nan()));
        }
    }
}
