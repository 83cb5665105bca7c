//! Flat parameter container used for network, model and buffer checkpoints.
//!
//! Text layout (UTF-8, one record per line):
//!
//! ```text
//! vexp-params 1
//! <name> <rank> <extent_0> .. <extent_{rank-1}> <value_0> .. <value_{n-1}>
//! ```
//!
//! Names contain no whitespace. Values are row-major and written in Rust's
//! shortest round-trip float notation, so decode(encode(m)) is bit-exact.
//! Record order is insertion order.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &str = "vexp-params";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamMap {
    entries: Vec<(String, Tensor)>,
}

impl ParamMap {
    pub fn new() -> Self {
        ParamMap::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(!name.contains(char::is_whitespace));
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = tensor;
        } else {
            self.entries.push((name, tensor));
        }
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.insert(name, Tensor::scalar(v));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
    }

    /// Looks up `name` and checks its shape.
    pub fn require_shaped(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.require(name)?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: expected shape {shape:?}, found {:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.require(name)?.item())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose names start with `prefix.`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> ParamMap {
        let p = format!("{prefix}.");
        ParamMap {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| {
                    n.strip_prefix(p.as_str())
                        .map(|s| (s.to_string(), t.clone()))
                })
                .collect(),
        }
    }

    /// Inserts every entry of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamMap) {
        for (n, t) in other.entries {
            self.insert(format!("{prefix}.{n}"), t);
        }
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {VERSION}");
        for (name, t) in &self.entries {
            let _ = write!(out, "{name} {}", t.rank());
            for d in t.shape() {
                let _ = write!(out, " {d}");
            }
            for v in t.data() {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("empty input".into()))?;
        let mut h = header.split_whitespace();
        if h.next() != Some(MAGIC) {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version: u32 = h
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing version".into()))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut map = ParamMap::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Checkpoint(format!("line {}: {what}", lineno + 2));
            let mut fields = line.split_whitespace();
            let name = fields.next().ok_or_else(|| bad("missing name"))?;
            let rank: usize = fields
                .next()
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| bad("bad rank"))?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    fields
                        .next()
                        .and_then(|d| d.parse::<usize>().ok())
                        .ok_or_else(|| bad("bad extent"))?,
                );
            }
            let data = fields
                .map(|v| v.parse::<f64>())
                .collect::<core::result::Result<Vec<f64>, _>>()
                .map_err(|_| bad("bad value"))?;
            let t = Tensor::new(&shape, data).map_err(|e| bad(&e.to_string()))?;
            map.insert(name, t);
        }
        Ok(map)
    }
}
