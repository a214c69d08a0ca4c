//! Parameter sweeps: one run per value of a dotted configuration key.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::config::{load_config_with, ConfigError};
use crate::engine::run_with;
use crate::model::hexnum;
use crate::schedulers::SchedulerRegistry;
use crate::time::Time;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("base configuration: {0}")]
    Base(#[from] ConfigError),
    #[error("unresolvable key {key:?}: {reason}")]
    Key { key: String, reason: String },
    #[error("value {value:?} for {key:?}: {reason}")]
    Value { key: String, value: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepStatus {
    Ok,
    ConfigError,
    RunError,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub status: SweepStatus,
    pub deadline_misses: Option<u64>,
    pub hypervisor_overhead_ns: Option<u64>,
    pub utilization: Option<f64>,
    pub error: String,
}

fn lookup<'v>(doc: &'v mut Value, key: &str) -> Result<&'v mut Value, String> {
    let mut cur = doc;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(part).ok_or_else(|| format!("no field {part:?}"))?,
            Value::Array(a) => {
                let i: usize = part.parse().map_err(|_| format!("{part:?} is not an array index"))?;
                let len = a.len();
                a.get_mut(i).ok_or_else(|| format!("index {i} out of range (len {len})"))?
            }
            _ => return Err(format!("cannot descend into {part:?}")),
        };
    }
    Ok(cur)
}

fn is_numeric(v: &Value) -> bool {
    match v {
        Value::Number(_) => true,
        Value::String(s) => hexnum::parse(s).is_ok(),
        _ => false,
    }
}

/// Checks that `key` names an existing numeric field of `doc`.
pub fn resolve_key(doc: &Value, key: &str) -> Result<(), SweepError> {
    let mut doc = doc.clone();
    let v = lookup(&mut doc, key).map_err(|reason| SweepError::Key { key: key.into(), reason })?;
    if is_numeric(v) {
        Ok(())
    } else {
        Err(SweepError::Key { key: key.into(), reason: format!("{v} is not numeric") })
    }
}

/// Replaces the numeric field at `key`, keeping its JSON representation
/// (number or address string).
pub fn set_key(doc: &mut Value, key: &str, value: &str) -> Result<(), SweepError> {
    let slot = lookup(doc, key).map_err(|reason| SweepError::Key { key: key.into(), reason })?;
    let bad = |reason: String| SweepError::Value { key: key.into(), value: value.into(), reason };
    *slot = match slot {
        Value::String(_) => {
            hexnum::parse(value).map_err(bad)?;
            Value::String(value.trim().to_string())
        }
        _ => {
            let v = value.trim();
            if let Ok(n) = hexnum::parse(v) {
                Value::from(n)
            } else if let Ok(n) = v.parse::<i64>() {
                Value::from(n)
            } else {
                return Err(bad("not an integer".into()));
            }
        }
    };
    Ok(())
}

/// Runs `base` once per value, in parallel; rows come back in value order.
pub fn run_sweep(
    base: &str,
    key: &str,
    values: &[String],
    horizon: Time,
    registry: &SchedulerRegistry,
) -> Result<Vec<SweepRow>, SweepError> {
    let doc: Value = serde_json::from_str(base)
        .map_err(|e| ConfigError::Parse { line: e.line(), column: e.column(), message: e.to_string() })?;
    resolve_key(&doc, key)?;
    for v in values {
        set_key(&mut doc.clone(), key, v)?;
    }
    Ok(values
        .par_iter()
        .map(|value| {
            let mut d = doc.clone();
            set_key(&mut d, key, value).expect("checked above");
            let row = |status, error: String| SweepRow {
                value: value.clone(),
                status,
                deadline_misses: None,
                hypervisor_overhead_ns: None,
                utilization: None,
                error,
            };
            let spec = match load_config_with(&d.to_string(), registry) {
                Ok(s) => s,
                Err(e) => return row(SweepStatus::ConfigError, e.to_string()),
            };
            match run_with(&spec, horizon, registry) {
                Ok(out) => SweepRow {
                    value: value.clone(),
                    status: SweepStatus::Ok,
                    deadline_misses: Some(out.metrics.deadline_misses),
                    hypervisor_overhead_ns: Some(out.metrics.hypervisor_overhead_ns),
                    utilization: Some(out.metrics.utilization),
                    error: String::new(),
                },
                Err(f) if f.error.is_config() => row(SweepStatus::ConfigError, f.error.to_string()),
                Err(f) => row(SweepStatus::RunError, f.error.to_string()),
            }
        })
        .collect())
}

pub const SUMMARY_HEADER: [&str; 6] = ["value", "status", "deadline_misses", "hypervisor_overhead_ns", "utilization", "error"];

pub fn write_summary<W: Write>(rows: &[SweepRow], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(SUMMARY_HEADER)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
