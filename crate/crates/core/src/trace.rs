//! Simulation trace records and their CSV / JSON-lines encodings.
//!
//! CSV columns, in order: `time_ns, actor, kind, cost_field, cost_ns,
//! detail`. `actor` is `hyp` or `vm<N>`; `cost_field` is empty unless
//! the record charges hypervisor time; `detail` is a `key=value;...` list.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::model::{CostField, VmId};

pub const CSV_HEADER: [&str; 6] = ["time_ns", "actor", "kind", "cost_field", "cost_ns", "detail"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_ns: u64,
    pub actor: String,
    pub kind: String,
    pub cost_field: String,
    pub cost_ns: u64,
    pub detail: String,
}

pub fn actor(vm: Option<VmId>) -> String {
    match vm {
        Some(vm) => vm.to_string(),
        None => "hyp".to_string(),
    }
}

/// Parses `vm<N>`.
pub fn parse_actor(s: &str) -> Option<VmId> {
    s.strip_prefix("vm")?.parse().ok().map(VmId)
}

impl TraceRecord {
    pub fn new(time_ns: u64, actor: String, kind: &str, detail: String) -> Self {
        TraceRecord { time_ns, actor, kind: kind.to_string(), cost_field: String::new(), cost_ns: 0, detail }
    }

    pub fn cost(&self) -> Option<CostField> {
        CostField::from_name(&self.cost_field)
    }

    pub fn vm(&self) -> Option<VmId> {
        parse_actor(&self.actor)
    }

    /// Value of `key` in the detail list.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.detail.split(';').find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.get(key)?.parse().ok()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceIoError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unexpected header {0:?}")]
    Header(Vec<String>),
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TraceIoError> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wr.write_record(CSV_HEADER)?;
        for r in &self.records {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TraceIoError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("writing to memory");
        out
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Trace, TraceIoError> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(TraceIoError::Header(header));
        }
        let records = rd.deserialize().collect::<Result<Vec<TraceRecord>, _>>()?;
        Ok(Trace { records })
    }

    pub fn read_jsonl<R: Read>(r: R) -> Result<Trace, TraceIoError> {
        let records = serde_json::Deserializer::from_reader(r)
            .into_iter::<TraceRecord>()
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Trace { records })
    }

    /// The last `n` records as CSV lines, for diagnostics.
    pub fn suffix(&self, n: usize) -> String {
        let tail = Trace { records: self.records[self.records.len().saturating_sub(n)..].to_vec() };
        String::from_utf8(tail.to_csv_bytes()).expect("csv is utf-8")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceComparison {
    Equal,
    /// First index at which the encoded records differ. A missing record
    /// (one trace is a prefix of the other) is `None`.
    Diverged { index: usize, left: Option<TraceRecord>, right: Option<TraceRecord> },
}

impl fmt::Display for TraceComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceComparison::Equal => write!(f, "equal"),
            TraceComparison::Diverged { index, left, right } => {
                write!(f, "diverged at record {index}: {left:?} vs {right:?}")
            }
        }
    }
}

fn encode(r: &TraceRecord) -> Vec<u8> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    wr.serialize(r).expect("writing to memory");
    wr.into_inner().expect("flush to memory")
}

/// Byte-level comparison of the encoded records.
pub fn compare_traces(a: &Trace, b: &Trace) -> TraceComparison {
    let n = a.len().max(b.len());
    for i in 0..n {
        let (x, y) = (a.records.get(i), b.records.get(i));
        let same = match (x, y) {
            (Some(x), Some(y)) => encode(x) == encode(y),
            _ => false,
        };
        if !same {
            return TraceComparison::Diverged { index: i, left: x.cloned(), right: y.cloned() };
        }
    }
    TraceComparison::Equal
}
