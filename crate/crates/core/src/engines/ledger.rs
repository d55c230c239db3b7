use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Why a query was issued.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PretrainPrepass,
    Train,
    Eval,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::PretrainPrepass => "pretrain_prepass",
            Phase::Train => "train",
            Phase::Eval => "eval",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain_prepass" => Ok(Phase::PretrainPrepass),
            "train" => Ok(Phase::Train),
            "eval" => Ok(Phase::Eval),
            other => Err(Error::parse("phase", format!("unknown phase {other:?}"))),
        }
    }
}

/// Caller-declared context of one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryContext {
    pub phase: Phase,
    pub sample_id: String,
    pub epoch: u32,
}

impl QueryContext {
    pub fn new(phase: Phase, sample_id: impl Into<String>, epoch: u32) -> Self {
        QueryContext {
            phase,
            sample_id: sample_id.into(),
            epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub backend_id: String,
    pub phase: Phase,
    pub sample_id: String,
    pub epoch: u32,
    pub cost: f64,
}

/// Append-only record of every black-box query.
#[derive(Debug, Default)]
pub struct QueryLedger {
    entries: Mutex<Vec<LedgerEntry>>,
}

impl QueryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, entry: LedgerEntry) {
        self.entries.lock().expect("ledger lock poisoned").push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("ledger lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger lock poisoned").clone()
    }

    pub fn count(&self, phase: Phase) -> usize {
        self.entries
            .lock()
            .expect("ledger lock poisoned")
            .iter()
            .filter(|e| e.phase == phase)
            .count()
    }

    pub fn count_where(&self, mut pred: impl FnMut(&LedgerEntry) -> bool) -> usize {
        self.entries
            .lock()
            .expect("ledger lock poisoned")
            .iter()
            .filter(|e| pred(e))
            .count()
    }

    pub fn total_cost(&self) -> f64 {
        self.entries
            .lock()
            .expect("ledger lock poisoned")
            .iter()
            .map(|e| e.cost)
            .sum()
    }

    /// CSV with header `backend_id,phase,sample_id,epoch,cost`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["backend_id", "phase", "sample_id", "epoch", "cost"])
            .map_err(|e| Error::parse("ledger csv", e))?;
        for e in self.snapshot() {
            w.write_record([
                e.backend_id.as_str(),
                e.phase.as_str(),
                e.sample_id.as_str(),
                &e.epoch.to_string(),
                &e.cost.to_string(),
            ])
            .map_err(|e| Error::parse("ledger csv", e))?;
        }
        w.flush().map_err(|e| Error::io("<ledger csv>", e))?;
        Ok(())
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }

    /// Parse a ledger CSV back into entries.
    pub fn parse_csv(text: &str) -> Result<Vec<LedgerEntry>> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| Error::parse("ledger csv", e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["backend_id", "phase", "sample_id", "epoch", "cost"] {
            return Err(Error::parse("ledger csv", "unexpected header"));
        }
        let mut out = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::parse("ledger csv", e))?;
            let cost: f64 = rec[4].parse().map_err(|e| Error::parse("ledger cost", e))?;
            if !cost.is_finite() || cost < 0.0 {
                return Err(Error::parse("ledger cost", "cost must be finite and non-negative"));
            }
            out.push(LedgerEntry {
                backend_id: rec[0].to_string(),
                phase: rec[1].parse()?,
                sample_id: rec[2].to_string(),
                epoch: rec[3].parse().map_err(|e| Error::parse("ledger epoch", e))?,
                cost,
            });
        }
        Ok(out)
    }
}
