//! Neighbor-to-neighbor message accounting.
//!
//! Protocols never move data between agents directly; every exchange is
//! recorded here with its kind and payload length. The payload kinds are a
//! closed set: ADMM trajectory copies, ADMM consensus trajectories, and GAC
//! vectors. Nothing in the protocol surface can carry parameters, local cost
//! functions or dynamics, and [`audit`] checks a recorded log against that
//! contract.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::consensus::Topology;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    /// Sender's local copy of the receiver's state trajectory plus its scaled dual.
    AdmmCopy,
    /// Receiver-owned agreed trajectory broadcast back to the copy holders.
    AdmmConsensus,
    /// One agent's local objective share (single GAC scalar).
    GacValue,
    /// Stacked per-step scalars: Q share, V share, local cost.
    GacTdScalars,
    /// Upper triangle of the agent's contribution to C.
    GacCMatrix,
    /// Generic GAC vector (library callers).
    Gac,
}

impl MessageKind {
    pub const ALL: [MessageKind; 6] = [
        MessageKind::AdmmCopy,
        MessageKind::AdmmConsensus,
        MessageKind::GacValue,
        MessageKind::GacTdScalars,
        MessageKind::GacCMatrix,
        MessageKind::Gac,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::AdmmCopy => "admm_copy",
            MessageKind::AdmmConsensus => "admm_consensus",
            MessageKind::GacValue => "gac_value",
            MessageKind::GacTdScalars => "gac_td_scalars",
            MessageKind::GacCMatrix => "gac_c_matrix",
            MessageKind::Gac => "gac",
        }
    }

    pub fn is_gac(self) -> bool {
        !matches!(self, MessageKind::AdmmCopy | MessageKind::AdmmConsensus)
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown message kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    /// Environment step (or caller-defined epoch) the message belongs to.
    pub epoch: u64,
    /// Protocol invocation counter (one GAC or ADMM call).
    pub call: u64,
    /// Global protocol round counter.
    pub round: u64,
    pub sender: usize,
    pub receiver: usize,
    pub kind: String,
    /// Number of scalars in the payload.
    pub len: usize,
}

/// Append-only message log. Disabled logs only count payload scalars.
#[derive(Debug, Clone, Default)]
pub struct MessageLog {
    enabled: bool,
    epoch: u64,
    call: u64,
    round: u64,
    records: Vec<MessageRecord>,
    scalars_by_kind: BTreeMap<MessageKind, u64>,
}

impl MessageLog {
    pub fn new(enabled: bool) -> Self {
        MessageLog {
            enabled,
            ..Default::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
    }

    /// Starts a new protocol invocation.
    pub fn next_call(&mut self) -> u64 {
        self.call += 1;
        self.call
    }

    pub fn next_round(&mut self) -> u64 {
        self.round += 1;
        self.round
    }

    pub fn send(&mut self, sender: usize, receiver: usize, kind: MessageKind, len: usize) {
        *self.scalars_by_kind.entry(kind).or_default() += len as u64;
        if self.enabled {
            self.records.push(MessageRecord {
                epoch: self.epoch,
                call: self.call,
                round: self.round,
                sender,
                receiver,
                kind: kind.as_str().to_owned(),
                len,
            });
        }
    }

    pub fn records(&self) -> &[MessageRecord] {
        &self.records
    }

    pub fn scalars_sent(&self, kind: MessageKind) -> u64 {
        self.scalars_by_kind.get(&kind).copied().unwrap_or(0)
    }

    pub fn clear(&mut self) {
        self.records.clear();
        self.scalars_by_kind.clear();
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_records(&self.records, w)
    }
}

pub fn write_records<W: Write>(records: &[MessageRecord], w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<MessageRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Payload sizes the protocols are allowed to use.
#[derive(Debug, Clone)]
pub struct AuditSpec {
    /// Scalars in one ADMM trajectory message (`horizon * n`).
    pub trajectory_len: usize,
    /// Replay sample count `T`; C-matrix payloads must be `T(T+1)/2`.
    pub sample_count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct AuditReport {
    pub messages: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that every message travels along a coupling edge and carries one
/// of the permitted payload shapes.
pub fn audit(records: &[MessageRecord], topology: &Topology, spec: &AuditSpec) -> AuditReport {
    let mut report = AuditReport {
        messages: records.len(),
        ..Default::default()
    };
    let c_len = spec.sample_count * (spec.sample_count + 1) / 2;
    for (idx, r) in records.iter().enumerate() {
        if r.sender >= topology.agents() || r.receiver >= topology.agents() {
            report.violations.push(format!("record {idx}: unknown agent"));
            continue;
        }
        if !topology.are_neighbors(r.sender, r.receiver) {
            report
                .violations
                .push(format!("record {idx}: {} -> {} is not an edge", r.sender, r.receiver));
        }
        let kind = match r.kind.parse::<MessageKind>() {
            Ok(k) => k,
            Err(e) => {
                report.violations.push(format!("record {idx}: {e}"));
                continue;
            }
        };
        let ok = match kind {
            MessageKind::AdmmCopy | MessageKind::AdmmConsensus => r.len == spec.trajectory_len,
            MessageKind::GacValue => r.len == 1,
            MessageKind::GacTdScalars => r.len == 3,
            MessageKind::GacCMatrix => r.len == c_len,
            MessageKind::Gac => r.len > 0,
        };
        if !ok {
            report
                .violations
                .push(format!("record {idx}: {kind} payload of {} scalars", r.len));
        }
    }
    report
}

/// Per-epoch GAC payload: for every epoch, the summed length of the vectors
/// agreed upon by all GAC invocations in that epoch (the payload of one
/// message, which is the same for every round and edge of an invocation).
pub fn gac_payload_per_epoch(records: &[MessageRecord]) -> Result<BTreeMap<u64, usize>> {
    let mut per_call: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    for r in records {
        let kind: MessageKind = r.kind.parse().map_err(Error::Config)?;
        if !kind.is_gac() {
            continue;
        }
        let len = per_call.entry((r.epoch, r.call)).or_insert(r.len);
        if *len != r.len {
            return Err(Error::Config(format!(
                "GAC call {} mixes payload sizes {} and {}",
                r.call, len, r.len
            )));
        }
    }
    let mut out = BTreeMap::new();
    for ((epoch, _), len) in per_call {
        *out.entry(epoch).or_default() += len;
    }
    Ok(out)
}
