use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Dispatch,
    JobStart,
    JobDone,
    Install,
    BarrierWaitBegin,
    BarrierWaitEnd,
    Prefetch,
    Drain,
    PageIn,
    Consume,
    ForwardPost,
    BackwardPre,
    StepEnd,
    Coherence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncAction {
    Hit,
    Sync,
}

/// One JSON line of the run trace. Optional fields are omitted when unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u64,
    pub worker: usize,
    pub seq: u64,
    pub event: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
    pub t_micros: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<SyncAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intra_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inter_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u64>,
}

impl TraceEvent {
    pub fn new(step: u64, worker: usize, event: EventKind, t_micros: u64) -> Self {
        Self {
            step,
            worker,
            seq: 0,
            event,
            block_id: None,
            version: None,
            t_micros,
            snapshot_step: None,
            module_id: None,
            action: None,
            intra_bytes: None,
            inter_bytes: None,
            count: None,
        }
    }

    pub fn block(mut self, id: u32) -> Self {
        self.block_id = Some(id);
        self
    }

    pub fn version(mut self, v: u64) -> Self {
        self.version = Some(v);
        self
    }

    pub fn snapshot(mut self, s: u64) -> Self {
        self.snapshot_step = Some(s);
        self
    }

    pub fn module(mut self, m: usize) -> Self {
        self.module_id = Some(m);
        self
    }

    pub fn count(mut self, n: u64) -> Self {
        self.count = Some(n);
        self
    }

    pub fn sync(mut self, action: SyncAction, intra: u64, inter: u64) -> Self {
        self.action = Some(action);
        self.intra_bytes = Some(intra);
        self.inter_bytes = Some(inter);
        self
    }
}

/// Per-rank event buffer; `seq` numbers events in emission order.
#[derive(Debug, Clone, Default)]
pub struct TraceBuffer {
    events: Vec<TraceEvent>,
    next_seq: u64,
}

impl TraceBuffer {
    pub fn emit(&mut self, mut ev: TraceEvent) {
        ev.seq = self.next_seq;
        self.next_seq += 1;
        self.events.push(ev);
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn take(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.events)
    }
}

/// Merges per-rank traces into a canonical `(step, worker, seq)` order.
pub fn merge_traces(per_rank: Vec<Vec<TraceEvent>>) -> Vec<TraceEvent> {
    let mut all: Vec<TraceEvent> = per_rank.into_iter().flatten().collect();
    all.sort_by_key(|e| (e.step, e.worker, e.seq));
    all
}

pub fn write_jsonl(path: &Path, events: &[TraceEvent]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl(path: &Path) -> std::io::Result<Vec<TraceEvent>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
