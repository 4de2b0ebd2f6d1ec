//! Concurrency and fault-injection harness: traces of agent workloads,
//! checkers for isolation and serializability, and scripted replays.

mod check;
mod naive;
mod scenario;
mod simulate;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::catalog::{CommitId, MergeInfo, MergeResult, TableMap};
use crate::lakehouse::LakeError;
use crate::store::SnapshotId;

pub use check::{check_isolation, check_serializability, IsolationViolation, SerialError};
pub use scenario::{scenario_fig1, scenario_fig2, Fig1Result, Fig2Result, Variant};
pub use simulate::{simulate, Mix, WorkloadSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    ReadSessionScan,
    RunPipeline,
    RunPipelineWithFault,
    BranchAndMerge,
    /// Scripted steps of the naive (non-transactional) runner.
    NaiveRun,
    /// A scripted single commit straight to the target.
    Commit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub result: MergeResult,
    pub base: Option<CommitId>,
    pub source: CommitId,
    pub target_before: CommitId,
    pub target_after: CommitId,
    /// Table changes from base to source: `None` deletes.
    pub changes: BTreeMap<String, Option<SnapshotId>>,
}

impl MergeEvent {
    pub fn moved_target(&self) -> bool {
        self.result.is_success() && self.target_before != self.target_after
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub agent: usize,
    pub op: Op,
    /// Target head when the operation started.
    pub head_before: Option<CommitId>,
    /// Commit a read session was pinned to.
    pub session: Option<CommitId>,
    /// Table name to the content hash of what was actually returned.
    pub reads: TableMap,
    pub run_id: Option<Uuid>,
    pub outcome: String,
    pub merge: Option<MergeEvent>,
    /// Target state this operation made visible as a complete unit.
    pub published: Option<TableMap>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub target: String,
    pub seed: u64,
    pub initial: TableMap,
    pub final_state: TableMap,
    pub events: Vec<Event>,
}

impl Trace {
    pub fn save(&self, path: &Path) -> Result<(), LakeError> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Trace, LakeError> {
        crate::lakehouse::read_json(path)
    }

    /// Merges that changed the target, in trace order.
    pub fn publishing_merges(&self) -> Vec<&Event> {
        self.events
            .iter()
            .filter(|e| e.merge.as_ref().is_some_and(MergeEvent::moved_target))
            .collect()
    }
}

/// Collects events from concurrent agents; `seq` is assigned on push.
#[derive(Default)]
pub(crate) struct Recorder {
    seq: AtomicU64,
    events: Mutex<Vec<Event>>,
}

impl Recorder {
    pub(crate) fn push(&self, mut e: Event) {
        let mut events = self.events.lock().unwrap_or_else(|p| p.into_inner());
        e.seq = self.seq.fetch_add(1, Ordering::SeqCst);
        events.push(e);
    }

    pub(crate) fn into_events(self) -> Vec<Event> {
        self.events.into_inner().unwrap_or_else(|p| p.into_inner())
    }
}

pub(crate) fn event(agent: usize, op: Op) -> Event {
    Event {
        seq: 0,
        agent,
        op,
        head_before: None,
        session: None,
        reads: TableMap::new(),
        run_id: None,
        outcome: String::new(),
        merge: None,
        published: None,
    }
}

/// Builds the trace record of a merge, computing its change set.
pub(crate) fn merge_event(
    cat: &crate::catalog::Catalog,
    info: &MergeInfo,
) -> Result<MergeEvent, LakeError> {
    let mut changes = BTreeMap::new();
    if let Some(base) = &info.base {
        let b = &cat.get_commit(base)?.tables;
        let s = &cat.get_commit(&info.source_head)?.tables;
        for (t, id) in s {
            if b.get(t) != Some(id) {
                changes.insert(t.clone(), Some(id.clone()));
            }
        }
        for t in b.keys().filter(|t| !s.contains_key(*t)) {
            changes.insert(t.clone(), None);
        }
    }
    Ok(MergeEvent {
        result: info.result.clone(),
        base: info.base.clone(),
        source: info.source_head.clone(),
        target_before: info.target_before.clone(),
        target_after: info.target_after.clone(),
        changes,
    })
}
