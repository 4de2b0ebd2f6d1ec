use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Trace;
use crate::catalog::TableMap;
use crate::store::SnapshotId;

/// Permutation search is factorial; beyond this the checker refuses.
pub const MAX_MERGES: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationViolation {
    pub seq: u64,
    pub agent: usize,
    pub reads: TableMap,
}

/// Every multi-table read must match one state that was published as a
/// whole: the initial state or the result of a complete operation.
pub fn check_isolation(trace: &Trace) -> Result<(), Vec<IsolationViolation>> {
    let published: Vec<&TableMap> = std::iter::once(&trace.initial)
        .chain(trace.events.iter().filter_map(|e| e.published.as_ref()))
        .collect();
    let violations: Vec<IsolationViolation> = trace
        .events
        .iter()
        .filter(|e| e.reads.len() > 1)
        .filter(|e| {
            !published
                .iter()
                .any(|state| e.reads.iter().all(|(t, id)| state.get(t) == Some(id)))
        })
        .map(|e| IsolationViolation {
            seq: e.seq,
            agent: e.agent,
            reads: e.reads.clone(),
        })
        .collect();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SerialError {
    #[error("{merges} merges exceed the brute-force bound of {MAX_MERGES}")]
    TooLarge { merges: usize },
    #[error("no serial order of {merges} merges reproduces the final state")]
    Violation { merges: usize },
}

fn apply(state: &mut TableMap, changes: &BTreeMap<String, Option<SnapshotId>>) {
    for (t, c) in changes {
        match c {
            Some(id) => state.insert(t.clone(), id.clone()),
            None => state.remove(t),
        };
    }
}

/// Searches for an order of the publishing merges whose change sets,
/// applied one after another to the initial state, give the final state.
/// Returns the witness order as event sequence numbers.
pub fn check_serializability(trace: &Trace) -> Result<Vec<u64>, SerialError> {
    let merges = trace.publishing_merges();
    let n = merges.len();
    if n > MAX_MERGES {
        return Err(SerialError::TooLarge { merges: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    loop {
        let mut state = trace.initial.clone();
        for &i in &order {
            apply(
                &mut state,
                &merges[i].merge.as_ref().expect("filtered").changes,
            );
        }
        if state == trace.final_state {
            return Ok(order.iter().map(|&i| merges[i].seq).collect());
        }
        if !next_permutation(&mut order) {
            return Err(SerialError::Violation { merges: n });
        }
    }
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = v.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = v.iter().rposition(|&x| x > v[i]).expect("exists past i");
    v.swap(i, j);
    v[i + 1..].reverse();
    true
}
