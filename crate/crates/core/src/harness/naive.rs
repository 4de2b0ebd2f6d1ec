//! Test double: runs each node and commits its output straight to the
//! target, one table at a time. Only the harness can reach this.

use std::collections::BTreeMap;

use crate::catalog::TableChange;
use crate::engine::{execute_query, PipelineSpec};
use crate::lakehouse::{LakeError, Lakehouse};

/// Returns whether every node ran. Node inputs are read from the live
/// target head, and `after_commit` fires after each per-node commit.
pub(super) fn naive_run(
    lake: &Lakehouse,
    spec: &PipelineSpec,
    target: &str,
    author: &str,
    fail_after: Option<&str>,
    after_commit: &mut dyn FnMut(),
) -> Result<bool, LakeError> {
    let cat = lake.catalog();
    for node in &spec.nodes {
        let session = cat.open_session(target)?;
        let mut bindings = BTreeMap::new();
        for input in &node.inputs {
            bindings.insert(input.clone(), cat.read_table(&session, input)?);
        }
        let data = execute_query(&node.query, &bindings)?;
        let snap = lake.store().put_snapshot(&data)?;
        let changes = BTreeMap::from([(node.name.clone(), TableChange::Put(snap))]);
        cat.commit_tables(
            target,
            &changes,
            &session.pinned,
            author,
            &format!("naive {}", node.name),
        )?;
        after_commit();
        if fail_after == Some(node.name.as_str()) {
            return Ok(false);
        }
    }
    Ok(true)
}
