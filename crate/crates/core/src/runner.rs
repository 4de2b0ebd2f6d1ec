//! Transactional pipeline runs: temp branch, per-node commits, verifier
//! gate, then one merge into the target.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::catalog::{CatalogError, CommitId, MergeInfo, MergeResult, TableChange};
use crate::engine::{execute_query, parse_pipeline, plan, EngineError, PipelineSpec, PlannedNode};
use crate::governance::{Decision, Permission};
use crate::lakehouse::{json_files, read_json, write_json_atomic, LakeError, Lakehouse};
use crate::store::{Schema, SnapshotId, TableData};
use crate::verify::VerdictRecord;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail")]
pub enum NodeStatus {
    Succeeded(CommitId),
    Failed(String),
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeResult {
    pub node: String,
    #[serde(flatten)]
    pub status: NodeStatus,
    /// Output snapshot, when the node succeeded.
    pub snapshot: Option<SnapshotId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail")]
pub enum RunOutcome {
    Merged(MergeResult),
    /// A node failed; the temp branch is left open for inspection.
    FailedOpen(String),
    VerifierRejected(Vec<String>),
    Denied(String),
    /// Dry run: planned only, nothing written.
    Planned,
    /// All nodes succeeded and verifiers passed; merge was not requested.
    Held,
}

impl RunOutcome {
    pub fn name(&self) -> &'static str {
        match self {
            RunOutcome::Merged(_) => "Merged",
            RunOutcome::FailedOpen(_) => "FailedOpen",
            RunOutcome::VerifierRejected(_) => "VerifierRejected",
            RunOutcome::Denied(_) => "Denied",
            RunOutcome::Planned => "Planned",
            RunOutcome::Held => "Held",
        }
    }

    /// Merged successfully, held, or planned.
    pub fn is_success(&self) -> bool {
        match self {
            RunOutcome::Merged(m) => m.is_success(),
            RunOutcome::Planned | RunOutcome::Held => true,
            _ => false,
        }
    }
}

impl fmt::Display for RunOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedOutput {
    pub node: String,
    pub schema: Schema,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: Uuid,
    pub pipeline: String,
    pub target_branch: String,
    pub temp_branch: String,
    pub principal: String,
    pub started_at: i64,
    /// Commit the sources were read from.
    pub source_commit: Option<CommitId>,
    pub node_results: Vec<NodeResult>,
    pub outcome: RunOutcome,
    /// Base, heads before and after, for the publishing merge.
    pub merge: Option<MergeInfo>,
    pub verdicts: Vec<VerdictRecord>,
    /// Failure detail not attributable to a single node.
    pub error: Option<String>,
    pub plan: Vec<PlannedOutput>,
    /// Wall-clock milliseconds per executed node.
    pub timings: BTreeMap<String, u64>,
    /// Full pipeline text, so the run can be reproduced or repaired.
    pub spec: String,
}

impl RunReport {
    pub fn failed_node(&self) -> Option<(&str, &str)> {
        self.node_results.iter().find_map(|n| match &n.status {
            NodeStatus::Failed(e) => Some((n.node.as_str(), e.as_str())),
            _ => None,
        })
    }

    /// Last node commit, i.e. what verifiers evaluated and what a merge publishes.
    pub fn head(&self) -> Option<&CommitId> {
        self.node_results
            .iter()
            .rev()
            .find_map(|n| match &n.status {
                NodeStatus::Succeeded(c) => Some(c),
                _ => None,
            })
    }

    pub fn spec(&self) -> Result<PipelineSpec, EngineError> {
        parse_pipeline(&self.spec)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub principal: String,
    /// Inject a failure right after this node commits.
    pub fail_after: Option<String>,
    pub dry_run: bool,
    /// Merge into the target when everything passes. Off for healer attempts.
    pub merge: bool,
}

impl RunOptions {
    pub fn new(principal: &str) -> Self {
        RunOptions {
            principal: principal.to_string(),
            fail_after: None,
            dry_run: false,
            merge: true,
        }
    }

    pub fn fail_after(mut self, node: &str) -> Self {
        self.fail_after = Some(node.to_string());
        self
    }

    pub fn dry_run(mut self) -> Self {
        self.dry_run = true;
        self
    }

    pub fn without_merge(mut self) -> Self {
        self.merge = false;
        self
    }
}

/// Hook into a running pipeline, used by scripted interleavings.
pub trait RunObserver: Sync {
    fn after_node_commit(&self, _run: &RunReport, _node: &str, _commit: &CommitId) {}
    fn before_merge(&self, _run: &RunReport) {}
}

struct NoObserver;

impl RunObserver for NoObserver {}

pub fn temp_branch_name(pipeline: &str, run_id: Uuid) -> String {
    format!("run/{pipeline}/{run_id}")
}

impl Lakehouse {
    fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run(
        &self,
        spec: &PipelineSpec,
        target: &str,
        opts: &RunOptions,
    ) -> Result<RunReport, LakeError> {
        self.run_observed(spec, target, opts, &NoObserver)
    }

    pub fn run_observed(
        &self,
        spec: &PipelineSpec,
        target: &str,
        opts: &RunOptions,
        observer: &dyn RunObserver,
    ) -> Result<RunReport, LakeError> {
        if let Some(n) = &opts.fail_after {
            if spec.node(n).is_none() {
                return Err(LakeError::InvalidArgument(format!(
                    "fail_after names no node of pipeline {}: {n:?}",
                    spec.name
                )));
            }
        }
        let run_id = self.run_ids.next();
        let temp = temp_branch_name(&spec.name, run_id);
        let mut report = RunReport {
            run_id,
            pipeline: spec.name.clone(),
            target_branch: target.to_string(),
            temp_branch: temp.clone(),
            principal: opts.principal.clone(),
            started_at: self.catalog.now(),
            source_commit: None,
            node_results: vec![],
            outcome: RunOutcome::Planned,
            merge: None,
            verdicts: vec![],
            error: None,
            plan: vec![],
            timings: BTreeMap::new(),
            spec: spec.to_string(),
        };

        let mut actions = vec![Permission::RunPipeline(spec.name.clone())];
        if !opts.dry_run {
            actions.push(Permission::CreateBranch(temp.clone()));
            actions.push(Permission::WriteBranch(temp.clone()));
            if opts.merge {
                actions.push(Permission::MergeInto(target.to_string()));
            }
        }
        let policy = self.policy.current();
        let mut decision = policy.authorize_all(&opts.principal, &actions);
        let mut whitelist_violation = None;
        if decision.is_allow() {
            if let Err(bad) = policy.check_pipeline(spec) {
                let list: Vec<String> = bad.iter().map(|p| p.to_string()).collect();
                let reason = format!("packages not whitelisted: {}", list.join(", "));
                decision = Decision::Deny(reason.clone());
                whitelist_violation = Some(reason);
            }
        }
        self.record(&opts.principal, "run", actions, decision.clone())?;
        if let Some(reason) = whitelist_violation {
            report.outcome = RunOutcome::Denied(reason);
            self.save_run(&report)?;
            return Ok(report);
        }
        if let Decision::Deny(reason) = decision {
            return Err(LakeError::Denied(reason));
        }

        let target_head = self.catalog.head(target)?;
        if opts.dry_run {
            let session = self.catalog.open_session(target_head.as_str())?;
            let p = self.plan_against(spec, &session)?;
            report.source_commit = Some(session.pinned);
            report.plan = p;
            return Ok(report);
        }

        self.catalog.create_branch(&temp, target_head.as_str())?;
        let session = self.catalog.open_session(&temp)?;
        report.source_commit = Some(session.pinned.clone());

        let order: Vec<String> = match self.plan_against(spec, &session) {
            Ok(p) => {
                report.plan = p;
                report.plan.iter().map(|p| p.node.clone()).collect()
            }
            Err(e) => {
                // Attribute the planning error to its node; nothing executes.
                let culprit = match &e {
                    LakeError::Engine(EngineError::Type(t)) => t.node.clone(),
                    LakeError::Engine(EngineError::UnknownInput { node, .. })
                    | LakeError::Engine(EngineError::CycleOrForwardRef { node, .. }) => {
                        Some(node.clone())
                    }
                    _ => None,
                };
                for n in &spec.nodes {
                    let status = if Some(&n.name) == culprit.as_ref() {
                        NodeStatus::Failed(e.to_string())
                    } else {
                        NodeStatus::Skipped
                    };
                    report.node_results.push(NodeResult {
                        node: n.name.clone(),
                        status,
                        snapshot: None,
                    });
                }
                if culprit.is_none() {
                    report.error = Some(e.to_string());
                }
                report.outcome = RunOutcome::FailedOpen(temp.clone());
                self.save_run(&report)?;
                return Ok(report);
            }
        };

        let mut outputs: BTreeMap<String, TableData> = BTreeMap::new();
        let mut head = session.pinned.clone();
        let mut failed = false;
        let mut injected_pending = false;
        for name in &order {
            if failed {
                report.node_results.push(NodeResult {
                    node: name.clone(),
                    status: NodeStatus::Skipped,
                    snapshot: None,
                });
                continue;
            }
            if injected_pending {
                failed = true;
                report.node_results.push(NodeResult {
                    node: name.clone(),
                    status: NodeStatus::Failed(format!(
                        "injected fault after node {}",
                        opts.fail_after.as_deref().unwrap_or_default()
                    )),
                    snapshot: None,
                });
                continue;
            }
            let node = spec.node(name).expect("planned node exists");
            let started = Instant::now();
            let result = self
                .execute_node(node, &session, &outputs)
                .and_then(|data| {
                    let snap = self.store().put_snapshot(&data)?;
                    let changes = BTreeMap::from([(name.clone(), TableChange::Put(snap.clone()))]);
                    let commit = self.catalog.commit_tables(
                        &temp,
                        &changes,
                        &head,
                        &opts.principal,
                        &format!("run {}: node {name}", spec.name),
                    )?;
                    Ok((data, snap, commit.id))
                });
            report
                .timings
                .insert(name.clone(), started.elapsed().as_millis() as u64);
            match result {
                Ok((data, snap, commit)) => {
                    outputs.insert(name.clone(), data);
                    head = commit.clone();
                    report.node_results.push(NodeResult {
                        node: name.clone(),
                        status: NodeStatus::Succeeded(commit.clone()),
                        snapshot: Some(snap),
                    });
                    observer.after_node_commit(&report, name, &commit);
                    if opts.fail_after.as_ref() == Some(name) {
                        injected_pending = true;
                    }
                }
                Err(e) => {
                    failed = true;
                    report.node_results.push(NodeResult {
                        node: name.clone(),
                        status: NodeStatus::Failed(e.to_string()),
                        snapshot: None,
                    });
                }
            }
        }
        if injected_pending && !failed {
            report.error = Some(format!(
                "injected fault after node {}",
                opts.fail_after.as_deref().unwrap_or_default()
            ));
            failed = true;
        }
        if failed {
            report.outcome = RunOutcome::FailedOpen(temp.clone());
            self.save_run(&report)?;
            return Ok(report);
        }

        report.verdicts = self.run_verifiers(run_id, &spec.name, head.as_str())?;
        let rejected: Vec<String> = report
            .verdicts
            .iter()
            .filter(|v| !v.verdict.is_pass())
            .map(|v| format!("{}: {}", v.verifier, v.verdict))
            .collect();
        if !rejected.is_empty() {
            report.outcome = RunOutcome::VerifierRejected(rejected);
            self.save_run(&report)?;
            return Ok(report);
        }

        if !opts.merge {
            report.outcome = RunOutcome::Held;
            self.save_run(&report)?;
            return Ok(report);
        }
        observer.before_merge(&report);
        // Merge the verified commit, not whatever the branch points to now.
        let info = self
            .catalog
            .merge_detailed(head.as_str(), target, &opts.principal)?;
        report.outcome = RunOutcome::Merged(info.result.clone());
        report.merge = Some(info);
        self.save_run(&report)?;
        Ok(report)
    }

    fn plan_against(
        &self,
        spec: &PipelineSpec,
        session: &crate::catalog::ReadSession,
    ) -> Result<Vec<PlannedOutput>, LakeError> {
        let node_names: HashSet<&str> = spec.nodes.iter().map(|n| n.name.as_str()).collect();
        let tables = self.catalog.session_tables(session)?;
        let mut sources = BTreeMap::new();
        for node in &spec.nodes {
            for input in &node.inputs {
                if node_names.contains(input.as_str()) || sources.contains_key(input) {
                    continue;
                }
                if let Some(snap) = tables.get(input) {
                    let schema = self.store().get_snapshot(snap)?.schema().clone();
                    sources.insert(input.clone(), schema);
                }
            }
        }
        let p = plan(spec, &sources)?;
        Ok(p.nodes
            .into_iter()
            .map(|PlannedNode { name, schema }| PlannedOutput { node: name, schema })
            .collect())
    }

    fn execute_node(
        &self,
        node: &crate::engine::NodeSpec,
        session: &crate::catalog::ReadSession,
        outputs: &BTreeMap<String, TableData>,
    ) -> Result<TableData, LakeError> {
        let mut bindings = BTreeMap::new();
        for input in &node.inputs {
            let data = match outputs.get(input) {
                Some(d) => d.clone(),
                None => self.catalog.read_table(session, input)?,
            };
            bindings.insert(input.clone(), data);
        }
        Ok(execute_query(&node.query, &bindings)?)
    }

    fn save_run(&self, report: &RunReport) -> Result<(), LakeError> {
        let dir = self.runs_dir();
        write_json_atomic(&dir, &dir.join(format!("{}.json", report.run_id)), report)
    }

    /// All persisted runs, oldest first.
    pub fn list_runs(&self) -> Result<Vec<RunReport>, LakeError> {
        let mut runs: Vec<RunReport> = json_files(&self.runs_dir())?
            .iter()
            .map(|p| read_json(p))
            .collect::<Result<_, _>>()?;
        runs.sort_by_key(|r| (r.started_at, r.run_id));
        Ok(runs)
    }

    pub fn get_run(&self, run_id: &str) -> Result<RunReport, LakeError> {
        let id = Uuid::parse_str(run_id).map_err(|_| LakeError::UnknownRun(run_id.to_string()))?;
        let path = self.runs_dir().join(format!("{id}.json"));
        if !path.exists() {
            return Err(LakeError::UnknownRun(run_id.to_string()));
        }
        read_json(&path)
    }

    /// Deletes a run's temp branch. Commits and snapshots stay resolvable.
    pub fn cleanup_temp(&self, principal: &str, run_id: &str) -> Result<(), LakeError> {
        let report = self.get_run(run_id)?;
        self.govern(
            principal,
            "cleanup_temp",
            vec![Permission::WriteBranch(report.temp_branch.clone())],
        )?;
        match self.catalog.delete_branch(&report.temp_branch) {
            Ok(()) | Err(CatalogError::UnknownBranch(_)) => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}
