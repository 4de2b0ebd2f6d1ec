//! Repair loop for failed runs: an agent proposes patched pipelines, each is
//! run on its own temp branch without merging, and the first attempt that
//! passes every verifier becomes a proposal awaiting human approval.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::catalog::{Commit, CommitId, DiffEntry, MergeResult, ReadSession};
use crate::engine::{parse_pipeline, PipelineSpec};
use crate::governance::Permission;
use crate::lakehouse::{read_json, write_json_atomic, LakeError, Lakehouse};
use crate::runner::{RunOptions, RunOutcome, RunReport};
use crate::store::TableData;
use crate::verify::VerdictRecord;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureContext {
    pub report: RunReport,
    /// None when the failure was not attributable to one node.
    pub failed_node: Option<String>,
    pub error: String,
    pub temp_branch: String,
    pub source_commit: Option<CommitId>,
}

impl FailureContext {
    pub fn from_report(report: &RunReport) -> Result<Self, LakeError> {
        if !matches!(report.outcome, RunOutcome::FailedOpen(_)) {
            return Err(LakeError::NotHealable {
                run: report.run_id.to_string(),
                outcome: report.outcome.name().to_string(),
            });
        }
        let (failed_node, error) = match report.failed_node() {
            Some((n, e)) => (Some(n.to_string()), e.to_string()),
            None => (None, report.error.clone().unwrap_or_default()),
        };
        Ok(FailureContext {
            report: report.clone(),
            failed_node,
            error,
            temp_branch: report.temp_branch.clone(),
            source_commit: report.source_commit.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AgentAction {
    Patch(PipelineSpec),
    GiveUp(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    /// 1-based.
    pub attempt: u32,
    pub run_id: Option<Uuid>,
    pub spec: String,
    pub outcome: RunOutcome,
    pub failed_node: Option<String>,
    pub error: Option<String>,
}

/// The only handle a repair agent gets: the governed API under the agent's
/// own principal. Raw catalog access is not reachable from here.
pub struct AgentApi<'a> {
    lake: &'a Lakehouse,
    principal: String,
}

impl<'a> AgentApi<'a> {
    pub fn principal(&self) -> &str {
        &self.principal
    }

    pub fn open_session(&self, r: &str) -> Result<ReadSession, LakeError> {
        self.lake.open_session(r)
    }

    pub fn read_table(&self, session: &ReadSession, table: &str) -> Result<TableData, LakeError> {
        self.lake.read_table(&self.principal, session, table)
    }

    pub fn query(&self, session: &ReadSession, sql: &str) -> Result<TableData, LakeError> {
        self.lake.query(&self.principal, session, sql)
    }

    pub fn diff(&self, a: &str, b: &str) -> Result<Vec<DiffEntry>, LakeError> {
        self.lake.diff(a, b)
    }

    pub fn log(&self, r: &str) -> Result<Vec<Arc<Commit>>, LakeError> {
        self.lake.log(r)
    }

    pub fn create_branch(&self, name: &str, from: &str) -> Result<CommitId, LakeError> {
        self.lake.create_branch(&self.principal, name, from)
    }

    pub fn write_table(
        &self,
        branch: &str,
        table: &str,
        data: &TableData,
        message: &str,
    ) -> Result<Commit, LakeError> {
        self.lake
            .write_table(&self.principal, branch, table, data, message)
    }

    pub fn merge(&self, source: &str, target: &str) -> Result<MergeResult, LakeError> {
        self.lake.merge(&self.principal, source, target)
    }
}

pub trait RepairAgent {
    /// `spec` is the pipeline of the failed run; `history` holds every
    /// earlier attempt of this heal loop.
    fn propose(
        &mut self,
        api: &AgentApi<'_>,
        ctx: &FailureContext,
        spec: &PipelineSpec,
        history: &[Attempt],
    ) -> AgentAction;
}

/// Tries a fixed list of whole-pipeline rewrites in order.
#[derive(Clone, Debug)]
pub struct BaselineAgent {
    patches: Vec<PipelineSpec>,
}

pub fn baseline_agent(patches: Vec<PipelineSpec>) -> BaselineAgent {
    BaselineAgent { patches }
}

impl RepairAgent for BaselineAgent {
    fn propose(
        &mut self,
        _: &AgentApi<'_>,
        _: &FailureContext,
        _: &PipelineSpec,
        history: &[Attempt],
    ) -> AgentAction {
        match self.patches.get(history.len()) {
            Some(p) => AgentAction::Patch(p.clone()),
            None => AgentAction::GiveUp(format!(
                "patch list exhausted after {} attempts",
                history.len()
            )),
        }
    }
}

/// Reads every `*.pipe` file in `dir`, in file-name order.
pub fn load_patches(dir: &Path) -> Result<Vec<PipelineSpec>, LakeError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "pipe"));
    files.sort();
    files
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            parse_pipeline(&text)
                .map_err(|e| LakeError::InvalidArgument(format!("{}: {e}", p.display())))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    /// Run id of the successful attempt.
    pub id: Uuid,
    pub branch: String,
    pub target: String,
    /// Commit the verdicts are bound to; approval merges exactly this.
    pub head: CommitId,
    pub report: RunReport,
    pub verdicts: Vec<VerdictRecord>,
    pub attempts: u32,
    pub diff: Vec<DiffEntry>,
    pub source_run: Uuid,
    pub proposed_by: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result")]
pub enum HealOutcome {
    Proposal(Box<Proposal>),
    GaveUp {
        reason: String,
        history: Vec<Attempt>,
    },
}

impl Lakehouse {
    fn proposals_dir(&self) -> PathBuf {
        self.root.join("proposals")
    }

    pub fn heal(
        &self,
        principal: &str,
        run_id: &str,
        agent: &mut dyn RepairAgent,
        budget: u32,
    ) -> Result<HealOutcome, LakeError> {
        let failed = self.get_run(run_id)?;
        let ctx = FailureContext::from_report(&failed)?;
        self.govern(
            principal,
            "heal",
            vec![Permission::RunPipeline(failed.pipeline.clone())],
        )?;
        let spec = failed.spec()?;
        let api = AgentApi {
            lake: self,
            principal: principal.to_string(),
        };
        let mut history: Vec<Attempt> = Vec::new();
        for n in 1..=budget {
            let patched = match agent.propose(&api, &ctx, &spec, &history) {
                AgentAction::GiveUp(reason) => return Ok(HealOutcome::GaveUp { reason, history }),
                AgentAction::Patch(p) => p,
            };
            let mut attempt = Attempt {
                attempt: n,
                run_id: None,
                spec: patched.to_string(),
                outcome: RunOutcome::Planned,
                failed_node: None,
                error: None,
            };
            // A renamed pipeline would escape the verifiers bound to it.
            if patched.name != spec.name {
                attempt.outcome = RunOutcome::Denied(format!(
                    "patch renames pipeline {} to {}",
                    spec.name, patched.name
                ));
                history.push(attempt);
                continue;
            }
            let opts = RunOptions::new(principal).without_merge();
            let report = match self.run(&patched, &failed.target_branch, &opts) {
                Ok(r) => r,
                Err(LakeError::Denied(reason)) => {
                    attempt.outcome = RunOutcome::Denied(reason);
                    history.push(attempt);
                    continue;
                }
                Err(e) => return Err(e),
            };
            attempt.run_id = Some(report.run_id);
            attempt.outcome = report.outcome.clone();
            attempt.error = report.error.clone();
            if let Some((node, err)) = report.failed_node() {
                attempt.failed_node = Some(node.to_string());
                attempt.error = Some(err.to_string());
            }
            history.push(attempt);
            if report.outcome != RunOutcome::Held {
                continue;
            }
            let head = report.head().cloned().expect("held run has node commits");
            let proposal = Proposal {
                id: report.run_id,
                branch: report.temp_branch.clone(),
                target: report.target_branch.clone(),
                diff: self.diff(&report.target_branch, head.as_str())?,
                head,
                verdicts: report.verdicts.clone(),
                report,
                attempts: n,
                source_run: failed.run_id,
                proposed_by: principal.to_string(),
            };
            let dir = self.proposals_dir();
            write_json_atomic(&dir, &dir.join(format!("{}.json", proposal.id)), &proposal)?;
            return Ok(HealOutcome::Proposal(Box::new(proposal)));
        }
        Ok(HealOutcome::GaveUp {
            reason: format!("budget of {budget} attempts exhausted"),
            history,
        })
    }

    /// Looks a proposal up by its branch name or run id.
    pub fn get_proposal(&self, key: &str) -> Result<Proposal, LakeError> {
        let id = key.rsplit('/').next().unwrap_or(key);
        let id = Uuid::parse_str(id).map_err(|_| LakeError::UnknownProposal(key.to_string()))?;
        let path = self.proposals_dir().join(format!("{id}.json"));
        if !path.exists() {
            return Err(LakeError::UnknownProposal(key.to_string()));
        }
        let p: Proposal = read_json(&path)?;
        if key.contains('/') && p.branch != key {
            return Err(LakeError::UnknownProposal(key.to_string()));
        }
        Ok(p)
    }

    pub fn list_proposals(&self) -> Result<Vec<Proposal>, LakeError> {
        let mut out: Vec<Proposal> = crate::lakehouse::json_files(&self.proposals_dir())?
            .iter()
            .map(|p| read_json(p))
            .collect::<Result<_, _>>()?;
        out.sort_by_key(|p| (p.report.started_at, p.id));
        Ok(out)
    }

    /// Publishes a proposal into its target. The proposal branch must still
    /// point at the verified commit.
    pub fn approve(&self, principal: &str, proposal: &str) -> Result<MergeResult, LakeError> {
        let p = self.get_proposal(proposal)?;
        self.govern(
            principal,
            "approve",
            vec![Permission::MergeInto(p.target.clone())],
        )?;
        let current = self.catalog.head(&p.branch)?;
        if current != p.head {
            return Err(LakeError::StaleProposal {
                branch: p.branch,
                verified: p.head,
                current,
            });
        }
        let recorded = self.verdicts_at(&p.head)?;
        let mut bad: Vec<String> = p
            .verdicts
            .iter()
            .chain(&recorded)
            .filter(|v| !v.verdict.is_pass() || v.evaluated_at != p.head)
            .map(|v| format!("{}: {}", v.verifier, v.verdict))
            .collect();
        bad.dedup();
        if !bad.is_empty() {
            return Err(LakeError::VerifierRejected(bad));
        }
        Ok(self.catalog.merge(p.head.as_str(), &p.target, principal)?)
    }
}
