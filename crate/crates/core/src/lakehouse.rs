//! The governed API surface. Every mutating or data-reading call is
//! authorized against the current policy and leaves exactly one audit record.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::catalog::{
    Catalog, CatalogError, Commit, CommitId, DiffEntry, MergeInfo, MergeResult, ReadSession,
    TableChange,
};
use crate::engine::{execute_query, parse_query, EngineError};
use crate::governance::{
    AuditLog, AuditRecord, Decision, GovernanceError, Permission, PolicyHandle,
};
use crate::id::{Clock, RunIdSource, SystemClock};
use crate::store::{Store, StoreError, TableData};

#[derive(Debug, Error)]
pub enum LakeError {
    #[error("denied: {0}")]
    Denied(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Governance(#[from] GovernanceError),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {run} has outcome {outcome}, expected FailedOpen")]
    NotHealable { run: String, outcome: String },
    #[error("verifier {0:?} already exists")]
    DuplicateVerifier(String),
    #[error("unknown verifier {0:?}")]
    UnknownVerifier(String),
    #[error("invalid verifier: {0}")]
    ShapeError(String),
    #[error("merge blocked by recorded verifier failures: {}", .0.join("; "))]
    VerifierRejected(Vec<String>),
    #[error("unknown proposal {0:?}")]
    UnknownProposal(String),
    #[error("stale proposal: {branch} moved from {verified} to {current}")]
    StaleProposal {
        branch: String,
        verified: CommitId,
        current: CommitId,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corrupt record {path}: {msg}")]
    CorruptRecord { path: PathBuf, msg: String },
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
}

impl LakeError {
    /// Stable kind tag for machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            LakeError::Denied(_) => "Denied",
            LakeError::Catalog(CatalogError::StaleHead { .. }) => "StaleHead",
            LakeError::Catalog(CatalogError::UnknownBranch(_)) => "UnknownBranch",
            LakeError::Catalog(CatalogError::UnknownRef(_)) => "UnknownRef",
            LakeError::Catalog(CatalogError::UnknownTable(_)) => "UnknownTable",
            LakeError::Catalog(CatalogError::BranchExists(_)) => "BranchExists",
            LakeError::Catalog(_) => "CatalogError",
            LakeError::Store(_) => "StoreError",
            LakeError::Engine(EngineError::Parse(_)) => "ParseError",
            LakeError::Engine(EngineError::Type(_)) => "TypeError",
            LakeError::Engine(EngineError::Eval(_)) => "EvalError",
            LakeError::Engine(_) => "PlanError",
            LakeError::Governance(_) => "PolicyError",
            LakeError::UnknownRun(_) => "UnknownRun",
            LakeError::NotHealable { .. } => "NotHealable",
            LakeError::DuplicateVerifier(_) => "DuplicateName",
            LakeError::UnknownVerifier(_) => "UnknownVerifier",
            LakeError::ShapeError(_) => "ShapeError",
            LakeError::VerifierRejected(_) => "VerifierRejected",
            LakeError::UnknownProposal(_) => "UnknownProposal",
            LakeError::StaleProposal { .. } => "StaleProposal",
            LakeError::InvalidArgument(_) => "InvalidArgument",
            LakeError::CorruptRecord { .. } => "CorruptRecord",
            LakeError::Io(_) => "Io",
        }
    }
}

pub struct LakeConfig {
    pub data_dir: PathBuf,
    /// Defaults to `<data_dir>/policy.toml`. A missing file means deny-all.
    pub policy: Option<PathBuf>,
    pub clock: Arc<dyn Clock>,
    pub run_ids: RunIdSource,
}

impl LakeConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        LakeConfig {
            data_dir: data_dir.into(),
            policy: None,
            clock: Arc::new(SystemClock),
            run_ids: RunIdSource::Random,
        }
    }

    /// Fixed clock and seeded run ids: identical inputs give identical ids.
    pub fn deterministic(data_dir: impl Into<PathBuf>, seed: u64, timestamp: i64) -> Self {
        LakeConfig {
            data_dir: data_dir.into(),
            policy: None,
            clock: Arc::new(crate::id::FixedClock(timestamp)),
            run_ids: RunIdSource::seeded(seed),
        }
    }

    pub fn with_policy(mut self, path: impl Into<PathBuf>) -> Self {
        self.policy = Some(path.into());
        self
    }
}

pub struct Lakehouse {
    pub(crate) root: PathBuf,
    pub(crate) catalog: Catalog,
    pub(crate) policy: PolicyHandle,
    pub(crate) audit: AuditLog,
    pub(crate) run_ids: RunIdSource,
}

impl Lakehouse {
    pub fn open(config: LakeConfig) -> Result<Self, LakeError> {
        fs::create_dir_all(&config.data_dir)?;
        let root = config.data_dir;
        let store = Arc::new(Store::open(&root)?);
        let catalog = Catalog::open(&root, store, config.clock)?;
        let policy_path = config.policy.unwrap_or_else(|| root.join("policy.toml"));
        Ok(Lakehouse {
            policy: PolicyHandle::from_path(&policy_path)?,
            audit: AuditLog::open(&root)?,
            catalog,
            root,
            run_ids: config.run_ids,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Ungoverned access to the underlying catalog, for inspection.
    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn store(&self) -> &Arc<Store> {
        self.catalog.store()
    }

    pub fn policy(&self) -> &PolicyHandle {
        &self.policy
    }

    pub fn audit_log(&self) -> Result<Vec<AuditRecord>, LakeError> {
        Ok(self.audit.read()?)
    }

    /// Authorizes all of `actions` as one call and records it.
    pub(crate) fn govern(
        &self,
        principal: &str,
        api: &str,
        actions: Vec<Permission>,
    ) -> Result<(), LakeError> {
        let decision = self.policy.current().authorize_all(principal, &actions);
        self.audit
            .append(principal, api, actions, decision.clone())?;
        match decision {
            Decision::Allow => Ok(()),
            Decision::Deny(reason) => Err(LakeError::Denied(reason)),
        }
    }

    pub(crate) fn record(
        &self,
        principal: &str,
        api: &str,
        actions: Vec<Permission>,
        decision: Decision,
    ) -> Result<(), LakeError> {
        self.audit.append(principal, api, actions, decision)?;
        Ok(())
    }

    /// Creates the root commit and `main`. Bootstrap only: needs no permission
    /// but is still audited.
    pub fn init(&self, principal: &str) -> Result<CommitId, LakeError> {
        self.record(principal, "init", vec![], Decision::Allow)?;
        Ok(self.catalog.init(principal)?)
    }

    pub fn reload_policy(&self, principal: &str) -> Result<(), LakeError> {
        self.govern(principal, "reload_policy", vec![Permission::ManagePolicy])?;
        Ok(self.policy.reload()?)
    }

    // Metadata reads. These expose names and ids, never table contents.

    pub fn branches(&self) -> Result<BTreeMap<String, CommitId>, LakeError> {
        Ok(self.catalog.branches()?)
    }

    pub fn head(&self, branch: &str) -> Result<CommitId, LakeError> {
        Ok(self.catalog.head(branch)?)
    }

    pub fn log(&self, r: &str) -> Result<Vec<Arc<Commit>>, LakeError> {
        Ok(self.catalog.log(r)?)
    }

    pub fn diff(&self, a: &str, b: &str) -> Result<Vec<DiffEntry>, LakeError> {
        Ok(self.catalog.diff(a, b)?)
    }

    pub fn open_session(&self, r: &str) -> Result<ReadSession, LakeError> {
        Ok(self.catalog.open_session(r)?)
    }

    // Governed calls.

    pub fn create_branch(
        &self,
        principal: &str,
        name: &str,
        from: &str,
    ) -> Result<CommitId, LakeError> {
        self.govern(
            principal,
            "create_branch",
            vec![Permission::CreateBranch(name.into())],
        )?;
        Ok(self.catalog.create_branch(name, from)?)
    }

    pub fn delete_branch(&self, principal: &str, name: &str) -> Result<(), LakeError> {
        self.govern(
            principal,
            "delete_branch",
            vec![Permission::WriteBranch(name.into())],
        )?;
        Ok(self.catalog.delete_branch(name)?)
    }

    /// Stores `data` and commits it as `table` on `branch` (REPLACE).
    pub fn write_table(
        &self,
        principal: &str,
        branch: &str,
        table: &str,
        data: &TableData,
        message: &str,
    ) -> Result<Commit, LakeError> {
        self.govern(
            principal,
            "write_table",
            vec![Permission::WriteBranch(branch.into())],
        )?;
        let head = self.catalog.head(branch)?;
        let snap = self.store().put_snapshot(data)?;
        let changes = BTreeMap::from([(table.to_string(), TableChange::Put(snap))]);
        Ok(self
            .catalog
            .commit_tables(branch, &changes, &head, principal, message)?)
    }

    /// Manual merge. A recorded verifier Fail or Error at the source head
    /// blocks it; a source that was never verified may be merged.
    pub fn merge(
        &self,
        principal: &str,
        source: &str,
        target: &str,
    ) -> Result<MergeResult, LakeError> {
        Ok(self.merge_with_info(principal, source, target)?.result)
    }

    /// [`Lakehouse::merge`], also reporting the base and the heads involved.
    pub fn merge_with_info(
        &self,
        principal: &str,
        source: &str,
        target: &str,
    ) -> Result<MergeInfo, LakeError> {
        self.govern(
            principal,
            "merge",
            vec![Permission::MergeInto(target.into())],
        )?;
        let head = self.catalog.resolve(source)?;
        let failures: Vec<String> = self
            .verdicts_at(&head)?
            .iter()
            .filter(|v| !v.verdict.is_pass())
            .map(|v| format!("{}: {}", v.verifier, v.verdict))
            .collect();
        if !failures.is_empty() {
            return Err(LakeError::VerifierRejected(failures));
        }
        Ok(self
            .catalog
            .merge_detailed(head.as_str(), target, principal)?)
    }

    pub fn read_table(
        &self,
        principal: &str,
        session: &ReadSession,
        table: &str,
    ) -> Result<TableData, LakeError> {
        self.govern(
            principal,
            "read_table",
            vec![Permission::ReadTable {
                branch: session.source.clone(),
                table: table.into(),
            }],
        )?;
        Ok(self.catalog.read_table(session, table)?)
    }

    /// Runs `sql` against the tables of `session`; one audit record covers
    /// every input read.
    pub fn query(
        &self,
        principal: &str,
        session: &ReadSession,
        sql: &str,
    ) -> Result<TableData, LakeError> {
        let q = parse_query(sql).map_err(EngineError::from)?;
        let inputs: Vec<String> = q.inputs().into_iter().map(String::from).collect();
        let actions = inputs
            .iter()
            .map(|t| Permission::ReadTable {
                branch: session.source.clone(),
                table: t.clone(),
            })
            .collect();
        self.govern(principal, "query", actions)?;
        let mut bindings = BTreeMap::new();
        for t in inputs {
            let data = self.catalog.read_table(session, &t)?;
            bindings.insert(t, data);
        }
        Ok(execute_query(&q, &bindings)?)
    }
}

// On-disk JSON records.

pub(crate) fn write_json_atomic<T: Serialize>(
    dir: &Path,
    path: &Path,
    value: &T,
) -> Result<(), LakeError> {
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    serde_json::to_writer_pretty(&mut tmp, value).map_err(io::Error::other)?;
    tmp.write_all(b"\n")?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Writes `value` at `path` unless it already exists. Returns false if it did.
pub(crate) fn write_json_once<T: Serialize>(
    dir: &Path,
    path: &Path,
    value: &T,
) -> Result<bool, LakeError> {
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    serde_json::to_writer_pretty(&mut tmp, value).map_err(io::Error::other)?;
    tmp.write_all(b"\n")?;
    tmp.flush()?;
    match fs::hard_link(tmp.path(), path) {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Ok(false),
        Err(e) => Err(e.into()),
    }
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, LakeError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| LakeError::CorruptRecord {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// All `*.json` files directly under `dir`, sorted by file name.
pub(crate) fn json_files(dir: &Path) -> Result<Vec<PathBuf>, LakeError> {
    let mut out = Vec::new();
    match fs::read_dir(dir) {
        Ok(entries) => {
            for e in entries {
                let p = e?.path();
                if p.extension().is_some_and(|x| x == "json") {
                    out.push(p);
                }
            }
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e.into()),
    }
    out.sort();
    Ok(out)
}
