//! Git-like versioned catalog over tables.
//!
//! Commits are immutable, content-addressed JSON objects under `commits/`
//! mapping table names to snapshot ids. Branches live in a single
//! `refs.json`; every ref mutation happens under an advisory lock on
//! `refs.lock` and is published by write-temp-then-rename, which makes the
//! compare-and-swap a real linearization point across threads and processes.
//! Each successful ref change is appended to `reflog.jsonl`.
//!
//! Branching and merging only move references: they never read or write
//! snapshot content.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::Clock;
use crate::store::{is_identifier, SnapshotId, Store, StoreError, TableData};

crate::id::hex_id!(
    /// SHA-256 of a commit's canonical JSON body.
    CommitId
);

pub const MAIN: &str = "main";

/// Retries after the first attempt when a merge loses the ref race.
pub const MERGE_RETRIES: usize = 5;

pub type TableMap = BTreeMap<String, SnapshotId>;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog not initialized at {0}")]
    NotInitialized(PathBuf),
    #[error("branch {0:?} already exists")]
    BranchExists(String),
    #[error("invalid branch name {0:?}")]
    InvalidBranchName(String),
    #[error("unknown ref {0:?}")]
    UnknownRef(String),
    #[error("unknown branch {0:?}")]
    UnknownBranch(String),
    #[error("branch {0:?} cannot be deleted")]
    ProtectedBranch(String),
    #[error("stale head on {branch}: expected {expected}, found {actual}")]
    StaleHead {
        branch: String,
        expected: CommitId,
        actual: CommitId,
    },
    #[error("unknown snapshot {0}")]
    UnknownSnapshot(SnapshotId),
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error("invalid table name {0:?}")]
    InvalidTableName(String),
    #[error("commits {0} and {1} have no common ancestor")]
    NoCommonAncestor(CommitId, CommitId),
    #[error("unknown commit {0}")]
    UnknownCommit(CommitId),
    #[error("commit {0} is corrupt")]
    CorruptCommit(CommitId),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("catalog I/O: {0}")]
    Io(#[from] io::Error),
}

/// Immutable node of the history DAG.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commit {
    pub id: CommitId,
    pub parents: Vec<CommitId>,
    pub tables: TableMap,
    pub author: String,
    pub message: String,
    pub timestamp: i64,
}

impl Commit {
    pub fn new(
        parents: Vec<CommitId>,
        tables: TableMap,
        author: &str,
        message: &str,
        timestamp: i64,
    ) -> Commit {
        let mut commit = Commit {
            id: CommitId::of_bytes(b""),
            parents,
            tables,
            author: author.to_string(),
            message: message.to_string(),
            timestamp,
        };
        commit.id = commit.compute_id();
        commit
    }

    /// Canonical JSON of everything but the id: sorted keys, no whitespace.
    pub fn canonical_body(&self) -> String {
        let mut body = serde_json::Map::new();
        body.insert("author".into(), self.author.clone().into());
        body.insert("message".into(), self.message.clone().into());
        body.insert(
            "parents".into(),
            serde_json::to_value(&self.parents).expect("ids serialize"),
        );
        body.insert(
            "tables".into(),
            serde_json::to_value(&self.tables).expect("ids serialize"),
        );
        body.insert("timestamp".into(), self.timestamp.into());
        serde_json::Value::Object(body).to_string()
    }

    pub fn compute_id(&self) -> CommitId {
        CommitId::of_bytes(self.canonical_body().as_bytes())
    }

    fn to_stored_json(&self) -> String {
        let mut value: serde_json::Value =
            serde_json::from_str(&self.canonical_body()).expect("canonical body is JSON");
        value
            .as_object_mut()
            .expect("object")
            .insert("id".into(), self.id.to_string().into());
        // Keys re-sorted so the stored form is canonical as well.
        let sorted: BTreeMap<String, serde_json::Value> =
            value.as_object().unwrap().clone().into_iter().collect();
        serde_json::to_string(&sorted).expect("serializable")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableChange {
    Put(SnapshotId),
    Delete,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum MergeResult {
    /// The target ref moved to the source head, or already contained it.
    FastForward,
    MergeCommit(CommitId),
    Conflict(Vec<String>),
    RefRaced,
}

impl MergeResult {
    pub fn is_success(&self) -> bool {
        matches!(self, MergeResult::FastForward | MergeResult::MergeCommit(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DiffStatus {
    Added,
    Removed,
    Changed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub table: String,
    pub status: DiffStatus,
}

/// Outcome of a merge plus the commits it was computed from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeInfo {
    pub result: MergeResult,
    /// Merge base used; `None` when the attempt lost every ref race.
    pub base: Option<CommitId>,
    pub source_head: CommitId,
    pub target_before: CommitId,
    /// Target head once the merge returned (unchanged unless it succeeded).
    pub target_after: CommitId,
}

/// A read view frozen at one commit. Every read resolves against `pinned`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadSession {
    pub pinned: CommitId,
    /// The ref the session was opened from, as given by the caller.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefUpdate {
    pub branch: String,
    pub old: Option<CommitId>,
    pub new: Option<CommitId>,
}

pub fn is_branch_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b"_/.-".contains(&b))
}

pub struct Catalog {
    root: PathBuf,
    store: Arc<Store>,
    clock: Arc<dyn Clock>,
    cache: RwLock<HashMap<CommitId, Arc<Commit>>>,
}

impl std::fmt::Debug for Catalog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Catalog").field("root", &self.root).finish()
    }
}

type Refs = BTreeMap<String, CommitId>;

impl Catalog {
    pub fn open(
        data_dir: &Path,
        store: Arc<Store>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, CatalogError> {
        fs::create_dir_all(data_dir.join("commits"))?;
        Ok(Catalog {
            root: data_dir.to_path_buf(),
            store,
            clock,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn now(&self) -> i64 {
        self.clock.now()
    }

    fn refs_path(&self) -> PathBuf {
        self.root.join("refs.json")
    }

    pub fn is_initialized(&self) -> bool {
        self.refs_path().is_file()
    }

    /// Creates the root commit and `main` unless they already exist.
    pub fn init(&self, author: &str) -> Result<CommitId, CatalogError> {
        let root = Commit::new(vec![], TableMap::new(), author, "init", self.clock.now());
        self.write_commit(&root)?;
        self.with_refs(|refs| {
            Ok(refs
                .entry(MAIN.to_string())
                .or_insert_with(|| root.id.clone())
                .clone())
        })
    }

    // ---- refs ----

    fn read_refs(&self) -> Result<Refs, CatalogError> {
        match fs::read(self.refs_path()) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| CatalogError::Io(io::Error::new(io::ErrorKind::InvalidData, e))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(CatalogError::NotInitialized(self.root.clone()))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Runs `f` on the refs under the exclusive lock and publishes any change.
    fn with_refs<T>(
        &self,
        f: impl FnOnce(&mut Refs) -> Result<T, CatalogError>,
    ) -> Result<T, CatalogError> {
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.root.join("refs.lock"))?;
        lock.lock()?;
        let before = match self.read_refs() {
            Ok(refs) => refs,
            Err(CatalogError::NotInitialized(_)) => Refs::new(),
            Err(e) => return Err(e),
        };
        let mut refs = before.clone();
        let out = f(&mut refs)?;
        if refs != before {
            let mut tmp = tempfile::NamedTempFile::new_in(&self.root)?;
            serde_json::to_writer_pretty(&mut tmp, &refs).map_err(io::Error::other)?;
            tmp.flush()?;
            tmp.persist(self.refs_path()).map_err(|e| e.error)?;
            self.append_reflog(&before, &refs)?;
        }
        drop(lock);
        Ok(out)
    }

    fn append_reflog(&self, before: &Refs, after: &Refs) -> io::Result<()> {
        let names: BTreeSet<&String> = before.keys().chain(after.keys()).collect();
        let mut lines = String::new();
        for name in names {
            let (old, new) = (before.get(name), after.get(name));
            if old != new {
                let entry = RefUpdate {
                    branch: name.clone(),
                    old: old.cloned(),
                    new: new.cloned(),
                };
                lines.push_str(&serde_json::to_string(&entry).expect("serializable"));
                lines.push('\n');
            }
        }
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("reflog.jsonl"))?;
        log.write_all(lines.as_bytes())
    }

    pub fn reflog(&self) -> Result<Vec<RefUpdate>, CatalogError> {
        let text = match fs::read_to_string(self.root.join("reflog.jsonl")) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(vec![]),
            Err(e) => return Err(e.into()),
        };
        text.lines()
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| CatalogError::Io(io::Error::new(io::ErrorKind::InvalidData, e)))
            })
            .collect()
    }

    pub fn branches(&self) -> Result<BTreeMap<String, CommitId>, CatalogError> {
        self.read_refs()
    }

    pub fn head(&self, branch: &str) -> Result<CommitId, CatalogError> {
        self.read_refs()?
            .remove(branch)
            .ok_or_else(|| CatalogError::UnknownBranch(branch.to_string()))
    }

    /// Resolves a branch name, or failing that a full commit id.
    pub fn resolve(&self, r: &str) -> Result<CommitId, CatalogError> {
        if let Some(id) = self.read_refs()?.remove(r) {
            return Ok(id);
        }
        match CommitId::parse(r) {
            Some(id) if self.contains_commit(&id) => Ok(id),
            _ => Err(CatalogError::UnknownRef(r.to_string())),
        }
    }

    pub fn create_branch(&self, name: &str, from: &str) -> Result<CommitId, CatalogError> {
        if !is_branch_name(name) {
            return Err(CatalogError::InvalidBranchName(name.to_string()));
        }
        let start = self.resolve(from)?;
        self.with_refs(|refs| {
            if refs.contains_key(name) {
                return Err(CatalogError::BranchExists(name.to_string()));
            }
            refs.insert(name.to_string(), start.clone());
            Ok(start)
        })
    }

    /// Deletes a branch ref. Commits stay resolvable by id.
    pub fn delete_branch(&self, name: &str) -> Result<(), CatalogError> {
        if name == MAIN {
            return Err(CatalogError::ProtectedBranch(name.to_string()));
        }
        self.with_refs(|refs| {
            refs.remove(name)
                .map(|_| ())
                .ok_or_else(|| CatalogError::UnknownBranch(name.to_string()))
        })
    }

    /// Moves `branch` from `expected` to `new` iff it still points at `expected`.
    pub fn compare_and_swap(
        &self,
        branch: &str,
        expected: &CommitId,
        new: &CommitId,
    ) -> Result<(), CatalogError> {
        self.with_refs(|refs| {
            let current = refs
                .get_mut(branch)
                .ok_or_else(|| CatalogError::UnknownBranch(branch.to_string()))?;
            if current != expected {
                return Err(CatalogError::StaleHead {
                    branch: branch.to_string(),
                    expected: expected.clone(),
                    actual: current.clone(),
                });
            }
            *current = new.clone();
            Ok(())
        })
    }

    // ---- commits ----

    fn commit_path(&self, id: &CommitId) -> PathBuf {
        self.root.join("commits").join(id.as_str())
    }

    pub fn contains_commit(&self, id: &CommitId) -> bool {
        self.cache.read().unwrap().contains_key(id) || self.commit_path(id).is_file()
    }

    fn write_commit(&self, commit: &Commit) -> Result<(), CatalogError> {
        let path = self.commit_path(&commit.id);
        if !path.exists() {
            let mut tmp = tempfile::NamedTempFile::new_in(self.root.join("commits"))?;
            tmp.write_all(commit.to_stored_json().as_bytes())?;
            tmp.flush()?;
            tmp.persist(&path).map_err(|e| e.error)?;
        }
        self.cache
            .write()
            .unwrap()
            .insert(commit.id.clone(), Arc::new(commit.clone()));
        Ok(())
    }

    pub fn get_commit(&self, id: &CommitId) -> Result<Arc<Commit>, CatalogError> {
        if let Some(c) = self.cache.read().unwrap().get(id) {
            return Ok(c.clone());
        }
        let bytes = match fs::read(self.commit_path(id)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(CatalogError::UnknownCommit(id.clone()))
            }
            Err(e) => return Err(e.into()),
        };
        let commit: Commit =
            serde_json::from_slice(&bytes).map_err(|_| CatalogError::CorruptCommit(id.clone()))?;
        if commit.id != *id || commit.compute_id() != *id {
            return Err(CatalogError::CorruptCommit(id.clone()));
        }
        let commit = Arc::new(commit);
        self.cache
            .write()
            .unwrap()
            .insert(id.clone(), commit.clone());
        Ok(commit)
    }

    /// Applies `changes` on top of `expected_head` and advances `branch` by CAS.
    pub fn commit_tables(
        &self,
        branch: &str,
        changes: &BTreeMap<String, TableChange>,
        expected_head: &CommitId,
        author: &str,
        message: &str,
    ) -> Result<Commit, CatalogError> {
        let current = self.head(branch)?;
        if current != *expected_head {
            return Err(CatalogError::StaleHead {
                branch: branch.to_string(),
                expected: expected_head.clone(),
                actual: current,
            });
        }
        let parent = self.get_commit(expected_head)?;
        let mut tables = parent.tables.clone();
        for (name, change) in changes {
            match change {
                TableChange::Put(snap) => {
                    if !is_identifier(name) {
                        return Err(CatalogError::InvalidTableName(name.clone()));
                    }
                    if !self.store.contains(snap) {
                        return Err(CatalogError::UnknownSnapshot(snap.clone()));
                    }
                    tables.insert(name.clone(), snap.clone());
                }
                TableChange::Delete => {
                    if tables.remove(name).is_none() {
                        return Err(CatalogError::UnknownTable(name.clone()));
                    }
                }
            }
        }
        let commit = Commit::new(
            vec![expected_head.clone()],
            tables,
            author,
            message,
            self.clock.now(),
        );
        self.write_commit(&commit)?;
        self.compare_and_swap(branch, expected_head, &commit.id)?;
        Ok(commit)
    }

    /// All commits reachable from `id`, including `id`.
    pub fn ancestors(&self, id: &CommitId) -> Result<HashSet<CommitId>, CatalogError> {
        let mut seen = HashSet::from([id.clone()]);
        let mut queue = VecDeque::from([id.clone()]);
        while let Some(c) = queue.pop_front() {
            for p in &self.get_commit(&c)?.parents {
                if seen.insert(p.clone()) {
                    queue.push_back(p.clone());
                }
            }
        }
        Ok(seen)
    }

    pub fn is_ancestor(&self, ancestor: &CommitId, of: &CommitId) -> Result<bool, CatalogError> {
        Ok(self.ancestors(of)?.contains(ancestor))
    }

    /// Lowest common ancestor of `a` and `b`. When several exist, the one with
    /// the greatest timestamp wins, ties broken by the smallest id.
    pub fn merge_base(&self, a: &CommitId, b: &CommitId) -> Result<CommitId, CatalogError> {
        if a == b {
            self.get_commit(a)?;
            return Ok(a.clone());
        }
        let left = self.ancestors(a)?;
        let right = self.ancestors(b)?;
        let common: HashSet<&CommitId> = left.intersection(&right).collect();
        if common.is_empty() {
            return Err(CatalogError::NoCommonAncestor(a.clone(), b.clone()));
        }
        // Everything reachable by at least one edge from a common ancestor is
        // not a *lowest* common ancestor.
        let mut dominated: HashSet<CommitId> = HashSet::new();
        let mut queue: VecDeque<CommitId> = VecDeque::new();
        for c in &common {
            for p in &self.get_commit(c)?.parents {
                if dominated.insert(p.clone()) {
                    queue.push_back(p.clone());
                }
            }
        }
        while let Some(c) = queue.pop_front() {
            for p in &self.get_commit(&c)?.parents {
                if dominated.insert(p.clone()) {
                    queue.push_back(p.clone());
                }
            }
        }
        let mut best: Option<(i64, &CommitId)> = None;
        for c in common.into_iter().filter(|c| !dominated.contains(*c)) {
            let ts = self.get_commit(c)?.timestamp;
            best = match best {
                Some((bts, bid)) if bts > ts || (bts == ts && bid < c) => Some((bts, bid)),
                _ => Some((ts, c)),
            };
        }
        Ok(best
            .expect("a finite DAG has a minimal common ancestor")
            .1
            .clone())
    }

    /// Table-level three-way merge of `source` into branch `target`.
    pub fn merge(
        &self,
        source: &str,
        target: &str,
        author: &str,
    ) -> Result<MergeResult, CatalogError> {
        Ok(self.merge_detailed(source, target, author)?.result)
    }

    /// Like [`Catalog::merge`], also reporting the commits involved in the
    /// final attempt.
    pub fn merge_detailed(
        &self,
        source: &str,
        target: &str,
        author: &str,
    ) -> Result<MergeInfo, CatalogError> {
        let mut last = None;
        for _ in 0..=MERGE_RETRIES {
            let src = self.resolve(source)?;
            let dst = self.head(target)?;
            let info = |result, base: Option<CommitId>, after: &CommitId| MergeInfo {
                result,
                base,
                source_head: src.clone(),
                target_before: dst.clone(),
                target_after: after.clone(),
            };
            if src == dst {
                return Ok(info(MergeResult::FastForward, Some(src.clone()), &dst));
            }
            let base = self.merge_base(&src, &dst)?;
            if base == src {
                return Ok(info(MergeResult::FastForward, Some(base), &dst));
            }
            let merged = match three_way(
                &self.get_commit(&base)?.tables,
                &self.get_commit(&src)?.tables,
                &self.get_commit(&dst)?.tables,
            ) {
                Ok(m) => m,
                Err(conflicts) => {
                    return Ok(info(MergeResult::Conflict(conflicts), Some(base), &dst))
                }
            };
            if base == dst {
                match self.compare_and_swap(target, &dst, &src) {
                    Ok(()) => return Ok(info(MergeResult::FastForward, Some(base), &src)),
                    Err(CatalogError::StaleHead { .. }) => {
                        last = Some(info(MergeResult::RefRaced, None, &dst));
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
            let commit = Commit::new(
                vec![dst.clone(), src.clone()],
                merged,
                author,
                &format!("merge {source} into {target}"),
                self.clock.now(),
            );
            self.write_commit(&commit)?;
            match self.compare_and_swap(target, &dst, &commit.id) {
                Ok(()) => {
                    return Ok(info(
                        MergeResult::MergeCommit(commit.id.clone()),
                        Some(base),
                        &commit.id,
                    ))
                }
                Err(CatalogError::StaleHead { .. }) => {
                    last = Some(info(MergeResult::RefRaced, None, &dst));
                    continue;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(last.expect("at least one attempt"))
    }

    pub fn diff(&self, a: &str, b: &str) -> Result<Vec<DiffEntry>, CatalogError> {
        let left = self.get_commit(&self.resolve(a)?)?;
        let right = self.get_commit(&self.resolve(b)?)?;
        Ok(diff_maps(&left.tables, &right.tables))
    }

    /// First-parent history, newest first, ending at a root commit.
    pub fn log(&self, r: &str) -> Result<Vec<Arc<Commit>>, CatalogError> {
        let mut out = Vec::new();
        let mut next = Some(self.resolve(r)?);
        while let Some(id) = next {
            let commit = self.get_commit(&id)?;
            next = commit.parents.first().cloned();
            out.push(commit);
        }
        Ok(out)
    }

    // ---- reads ----

    pub fn open_session(&self, r: &str) -> Result<ReadSession, CatalogError> {
        Ok(ReadSession {
            pinned: self.resolve(r)?,
            source: r.to_string(),
        })
    }

    pub fn session_tables(&self, session: &ReadSession) -> Result<TableMap, CatalogError> {
        Ok(self.get_commit(&session.pinned)?.tables.clone())
    }

    pub fn snapshot_of(
        &self,
        session: &ReadSession,
        table: &str,
    ) -> Result<SnapshotId, CatalogError> {
        self.get_commit(&session.pinned)?
            .tables
            .get(table)
            .cloned()
            .ok_or_else(|| CatalogError::UnknownTable(table.to_string()))
    }

    pub fn read_table(
        &self,
        session: &ReadSession,
        table: &str,
    ) -> Result<TableData, CatalogError> {
        let snap = self.snapshot_of(session, table)?;
        Ok(self.store.get_snapshot(&snap)?)
    }
}

/// Per-table three-way merge over snapshot ids. Returns the merged map or
/// the sorted list of conflicting tables.
pub fn three_way(
    base: &TableMap,
    source: &TableMap,
    target: &TableMap,
) -> Result<TableMap, Vec<String>> {
    let names: BTreeSet<&String> = base
        .keys()
        .chain(source.keys())
        .chain(target.keys())
        .collect();
    let mut merged = TableMap::new();
    let mut conflicts = Vec::new();
    for name in names {
        let (b, s, t) = (base.get(name), source.get(name), target.get(name));
        let pick = if s == b || s == t {
            t
        } else if t == b {
            s
        } else {
            conflicts.push(name.clone());
            continue;
        };
        if let Some(snap) = pick {
            merged.insert(name.clone(), snap.clone());
        }
    }
    if conflicts.is_empty() {
        Ok(merged)
    } else {
        Err(conflicts)
    }
}

pub fn diff_maps(a: &TableMap, b: &TableMap) -> Vec<DiffEntry> {
    let names: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    names
        .into_iter()
        .filter_map(|name| {
            let status = match (a.get(name), b.get(name)) {
                (None, Some(_)) => DiffStatus::Added,
                (Some(_), None) => DiffStatus::Removed,
                (Some(x), Some(y)) if x != y => DiffStatus::Changed,
                _ => return None,
            };
            Some(DiffEntry {
                table: name.clone(),
                status,
            })
        })
        .collect()
}

/// Lock file helper shared with other on-disk registries.
pub(crate) fn locked<T>(path: &Path, f: impl FnOnce() -> io::Result<T>) -> io::Result<T> {
    let lock = File::options()
        .create(true)
        .truncate(false)
        .write(true)
        .open(path)?;
    lock.lock()?;
    let out = f();
    drop(lock);
    out
}
