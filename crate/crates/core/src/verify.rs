//! Verifiers: registered boolean checks that gate merges of run branches.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::catalog::{CatalogError, CommitId, ReadSession};
use crate::engine::{execute_query, parse_query, BinOp, EngineError, Expr, Query};
use crate::governance::{glob_match, Permission};
use crate::lakehouse::{json_files, read_json, write_json_once, LakeError, Lakehouse};
use crate::store::{is_identifier, ColumnType, Value};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierSpec {
    pub name: String,
    /// Glob over pipeline names this verifier applies to.
    pub pipeline: String,
    pub check: Query,
    pub registered_by: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "detail")]
pub enum Verdict {
    Pass,
    Fail(String),
    Error(String),
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Pass => f.write_str("Pass"),
            Verdict::Fail(d) => write!(f, "Fail({d})"),
            Verdict::Error(d) => write!(f, "Error({d})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub run_id: Uuid,
    pub verifier: String,
    #[serde(flatten)]
    pub verdict: Verdict,
    pub evaluated_at: CommitId,
}

/// Registration-time shape check. Schemas of post-run tables are unknown
/// here, so a bare column is accepted and its type is checked when run.
fn check_shape(q: &Query) -> Result<(), String> {
    let [item] = q.select.as_slice() else {
        return Err(format!(
            "check must select exactly one column, found {}",
            q.select.len()
        ));
    };
    let boolean = match &item.expr {
        Expr::Lit(Value::Bool(_)) | Expr::Not(_) | Expr::Column(_) => true,
        Expr::Binary { op, .. } => op.is_comparison() || matches!(op, BinOp::And | BinOp::Or),
        _ => false,
    };
    if boolean {
        Ok(())
    } else {
        Err(format!("check item `{}` is not boolean", item.expr))
    }
}

impl Lakehouse {
    fn verifier_dir(&self) -> PathBuf {
        self.root.join("verifiers")
    }

    fn verdict_dir(&self, commit: &CommitId) -> PathBuf {
        self.root.join("verdicts").join(commit.as_str())
    }

    pub fn register_verifier(
        &self,
        principal: &str,
        name: &str,
        pipeline: &str,
        check_sql: &str,
    ) -> Result<VerifierSpec, LakeError> {
        self.govern(
            principal,
            "register_verifier",
            vec![Permission::RegisterVerifier],
        )?;
        if !is_identifier(name) {
            return Err(LakeError::ShapeError(format!(
                "invalid verifier name {name:?}"
            )));
        }
        if pipeline.is_empty() || pipeline.chars().any(char::is_whitespace) {
            return Err(LakeError::ShapeError(format!(
                "invalid pipeline pattern {pipeline:?}"
            )));
        }
        let check = parse_query(check_sql).map_err(EngineError::from)?;
        check_shape(&check).map_err(LakeError::ShapeError)?;
        let spec = VerifierSpec {
            name: name.to_string(),
            pipeline: pipeline.to_string(),
            check,
            registered_by: principal.to_string(),
        };
        let dir = self.verifier_dir();
        if !write_json_once(&dir, &dir.join(format!("{name}.json")), &spec)? {
            return Err(LakeError::DuplicateVerifier(name.to_string()));
        }
        Ok(spec)
    }

    pub fn list_verifiers(&self) -> Result<Vec<VerifierSpec>, LakeError> {
        json_files(&self.verifier_dir())?
            .iter()
            .map(|p| read_json(p))
            .collect()
    }

    /// Evaluates one verifier against a pinned session.
    pub fn evaluate_verifier(&self, v: &VerifierSpec, session: &ReadSession) -> Verdict {
        let mut bindings = BTreeMap::new();
        for input in v.check.inputs() {
            match self.catalog.read_table(session, input) {
                Ok(t) => {
                    bindings.insert(input.to_string(), t);
                }
                Err(CatalogError::UnknownTable(t)) => {
                    return Verdict::Error(format!("UnknownTable({t})"));
                }
                Err(e) => return Verdict::Error(e.to_string()),
            }
        }
        let out = match execute_query(&v.check, &bindings) {
            Ok(out) => out,
            Err(e) => return Verdict::Error(e.to_string()),
        };
        let cols = out.schema().columns();
        if cols.len() != 1 || cols[0].ty != ColumnType::Bool {
            return Verdict::Error(format!(
                "check returned schema {}, expected one bool column",
                out.schema()
            ));
        }
        match out.rows() {
            [row] if row[0] == Value::Bool(true) => Verdict::Pass,
            [_] => Verdict::Fail("check returned false".into()),
            rows => Verdict::Fail(format!("check returned {} rows, expected 1", rows.len())),
        }
    }

    /// Runs every verifier matching `pipeline` against `at` (a branch or commit)
    /// and records the verdicts, bound to the resolved commit.
    pub(crate) fn run_verifiers(
        &self,
        run_id: Uuid,
        pipeline: &str,
        at: &str,
    ) -> Result<Vec<VerdictRecord>, LakeError> {
        let session = self.catalog.open_session(at)?;
        let mut out = Vec::new();
        for v in self.list_verifiers()? {
            if !glob_match(&v.pipeline, pipeline) {
                continue;
            }
            let record = VerdictRecord {
                run_id,
                verifier: v.name.clone(),
                verdict: self.evaluate_verifier(&v, &session),
                evaluated_at: session.pinned.clone(),
            };
            let dir = self.verdict_dir(&session.pinned).join(&v.name);
            let path = dir.join(format!("{run_id}.json"));
            if !write_json_once(&dir, &path, &record)? {
                // Already evaluated at this commit for this run; keep the
                // first record.
                out.push(read_json(&path)?);
                continue;
            }
            out.push(record);
        }
        Ok(out)
    }

    /// Re-evaluates the verifiers of a run against its temp branch.
    pub fn verify_run(
        &self,
        principal: &str,
        run_id: &str,
    ) -> Result<Vec<VerdictRecord>, LakeError> {
        let report = self.get_run(run_id)?;
        let mut actions = vec![];
        for v in self.list_verifiers()? {
            if glob_match(&v.pipeline, &report.pipeline) {
                for input in v.check.inputs() {
                    let a = Permission::ReadTable {
                        branch: report.temp_branch.clone(),
                        table: input.to_string(),
                    };
                    if !actions.contains(&a) {
                        actions.push(a);
                    }
                }
            }
        }
        self.govern(principal, "verify_run", actions)?;
        self.run_verifiers(report.run_id, &report.pipeline, &report.temp_branch)
    }

    /// Every verdict recorded against `commit`.
    pub fn verdicts_at(&self, commit: &CommitId) -> Result<Vec<VerdictRecord>, LakeError> {
        let dir = self.verdict_dir(commit);
        let mut names = Vec::new();
        match std::fs::read_dir(&dir) {
            Ok(entries) => {
                for e in entries {
                    names.push(e?.path());
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
            Err(e) => return Err(e.into()),
        }
        names.sort();
        let mut out = Vec::new();
        for d in names {
            for f in json_files(&d)? {
                out.push(read_json(&f)?);
            }
        }
        Ok(out)
    }
}
