//! Role-based access control, package whitelisting and the audit log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::catalog::locked;
use crate::engine::{EnvSpec, Package, PipelineSpec};

#[derive(Debug, Error)]
pub enum GovernanceError {
    #[error("policy parse error: {0}")]
    Parse(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("policy I/O: {0}")]
    Io(#[from] io::Error),
}

/// A permission kind with its arguments. Inside a role the arguments are
/// glob patterns; as an action to authorize they are concrete names.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Permission {
    ReadTable { branch: String, table: String },
    WriteBranch(String),
    CreateBranch(String),
    MergeInto(String),
    RunPipeline(String),
    RegisterVerifier,
    ManagePolicy,
}

impl Permission {
    pub fn kind(&self) -> &'static str {
        match self {
            Permission::ReadTable { .. } => "ReadTable",
            Permission::WriteBranch(_) => "WriteBranch",
            Permission::CreateBranch(_) => "CreateBranch",
            Permission::MergeInto(_) => "MergeInto",
            Permission::RunPipeline(_) => "RunPipeline",
            Permission::RegisterVerifier => "RegisterVerifier",
            Permission::ManagePolicy => "ManagePolicy",
        }
    }

    fn args(&self) -> Vec<&str> {
        match self {
            Permission::ReadTable { branch, table } => vec![branch, table],
            Permission::WriteBranch(a)
            | Permission::CreateBranch(a)
            | Permission::MergeInto(a)
            | Permission::RunPipeline(a) => vec![a],
            Permission::RegisterVerifier | Permission::ManagePolicy => vec![],
        }
    }

    /// Does this (pattern) permission cover the concrete `action`?
    pub fn grants(&self, action: &Permission) -> bool {
        self.kind() == action.kind()
            && self
                .args()
                .iter()
                .zip(action.args())
                .all(|(pattern, arg)| glob_match(pattern, arg))
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind())?;
        for a in self.args() {
            write!(f, ":{a}")?;
        }
        Ok(())
    }
}

impl FromStr for Permission {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        for a in &args {
            if a.is_empty() || a.chars().any(char::is_whitespace) {
                return Err(format!("invalid pattern {a:?} in {s:?}"));
            }
        }
        let one = |args: &[&str]| match args {
            [a] => Ok(a.to_string()),
            _ => Err(format!("{kind} takes exactly one argument: {s:?}")),
        };
        Ok(match kind {
            "ReadTable" => match args.as_slice() {
                [b, t] => Permission::ReadTable {
                    branch: b.to_string(),
                    table: t.to_string(),
                },
                _ => return Err(format!("ReadTable takes branch and table: {s:?}")),
            },
            "WriteBranch" => Permission::WriteBranch(one(&args)?),
            "CreateBranch" => Permission::CreateBranch(one(&args)?),
            "MergeInto" => Permission::MergeInto(one(&args)?),
            "RunPipeline" => Permission::RunPipeline(one(&args)?),
            "RegisterVerifier" | "ManagePolicy" if !args.is_empty() => {
                return Err(format!("{kind} takes no arguments: {s:?}"))
            }
            "RegisterVerifier" => Permission::RegisterVerifier,
            "ManagePolicy" => Permission::ManagePolicy,
            other => return Err(format!("unknown permission kind {other:?}")),
        })
    }
}

impl Serialize for Permission {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Permission {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// `*` matches any run of characters (including `/`), `?` exactly one.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|c| *c == '*')
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "lowercase")]
pub enum Decision {
    Allow,
    Deny(String),
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Decision::Allow)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Policy {
    /// principal -> role names
    pub principals: BTreeMap<String, Vec<String>>,
    /// role -> granted permission patterns
    pub roles: BTreeMap<String, Vec<Permission>>,
    pub whitelist: BTreeSet<Package>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    #[serde(default)]
    whitelist: Vec<String>,
    #[serde(default)]
    principal: Vec<RawPrincipal>,
    #[serde(default)]
    role: Vec<RawRole>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrincipal {
    name: String,
    #[serde(default)]
    roles: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRole {
    name: String,
    #[serde(default)]
    permissions: Vec<String>,
}

impl Policy {
    /// The empty policy: every request is denied.
    pub fn deny_all() -> Policy {
        Policy::default()
    }

    pub fn parse(text: &str) -> Result<Policy, GovernanceError> {
        let raw: RawPolicy =
            toml::from_str(text).map_err(|e| GovernanceError::Parse(e.to_string()))?;
        let invalid = GovernanceError::InvalidPolicy;
        let mut policy = Policy::default();
        for r in raw.role {
            let perms = r
                .permissions
                .iter()
                .map(|p| p.parse::<Permission>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| invalid(format!("role {:?}: {e}", r.name)))?;
            if policy.roles.insert(r.name.clone(), perms).is_some() {
                return Err(invalid(format!("duplicate role {:?}", r.name)));
            }
        }
        for p in raw.principal {
            if let Some(missing) = p.roles.iter().find(|r| !policy.roles.contains_key(*r)) {
                return Err(invalid(format!(
                    "principal {:?} references undefined role {missing:?}",
                    p.name
                )));
            }
            if policy.principals.insert(p.name.clone(), p.roles).is_some() {
                return Err(invalid(format!("duplicate principal {:?}", p.name)));
            }
        }
        for w in raw.whitelist {
            let pkg = Package::parse(&w)
                .ok_or_else(|| invalid(format!("malformed whitelist entry {w:?}")))?;
            policy.whitelist.insert(pkg);
        }
        Ok(policy)
    }

    pub fn load(path: &Path) -> Result<Policy, GovernanceError> {
        Policy::parse(&fs::read_to_string(path)?)
    }

    /// Allow iff some role of `principal` grants a permission covering `action`.
    pub fn authorize(&self, principal: &str, action: &Permission) -> Decision {
        let Some(roles) = self.principals.get(principal) else {
            return Decision::Deny(format!("unknown principal {principal:?}"));
        };
        let granted = roles
            .iter()
            .filter_map(|r| self.roles.get(r))
            .flatten()
            .any(|p| p.grants(action));
        if granted {
            Decision::Allow
        } else {
            Decision::Deny(format!("{principal} lacks {action}"))
        }
    }

    /// First denial among `actions`, if any.
    pub fn authorize_all(&self, principal: &str, actions: &[Permission]) -> Decision {
        actions
            .iter()
            .map(|a| self.authorize(principal, a))
            .find(|d| !d.is_allow())
            .unwrap_or(Decision::Allow)
    }

    /// Packages in `env` that are not whitelisted verbatim.
    pub fn check_env(&self, env: &EnvSpec) -> Result<(), Vec<Package>> {
        let missing: Vec<Package> = env
            .packages
            .iter()
            .filter(|p| !self.whitelist.contains(p))
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(missing)
        }
    }

    /// `check_env` over every node, violations deduplicated in first-seen order.
    pub fn check_pipeline(&self, spec: &PipelineSpec) -> Result<(), Vec<Package>> {
        let mut all: Vec<Package> = Vec::new();
        for node in &spec.nodes {
            if let Err(v) = self.check_env(&node.env) {
                for p in v {
                    if !all.contains(&p) {
                        all.push(p);
                    }
                }
            }
        }
        if all.is_empty() {
            Ok(())
        } else {
            Err(all)
        }
    }
}

/// Shared, atomically replaceable policy.
#[derive(Debug)]
pub struct PolicyHandle {
    current: RwLock<Arc<Policy>>,
    path: Option<PathBuf>,
}

impl PolicyHandle {
    pub fn new(policy: Policy) -> Self {
        PolicyHandle {
            current: RwLock::new(Arc::new(policy)),
            path: None,
        }
    }

    /// Loads `path` if it exists; a missing file means the deny-all policy.
    pub fn from_path(path: &Path) -> Result<Self, GovernanceError> {
        let policy = if path.exists() {
            Policy::load(path)?
        } else {
            Policy::deny_all()
        };
        Ok(PolicyHandle {
            current: RwLock::new(Arc::new(policy)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn current(&self) -> Arc<Policy> {
        self.current.read().unwrap().clone()
    }

    pub fn replace(&self, policy: Policy) {
        *self.current.write().unwrap() = Arc::new(policy);
    }

    /// Re-reads the policy file. On error the old policy stays in force.
    pub fn reload(&self) -> Result<(), GovernanceError> {
        if let Some(path) = &self.path {
            let policy = if path.exists() {
                Policy::load(path)?
            } else {
                Policy::deny_all()
            };
            self.replace(policy);
        }
        Ok(())
    }
}

/// One line of `audit.jsonl`: one per governed API call.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub principal: String,
    pub api: String,
    pub actions: Vec<Permission>,
    #[serde(flatten)]
    pub decision: Decision,
}

#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    lock_path: PathBuf,
    // (file length, last seq) as of our last append
    cursor: Mutex<(u64, u64)>,
}

impl AuditLog {
    pub fn open(dir: &Path) -> io::Result<Self> {
        Ok(AuditLog {
            path: dir.join("audit.jsonl"),
            lock_path: dir.join("audit.lock"),
            cursor: Mutex::new((u64::MAX, 0)),
        })
    }

    pub fn append(
        &self,
        principal: &str,
        api: &str,
        actions: Vec<Permission>,
        decision: Decision,
    ) -> io::Result<AuditRecord> {
        let mut cursor = self.cursor.lock().unwrap();
        locked(&self.lock_path, || {
            let len = fs::metadata(&self.path).map(|m| m.len()).unwrap_or(0);
            let last = if len == cursor.0 {
                cursor.1
            } else {
                self.read()?.last().map_or(0, |r| r.seq)
            };
            let record = AuditRecord {
                seq: last + 1,
                principal: principal.to_string(),
                api: api.to_string(),
                actions,
                decision,
            };
            let mut line = serde_json::to_string(&record).expect("serializable");
            line.push('\n');
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)?;
            f.write_all(line.as_bytes())?;
            f.flush()?;
            *cursor = (len + line.len() as u64, record.seq);
            Ok(record)
        })
    }

    pub fn read(&self) -> io::Result<Vec<AuditRecord>> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
            })
            .collect()
    }
}
