//! Pipeline files.
//!
//! ```text
//! pipeline taxi
//! node parent:
//!   inputs: taxi_trips, taxi_zones
//!   env: runtime=python3.10 packages=[pandas==2.0]
//!   materialize: REPLACE
//!   query: SELECT ... FROM taxi_trips JOIN taxi_zones ON ...
//! ```
//!
//! The query may continue on following lines indented deeper than the
//! `query:` key. Blank lines and lines starting with `#` are ignored.

use std::fmt;

use serde::{Serialize, Serializer};

use super::ast::Query;
use super::parse::parse_query;
use super::{EngineError, ParseError};
use crate::store::is_identifier;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Package {
    pub name: String,
    pub version: String,
}

impl Package {
    pub fn parse(s: &str) -> Option<Package> {
        let (name, version) = s.trim().split_once("==")?;
        let valid = |p: &str| {
            !p.is_empty()
                && p.chars()
                    .all(|c| c.is_ascii_alphanumeric() || "._-+".contains(c))
        };
        (valid(name) && valid(version)).then(|| Package {
            name: name.to_string(),
            version: version.to_string(),
        })
    }
}

impl Serialize for Package {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl fmt::Display for Package {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}=={}", self.name, self.version)
    }
}

/// Declared runtime environment of a node. Checked against the package
/// whitelist; it does not change query semantics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EnvSpec {
    pub runtime: String,
    pub packages: Vec<Package>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Materialization {
    #[serde(rename = "REPLACE")]
    Replace,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NodeSpec {
    pub name: String,
    pub inputs: Vec<String>,
    pub env: EnvSpec,
    pub materialization: Materialization,
    pub query: Query,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineSpec {
    pub name: String,
    pub nodes: Vec<NodeSpec>,
}

impl PipelineSpec {
    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn packages(&self) -> impl Iterator<Item = &Package> {
        self.nodes.iter().flat_map(|n| n.env.packages.iter())
    }
}

impl fmt::Display for PipelineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pipeline {}", self.name)?;
        for node in &self.nodes {
            writeln!(f, "node {}:", node.name)?;
            writeln!(f, "  inputs: {}", node.inputs.join(", "))?;
            let packages: Vec<String> = node.env.packages.iter().map(|p| p.to_string()).collect();
            writeln!(
                f,
                "  env: runtime={} packages=[{}]",
                node.env.runtime,
                packages.join(", ")
            )?;
            writeln!(f, "  materialize: REPLACE")?;
            writeln!(f, "  query: {}", node.query)?;
        }
        Ok(())
    }
}

impl Serialize for PipelineSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

#[derive(Default)]
struct PendingNode {
    name: String,
    line: usize,
    inputs: Option<Vec<String>>,
    env: Option<EnvSpec>,
    materialization: Option<Materialization>,
    query: Option<Query>,
}

pub fn parse_pipeline(text: &str) -> Result<PipelineSpec, EngineError> {
    let lines: Vec<&str> = text.lines().collect();
    let err =
        |line: usize, col: usize, msg: String| EngineError::Parse(ParseError::new(line, col, msg));
    let significant = |l: &str| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('#')
    };

    let mut i = 0;
    while i < lines.len() && !significant(lines[i]) {
        i += 1;
    }
    if i == lines.len() {
        return Err(err(
            1,
            1,
            "empty pipeline file; expected `pipeline <name>`".into(),
        ));
    }
    let header = lines[i].trim();
    let name = match header.strip_prefix("pipeline ") {
        Some(n) if is_identifier(n.trim()) => n.trim().to_string(),
        _ => {
            return Err(err(
                i + 1,
                indent_of(lines[i]) + 1,
                "expected `pipeline <identifier>`".into(),
            ))
        }
    };
    i += 1;

    let mut nodes: Vec<PendingNode> = Vec::new();
    while i < lines.len() {
        let raw = lines[i];
        let line_no = i + 1;
        if !significant(raw) {
            i += 1;
            continue;
        }
        let indent = indent_of(raw);
        let trimmed = raw.trim();
        if indent == 0 {
            let Some(rest) = trimmed.strip_prefix("node ") else {
                return Err(err(
                    line_no,
                    1,
                    format!("expected `node <name>:`, found {trimmed:?}"),
                ));
            };
            let Some(node_name) = rest.trim().strip_suffix(':') else {
                return Err(err(
                    line_no,
                    raw.len(),
                    "node header must end with ':'".into(),
                ));
            };
            let node_name = node_name.trim();
            if !is_identifier(node_name) {
                return Err(err(line_no, 6, format!("invalid node name {node_name:?}")));
            }
            if nodes.iter().any(|n| n.name == node_name) {
                return Err(err(line_no, 6, format!("duplicate node {node_name:?}")));
            }
            nodes.push(PendingNode {
                name: node_name.to_string(),
                line: line_no,
                ..Default::default()
            });
            i += 1;
            continue;
        }
        let Some(node) = nodes.last_mut() else {
            return Err(err(line_no, indent + 1, "field outside of a node".into()));
        };
        let Some((key, value)) = trimmed.split_once(':') else {
            return Err(err(
                line_no,
                indent + 1,
                format!("expected `key: value`, found {trimmed:?}"),
            ));
        };
        let value_col = indent + key.len() + 2 + (value.len() - value.trim_start().len());
        let value = value.trim();
        let dup = |present: bool| {
            if present {
                Err(err(line_no, indent + 1, format!("duplicate field {key:?}")))
            } else {
                Ok(())
            }
        };
        match key.trim() {
            "inputs" => {
                dup(node.inputs.is_some())?;
                let mut inputs = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    if !is_identifier(part) {
                        return Err(err(
                            line_no,
                            value_col,
                            format!("invalid input name {part:?}"),
                        ));
                    }
                    if inputs.iter().any(|x| x == part) {
                        return Err(err(line_no, value_col, format!("duplicate input {part:?}")));
                    }
                    inputs.push(part.to_string());
                }
                node.inputs = Some(inputs);
            }
            "env" => {
                dup(node.env.is_some())?;
                node.env = Some(parse_env(value).map_err(|m| err(line_no, value_col, m))?);
            }
            "materialize" => {
                dup(node.materialization.is_some())?;
                if value != "REPLACE" {
                    return Err(err(
                        line_no,
                        value_col,
                        format!("unknown materialization {value:?}; only REPLACE is supported"),
                    ));
                }
                node.materialization = Some(Materialization::Replace);
            }
            "query" => {
                dup(node.query.is_some())?;
                // (line number, column offset) of each query text line
                let mut origins = Vec::new();
                let mut text = String::new();
                if !value.is_empty() {
                    origins.push((line_no, value_col - 1));
                    text.push_str(value);
                }
                let mut j = i + 1;
                while j < lines.len()
                    && (lines[j].trim().is_empty() || indent_of(lines[j]) > indent)
                {
                    if !lines[j].trim().is_empty() {
                        let cont = lines[j];
                        if !text.is_empty() {
                            text.push('\n');
                        }
                        origins.push((j + 1, indent_of(cont)));
                        text.push_str(cont.trim());
                    }
                    j += 1;
                }
                if text.is_empty() {
                    return Err(err(line_no, indent + 1, "empty query".into()));
                }
                let q = parse_query(&text).map_err(|e| {
                    let (l, off) = origins
                        .get(e.line - 1)
                        .copied()
                        .unwrap_or(*origins.last().unwrap());
                    err(l, off + e.column, e.message)
                })?;
                node.query = Some(q);
                i = j;
                continue;
            }
            other => {
                return Err(err(line_no, indent + 1, format!("unknown field {other:?}")));
            }
        }
        i += 1;
    }

    if nodes.is_empty() {
        return Err(err(lines.len(), 1, "pipeline declares no nodes".into()));
    }
    let mut out = Vec::new();
    for n in &nodes {
        let missing = |f: &str| err(n.line, 1, format!("node {:?} is missing `{f}`", n.name));
        out.push(NodeSpec {
            name: n.name.clone(),
            inputs: n.inputs.clone().ok_or_else(|| missing("inputs"))?,
            env: n.env.clone().ok_or_else(|| missing("env"))?,
            materialization: n.materialization.ok_or_else(|| missing("materialize"))?,
            query: n.query.clone().ok_or_else(|| missing("query"))?,
        });
    }
    // Inputs naming the node itself or a node declared later break the DAG rule.
    for (idx, node) in out.iter().enumerate() {
        for input in &node.inputs {
            if out[idx..].iter().any(|later| &later.name == input) {
                return Err(EngineError::CycleOrForwardRef {
                    node: node.name.clone(),
                    input: input.clone(),
                });
            }
        }
    }
    Ok(PipelineSpec { name, nodes: out })
}

fn parse_env(value: &str) -> Result<EnvSpec, String> {
    let rest = value
        .strip_prefix("runtime=")
        .ok_or("env must start with runtime=<tag>")?;
    let (runtime, rest) = rest
        .split_once(char::is_whitespace)
        .ok_or("env must declare packages=[...]")?;
    if runtime.is_empty() {
        return Err("empty runtime tag".into());
    }
    let list = rest
        .trim()
        .strip_prefix("packages=[")
        .and_then(|r| r.strip_suffix(']'))
        .ok_or("expected packages=[name==version, ...]")?;
    let mut packages = Vec::new();
    if !list.trim().is_empty() {
        for p in list.split(',') {
            packages.push(
                Package::parse(p).ok_or_else(|| format!("malformed package {:?}", p.trim()))?,
            );
        }
    }
    Ok(EnvSpec {
        runtime: runtime.to_string(),
        packages,
    })
}
