//! SQL-subset pipeline engine: parser, planner and reference executor.

mod ast;
mod exec;
mod parse;
mod pipeline;
mod plan;

use std::fmt;

use thiserror::Error;

pub use ast::{AggArg, AggFunc, BinOp, ColumnRef, Expr, Join, Query, SelectItem};
pub use exec::execute_query;
pub use parse::{is_keyword, parse_query};
pub use pipeline::{parse_pipeline, EnvSpec, Materialization, NodeSpec, Package, PipelineSpec};
pub use plan::{plan, query_schema, Plan, PlannedNode};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{line}:{column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, column: usize, message: impl Into<String>) -> Self {
        ParseError {
            line,
            column,
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TypeError {
    pub node: Option<String>,
    pub expr: String,
    pub message: String,
}

impl fmt::Display for TypeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(node) = &self.node {
            write!(f, "node {node}: ")?;
        }
        write!(f, "{} (in `{}`)", self.message, self.expr)
    }
}

impl std::error::Error for TypeError {}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("parse error at {0}")]
    Parse(#[from] ParseError),
    #[error("node {node}: input {input:?} is the node itself or declared later")]
    CycleOrForwardRef { node: String, input: String },
    #[error("node {node}: unknown input {input:?}")]
    UnknownInput { node: String, input: String },
    #[error("type error: {0}")]
    Type(#[from] TypeError),
    #[error("evaluation error: {0}")]
    Eval(String),
}

impl EngineError {
    /// Attributes a query-level error to pipeline node `node`.
    pub fn in_node(self, node: &str) -> EngineError {
        match self {
            EngineError::Type(mut t) => {
                t.node.get_or_insert_with(|| node.to_string());
                EngineError::Type(t)
            }
            EngineError::UnknownInput { node: n, input } if n.is_empty() => {
                EngineError::UnknownInput {
                    node: node.to_string(),
                    input,
                }
            }
            other => other,
        }
    }

    /// Stable kind tag used in reports and CLI output.
    pub fn kind(&self) -> &'static str {
        match self {
            EngineError::Parse(_) => "parse",
            EngineError::CycleOrForwardRef { .. } => "cycle_or_forward_ref",
            EngineError::UnknownInput { .. } => "unknown_input",
            EngineError::Type(_) => "type",
            EngineError::Eval(_) => "eval",
        }
    }
}
