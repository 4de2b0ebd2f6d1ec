//! Type checking of queries and topological planning of pipelines.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::ast::*;
use super::pipeline::PipelineSpec;
use super::{EngineError, TypeError};
use crate::store::{is_identifier, Column, ColumnType, Schema, Value};

/// Expression with column references resolved to positions in the (possibly
/// joined) input row and aggregates resolved to slots.
#[derive(Clone, Debug)]
pub(crate) enum RExpr {
    Lit(Value),
    Col(usize),
    Neg(Box<RExpr>),
    Not(Box<RExpr>),
    Bin(BinOp, Box<RExpr>, Box<RExpr>),
    Agg(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct AggSlot {
    pub func: AggFunc,
    /// `None` for `count(*)`.
    pub col: Option<usize>,
    pub input_type: Option<ColumnType>,
}

#[derive(Clone, Debug)]
pub(crate) struct CheckedJoin {
    pub table: String,
    pub left_key: usize,
    /// Index within the right table's own columns.
    pub right_key: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct CheckedQuery {
    pub from: String,
    pub join: Option<CheckedJoin>,
    pub filter: Option<RExpr>,
    pub aggregate: bool,
    pub group_keys: Vec<usize>,
    pub aggs: Vec<AggSlot>,
    pub items: Vec<RExpr>,
    pub output: Schema,
}

struct Scope<'a> {
    tables: Vec<(&'a str, &'a Schema, usize)>,
}

impl<'a> Scope<'a> {
    fn resolve(&self, c: &ColumnRef) -> Result<(usize, ColumnType), String> {
        let mut hits = Vec::new();
        for (name, schema, offset) in &self.tables {
            if let Some(t) = &c.table {
                if t != name {
                    continue;
                }
            }
            if let Some(i) = schema.index_of(&c.column) {
                hits.push((offset + i, schema.columns()[i].ty));
            }
        }
        match hits.len() {
            1 => Ok(hits[0]),
            0 => match &c.table {
                Some(t) if !self.tables.iter().any(|(n, _, _)| n == t) => {
                    Err(format!("unknown table {t:?} in column reference {c}"))
                }
                _ => Err(format!("unknown column {c}")),
            },
            _ => Err(format!(
                "ambiguous column {c}; qualify it with a table name"
            )),
        }
    }
}

struct Checker<'a> {
    scope: Scope<'a>,
    aggregate: bool,
    group_keys: Vec<usize>,
    aggs: Vec<AggSlot>,
}

fn type_err(expr: &impl std::fmt::Display, message: impl Into<String>) -> TypeError {
    TypeError {
        node: None,
        expr: expr.to_string(),
        message: message.into(),
    }
}

impl Checker<'_> {
    fn check(&mut self, e: &Expr, in_agg_ok: bool) -> Result<(RExpr, ColumnType), TypeError> {
        match e {
            Expr::Lit(v) => Ok((RExpr::Lit(v.clone()), v.column_type())),
            Expr::Column(c) => {
                let (idx, ty) = self.scope.resolve(c).map_err(|m| type_err(e, m))?;
                if self.aggregate && !self.group_keys.contains(&idx) {
                    return Err(type_err(
                        e,
                        format!("column {c} must appear in GROUP BY or inside an aggregate"),
                    ));
                }
                Ok((RExpr::Col(idx), ty))
            }
            Expr::Neg(inner) => {
                let (r, ty) = self.check(inner, in_agg_ok)?;
                if !ty.is_numeric() {
                    return Err(type_err(e, format!("cannot negate {ty}")));
                }
                Ok((RExpr::Neg(Box::new(r)), ty))
            }
            Expr::Not(inner) => {
                let (r, ty) = self.check(inner, in_agg_ok)?;
                if ty != ColumnType::Bool {
                    return Err(type_err(e, format!("NOT expects bool, got {ty}")));
                }
                Ok((RExpr::Not(Box::new(r)), ColumnType::Bool))
            }
            Expr::Binary { op, left, right } => {
                let (l, lt) = self.check(left, in_agg_ok)?;
                let (r, rt) = self.check(right, in_agg_ok)?;
                let ty = binary_type(*op, lt, rt).ok_or_else(|| {
                    type_err(
                        e,
                        format!("operator {} not defined for {lt} and {rt}", op.symbol()),
                    )
                })?;
                Ok((RExpr::Bin(*op, Box::new(l), Box::new(r)), ty))
            }
            Expr::Agg { func, arg } => {
                if !in_agg_ok {
                    return Err(type_err(e, "aggregate not allowed here"));
                }
                let (col, in_ty) = match arg {
                    AggArg::Star => (None, None),
                    AggArg::Column(c) => {
                        let (idx, ty) = self.scope.resolve(c).map_err(|m| type_err(e, m))?;
                        (Some(idx), Some(ty))
                    }
                };
                let out_ty = match (func, in_ty) {
                    (AggFunc::Count, _) => ColumnType::Int64,
                    (AggFunc::Sum, Some(t)) if t.is_numeric() => t,
                    (AggFunc::Avg, Some(t)) if t.is_numeric() => ColumnType::Float64,
                    (AggFunc::Min | AggFunc::Max, Some(t)) if t != ColumnType::Bool => t,
                    (_, Some(t)) => {
                        return Err(type_err(
                            e,
                            format!("{}() is not defined for {t}", func.name()),
                        ))
                    }
                    (_, None) => {
                        return Err(type_err(e, format!("{}(*) is not allowed", func.name())))
                    }
                };
                let slot = AggSlot {
                    func: *func,
                    col,
                    input_type: in_ty,
                };
                let idx = match self.aggs.iter().position(|s| *s == slot) {
                    Some(i) => i,
                    None => {
                        self.aggs.push(slot);
                        self.aggs.len() - 1
                    }
                };
                Ok((RExpr::Agg(idx), out_ty))
            }
        }
    }
}

pub(crate) fn binary_type(op: BinOp, l: ColumnType, r: ColumnType) -> Option<ColumnType> {
    use ColumnType::*;
    if op.is_arithmetic() {
        return match (l, r) {
            (Int64, Int64) => Some(Int64),
            (a, b) if a.is_numeric() && b.is_numeric() => Some(Float64),
            _ => None,
        };
    }
    if op.is_comparison() {
        let ok = (l.is_numeric() && r.is_numeric()) || l == r;
        return ok.then_some(Bool);
    }
    (l == Bool && r == Bool).then_some(Bool)
}

fn default_name(item: &SelectItem, position: usize) -> String {
    if let Some(a) = &item.alias {
        return a.clone();
    }
    match &item.expr {
        Expr::Column(c) => c.column.clone(),
        Expr::Agg {
            func,
            arg: AggArg::Star,
        } => func.name().to_string(),
        Expr::Agg {
            func,
            arg: AggArg::Column(c),
        } => format!("{}_{}", func.name(), c.column),
        _ => format!("col{}", position + 1),
    }
}

/// Type-checks `q` against the schemas of its inputs.
pub(crate) fn check_query(
    q: &Query,
    inputs: &BTreeMap<String, Schema>,
) -> Result<CheckedQuery, EngineError> {
    let from_schema = inputs
        .get(&q.from)
        .ok_or_else(|| EngineError::UnknownInput {
            node: String::new(),
            input: q.from.clone(),
        })?;
    let mut tables = vec![(q.from.as_str(), from_schema, 0usize)];
    let mut join = None;
    if let Some(j) = &q.join {
        if j.table == q.from {
            return Err(type_err(&q, "self-joins are not supported").into());
        }
        let right_schema = inputs
            .get(&j.table)
            .ok_or_else(|| EngineError::UnknownInput {
                node: String::new(),
                input: j.table.clone(),
            })?;
        tables.push((j.table.as_str(), right_schema, from_schema.len()));
        let scope = Scope {
            tables: tables.clone(),
        };
        let on = format!("{} = {}", j.left, j.right);
        let (a, at) = scope.resolve(&j.left).map_err(|m| type_err(&on, m))?;
        let (b, bt) = scope.resolve(&j.right).map_err(|m| type_err(&on, m))?;
        let split = from_schema.len();
        let (left_key, right_key) = match (a < split, b < split) {
            (true, false) => (a, b - split),
            (false, true) => (b, a - split),
            _ => {
                return Err(type_err(
                    &on,
                    "join condition must compare one column from each table",
                )
                .into())
            }
        };
        if binary_type(BinOp::Eq, at, bt).is_none() {
            return Err(type_err(&on, format!("cannot compare {at} with {bt}")).into());
        }
        join = Some(CheckedJoin {
            table: j.table.clone(),
            left_key,
            right_key,
        });
    }

    let scope = Scope { tables };
    let aggregate = q.is_aggregate();
    let mut group_keys = Vec::new();
    for c in &q.group_by {
        let (idx, _) = scope.resolve(c).map_err(|m| type_err(c, m))?;
        group_keys.push(idx);
    }
    let mut checker = Checker {
        scope,
        aggregate: false,
        group_keys,
        aggs: Vec::new(),
    };

    let filter = match &q.filter {
        Some(w) => {
            let (r, ty) = checker.check(w, false)?;
            if ty != ColumnType::Bool {
                return Err(type_err(w, format!("WHERE expects bool, got {ty}")).into());
            }
            Some(r)
        }
        None => None,
    };

    checker.aggregate = aggregate;
    let mut items = Vec::new();
    let mut columns: Vec<Column> = Vec::new();
    for (i, item) in q.select.iter().enumerate() {
        let (r, ty) = checker.check(&item.expr, true)?;
        let name = default_name(item, i);
        if !is_identifier(&name) {
            return Err(
                type_err(&item.expr, format!("invalid output column name {name:?}")).into(),
            );
        }
        if columns.iter().any(|c| c.name == name) {
            return Err(type_err(
                &item.expr,
                format!("duplicate output column {name:?}; add an alias"),
            )
            .into());
        }
        columns.push(Column::new(name, ty));
        items.push(r);
    }
    let output = Schema::new(columns).map_err(|e| type_err(q, e.to_string()))?;
    Ok(CheckedQuery {
        from: q.from.clone(),
        join,
        filter,
        aggregate,
        group_keys: checker.group_keys,
        aggs: checker.aggs,
        items,
        output,
    })
}

/// Output schema of `q` over the given input schemas.
pub fn query_schema(q: &Query, inputs: &BTreeMap<String, Schema>) -> Result<Schema, EngineError> {
    Ok(check_query(q, inputs)?.output)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PlannedNode {
    pub name: String,
    pub schema: Schema,
}

/// Execution order plus the schema each node will materialize.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Plan {
    pub nodes: Vec<PlannedNode>,
    /// Source tables the pipeline reads, in first-use order.
    pub sources: Vec<String>,
}

impl Plan {
    pub fn order(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }
}

/// Orders nodes topologically (ready nodes in declaration order) and
/// type-checks every query.
pub fn plan(spec: &PipelineSpec, sources: &BTreeMap<String, Schema>) -> Result<Plan, EngineError> {
    let index: BTreeMap<&str, usize> = spec
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.name.as_str(), i))
        .collect();
    let mut indegree = vec![0usize; spec.nodes.len()];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); spec.nodes.len()];
    let mut source_order: Vec<String> = Vec::new();
    for (i, node) in spec.nodes.iter().enumerate() {
        for input in &node.inputs {
            if let Some(&j) = index.get(input.as_str()) {
                indegree[i] += 1;
                children[j].push(i);
            } else if sources.contains_key(input) {
                if !source_order.contains(input) {
                    source_order.push(input.clone());
                }
            } else {
                return Err(EngineError::UnknownInput {
                    node: node.name.clone(),
                    input: input.clone(),
                });
            }
        }
        for table in node.query.inputs() {
            if !node.inputs.iter().any(|i| i == table) {
                return Err(EngineError::UnknownInput {
                    node: node.name.clone(),
                    input: table.to_string(),
                });
            }
        }
    }

    let mut ready: BTreeSet<usize> = (0..spec.nodes.len())
        .filter(|&i| indegree[i] == 0)
        .collect();
    let mut order = Vec::new();
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != spec.nodes.len() {
        let stuck = (0..spec.nodes.len()).find(|i| !order.contains(i)).unwrap();
        let node = &spec.nodes[stuck];
        return Err(EngineError::CycleOrForwardRef {
            node: node.name.clone(),
            input: node
                .inputs
                .iter()
                .find(|i| index.contains_key(i.as_str()))
                .cloned()
                .unwrap_or_default(),
        });
    }

    let mut schemas: BTreeMap<String, Schema> = BTreeMap::new();
    let mut nodes = Vec::new();
    for i in order {
        let node = &spec.nodes[i];
        let mut inputs = BTreeMap::new();
        for input in &node.inputs {
            let schema = schemas
                .get(input)
                .or_else(|| (!index.contains_key(input.as_str())).then(|| &sources[input]))
                .expect("inputs resolved above");
            inputs.insert(input.clone(), schema.clone());
        }
        let checked = check_query(&node.query, &inputs).map_err(|e| e.in_node(&node.name))?;
        schemas.insert(node.name.clone(), checked.output.clone());
        nodes.push(PlannedNode {
            name: node.name.clone(),
            schema: checked.output,
        });
    }
    Ok(Plan {
        nodes,
        sources: source_order,
    })
}
