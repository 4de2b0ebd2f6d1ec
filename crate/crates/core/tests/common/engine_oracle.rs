//! Random query generator and a nested-loop / linear-scan reference evaluator
//! that shares no code with the engine.

use std::collections::BTreeMap;

use lakekernel::engine::{AggArg, AggFunc, BinOp, ColumnRef, Expr, Join, Query, SelectItem};
use lakekernel::store::{ColumnType, Row, Schema, TableData, Value};

use super::Rng;

const INTS: &[i64] = &[-3, -1, 0, 0, 1, 2, 3, 7, 4_611_686_018_427_387_904];
const FLOATS: &[f64] = &[-1.5, 0.0, 0.5, 2.0, 3.25];
const STRS: &[&str] = &["x", "y", "it's", "a,b", ""];

fn t_schema() -> Schema {
    Schema::of(&[
        ("a", ColumnType::Int64),
        ("b", ColumnType::Int64),
        ("f", ColumnType::Float64),
        ("s", ColumnType::String),
        ("p", ColumnType::Bool),
    ])
    .unwrap()
}

fn u_schema() -> Schema {
    Schema::of(&[
        ("k", ColumnType::Int64),
        ("v", ColumnType::Float64),
        ("w", ColumnType::String),
    ])
    .unwrap()
}

fn random_value(rng: &mut Rng, ty: ColumnType) -> Value {
    match ty {
        // keys stay small so joins actually match
        ColumnType::Int64 => Value::Int(if rng.chance(1, 12) {
            *rng.pick(INTS)
        } else {
            rng.below(4) as i64
        }),
        ColumnType::Float64 => Value::Float(*rng.pick(FLOATS)),
        ColumnType::String => Value::Str(rng.pick(STRS).to_string()),
        ColumnType::Bool => Value::Bool(rng.chance(1, 2)),
    }
}

fn random_table(rng: &mut Rng, schema: Schema) -> TableData {
    let n = rng.below(9);
    let rows = (0..n)
        .map(|_| {
            schema
                .columns()
                .iter()
                .map(|c| random_value(rng, c.ty))
                .collect()
        })
        .collect();
    TableData::new(schema, rows).unwrap()
}

/// Inputs `t` and `u`, each with at most 8 rows.
pub fn random_tables(rng: &mut Rng) -> BTreeMap<String, TableData> {
    let mut m = BTreeMap::new();
    m.insert("t".to_string(), random_table(rng, t_schema()));
    m.insert("u".to_string(), random_table(rng, u_schema()));
    m
}

struct Gen<'a> {
    rng: &'a mut Rng,
    /// Columns usable as bare scalars.
    scalars: Vec<(ColumnRef, ColumnType)>,
    /// Columns usable inside aggregates; empty outside aggregate items.
    agg_cols: Vec<(ColumnRef, ColumnType)>,
}

impl Gen<'_> {
    fn col_of(&mut self, ty: ColumnType, from_agg: bool) -> Option<ColumnRef> {
        let pool = if from_agg {
            &self.agg_cols
        } else {
            &self.scalars
        };
        let matching: Vec<&ColumnRef> = pool
            .iter()
            .filter(|(_, t)| *t == ty)
            .map(|(c, _)| c)
            .collect();
        if matching.is_empty() {
            None
        } else {
            Some(matching[self.rng.below(matching.len())].clone())
        }
    }

    fn agg(&mut self, ty: ColumnType) -> Option<Expr> {
        if self.agg_cols.is_empty() {
            return None;
        }
        let (func, arg) = match ty {
            ColumnType::Int64 => match self.rng.below(3) {
                0 => (AggFunc::Count, AggArg::Star),
                1 => (AggFunc::Sum, AggArg::Column(self.col_of(ty, true)?)),
                _ => (
                    *self.rng.pick(&[AggFunc::Min, AggFunc::Max, AggFunc::Count]),
                    AggArg::Column(self.col_of(ty, true)?),
                ),
            },
            ColumnType::Float64 => match self.rng.below(3) {
                0 => {
                    let src = *self.rng.pick(&[ColumnType::Int64, ColumnType::Float64]);
                    (AggFunc::Avg, AggArg::Column(self.col_of(src, true)?))
                }
                1 => (AggFunc::Sum, AggArg::Column(self.col_of(ty, true)?)),
                _ => (
                    *self.rng.pick(&[AggFunc::Min, AggFunc::Max]),
                    AggArg::Column(self.col_of(ty, true)?),
                ),
            },
            ColumnType::String => (
                *self.rng.pick(&[AggFunc::Min, AggFunc::Max]),
                AggArg::Column(self.col_of(ty, true)?),
            ),
            ColumnType::Bool => return None,
        };
        Some(Expr::Agg { func, arg })
    }

    fn leaf(&mut self, ty: ColumnType) -> Expr {
        if self.rng.chance(1, 3) {
            if let Some(a) = self.agg(ty) {
                return a;
            }
        }
        if self.rng.chance(2, 3) {
            if let Some(c) = self.col_of(ty, false) {
                return Expr::Column(c);
            }
        }
        Expr::Lit(match ty {
            ColumnType::Int64 => Value::Int(self.rng.below(4) as i64),
            ColumnType::Float64 => Value::Float(*self.rng.pick(&[0.5, 1.0, 2.25, 1e21, 3e-7])),
            ColumnType::String => Value::Str(self.rng.pick(STRS).to_string()),
            ColumnType::Bool => Value::Bool(self.rng.chance(1, 2)),
        })
    }

    fn expr(&mut self, ty: ColumnType, depth: usize) -> Expr {
        if depth == 0 || self.rng.chance(1, 3) {
            return self.leaf(ty);
        }
        let d = depth - 1;
        match ty {
            ColumnType::Int64 => {
                if self.rng.chance(1, 6) {
                    return Expr::Neg(Box::new(self.expr(ty, d)));
                }
                let op = *self
                    .rng
                    .pick(&[BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div]);
                Expr::binary(op, self.expr(ty, d), self.expr(ty, d))
            }
            ColumnType::Float64 => {
                let op = *self
                    .rng
                    .pick(&[BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div]);
                let other = *self.rng.pick(&[ColumnType::Int64, ColumnType::Float64]);
                let (l, r) = (self.expr(ty, d), self.expr(other, d));
                if self.rng.chance(1, 2) {
                    Expr::binary(op, l, r)
                } else {
                    Expr::binary(op, r, l)
                }
            }
            ColumnType::String => self.leaf(ty),
            ColumnType::Bool => match self.rng.below(4) {
                0 => Expr::Not(Box::new(self.expr(ty, d))),
                1 => {
                    let op = *self.rng.pick(&[BinOp::And, BinOp::Or]);
                    Expr::binary(op, self.expr(ty, d), self.expr(ty, d))
                }
                _ => {
                    let op = *self.rng.pick(&[
                        BinOp::Eq,
                        BinOp::Ne,
                        BinOp::Lt,
                        BinOp::Le,
                        BinOp::Gt,
                        BinOp::Ge,
                    ]);
                    let (lt, rt) = match self.rng.below(4) {
                        0 => (ColumnType::String, ColumnType::String),
                        1 => (ColumnType::Bool, ColumnType::Bool),
                        _ => (
                            *self.rng.pick(&[ColumnType::Int64, ColumnType::Float64]),
                            *self.rng.pick(&[ColumnType::Int64, ColumnType::Float64]),
                        ),
                    };
                    Expr::binary(op, self.expr(lt, d), self.expr(rt, d))
                }
            },
        }
    }
}

const TYPES: &[ColumnType] = &[
    ColumnType::Int64,
    ColumnType::Float64,
    ColumnType::String,
    ColumnType::Bool,
];

/// A well-typed random query over the tables from [`random_tables`].
pub fn random_query(rng: &mut Rng) -> Query {
    let join = if rng.chance(1, 2) {
        let (l, r) = *rng.pick(&[("a", "k"), ("b", "k"), ("f", "v"), ("a", "v")]);
        let (left, right) = (ColumnRef::qualified("t", l), ColumnRef::qualified("u", r));
        Some(if rng.chance(1, 2) {
            Join {
                table: "u".into(),
                left,
                right,
            }
        } else {
            Join {
                table: "u".into(),
                left: right,
                right: left,
            }
        })
    } else {
        None
    };
    let mut cols: Vec<(ColumnRef, ColumnType)> = Vec::new();
    let qualify = join.is_some();
    for (table, schema) in [("t", t_schema()), ("u", u_schema())] {
        if table == "u" && !qualify {
            continue;
        }
        for c in schema.columns() {
            let r = if qualify {
                ColumnRef::qualified(table, &c.name)
            } else {
                ColumnRef::bare(&c.name)
            };
            cols.push((r, c.ty));
        }
    }

    let filter = rng.chance(1, 2).then(|| {
        Gen {
            rng: &mut *rng,
            scalars: cols.clone(),
            agg_cols: vec![],
        }
        .expr(ColumnType::Bool, 3)
    });

    let aggregate = rng.chance(1, 2);
    let mut group_by = Vec::new();
    let mut select = Vec::new();
    if aggregate {
        let n_keys = rng.below(3);
        for _ in 0..n_keys {
            let c = rng.pick(&cols).clone();
            if !group_by
                .iter()
                .any(|(g, _): &(ColumnRef, ColumnType)| g == &c.0)
            {
                group_by.push(c);
            }
        }
        for (g, _) in &group_by {
            if rng.chance(1, 2) {
                select.push(Expr::Column(g.clone()));
            }
        }
        let n = 1 + rng.below(3);
        for _ in 0..n {
            let ty = *rng.pick(TYPES);
            let mut g = Gen {
                rng: &mut *rng,
                scalars: group_by.clone(),
                agg_cols: cols.clone(),
            };
            // force at least one aggregate so a global aggregate stays legal
            let e = match g.agg(ColumnType::Int64) {
                Some(a) if ty == ColumnType::Int64 && g.rng.chance(1, 3) => {
                    Expr::binary(BinOp::Add, a, g.expr(ColumnType::Int64, 2))
                }
                _ => g.expr(ty, 2),
            };
            select.push(e);
        }
        if group_by.is_empty() && !select.iter().all(|e| e.contains_agg() || no_columns(e)) {
            select.retain(|e| e.contains_agg() || no_columns(e));
        }
        if select.is_empty() {
            select.push(Expr::Agg {
                func: AggFunc::Count,
                arg: AggArg::Star,
            });
        }
    } else {
        let n = 1 + rng.below(3);
        for _ in 0..n {
            let ty = *rng.pick(TYPES);
            select.push(
                Gen {
                    rng: &mut *rng,
                    scalars: cols.clone(),
                    agg_cols: vec![],
                }
                .expr(ty, 3),
            );
        }
    }
    Query {
        select: select
            .into_iter()
            .enumerate()
            .map(|(i, expr)| SelectItem {
                expr,
                alias: Some(format!("c{i}")),
            })
            .collect(),
        from: "t".into(),
        join,
        filter,
        group_by: group_by.into_iter().map(|(c, _)| c).collect(),
    }
}

fn no_columns(e: &Expr) -> bool {
    match e {
        Expr::Lit(_) => true,
        Expr::Column(_) => false,
        Expr::Agg { .. } => true,
        Expr::Neg(x) | Expr::Not(x) => no_columns(x),
        Expr::Binary { left, right, .. } => no_columns(left) && no_columns(right),
    }
}

/// A row in scope: (table, column, value) triples.
type Env = Vec<(String, String, Value)>;

fn lookup(env: &Env, c: &ColumnRef) -> Value {
    env.iter()
        .find(|(t, n, _)| n == &c.column && c.table.as_ref().is_none_or(|ct| ct == t))
        .map(|(_, _, v)| v.clone())
        .expect("generator only references existing columns")
}

fn num(v: &Value) -> f64 {
    match v {
        Value::Int(i) => *i as f64,
        Value::Float(f) => *f,
        _ => panic!("not numeric"),
    }
}

fn cmp(l: &Value, r: &Value) -> Option<std::cmp::Ordering> {
    match (l, r) {
        (Value::Int(a), Value::Int(b)) => Some(a.cmp(b)),
        (Value::Str(a), Value::Str(b)) => Some(a.cmp(b)),
        (Value::Bool(a), Value::Bool(b)) => Some(a.cmp(b)),
        _ => num(l).partial_cmp(&num(r)),
    }
}

#[derive(Debug)]
pub struct OracleError;

fn eval(e: &Expr, env: &Env, aggs: &BTreeMap<String, Value>) -> Result<Value, OracleError> {
    use std::cmp::Ordering::*;
    Ok(match e {
        Expr::Lit(v) => v.clone(),
        Expr::Column(c) => lookup(env, c),
        Expr::Agg { .. } => aggs[&e.to_string()].clone(),
        Expr::Neg(x) => match eval(x, env, aggs)? {
            Value::Int(i) => Value::Int(i.checked_neg().ok_or(OracleError)?),
            Value::Float(f) => Value::Float(-f),
            _ => unreachable!(),
        },
        Expr::Not(x) => Value::Bool(eval(x, env, aggs)? == Value::Bool(false)),
        Expr::Binary { op, left, right } => {
            let l = eval(left, env, aggs)?;
            if *op == BinOp::And && l == Value::Bool(false) {
                return Ok(l);
            }
            if *op == BinOp::Or && l == Value::Bool(true) {
                return Ok(l);
            }
            let r = eval(right, env, aggs)?;
            match op {
                BinOp::And | BinOp::Or => r,
                BinOp::Eq => Value::Bool(cmp(&l, &r) == Some(Equal)),
                BinOp::Ne => Value::Bool(cmp(&l, &r) != Some(Equal)),
                BinOp::Lt => Value::Bool(cmp(&l, &r) == Some(Less)),
                BinOp::Gt => Value::Bool(cmp(&l, &r) == Some(Greater)),
                BinOp::Le => Value::Bool(matches!(cmp(&l, &r), Some(Less | Equal))),
                BinOp::Ge => Value::Bool(matches!(cmp(&l, &r), Some(Greater | Equal))),
                _ => match (&l, &r) {
                    (Value::Int(a), Value::Int(b)) => Value::Int(
                        match op {
                            BinOp::Add => a.checked_add(*b),
                            BinOp::Sub => a.checked_sub(*b),
                            BinOp::Mul => a.checked_mul(*b),
                            _ => a.checked_div(*b),
                        }
                        .ok_or(OracleError)?,
                    ),
                    _ => {
                        let (a, b) = (num(&l), num(&r));
                        Value::Float(match op {
                            BinOp::Add => a + b,
                            BinOp::Sub => a - b,
                            BinOp::Mul => a * b,
                            _ if b == 0.0 => return Err(OracleError),
                            _ => a / b,
                        })
                    }
                },
            }
        }
    })
}

fn collect_aggs<'e>(e: &'e Expr, out: &mut Vec<&'e Expr>) {
    match e {
        Expr::Agg { .. } => out.push(e),
        Expr::Neg(x) | Expr::Not(x) => collect_aggs(x, out),
        Expr::Binary { left, right, .. } => {
            collect_aggs(left, out);
            collect_aggs(right, out);
        }
        _ => {}
    }
}

fn agg_value(e: &Expr, group: &[Env]) -> Result<Value, OracleError> {
    let Expr::Agg { func, arg } = e else {
        unreachable!()
    };
    let vals: Vec<Value> = match arg {
        AggArg::Star => return Ok(Value::Int(group.len() as i64)),
        AggArg::Column(c) => group.iter().map(|env| lookup(env, c)).collect(),
    };
    match func {
        AggFunc::Count => Ok(Value::Int(vals.len() as i64)),
        AggFunc::Sum => {
            let mut it = vals.into_iter();
            let Some(mut acc) = it.next() else {
                let AggArg::Column(c) = arg else {
                    unreachable!()
                };
                // zero of the column type: floats only live in t.f / u.v
                return Ok(if c.column == "f" || c.column == "v" {
                    Value::Float(0.0)
                } else {
                    Value::Int(0)
                });
            };
            for v in it {
                acc = match (acc, v) {
                    (Value::Int(a), Value::Int(b)) => {
                        Value::Int(a.checked_add(b).ok_or(OracleError)?)
                    }
                    (Value::Float(a), Value::Float(b)) => Value::Float(a + b),
                    _ => unreachable!(),
                };
            }
            Ok(acc)
        }
        AggFunc::Avg => {
            if vals.is_empty() {
                return Err(OracleError);
            }
            let mut s = -0.0;
            for v in &vals {
                s += num(v);
            }
            Ok(Value::Float(s / vals.len() as f64))
        }
        AggFunc::Min | AggFunc::Max => {
            let mut best: Option<Value> = None;
            for v in vals {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        let o = cmp(&v, b);
                        if *func == AggFunc::Min {
                            o == Some(std::cmp::Ordering::Less)
                        } else {
                            o == Some(std::cmp::Ordering::Greater)
                        }
                    }
                };
                if better {
                    best = Some(v);
                }
            }
            best.ok_or(OracleError)
        }
    }
}

/// Brute-force evaluation: nested-loop join, linear filter, group-by by linear search.
pub fn oracle(q: &Query, tables: &BTreeMap<String, TableData>) -> Result<Vec<Row>, OracleError> {
    let env_of = |name: &str, row: &Row| -> Env {
        let t = &tables[name];
        t.schema()
            .columns()
            .iter()
            .zip(row)
            .map(|(c, v)| (name.to_string(), c.name.clone(), v.clone()))
            .collect()
    };
    let mut envs: Vec<Env> = Vec::new();
    for l in tables[&q.from].rows() {
        match &q.join {
            None => envs.push(env_of(&q.from, l)),
            Some(j) => {
                for r in tables[&j.table].rows() {
                    let mut env = env_of(&q.from, l);
                    env.extend(env_of(&j.table, r));
                    if cmp(&lookup(&env, &j.left), &lookup(&env, &j.right))
                        == Some(std::cmp::Ordering::Equal)
                    {
                        envs.push(env);
                    }
                }
            }
        }
    }
    let empty = BTreeMap::new();
    let mut kept = Vec::new();
    for env in envs {
        let keep = match &q.filter {
            None => true,
            Some(f) => eval(f, &env, &empty)? == Value::Bool(true),
        };
        if keep {
            kept.push(env);
        }
    }
    if !q.is_aggregate() {
        return kept
            .iter()
            .map(|env| {
                q.select
                    .iter()
                    .map(|i| eval(&i.expr, env, &empty))
                    .collect()
            })
            .collect();
    }
    let mut groups: Vec<(Vec<Value>, Vec<Env>)> = Vec::new();
    for env in kept {
        let key: Vec<Value> = q.group_by.iter().map(|c| lookup(&env, c)).collect();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(env),
            None => groups.push((key, vec![env])),
        }
    }
    if q.group_by.is_empty() && groups.is_empty() {
        groups.push((vec![], vec![]));
    }
    let mut out = Vec::new();
    for (_, members) in &groups {
        let mut aggs = BTreeMap::new();
        for item in &q.select {
            let mut found = Vec::new();
            collect_aggs(&item.expr, &mut found);
            for a in found {
                aggs.insert(a.to_string(), agg_value(a, members)?);
            }
        }
        let first = members.first().cloned().unwrap_or_default();
        out.push(
            q.select
                .iter()
                .map(|i| eval(&i.expr, &first, &aggs))
                .collect::<Result<Row, _>>()?,
        );
    }
    Ok(out)
}
