//! Reference executor. Pure: the only data it sees are the bindings passed in.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use super::ast::{AggFunc, BinOp, Query};
use super::plan::{check_query, AggSlot, CheckedQuery, RExpr};
use super::EngineError;
use crate::store::{ColumnType, Row, Schema, TableData, Value};

fn eval_err(msg: impl Into<String>) -> EngineError {
    EngineError::Eval(msg.into())
}

/// Executes `ast` over `bindings` (input name -> table).
///
/// Joins are inner equi-joins emitting pairs in (left row, right row) order;
/// GROUP BY output follows the first occurrence of each key.
pub fn execute_query(
    ast: &Query,
    bindings: &BTreeMap<String, TableData>,
) -> Result<TableData, EngineError> {
    let schemas: BTreeMap<String, Schema> = ast
        .inputs()
        .into_iter()
        .filter_map(|name| {
            bindings
                .get(name)
                .map(|t| (name.to_string(), t.schema().clone()))
        })
        .collect();
    let checked = check_query(ast, &schemas)?;
    run_checked(&checked, bindings)
}

pub(crate) fn run_checked(
    q: &CheckedQuery,
    bindings: &BTreeMap<String, TableData>,
) -> Result<TableData, EngineError> {
    let left = &bindings[&q.from];
    let rows: Vec<Row> = match &q.join {
        None => left.rows().to_vec(),
        Some(j) => join_rows(left, &bindings[&j.table], j.left_key, j.right_key),
    };

    let mut kept = Vec::with_capacity(rows.len());
    for row in rows {
        let keep = match &q.filter {
            Some(f) => eval(f, &row, &[])?.as_bool().expect("type-checked bool"),
            None => true,
        };
        if keep {
            kept.push(row);
        }
    }

    let mut out = Vec::new();
    if q.aggregate {
        for group in group_rows(&kept, &q.group_keys) {
            let aggs = q
                .aggs
                .iter()
                .map(|slot| aggregate(slot, &group))
                .collect::<Result<Vec<_>, _>>()?;
            let empty = Vec::new();
            let first = group.first().copied().unwrap_or(&empty);
            out.push(
                q.items
                    .iter()
                    .map(|e| eval(e, first, &aggs))
                    .collect::<Result<Row, _>>()?,
            );
        }
    } else {
        for row in &kept {
            out.push(
                q.items
                    .iter()
                    .map(|e| eval(e, row, &[]))
                    .collect::<Result<Row, _>>()?,
            );
        }
    }
    TableData::new(q.output.clone(), out)
        .map_err(|e| eval_err(format!("result does not match planned schema: {e}")))
}

fn join_rows(left: &TableData, right: &TableData, lk: usize, rk: usize) -> Vec<Row> {
    let concat = |l: &Row, r: &Row| -> Row { l.iter().chain(r.iter()).cloned().collect() };
    let hashable = |t: &TableData, k: usize| t.schema().columns()[k].ty != ColumnType::Float64;
    let mut out = Vec::new();
    let same_type = left.schema().columns()[lk].ty == right.schema().columns()[rk].ty;
    if same_type && hashable(left, lk) {
        let mut index: HashMap<&Value, Vec<usize>> = HashMap::new();
        for (i, r) in right.rows().iter().enumerate() {
            index.entry(&r[rk]).or_default().push(i);
        }
        for l in left.rows() {
            if let Some(matches) = index.get(&l[lk]) {
                for &i in matches {
                    out.push(concat(l, &right.rows()[i]));
                }
            }
        }
    } else {
        for l in left.rows() {
            for r in right.rows() {
                if compare(&l[lk], &r[rk]) == Some(Ordering::Equal) {
                    out.push(concat(l, r));
                }
            }
        }
    }
    out
}

fn group_rows<'a>(rows: &'a [Row], keys: &[usize]) -> Vec<Vec<&'a Row>> {
    if keys.is_empty() {
        return vec![rows.iter().collect()];
    }
    let mut index: HashMap<Vec<&Value>, usize> = HashMap::new();
    let mut groups: Vec<Vec<&Row>> = Vec::new();
    for row in rows {
        let key: Vec<&Value> = keys.iter().map(|&k| &row[k]).collect();
        let slot = *index.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(row);
    }
    groups
}

fn aggregate(slot: &AggSlot, group: &[&Row]) -> Result<Value, EngineError> {
    let values = || {
        group
            .iter()
            .map(|r| &r[slot.col.expect("column aggregate")])
    };
    match slot.func {
        AggFunc::Count => Ok(Value::Int(group.len() as i64)),
        AggFunc::Sum => {
            let mut acc: Option<Value> = None;
            for v in values() {
                acc = Some(match (acc, v) {
                    (None, v) => v.clone(),
                    (Some(Value::Int(a)), Value::Int(b)) => Value::Int(
                        a.checked_add(*b)
                            .ok_or_else(|| eval_err("integer overflow in sum()"))?,
                    ),
                    (Some(Value::Float(a)), Value::Float(b)) => Value::Float(a + b),
                    _ => unreachable!("type-checked numeric column"),
                });
            }
            Ok(acc.unwrap_or(match slot.input_type {
                Some(ColumnType::Float64) => Value::Float(0.0),
                _ => Value::Int(0),
            }))
        }
        AggFunc::Avg => {
            if group.is_empty() {
                return Err(eval_err("avg() over empty input"));
            }
            let sum: f64 = values().map(|v| v.as_f64().expect("numeric")).sum();
            Ok(Value::Float(sum / group.len() as f64))
        }
        AggFunc::Min | AggFunc::Max => {
            let want = if slot.func == AggFunc::Min {
                Ordering::Less
            } else {
                Ordering::Greater
            };
            let mut best: Option<&Value> = None;
            for v in values() {
                best = match best {
                    Some(b) if compare(v, b) != Some(want) => Some(b),
                    _ => Some(v),
                };
            }
            best.cloned()
                .ok_or_else(|| eval_err(format!("{}() over empty input", slot.func.name())))
        }
    }
}

pub(crate) fn compare(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => Some(x.cmp(y)),
        (Value::Str(x), Value::Str(y)) => Some(x.cmp(y)),
        (Value::Bool(x), Value::Bool(y)) => Some(x.cmp(y)),
        _ => a.as_f64()?.partial_cmp(&b.as_f64()?),
    }
}

fn eval(e: &RExpr, row: &[Value], aggs: &[Value]) -> Result<Value, EngineError> {
    Ok(match e {
        RExpr::Lit(v) => v.clone(),
        RExpr::Col(i) => row[*i].clone(),
        RExpr::Agg(i) => aggs[*i].clone(),
        RExpr::Neg(inner) => match eval(inner, row, aggs)? {
            Value::Int(i) => Value::Int(
                i.checked_neg()
                    .ok_or_else(|| eval_err("integer overflow in negation"))?,
            ),
            Value::Float(x) => Value::Float(-x),
            _ => unreachable!("type-checked numeric"),
        },
        RExpr::Not(inner) => Value::Bool(!eval(inner, row, aggs)?.as_bool().expect("bool")),
        RExpr::Bin(op, l, r) => {
            let lv = eval(l, row, aggs)?;
            match op {
                BinOp::And if lv == Value::Bool(false) => return Ok(lv),
                BinOp::Or if lv == Value::Bool(true) => return Ok(lv),
                _ => {}
            }
            let rv = eval(r, row, aggs)?;
            binary(*op, &lv, &rv)?
        }
    })
}

pub(crate) fn binary(op: BinOp, l: &Value, r: &Value) -> Result<Value, EngineError> {
    if op.is_comparison() {
        let ord = compare(l, r);
        let b = match op {
            BinOp::Eq => ord == Some(Ordering::Equal),
            BinOp::Ne => ord != Some(Ordering::Equal),
            BinOp::Lt => ord == Some(Ordering::Less),
            BinOp::Le => matches!(ord, Some(Ordering::Less | Ordering::Equal)),
            BinOp::Gt => ord == Some(Ordering::Greater),
            BinOp::Ge => matches!(ord, Some(Ordering::Greater | Ordering::Equal)),
            _ => unreachable!(),
        };
        return Ok(Value::Bool(b));
    }
    match op {
        BinOp::And => return Ok(Value::Bool(l.as_bool().unwrap() && r.as_bool().unwrap())),
        BinOp::Or => return Ok(Value::Bool(l.as_bool().unwrap() || r.as_bool().unwrap())),
        _ => {}
    }
    if let (Value::Int(a), Value::Int(b)) = (l, r) {
        let overflow = || eval_err(format!("integer overflow in {a} {} {b}", op.symbol()));
        return Ok(Value::Int(match op {
            BinOp::Add => a.checked_add(*b).ok_or_else(overflow)?,
            BinOp::Sub => a.checked_sub(*b).ok_or_else(overflow)?,
            BinOp::Mul => a.checked_mul(*b).ok_or_else(overflow)?,
            BinOp::Div => {
                if *b == 0 {
                    return Err(eval_err("division by zero"));
                }
                a.checked_div(*b).ok_or_else(overflow)?
            }
            _ => unreachable!(),
        }));
    }
    let (a, b) = (l.as_f64().expect("numeric"), r.as_f64().expect("numeric"));
    Ok(Value::Float(match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b == 0.0 {
                return Err(eval_err("division by zero"));
            }
            a / b
        }
        _ => unreachable!(),
    }))
}
