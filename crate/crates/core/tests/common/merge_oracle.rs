//! Random small commit histories and a brute-force three-way merge oracle.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use lakekernel::catalog::{Catalog, CommitId, TableChange, TableMap, MAIN};
use lakekernel::id::Clock;
use lakekernel::store::{ColumnType, Schema, SnapshotId, Store, TableData, Value};

use super::Rng;

/// Clock that advances by one on every reading.
pub struct TickClock(pub AtomicI64);

impl Clock for TickClock {
    fn now(&self) -> i64 {
        self.0.fetch_add(1, Ordering::SeqCst)
    }
}

pub fn tick_catalog(dir: &std::path::Path) -> Catalog {
    let store = Arc::new(Store::open(dir).unwrap());
    let cat = Catalog::open(dir, store, Arc::new(TickClock(AtomicI64::new(1)))).unwrap();
    cat.init("tester").unwrap();
    cat
}

pub fn snapshot(store: &Store, v: i64) -> SnapshotId {
    let t = TableData::new(
        Schema::of(&[("x", ColumnType::Int64)]).unwrap(),
        vec![vec![Value::Int(v)]],
    )
    .unwrap();
    store.put_snapshot(&t).unwrap()
}

const TABLES: &[&str] = &["t0", "t1", "t2", "t3"];
pub const BRANCHES: &[&str] = &[MAIN, "b1", "b2"];

/// Builds a random history over a handful of tables and three branches,
/// including merges between them. Returns (source, target) branch names.
pub fn random_history(rng: &mut Rng, cat: &Catalog) -> (String, String) {
    let snaps: Vec<SnapshotId> = (0..4).map(|v| snapshot(cat.store(), v)).collect();
    for b in &BRANCHES[1..] {
        cat.create_branch(b, MAIN).unwrap();
    }
    let steps = 2 + rng.below(9);
    for _ in 0..steps {
        let branch = *rng.pick(BRANCHES);
        if rng.chance(1, 4) {
            let other = *rng.pick(BRANCHES);
            if other != branch {
                cat.merge(other, branch, "tester").unwrap();
            }
            continue;
        }
        let head = cat.head(branch).unwrap();
        let current = cat.get_commit(&head).unwrap().tables.clone();
        let mut changes = BTreeMap::new();
        for _ in 0..1 + rng.below(2) {
            let t = *rng.pick(TABLES);
            let change = if current.contains_key(t) && rng.chance(1, 4) {
                TableChange::Delete
            } else {
                TableChange::Put(rng.pick(&snaps).clone())
            };
            changes.insert(t.to_string(), change);
        }
        cat.commit_tables(branch, &changes, &head, "tester", "step")
            .unwrap();
    }
    let source = rng.pick(BRANCHES).to_string();
    let mut target = rng.pick(BRANCHES).to_string();
    if target == source && rng.chance(3, 4) {
        target = BRANCHES.iter().find(|b| **b != source).unwrap().to_string();
    }
    (source, target)
}

fn ancestors(cat: &Catalog, id: &CommitId) -> HashSet<CommitId> {
    let mut seen = HashSet::new();
    let mut stack = vec![id.clone()];
    while let Some(c) = stack.pop() {
        if seen.insert(c.clone()) {
            stack.extend(cat.get_commit(&c).unwrap().parents.iter().cloned());
        }
    }
    seen
}

/// Lowest common ancestor by definition: a common ancestor that is not a
/// proper ancestor of another common ancestor.
pub fn oracle_merge_base(cat: &Catalog, a: &CommitId, b: &CommitId) -> CommitId {
    let (aa, bb) = (ancestors(cat, a), ancestors(cat, b));
    let common: Vec<&CommitId> = aa.intersection(&bb).collect();
    let lowest: Vec<&CommitId> = common
        .iter()
        .filter(|c| {
            !common
                .iter()
                .any(|d| d != *c && ancestors(cat, d).contains(**c))
        })
        .copied()
        .collect();
    lowest
        .into_iter()
        .max_by(|x, y| {
            let (tx, ty) = (
                cat.get_commit(x).unwrap().timestamp,
                cat.get_commit(y).unwrap().timestamp,
            );
            tx.cmp(&ty).then_with(|| y.cmp(x))
        })
        .unwrap()
        .clone()
}

/// Per-table rule applied table by table.
pub fn oracle_three_way(
    base: &TableMap,
    source: &TableMap,
    target: &TableMap,
) -> Result<TableMap, Vec<String>> {
    let names: BTreeSet<&String> = base
        .keys()
        .chain(source.keys())
        .chain(target.keys())
        .collect();
    let mut out = TableMap::new();
    let mut conflicts = Vec::new();
    for n in names {
        let (b, s, t) = (base.get(n), source.get(n), target.get(n));
        let pick = if s == t {
            s
        } else if s == b {
            t
        } else if t == b {
            s
        } else {
            conflicts.push(n.clone());
            continue;
        };
        if let Some(id) = pick {
            out.insert(n.clone(), id.clone());
        }
    }
    if conflicts.is_empty() {
        Ok(out)
    } else {
        Err(conflicts)
    }
}

#[derive(Debug, PartialEq)]
pub enum Expected {
    /// Target unchanged.
    NoOp,
    /// Target moves to the source head.
    FastForward,
    Merged(TableMap),
    Conflict(Vec<String>),
}

pub fn expected_merge(cat: &Catalog, source: &str, target: &str) -> Expected {
    let (src, dst) = (cat.resolve(source).unwrap(), cat.head(target).unwrap());
    if src == dst {
        return Expected::NoOp;
    }
    let base = oracle_merge_base(cat, &src, &dst);
    if base == src {
        return Expected::NoOp;
    }
    let tables = |c: &CommitId| cat.get_commit(c).unwrap().tables.clone();
    match oracle_three_way(&tables(&base), &tables(&src), &tables(&dst)) {
        Err(c) => Expected::Conflict(c),
        Ok(_) if base == dst => Expected::FastForward,
        Ok(m) => Expected::Merged(m),
    }
}
