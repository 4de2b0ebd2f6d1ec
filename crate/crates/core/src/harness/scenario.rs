use serde::{Deserialize, Serialize};

use super::naive::naive_run;
use super::simulate::{
    agent_name, harness_lake, main_tables, read_scan, seed_lake, src_table, swarm_spec, SETUP,
};
use super::{check_isolation, event, merge_event, IsolationViolation, Op, Recorder, Trace};
use crate::catalog::{CommitId, MAIN};
use crate::lakehouse::{LakeError, Lakehouse};
use crate::runner::{RunObserver, RunOptions, RunReport};
use crate::store::{ColumnType, Schema, TableData, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig1Result {
    pub trace: Trace,
    /// Value of `b` read through the session opened before the update.
    pub pinned_read: i64,
    /// Value of `b` read through a new session after the update.
    pub live_read: i64,
}

fn balance(v: i64) -> TableData {
    let schema = Schema::of(&[("balance", ColumnType::Int64)]).expect("valid schema");
    TableData::new(schema, vec![vec![Value::Int(v)]]).expect("valid row")
}

fn read_balance(
    lake: &Lakehouse,
    principal: &str,
    session: &crate::catalog::ReadSession,
) -> Result<i64, LakeError> {
    match lake.read_table(principal, session, "b")?.rows() {
        [row] => match row[0] {
            Value::Int(v) => Ok(v),
            _ => Err(LakeError::InvalidArgument(
                "b.balance is not an integer".into(),
            )),
        },
        _ => Err(LakeError::InvalidArgument("b should hold one row".into())),
    }
}

/// A reader pins a session at B = 500, a writer then commits B = 300; the
/// pinned read still returns 500.
pub fn scenario_fig1() -> Result<Fig1Result, LakeError> {
    let dir = tempfile::tempdir()?;
    let lake = harness_lake(dir.path(), 1, 2)?;
    lake.write_table(SETUP, MAIN, "a", &balance(100), "open a")?;
    lake.write_table(SETUP, MAIN, "b", &balance(500), "open b")?;
    let initial = main_tables(&lake)?;
    let rec = Recorder::default();
    let (reader, writer) = (agent_name(0), agent_name(1));

    let session = lake.open_session(MAIN)?;
    let mut w = event(1, Op::Commit);
    w.head_before = Some(lake.head(MAIN)?);
    lake.write_table(
        &writer,
        MAIN,
        "b",
        &balance(500 - 200),
        "withdraw 200 from b",
    )?;
    w.published = Some(main_tables(&lake)?);
    w.outcome = "ok".into();
    rec.push(w);

    let mut r = event(0, Op::ReadSessionScan);
    r.head_before = Some(session.pinned.clone());
    r.session = Some(session.pinned.clone());
    for t in ["a", "b"] {
        let data = lake.read_table(&reader, &session, t)?;
        r.reads.insert(
            t.into(),
            crate::store::SnapshotId::of_bytes(&crate::store::encode_table(&data)),
        );
    }
    r.outcome = "ok".into();
    rec.push(r);
    let pinned_read = read_balance(&lake, &reader, &session)?;
    let live_read = read_balance(&lake, &reader, &lake.open_session(MAIN)?)?;
    Ok(Fig1Result {
        trace: Trace {
            target: MAIN.into(),
            seed: 1,
            initial,
            final_state: main_tables(&lake)?,
            events: rec.into_events(),
        },
        pinned_read,
        live_read,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Naive,
    Transactional,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fig2Result {
    pub variant: Variant,
    pub fault: bool,
    pub trace: Trace,
    pub main_before: CommitId,
    pub main_after: CommitId,
    /// Ref updates of main during the scenario.
    pub main_ref_moves: usize,
    /// Commits on the run's temp branch beyond its fork point.
    pub temp_commits: Option<usize>,
    pub report: Option<RunReport>,
    pub isolation: Result<(), Vec<IsolationViolation>>,
}

/// Reads all of main after every node commit and before the merge.
struct Reader<'a> {
    lake: &'a Lakehouse,
    rec: &'a Recorder,
}

impl Reader<'_> {
    fn scan(&self) {
        let e = read_scan(self.lake, 1, &agent_name(1)).unwrap_or_else(|err| {
            let mut e = event(1, Op::ReadSessionScan);
            e.outcome = format!("error: {err}");
            e
        });
        self.rec.push(e);
    }
}

impl RunObserver for Reader<'_> {
    fn after_node_commit(&self, _: &RunReport, _: &str, _: &CommitId) {
        self.scan();
    }

    fn before_merge(&self, _: &RunReport) {
        self.scan();
    }
}

/// Two-node pipeline `a -> b` over `src`, with a reader scanning main after
/// each node commit. With `fault`, execution stops after node `a`.
pub fn scenario_fig2(variant: Variant, fault: bool) -> Result<Fig2Result, LakeError> {
    let dir = tempfile::tempdir()?;
    let lake = seed_lake(dir.path(), 2, 2)?;
    // New source data, so the pipeline produces new versions of a and b.
    lake.write_table(SETUP, MAIN, "src", &src_table(10), "refresh src")?;
    let initial = main_tables(&lake)?;
    let main_before = lake.head(MAIN)?;
    let reflog_start = lake.catalog().reflog()?.len();
    let rec = Recorder::default();
    let reader = Reader {
        lake: &lake,
        rec: &rec,
    };
    let runner = agent_name(0);
    let mut report = None;
    let mut temp_commits = None;

    match variant {
        Variant::Transactional => {
            let mut opts = RunOptions::new(&runner);
            if fault {
                opts = opts.fail_after("a");
            }
            let mut e = event(0, Op::RunPipeline);
            e.head_before = Some(main_before.clone());
            let r = lake.run_observed(&swarm_spec(), MAIN, &opts, &reader)?;
            e.run_id = Some(r.run_id);
            e.outcome = r.outcome.to_string();
            if let Some(info) = &r.merge {
                let m = merge_event(lake.catalog(), info)?;
                if m.moved_target() {
                    e.published = Some(lake.catalog().get_commit(&m.target_after)?.tables.clone());
                }
                e.merge = Some(m);
            }
            rec.push(e);
            let forked = lake.log(main_before.as_str())?.len();
            temp_commits = Some(lake.log(&r.temp_branch)?.len() - forked);
            report = Some(r);
        }
        Variant::Naive => {
            let mut e = event(0, Op::NaiveRun);
            e.head_before = Some(main_before.clone());
            let completed = naive_run(
                &lake,
                &swarm_spec(),
                MAIN,
                &runner,
                fault.then_some("a"),
                &mut || reader.scan(),
            )?;
            e.outcome = if completed { "completed" } else { "failed" }.into();
            if completed {
                e.published = Some(main_tables(&lake)?);
            }
            rec.push(e);
        }
    }
    reader.scan();

    let main_ref_moves = lake.catalog().reflog()?[reflog_start..]
        .iter()
        .filter(|u| u.branch == MAIN)
        .count();
    let trace = Trace {
        target: MAIN.into(),
        seed: 2,
        initial,
        final_state: main_tables(&lake)?,
        events: rec.into_events(),
    };
    Ok(Fig2Result {
        variant,
        fault,
        isolation: check_isolation(&trace),
        trace,
        main_before,
        main_after: lake.head(MAIN)?,
        main_ref_moves,
        temp_commits,
        report,
    })
}
