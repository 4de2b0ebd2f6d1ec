use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{event, merge_event, Event, Op, Recorder, Trace};
use crate::catalog::{TableMap, MAIN};
use crate::engine::{parse_pipeline, PipelineSpec};
use crate::id::splitmix64;
use crate::lakehouse::{LakeConfig, LakeError, Lakehouse};
use crate::runner::RunOptions;
use crate::store::{encode_table, ColumnType, Schema, SnapshotId, TableData, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mix {
    pub read_session_scan: u32,
    pub run_pipeline: u32,
    pub run_pipeline_with_fault: u32,
    pub branch_and_merge: u32,
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            read_session_scan: 4,
            run_pipeline: 2,
            run_pipeline_with_fault: 1,
            branch_and_merge: 2,
        }
    }
}

impl Mix {
    fn total(&self) -> u64 {
        [
            self.read_session_scan,
            self.run_pipeline,
            self.run_pipeline_with_fault,
            self.branch_and_merge,
        ]
        .iter()
        .map(|&w| u64::from(w))
        .sum()
    }

    fn pick(&self, r: u64) -> Op {
        let mut r = r % self.total();
        for (w, op) in [
            (self.read_session_scan, Op::ReadSessionScan),
            (self.run_pipeline, Op::RunPipeline),
            (self.run_pipeline_with_fault, Op::RunPipelineWithFault),
            (self.branch_and_merge, Op::BranchAndMerge),
        ] {
            if r < u64::from(w) {
                return op;
            }
            r -= u64::from(w);
        }
        unreachable!("r < total")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub n_agents: usize,
    pub ops_per_agent: usize,
    pub mix: Mix,
    pub seed: u64,
}

pub(crate) const SWARM: &str = "\
pipeline swarm
node a:
  inputs: src
  env: runtime=python3.10 packages=[pandas==2.0]
  materialize: REPLACE
  query: SELECT k, x * 2 AS y FROM src
node b:
  inputs: a
  env: runtime=python3.10 packages=[pandas==2.0]
  materialize: REPLACE
  query: SELECT count(*) AS n, sum(y) AS total FROM a
";

pub(crate) const SETUP: &str = "setup";

pub(crate) fn agent_name(i: usize) -> String {
    format!("agent{i}")
}

pub(crate) fn swarm_spec() -> PipelineSpec {
    parse_pipeline(SWARM).expect("built-in pipeline parses")
}

pub(crate) fn src_table(version: i64) -> TableData {
    let schema =
        Schema::of(&[("k", ColumnType::Int64), ("x", ColumnType::Int64)]).expect("valid schema");
    let rows = (1..=4)
        .map(|k| vec![Value::Int(k), Value::Int(version + k)])
        .collect();
    TableData::new(schema, rows).expect("valid rows")
}

/// A fresh, initialized lake where `setup` and every agent may read, run,
/// branch and merge into main.
pub(crate) fn harness_lake(dir: &Path, seed: u64, n_agents: usize) -> Result<Lakehouse, LakeError> {
    let lake = Lakehouse::open(LakeConfig::deterministic(dir, seed, 1_700_000_000))?;
    let mut policy = String::from("whitelist = [\"pandas==2.0\"]\n");
    for name in std::iter::once(SETUP.to_string()).chain((0..n_agents).map(agent_name)) {
        policy += &format!("[[principal]]\nname = \"{name}\"\nroles = [\"swarm\"]\n");
    }
    policy += "[[role]]\nname = \"swarm\"\npermissions = [\"ReadTable:*:*\", \"RunPipeline:*\", \
               \"CreateBranch:*\", \"WriteBranch:*\", \"MergeInto:main\"]\n";
    lake.policy()
        .replace(crate::governance::Policy::parse(&policy)?);
    lake.init(SETUP)?;
    Ok(lake)
}

/// [`harness_lake`] with `src` loaded and the swarm pipeline published once.
pub(crate) fn seed_lake(dir: &Path, seed: u64, n_agents: usize) -> Result<Lakehouse, LakeError> {
    let lake = harness_lake(dir, seed, n_agents)?;
    lake.write_table(SETUP, MAIN, "src", &src_table(0), "seed src")?;
    lake.run(&swarm_spec(), MAIN, &RunOptions::new(SETUP))?;
    Ok(lake)
}

pub(crate) fn main_tables(lake: &Lakehouse) -> Result<TableMap, LakeError> {
    let head = lake.head(MAIN)?;
    Ok(lake.catalog().get_commit(&head)?.tables.clone())
}

/// Reads every table of one session on main, recording content hashes.
pub(crate) fn read_scan(
    lake: &Lakehouse,
    agent: usize,
    principal: &str,
) -> Result<Event, LakeError> {
    let mut e = event(agent, Op::ReadSessionScan);
    let session = lake.open_session(MAIN)?;
    e.head_before = Some(session.pinned.clone());
    e.session = Some(session.pinned.clone());
    for t in lake.catalog().session_tables(&session)?.keys() {
        let data = lake.read_table(principal, &session, t)?;
        e.reads
            .insert(t.clone(), SnapshotId::of_bytes(&encode_table(&data)));
    }
    e.outcome = "ok".into();
    Ok(e)
}

fn run_op(lake: &Lakehouse, agent: usize, fault: bool) -> Result<Event, LakeError> {
    let principal = agent_name(agent);
    let mut e = event(
        agent,
        if fault {
            Op::RunPipelineWithFault
        } else {
            Op::RunPipeline
        },
    );
    e.head_before = Some(lake.head(MAIN)?);
    let mut opts = RunOptions::new(&principal);
    if fault {
        opts = opts.fail_after("a");
    }
    let report = lake.run(&swarm_spec(), MAIN, &opts)?;
    e.run_id = Some(report.run_id);
    e.outcome = report.outcome.to_string();
    if let Some(info) = &report.merge {
        let m = merge_event(lake.catalog(), info)?;
        if m.moved_target() {
            e.published = Some(lake.catalog().get_commit(&m.target_after)?.tables.clone());
        }
        e.merge = Some(m);
    }
    lake.cleanup_temp(&principal, &report.run_id.to_string())?;
    Ok(e)
}

fn branch_and_merge(
    lake: &Lakehouse,
    agent: usize,
    k: usize,
    value: i64,
) -> Result<Event, LakeError> {
    let principal = agent_name(agent);
    let branch = format!("work/{principal}/{k}");
    let mut e = event(agent, Op::BranchAndMerge);
    e.head_before = Some(lake.create_branch(&principal, &branch, MAIN)?);
    lake.write_table(&principal, &branch, "src", &src_table(value), "update src")?;
    let info = lake.merge_with_info(&principal, &branch, MAIN)?;
    let m = merge_event(lake.catalog(), &info)?;
    e.outcome = format!("{:?}", m.result);
    if m.moved_target() {
        e.published = Some(lake.catalog().get_commit(&m.target_after)?.tables.clone());
    }
    e.merge = Some(m);
    lake.delete_branch(&principal, &branch)?;
    Ok(e)
}

fn agent_loop(lake: &Lakehouse, rec: &Recorder, spec: &WorkloadSpec, agent: usize) {
    let mut state = spec.seed ^ (agent as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for k in 0..spec.ops_per_agent {
        let op = spec.mix.pick(splitmix64(&mut state));
        let result = match op {
            Op::ReadSessionScan => read_scan(lake, agent, &agent_name(agent)),
            Op::RunPipeline => run_op(lake, agent, false),
            Op::RunPipelineWithFault => run_op(lake, agent, true),
            Op::BranchAndMerge => {
                let value = (splitmix64(&mut state) % 1000) as i64;
                branch_and_merge(lake, agent, k, value)
            }
            Op::NaiveRun | Op::Commit => unreachable!("not in the mix"),
        };
        rec.push(result.unwrap_or_else(|err| {
            let mut e = event(agent, op);
            e.outcome = format!("error: {err}");
            e
        }));
    }
}

/// Runs the workload on a fresh temporary lake with one thread per agent.
/// Operation choices depend only on (seed, agent); interleavings do not.
pub fn simulate(spec: &WorkloadSpec) -> Result<Trace, LakeError> {
    if spec.mix.total() == 0 {
        return Err(LakeError::InvalidArgument(
            "workload mix weights sum to zero".into(),
        ));
    }
    let dir = tempfile::tempdir()?;
    let lake = seed_lake(dir.path(), spec.seed, spec.n_agents)?;
    let initial = main_tables(&lake)?;
    let rec = Recorder::default();
    std::thread::scope(|s| {
        for agent in 0..spec.n_agents {
            let (lake, rec) = (&lake, &rec);
            s.spawn(move || agent_loop(lake, rec, spec, agent));
        }
    });
    Ok(Trace {
        target: MAIN.to_string(),
        seed: spec.seed,
        initial,
        final_state: main_tables(&lake)?,
        events: rec.into_events(),
    })
}
