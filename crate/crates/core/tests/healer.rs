mod common;

use common::fixtures::*;
use lakekernel::catalog::{DiffStatus, MergeResult, MAIN};
use lakekernel::engine::PipelineSpec;
use lakekernel::governance::{Decision, Permission};
use lakekernel::healer::*;
use lakekernel::runner::{RunOptions, RunOutcome, RunReport};
use lakekernel::{LakeError, Lakehouse};

fn failed_run(lake: &Lakehouse) -> RunReport {
    lake.register_verifier(
        "admin",
        "has_rows",
        "taxi",
        "SELECT count(*) > 0 AS ok FROM child",
    )
    .unwrap();
    let r = lake.run(&spec(TAXI_DIV_ZERO), MAIN, &admin()).unwrap();
    assert!(matches!(r.outcome, RunOutcome::FailedOpen(_)));
    r
}

fn proposal(out: HealOutcome) -> Proposal {
    match out {
        HealOutcome::Proposal(p) => *p,
        other => panic!("expected proposal, got {other:?}"),
    }
}

#[test]
fn guard_patch_repairs_in_one_attempt() {
    let dir = tempfile::tempdir().unwrap();
    let lake = taxi_lake(dir.path());
    let failed = failed_run(&lake);
    let main = lake.head(MAIN).unwrap();
    let mut agent = baseline_agent(vec![spec(TAXI_GUARDED)]);
    let p = proposal(
        lake.heal("agent", &failed.run_id.to_string(), &mut agent, 3)
            .unwrap(),
    );
    assert_eq!(p.attempts, 1);
    assert_eq!(p.source_run, failed.run_id);
    assert!(p
        .verdicts
        .iter()
        .all(|v| v.verdict.is_pass() && v.evaluated_at == p.head));
    let changed: Vec<_> = p
        .diff
        .iter()
        .map(|d| (d.table.as_str(), d.status))
        .collect();
    assert_eq!(
        changed,
        [("child", DiffStatus::Added), ("parent", DiffStatus::Added)]
    );
    assert_eq!(lake.head(MAIN).unwrap(), main);

    assert!(matches!(
        lake.approve("agent", &p.branch),
        Err(LakeError::Denied(_))
    ));
    assert!(matches!(
        lake.approve("intern", &p.branch),
        Err(LakeError::Denied(_))
    ));
    assert_eq!(lake.head(MAIN).unwrap(), main);
    assert_eq!(
        lake.approve("admin", &p.branch).unwrap(),
        MergeResult::FastForward
    );
    assert_eq!(lake.head(MAIN).unwrap(), p.head);
    let s = lake.open_session(MAIN).unwrap();
    assert_eq!(
        lake.read_table("admin", &s, "child").unwrap().rows().len(),
        4
    );
}

#[test]
fn bad_then_good_repairs_on_second_attempt() {
    let dir = tempfile::tempdir().unwrap();
    let lake = taxi_lake(dir.path());
    let failed = failed_run(&lake);
    let mut agent = baseline_agent(vec![spec(TAXI_DIV_ZERO), spec(TAXI_GUARDED)]);
    let p = proposal(
        lake.heal("agent", &failed.run_id.to_string(), &mut agent, 5)
            .unwrap(),
    );
    assert_eq!(p.attempts, 2);
    assert_eq!(lake.get_proposal(&p.id.to_string()).unwrap(), p);
    assert_eq!(lake.get_proposal(&p.branch).unwrap(), p);
    assert_eq!(lake.list_proposals().unwrap(), vec![p]);
}

#[test]
fn zero_budget_gives_up_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let lake = taxi_lake(dir.path());
    let failed = failed_run(&lake);
    let branches = lake.branches().unwrap();
    let io = lake.store().io_counters();
    let mut agent = baseline_agent(vec![spec(TAXI_GUARDED)]);
    let out = lake
        .heal("agent", &failed.run_id.to_string(), &mut agent, 0)
        .unwrap();
    assert!(matches!(out, HealOutcome::GaveUp { ref history, .. } if history.is_empty()));
    assert_eq!(lake.branches().unwrap(), branches);
    assert_eq!(lake.store().io_counters(), io);
}

#[test]
fn empty_patch_list_gives_up_on_first_call() {
    let dir = tempfile::tempdir().unwrap();
    let lake = taxi_lake(dir.path());
    let failed = failed_run(&lake);
    let out = lake
        .heal(
            "agent",
            &failed.run_id.to_string(),
            &mut baseline_agent(vec![]),
            3,
        )
        .unwrap();
    assert!(matches!(out, HealOutcome::GaveUp { ref history, .. } if history.is_empty()));
}

#[test]
fn non_whitelisted_patch_counts_against_budget() {
    let dir = tempfile::tempdir().unwrap();
    let lake = taxi_lake(dir.path());
    let failed = failed_run(&lake);
    let main = lake.head(MAIN).unwrap();
    let evil = spec(&TAXI_GUARDED.replace("pandas==2.0", "evilpkg==1.0"));
    let branches = lake.branches().unwrap();
    let mut agent = baseline_agent(vec![evil.clone()]);
    let out = lake
        .heal("agent", &failed.run_id.to_string(), &mut agent, 1)
        .unwrap();
    let HealOutcome::GaveUp { history, .. } = out else {
        panic!()
    };
    assert_eq!(history.len(), 1);
    assert!(matches!(&history[0].outcome, RunOutcome::Denied(m) if m.contains("evilpkg==1.0")));
    assert_eq!(lake.branches().unwrap(), branches);
    assert_eq!(lake.head(MAIN).unwrap(), main);

    let mut agent = baseline_agent(vec![evil, spec(TAXI_GUARDED)]);
    let p = proposal(
        lake.heal("agent", &failed.run_id.to_string(), &mut agent, 2)
            .unwrap(),
    );
    assert_eq!(p.attempts, 2);
}

#[test]
fn renamed_pipeline_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let lake = taxi_lake(dir.path());
    let failed = failed_run(&lake);
    let renamed = spec(&TAXI_GUARDED.replace("pipeline taxi", "pipeline other"));
    let out = lake
        .heal(
            "agent",
            &failed.run_id.to_string(),
            &mut baseline_agent(vec![renamed]),
            1,
        )
        .unwrap();
    let HealOutcome::GaveUp { history, .. } = out else {
        panic!()
    };
    assert!(matches!(&history[0].outcome, RunOutcome::Denied(m) if m.contains("renames")));
    assert_eq!(history[0].run_id, None);
}

#[test]
fn advanced_proposal_branch_is_stale() {
    let dir = tempfile::tempdir().unwrap();
    let lake = taxi_lake(dir.path());
    let failed = failed_run(&lake);
    let main = lake.head(MAIN).unwrap();
    let p = proposal(
        lake.heal(
            "agent",
            &failed.run_id.to_string(),
            &mut baseline_agent(vec![spec(TAXI_GUARDED)]),
            1,
        )
        .unwrap(),
    );
    lake.write_table("agent", &p.branch, "child", &zones(), "sneak")
        .unwrap();
    assert!(matches!(
        lake.approve("admin", &p.branch),
        Err(LakeError::StaleProposal { .. })
    ));
    assert_eq!(lake.head(MAIN).unwrap(), main);
}

#[test]
fn only_failed_runs_are_healable() {
    let dir = tempfile::tempdir().unwrap();
    let lake = taxi_lake(dir.path());
    let ok = lake.run(&spec(TAXI), MAIN, &admin()).unwrap();
    let mut agent = baseline_agent(vec![]);
    assert!(matches!(
        lake.heal("agent", &ok.run_id.to_string(), &mut agent, 1),
        Err(LakeError::NotHealable { .. })
    ));
    assert!(matches!(
        lake.heal(
            "agent",
            "00000000-0000-4000-8000-000000000000",
            &mut agent,
            1
        ),
        Err(LakeError::UnknownRun(_))
    ));
    let failed = lake.run(&spec(TAXI_DIV_ZERO), MAIN, &admin()).unwrap();
    assert!(matches!(
        lake.heal("nobody", &failed.run_id.to_string(), &mut agent, 1),
        Err(LakeError::Denied(_))
    ));
    assert!(matches!(
        lake.approve("admin", "run/taxi/nope"),
        Err(LakeError::UnknownProposal(_))
    ));
}

/// Tries to publish directly, then gives up.
struct Rogue;

impl RepairAgent for Rogue {
    fn propose(
        &mut self,
        api: &AgentApi<'_>,
        ctx: &FailureContext,
        _: &PipelineSpec,
        _: &[Attempt],
    ) -> AgentAction {
        assert!(matches!(
            api.merge(&ctx.temp_branch, MAIN),
            Err(LakeError::Denied(_))
        ));
        assert!(matches!(
            api.write_table(MAIN, "child", &zones(), "x"),
            Err(LakeError::Denied(_))
        ));
        assert!(matches!(
            api.create_branch("main2", MAIN),
            Err(LakeError::Denied(_))
        ));
        let s = api.open_session(MAIN).unwrap();
        assert_eq!(api.read_table(&s, "taxi_zones").unwrap(), zones());
        AgentAction::GiveUp("no fix".into())
    }
}

#[test]
fn adversarial_agent_is_confined() {
    let dir = tempfile::tempdir().unwrap();
    let lake = taxi_lake(dir.path());
    let failed = failed_run(&lake);
    let main = lake.head(MAIN).unwrap();
    let before = lake.audit_log().unwrap().len();
    lake.heal("agent", &failed.run_id.to_string(), &mut Rogue, 3)
        .unwrap();
    let mut agent = baseline_agent(vec![spec(TAXI_DIV_ZERO), spec(TAXI_GUARDED)]);
    lake.heal("agent", &failed.run_id.to_string(), &mut agent, 3)
        .unwrap();
    assert_eq!(lake.head(MAIN).unwrap(), main);

    let records = &lake.audit_log().unwrap()[before..];
    let denied: Vec<_> = records
        .iter()
        .filter(|r| !r.decision.is_allow())
        .map(|r| r.api.as_str())
        .collect();
    assert_eq!(denied, ["merge", "write_table", "create_branch"]);
    for r in records.iter().filter(|r| r.decision == Decision::Allow) {
        assert_eq!(r.principal, "agent");
        for a in &r.actions {
            match a {
                Permission::CreateBranch(b) | Permission::WriteBranch(b) => {
                    assert!(b.starts_with("run/"), "{a}")
                }
                Permission::ReadTable { .. } | Permission::RunPipeline(_) => {}
                other => panic!("unexpected grant {other}"),
            }
        }
    }
}

#[test]
fn healing_is_deterministic() {
    let go = || {
        let dir = tempfile::tempdir().unwrap();
        let lake = taxi_lake(dir.path());
        let failed = failed_run(&lake);
        let mut agent = baseline_agent(vec![spec(TAXI_DIV_ZERO), spec(TAXI_GUARDED)]);
        // node timings are wall-clock measurements; everything else must match
        let mut p = proposal(
            lake.heal("agent", &failed.run_id.to_string(), &mut agent, 3)
                .unwrap(),
        );
        p.report.timings.clear();
        p
    };
    assert_eq!(go(), go());
}

#[test]
fn patches_load_in_file_name_order() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("2-good.pipe"), TAXI_GUARDED).unwrap();
    std::fs::write(dir.path().join("1-bad.pipe"), TAXI_DIV_ZERO).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    assert_eq!(
        load_patches(dir.path()).unwrap(),
        vec![spec(TAXI_DIV_ZERO), spec(TAXI_GUARDED)]
    );
}

#[test]
fn agent_cannot_run_with_merge() {
    let dir = tempfile::tempdir().unwrap();
    let lake = taxi_lake(dir.path());
    assert!(matches!(
        lake.run(&spec(TAXI_GUARDED), MAIN, &RunOptions::new("agent")),
        Err(LakeError::Denied(_))
    ));
}
