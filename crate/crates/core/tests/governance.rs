mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use common::fixtures::*;
use common::Rng;
use lakekernel::catalog::MAIN;
use lakekernel::governance::{Decision, Permission, Policy};
use lakekernel::healer::baseline_agent;
use lakekernel::runner::RunOptions;
use lakekernel::{LakeConfig, LakeError, Lakehouse};

/// Straightforward recursive glob, independent of the library matcher.
fn glob(p: &[u8], t: &[u8]) -> bool {
    match (p.first(), t.first()) {
        (None, None) => true,
        (Some(b'*'), _) => glob(&p[1..], t) || (!t.is_empty() && glob(p, &t[1..])),
        (Some(b'?'), Some(_)) => glob(&p[1..], &t[1..]),
        (Some(a), Some(b)) if a == b => glob(&p[1..], &t[1..]),
        _ => false,
    }
}

fn oracle_allows(
    roles: &[(String, Vec<String>)],
    principal_roles: &[String],
    action: &str,
) -> bool {
    let (kind, args) = action.split_once(':').unwrap_or((action, ""));
    principal_roles.iter().any(|r| {
        roles.iter().filter(|(n, _)| n == r).any(|(_, perms)| {
            perms.iter().any(|p| {
                let (pk, pa) = p.split_once(':').unwrap_or((p.as_str(), ""));
                pk == kind
                    && pa.split(':').count() == args.split(':').count()
                    && pa
                        .split(':')
                        .zip(args.split(':'))
                        .all(|(g, a)| glob(g.as_bytes(), a.as_bytes()))
            })
        })
    })
}

const NAMES: &[&str] = &[
    "main",
    "dev",
    "run/taxi/1",
    "run/x/2",
    "taxi",
    "trips",
    "a.b",
    "m?n",
];
const GLOBS: &[&str] = &[
    "*",
    "main",
    "run/*",
    "run/taxi/?",
    "t*",
    "*s",
    "?ev",
    "a.b",
    "m?n",
    "*/*/*",
];
const KINDS: &[&str] = &[
    "ReadTable",
    "WriteBranch",
    "CreateBranch",
    "MergeInto",
    "RunPipeline",
    "RegisterVerifier",
    "ManagePolicy",
];

fn random_perm(rng: &mut Rng, pool: &[&str]) -> String {
    let kind = *rng.pick(KINDS);
    match kind {
        "ReadTable" => format!("{kind}:{}:{}", rng.pick(pool), rng.pick(pool)),
        "RegisterVerifier" | "ManagePolicy" => kind.to_string(),
        _ => format!("{kind}:{}", rng.pick(pool)),
    }
}

#[test]
fn authorize_matches_brute_force_on_random_policies() {
    let mut rng = Rng(42);
    for _ in 0..300 {
        let roles: Vec<(String, Vec<String>)> = (0..1 + rng.below(3))
            .map(|i| {
                (
                    format!("r{i}"),
                    (0..rng.below(4))
                        .map(|_| random_perm(&mut rng, GLOBS))
                        .collect(),
                )
            })
            .collect();
        let mine: Vec<String> = roles
            .iter()
            .filter(|_| rng.chance(1, 2))
            .map(|(n, _)| n.clone())
            .collect();
        let mut text = String::from("[[principal]]\nname = \"p\"\nroles = [");
        text += &mine
            .iter()
            .map(|r| format!("\"{r}\""))
            .collect::<Vec<_>>()
            .join(", ");
        text += "]\n";
        for (n, perms) in &roles {
            text += &format!("[[role]]\nname = \"{n}\"\npermissions = [");
            text += &perms
                .iter()
                .map(|p| format!("\"{p}\""))
                .collect::<Vec<_>>()
                .join(", ");
            text += "]\n";
        }
        let policy = Policy::parse(&text).unwrap();
        for _ in 0..20 {
            let action = random_perm(&mut rng, NAMES);
            let got = policy.authorize("p", &action.parse().unwrap()).is_allow();
            assert_eq!(
                got,
                oracle_allows(&roles, &mine, &action),
                "{text}\n{action}"
            );
            assert!(!policy.authorize("q", &action.parse().unwrap()).is_allow());
        }
    }
}

#[test]
fn policy_file_format() {
    let p = Policy::parse(POLICY).unwrap();
    let read: Permission = "ReadTable:main:taxi_trips".parse().unwrap();
    assert!(p.authorize("intern", &read).is_allow());
    assert_eq!(
        p.authorize("agent", &Permission::MergeInto(MAIN.into())),
        Decision::Deny("agent lacks MergeInto:main".into())
    );
    assert!(Policy::parse("[[role]]\nname = \"r\"\npermissions = [\"Teleport:*\"]\n").is_err());
    assert!(Policy::parse("[[principal]]\nname = \"x\"\nroles = [\"ghost\"]\n").is_err());
    assert!(Policy::parse("whitelist = [\"pandas\"]\n").is_err());
    assert!(Policy::parse("bogus = 1\n").is_err());
}

fn deny_all_lake(dir: &std::path::Path) -> Lakehouse {
    let lake = Lakehouse::open(LakeConfig::deterministic(dir, 1, 1_700_000_000)).unwrap();
    lake.init("admin").unwrap();
    lake
}

#[test]
fn default_policy_blocks_every_mutating_call() {
    let dir = tempfile::tempdir().unwrap();
    let lake = deny_all_lake(dir.path());
    let main = lake.head(MAIN).unwrap();
    let s = lake.open_session(MAIN).unwrap();
    let p = "admin";
    let calls: Vec<(&str, Result<(), LakeError>)> = vec![
        (
            "create_branch",
            lake.create_branch(p, "dev", MAIN).map(drop),
        ),
        ("delete_branch", lake.delete_branch(p, MAIN)),
        (
            "write_table",
            lake.write_table(p, MAIN, "t", &zones(), "m").map(drop),
        ),
        ("merge", lake.merge(p, MAIN, MAIN).map(drop)),
        (
            "run",
            lake.run(&spec(TAXI), MAIN, &RunOptions::new(p)).map(drop),
        ),
        (
            "run_held",
            lake.run(&spec(TAXI), MAIN, &RunOptions::new(p).without_merge())
                .map(drop),
        ),
        (
            "register_verifier",
            lake.register_verifier(p, "v", "*", "SELECT TRUE FROM t")
                .map(drop),
        ),
        ("reload_policy", lake.reload_policy(p)),
        ("read_table", lake.read_table(p, &s, "t").map(drop)),
        ("query", lake.query(p, &s, "SELECT a FROM t").map(drop)),
    ];
    for (name, r) in calls {
        assert!(matches!(r, Err(LakeError::Denied(_))), "{name}: {r:?}");
    }
    assert_eq!(lake.head(MAIN).unwrap(), main);
    assert_eq!(lake.branches().unwrap().len(), 1);
    assert_eq!(lake.store().io_counters().data_writes, 0);
}

#[test]
fn heal_cleanup_and_approve_are_denied_without_grants() {
    let dir = tempfile::tempdir().unwrap();
    let lake = taxi_lake(dir.path());
    lake.register_verifier(
        "admin",
        "has_rows",
        "taxi",
        "SELECT count(*) > 0 AS ok FROM child",
    )
    .unwrap();
    let failed = lake.run(&spec(TAXI_DIV_ZERO), MAIN, &admin()).unwrap();
    let id = failed.run_id.to_string();
    let mut agent = baseline_agent(vec![spec(TAXI_GUARDED)]);
    let out = lake.heal("agent", &id, &mut agent, 1).unwrap();
    let lakekernel::healer::HealOutcome::Proposal(p) = out else {
        panic!()
    };
    // swap to the empty policy
    std::fs::write(dir.path().join("policy.toml"), POLICY).unwrap();
    lake.policy().replace(Policy::deny_all());
    assert!(matches!(
        lake.heal("agent", &id, &mut agent, 1),
        Err(LakeError::Denied(_))
    ));
    assert!(matches!(
        lake.cleanup_temp("admin", &id),
        Err(LakeError::Denied(_))
    ));
    assert!(matches!(
        lake.approve("admin", &p.branch),
        Err(LakeError::Denied(_))
    ));
    assert!(matches!(
        lake.verify_run("admin", &p.id.to_string()),
        Err(LakeError::Denied(_))
    ));
}

#[test]
fn one_audit_record_per_call() {
    let dir = tempfile::tempdir().unwrap();
    let lake = taxi_lake(dir.path());
    let n = std::cell::Cell::new(lake.audit_log().unwrap().len());
    let step = |label: &str, expected_allow: bool| {
        let log = lake.audit_log().unwrap();
        assert_eq!(log.len(), n.get() + 1, "{label}");
        let last = log.last().unwrap();
        assert_eq!(last.decision.is_allow(), expected_allow, "{label}");
        assert_eq!(last.seq as usize, log.len(), "{label}");
        n.set(log.len());
    };
    let s = lake.open_session(MAIN).unwrap();
    lake.create_branch("admin", "dev", MAIN).unwrap();
    step("create_branch", true);
    assert!(lake.create_branch("admin", "dev", MAIN).is_err());
    step("create_branch exists", true);
    lake.write_table("admin", "dev", "z", &zones(), "m")
        .unwrap();
    step("write_table", true);
    lake.read_table("intern", &s, "taxi_zones").unwrap();
    step("read_table", true);
    lake.query(
        "intern",
        &s,
        "SELECT taxi_trips.fare FROM taxi_trips JOIN taxi_zones ON taxi_trips.zone_id = taxi_zones.zone_id",
    )
    .unwrap();
    step("query", true);
    assert_eq!(lake.audit_log().unwrap().last().unwrap().actions.len(), 2);
    lake.merge("intern", "dev", MAIN).unwrap_err();
    step("merge denied", false);
    lake.merge("admin", "dev", MAIN).unwrap();
    step("merge", true);
    lake.run(&spec(TAXI), MAIN, &admin()).unwrap();
    step("run", true);
    lake.run(&spec(TAXI), MAIN, &admin().dry_run()).unwrap();
    step("dry run", true);
    lake.register_verifier("admin", "v", "*", "SELECT TRUE FROM child")
        .unwrap();
    step("register_verifier", true);
    lake.delete_branch("admin", "dev").unwrap();
    step("delete_branch", true);
    lake.reload_policy("admin").unwrap();
    step("reload_policy", true);
    // metadata reads are not audited
    lake.branches().unwrap();
    lake.log(MAIN).unwrap();
    lake.diff(MAIN, MAIN).unwrap();
    lake.list_runs().unwrap();
    lake.list_verifiers().unwrap();
    assert_eq!(lake.audit_log().unwrap().len(), n.get());
}

#[test]
fn concurrent_authorize_never_sees_half_a_policy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.toml");
    let grant = "[[principal]]\nname = \"p\"\nroles = [\"r\"]\n[[role]]\nname = \"r\"\npermissions = [\"WriteBranch:x\", \"MergeInto:x\"]\n";
    let none =
        "[[principal]]\nname = \"p\"\nroles = [\"r\"]\n[[role]]\nname = \"r\"\npermissions = []\n";
    std::fs::write(&path, grant).unwrap();
    let lake = Arc::new(Lakehouse::open(LakeConfig::new(dir.path())).unwrap());
    let stop = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let (lake, stop) = (lake.clone(), stop.clone());
            std::thread::spawn(move || {
                let mut seen = [0usize; 2];
                while !stop.load(Ordering::Relaxed) {
                    let p = lake.policy().current();
                    let w = p
                        .authorize("p", &Permission::WriteBranch("x".into()))
                        .is_allow();
                    let m = p
                        .authorize("p", &Permission::MergeInto("x".into()))
                        .is_allow();
                    assert_eq!(w, m);
                    seen[w as usize] += 1;
                }
                seen
            })
        })
        .collect();
    for i in 0..200 {
        std::fs::write(&path, if i % 2 == 0 { none } else { grant }).unwrap();
        lake.policy().reload().unwrap();
    }
    stop.store(true, Ordering::Relaxed);
    for r in readers {
        r.join().unwrap();
    }
    // a broken file keeps the previous policy
    std::fs::write(&path, "[[role]\n").unwrap();
    let before = lake.policy().current();
    assert!(lake.policy().reload().is_err());
    assert_eq!(*lake.policy().current(), *before);
}
