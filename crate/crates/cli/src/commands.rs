use std::fmt::Write as _;
use std::path::Path;

use lakekernel::engine::parse_pipeline;
use lakekernel::governance::Policy;
use lakekernel::harness::{self, Mix, SerialError, Trace, WorkloadSpec};
use lakekernel::healer::{baseline_agent, load_patches, HealOutcome};
use lakekernel::runner::{NodeStatus, RunOptions, RunOutcome, RunReport};
use lakekernel::store::{decode_table, encode_table, TableData};
use lakekernel::{LakeConfig, LakeError, Lakehouse};
use serde_json::{json, Value};

use crate::{BranchCmd, Cli, Command, ProposalsCmd, RunsCmd, SimulateArgs, TableCmd, VerifierCmd};

pub struct Output {
    pub json: Value,
    pub text: String,
    /// False maps to exit code 1 even though the command itself completed.
    pub ok: bool,
}

impl Output {
    fn ok(json: Value, text: String) -> Self {
        Output {
            json,
            text,
            ok: true,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain { kind: String, message: String },
}

impl CliError {
    pub fn kind(&self) -> &str {
        match self {
            CliError::Usage(_) => "Usage",
            CliError::Domain { kind, .. } => kind,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Domain { message: m, .. } => m,
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain { .. } => 1,
        }
    }
}

impl From<LakeError> for CliError {
    fn from(e: LakeError) -> Self {
        match e {
            LakeError::InvalidArgument(m) => CliError::Usage(m),
            e => CliError::Domain {
                kind: e.kind().to_string(),
                message: e.to_string(),
            },
        }
    }
}

fn io_err(what: &Path, e: std::io::Error) -> CliError {
    CliError::Domain {
        kind: "Io".into(),
        message: format!("{}: {e}", what.display()),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("records serialize")
}

struct Ctx {
    cli_policy: Option<std::path::PathBuf>,
    data_dir: std::path::PathBuf,
    principal: Option<String>,
}

impl Ctx {
    fn lake(&self) -> Result<Lakehouse, CliError> {
        let mut config = LakeConfig::new(&self.data_dir);
        if let Some(p) = &self.cli_policy {
            config = config.with_policy(p);
        }
        Ok(Lakehouse::open(config)?)
    }

    fn principal(&self) -> Result<&str, CliError> {
        self.principal.as_deref().ok_or_else(|| {
            CliError::Usage(
                "this command needs a principal: pass --as or set LAKE_PRINCIPAL".into(),
            )
        })
    }
}

pub fn execute(cli: Cli) -> Result<Output, CliError> {
    let ctx = Ctx {
        cli_policy: cli.policy,
        data_dir: cli.data_dir,
        principal: cli.principal,
    };
    match cli.command {
        Command::Init => init(&ctx),
        Command::Branch(b) => branch(&ctx, b),
        Command::Log { r#ref, limit } => log(&ctx, &r#ref, limit),
        Command::Diff { a, b } => {
            let changes = ctx.lake()?.diff(&a, &b)?;
            let mut text = String::new();
            for c in &changes {
                writeln!(text, "{:?}\t{}", c.status, c.table).unwrap();
            }
            Ok(Output::ok(
                json!({ "a": a, "b": b, "changes": changes }),
                text,
            ))
        }
        Command::Table(TableCmd::Import {
            name,
            csv,
            branch,
            message,
        }) => import(&ctx, &name, &csv, &branch, message),
        Command::Query { sql, r#ref } => query(&ctx, &sql, &r#ref),
        Command::Run {
            file,
            branch,
            fail_after,
            dry_run,
        } => run(&ctx, &file, &branch, fail_after, dry_run),
        Command::Merge { source, into } => {
            let lake = ctx.lake()?;
            let result = lake.merge(ctx.principal()?, &source, &into)?;
            let text = format!("merge {source} into {into}: {result:?}");
            Ok(Output {
                ok: result.is_success(),
                json: json!({ "source": source, "target": into, "result": result }),
                text,
            })
        }
        Command::Verifier(v) => verifier(&ctx, v),
        Command::Simulate(args) => simulate(args),
        Command::Check { trace } => check(&trace),
        Command::Heal {
            run,
            patches,
            budget,
        } => heal(&ctx, &run, &patches, budget),
        Command::Approve { proposal } => {
            let lake = ctx.lake()?;
            let p = lake.get_proposal(&proposal)?;
            let result = lake.approve(ctx.principal()?, &proposal)?;
            let text = format!("approve {} into {}: {result:?}", p.branch, p.target);
            Ok(Output {
                ok: result.is_success(),
                json: json!({ "proposal": p.branch, "target": p.target, "head": p.head, "result": result }),
                text,
            })
        }
        Command::Runs(r) => runs(&ctx, r),
        Command::Proposals(p) => proposals(&ctx, p),
    }
}

fn init(ctx: &Ctx) -> Result<Output, CliError> {
    let principal = ctx.principal()?;
    std::fs::create_dir_all(&ctx.data_dir).map_err(|e| io_err(&ctx.data_dir, e))?;
    let installed = ctx.data_dir.join("policy.toml");
    if let Some(p) = &ctx.cli_policy {
        Policy::load(p).map_err(LakeError::from)?;
        let same = std::fs::canonicalize(p).ok() == std::fs::canonicalize(&installed).ok();
        if !same {
            std::fs::copy(p, &installed).map_err(|e| io_err(p, e))?;
        }
    }
    let lake = Lakehouse::open(LakeConfig::new(&ctx.data_dir))?;
    let root = lake.init(principal)?;
    let text = format!("initialized {} at {}", ctx.data_dir.display(), root.short());
    Ok(Output::ok(
        json!({
            "data_dir": ctx.data_dir,
            "main": root,
            "policy": installed.exists().then_some(installed),
        }),
        text,
    ))
}

fn branch(ctx: &Ctx, cmd: BranchCmd) -> Result<Output, CliError> {
    let lake = ctx.lake()?;
    match cmd {
        BranchCmd::Create { name, from } => {
            let head = lake.create_branch(ctx.principal()?, &name, &from)?;
            let text = format!("{name} -> {}", head.short());
            Ok(Output::ok(json!({ "branch": name, "head": head }), text))
        }
        BranchCmd::List => {
            let branches = lake.branches()?;
            let mut text = String::new();
            for (b, h) in &branches {
                writeln!(text, "{b}\t{}", h.short()).unwrap();
            }
            Ok(Output::ok(json!({ "branches": branches }), text))
        }
        BranchCmd::Delete { name } => {
            lake.delete_branch(ctx.principal()?, &name)?;
            Ok(Output::ok(
                json!({ "deleted": name }),
                format!("deleted {name}"),
            ))
        }
    }
}

fn log(ctx: &Ctx, r: &str, limit: Option<usize>) -> Result<Output, CliError> {
    let mut commits = ctx.lake()?.log(r)?;
    if let Some(n) = limit {
        commits.truncate(n);
    }
    let mut text = String::new();
    for c in &commits {
        writeln!(
            text,
            "{} {} {} {}",
            c.id.short(),
            c.timestamp,
            c.author,
            c.message
        )
        .unwrap();
    }
    let commits: Vec<Value> = commits.iter().map(|c| to_json(c.as_ref())).collect();
    Ok(Output::ok(json!({ "ref": r, "commits": commits }), text))
}

fn import(
    ctx: &Ctx,
    name: &str,
    file: &Path,
    branch: &str,
    message: Option<String>,
) -> Result<Output, CliError> {
    let bytes = std::fs::read(file).map_err(|e| io_err(file, e))?;
    let table = decode_table(&bytes).map_err(LakeError::from)?;
    let lake = ctx.lake()?;
    let message = message.unwrap_or_else(|| format!("import {name}"));
    let commit = lake.write_table(ctx.principal()?, branch, name, &table, &message)?;
    let snapshot = commit.tables.get(name).cloned();
    let text = format!(
        "{name}: {} rows on {branch} at {}",
        table.len(),
        commit.id.short()
    );
    Ok(Output::ok(
        json!({
            "table": name,
            "branch": branch,
            "rows": table.len(),
            "snapshot": snapshot,
            "commit": commit.id,
        }),
        text,
    ))
}

fn table_json(t: &TableData) -> Value {
    json!({ "schema": t.schema().columns(), "rows": t.rows() })
}

fn query(ctx: &Ctx, sql: &str, r: &str) -> Result<Output, CliError> {
    let lake = ctx.lake()?;
    let session = lake.open_session(r)?;
    let out = lake.query(ctx.principal()?, &session, sql)?;
    let mut json = table_json(&out);
    json["ref"] = json!(r);
    json["commit"] = json!(session.pinned);
    let text = String::from_utf8_lossy(&encode_table(&out)).into_owned();
    Ok(Output::ok(json, text))
}

fn report_text(r: &RunReport) -> String {
    let mut text = format!(
        "run {} ({}) on {}: {}\n",
        r.run_id,
        r.pipeline,
        r.target_branch,
        r.outcome.name()
    );
    match &r.outcome {
        RunOutcome::Merged(m) => writeln!(text, "  merge: {m:?}").unwrap(),
        RunOutcome::FailedOpen(b) => writeln!(text, "  temp branch left open: {b}").unwrap(),
        RunOutcome::VerifierRejected(v) => {
            writeln!(text, "  rejected by: {}", v.join(", ")).unwrap()
        }
        RunOutcome::Denied(d) => writeln!(text, "  denied: {d}").unwrap(),
        RunOutcome::Planned | RunOutcome::Held => {}
    }
    for n in &r.node_results {
        match &n.status {
            NodeStatus::Succeeded(c) => writeln!(text, "  {}: succeeded at {}", n.node, c.short()),
            NodeStatus::Failed(e) => writeln!(text, "  {}: failed: {e}", n.node),
            NodeStatus::Skipped => writeln!(text, "  {}: skipped", n.node),
        }
        .unwrap();
    }
    if r.node_results.is_empty() {
        for p in &r.plan {
            writeln!(text, "  {}: {}", p.node, p.schema).unwrap();
        }
    }
    for v in &r.verdicts {
        writeln!(text, "  verifier {}: {}", v.verifier, v.verdict).unwrap();
    }
    if let Some(e) = &r.error {
        writeln!(text, "  error: {e}").unwrap();
    }
    text
}

fn run(
    ctx: &Ctx,
    file: &Path,
    branch: &str,
    fail_after: Option<String>,
    dry_run: bool,
) -> Result<Output, CliError> {
    let text = std::fs::read_to_string(file).map_err(|e| io_err(file, e))?;
    let spec = parse_pipeline(&text).map_err(|e| CliError::Domain {
        kind: "ParseError".into(),
        message: format!("{}:{e}", file.display()),
    })?;
    let lake = ctx.lake()?;
    let mut opts = RunOptions::new(ctx.principal()?);
    if let Some(n) = &fail_after {
        opts = opts.fail_after(n);
    }
    if dry_run {
        opts = opts.dry_run();
    }
    let report = lake.run(&spec, branch, &opts)?;
    Ok(Output {
        ok: report.outcome.is_success(),
        text: report_text(&report),
        json: to_json(&report),
    })
}

fn verifier(ctx: &Ctx, cmd: VerifierCmd) -> Result<Output, CliError> {
    let lake = ctx.lake()?;
    match cmd {
        VerifierCmd::Register {
            name,
            pipeline,
            check,
        } => {
            let spec = lake.register_verifier(ctx.principal()?, &name, &pipeline, &check)?;
            let text = format!("registered {} for {}", spec.name, spec.pipeline);
            Ok(Output::ok(to_json(&spec), text))
        }
        VerifierCmd::List => {
            let all = lake.list_verifiers()?;
            let mut text = String::new();
            for v in &all {
                writeln!(text, "{}\t{}\t{}", v.name, v.pipeline, v.check).unwrap();
            }
            Ok(Output::ok(json!({ "verifiers": all }), text))
        }
        VerifierCmd::Run { run_id } => {
            let verdicts = lake.verify_run(ctx.principal()?, &run_id)?;
            let mut text = String::new();
            for v in &verdicts {
                writeln!(
                    text,
                    "{}\t{}\t{}",
                    v.verifier,
                    v.verdict,
                    v.evaluated_at.short()
                )
                .unwrap();
            }
            Ok(Output {
                ok: verdicts.iter().all(|v| v.verdict.is_pass()),
                json: json!({ "run_id": run_id, "verdicts": verdicts }),
                text,
            })
        }
    }
}

fn simulate(args: SimulateArgs) -> Result<Output, CliError> {
    let spec = WorkloadSpec {
        n_agents: args.agents,
        ops_per_agent: args.ops,
        mix: Mix {
            read_session_scan: args.w_read,
            run_pipeline: args.w_run,
            run_pipeline_with_fault: args.w_fault,
            branch_and_merge: args.w_merge,
        },
        seed: args.seed,
    };
    let trace = harness::simulate(&spec)?;
    if let Some(out) = &args.out {
        trace.save(out)?;
    }
    let violations = harness::check_isolation(&trace)
        .err()
        .map_or(0, |v| v.len());
    let merges = trace.publishing_merges().len();
    let text = format!(
        "{} events, {merges} publishing merges, {violations} isolation violations",
        trace.events.len()
    );
    Ok(Output {
        ok: violations == 0,
        json: json!({
            "workload": spec,
            "events": trace.events.len(),
            "publishing_merges": merges,
            "isolation_violations": violations,
            "out": args.out,
        }),
        text,
    })
}

fn check(path: &Path) -> Result<Output, CliError> {
    let trace = Trace::load(path)?;
    let isolation = harness::check_isolation(&trace);
    let serial = harness::check_serializability(&trace);
    let violations = isolation.clone().err().unwrap_or_default();
    let (status, witness, merges) = match &serial {
        Ok(w) => ("ok", Some(w.clone()), w.len()),
        Err(SerialError::TooLarge { merges }) => ("too_large", None, *merges),
        Err(SerialError::Violation { merges }) => ("violation", None, *merges),
    };
    let text = format!(
        "isolation: {}\nserializability: {status} ({merges} merges)",
        if violations.is_empty() {
            "ok".to_string()
        } else {
            format!("{} violations", violations.len())
        }
    );
    Ok(Output {
        ok: violations.is_empty() && status != "violation",
        json: json!({
            "isolation": { "ok": violations.is_empty(), "violations": violations },
            "serializability": { "status": status, "merges": merges, "witness": witness },
        }),
        text,
    })
}

fn heal(ctx: &Ctx, run: &str, patches: &Path, budget: u32) -> Result<Output, CliError> {
    let lake = ctx.lake()?;
    let mut agent = baseline_agent(load_patches(patches)?);
    let outcome = lake.heal(ctx.principal()?, run, &mut agent, budget)?;
    let (ok, text) = match &outcome {
        HealOutcome::Proposal(p) => (
            true,
            format!(
                "proposal {} after {} attempt(s); approve with: lake approve --proposal {}",
                p.branch, p.attempts, p.branch
            ),
        ),
        HealOutcome::GaveUp { reason, history } => {
            let mut t = format!("gave up: {reason}\n");
            for a in history {
                writeln!(t, "  attempt {}: {}", a.attempt, a.outcome.name()).unwrap();
            }
            (false, t)
        }
    };
    Ok(Output {
        ok,
        json: to_json(&outcome),
        text,
    })
}

fn runs(ctx: &Ctx, cmd: RunsCmd) -> Result<Output, CliError> {
    let lake = ctx.lake()?;
    match cmd {
        RunsCmd::List => {
            let all = lake.list_runs()?;
            let mut text = String::new();
            let summary: Vec<Value> = all
                .iter()
                .map(|r| {
                    writeln!(
                        text,
                        "{}\t{}\t{}\t{}",
                        r.run_id,
                        r.pipeline,
                        r.target_branch,
                        r.outcome.name()
                    )
                    .unwrap();
                    json!({
                        "run_id": r.run_id,
                        "pipeline": r.pipeline,
                        "target_branch": r.target_branch,
                        "temp_branch": r.temp_branch,
                        "outcome": r.outcome.name(),
                        "started_at": r.started_at,
                    })
                })
                .collect();
            Ok(Output::ok(json!({ "runs": summary }), text))
        }
        RunsCmd::Show { run_id } => {
            let r = lake.get_run(&run_id)?;
            Ok(Output::ok(to_json(&r), report_text(&r)))
        }
        RunsCmd::Cleanup { run_id } => {
            let r = lake.get_run(&run_id)?;
            lake.cleanup_temp(ctx.principal()?, &run_id)?;
            Ok(Output::ok(
                json!({ "run_id": r.run_id, "deleted": r.temp_branch }),
                format!("deleted {}", r.temp_branch),
            ))
        }
    }
}

fn proposals(ctx: &Ctx, cmd: ProposalsCmd) -> Result<Output, CliError> {
    let lake = ctx.lake()?;
    match cmd {
        ProposalsCmd::List => {
            let all = lake.list_proposals()?;
            let mut text = String::new();
            for p in &all {
                writeln!(
                    text,
                    "{}\t{}\t{}\t{}",
                    p.id,
                    p.branch,
                    p.target,
                    p.head.short()
                )
                .unwrap();
            }
            let summary: Vec<Value> = all
                .iter()
                .map(|p| json!({ "id": p.id, "branch": p.branch, "target": p.target, "head": p.head }))
                .collect();
            Ok(Output::ok(json!({ "proposals": summary }), text))
        }
        ProposalsCmd::Show { key } => {
            let p = lake.get_proposal(&key)?;
            let mut text = format!(
                "proposal {} -> {} at {} ({} attempt(s), from run {})\n",
                p.branch,
                p.target,
                p.head.short(),
                p.attempts,
                p.source_run
            );
            for d in &p.diff {
                writeln!(text, "  {:?}\t{}", d.status, d.table).unwrap();
            }
            for v in &p.verdicts {
                writeln!(text, "  verifier {}: {}", v.verifier, v.verdict).unwrap();
            }
            Ok(Output::ok(to_json(&p), text))
        }
    }
}
