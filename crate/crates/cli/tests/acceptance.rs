//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use governor_core::agents::{EwmaConfig, EwmaDetector, Monitor};
use governor_core::harness::{
    compare, compute_metrics, run_experiment, BaselineConfig, ControllerSpec, LedgerRow,
    RunOptions, RunResult,
};
use governor_core::policy::Verdict;
use governor_core::scenario::fuzz_scenario;
use governor_core::schema::{classify_delta, Change, Column, DataType, DriftClass, SchemaDelta};
use governor_core::telemetry::{verify_jsonl, AuditPayload, MetricName};
use governor_core::{
    parse_policy, parse_scenario, Actor, AgentSet, BackendSpec, PolicyDocument, ScenarioSpec,
};

const BIN: &str = env!("CARGO_BIN_EXE_governor");

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn canonical() -> ScenarioSpec {
    parse_scenario(&std::fs::read_to_string(root().join("scenarios/canonical.json")).unwrap())
        .unwrap()
}

fn policy() -> PolicyDocument {
    parse_policy(&std::fs::read_to_string(root().join("policies/default.json")).unwrap()).unwrap()
}

fn agentic(base: &BaselineConfig, agents: AgentSet) -> ControllerSpec {
    ControllerSpec::Agentic {
        baseline: base.clone(),
        backend: BackendSpec::Builtin,
        agents,
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// A value with the wall time it took to produce.
struct Timed<T>(T, Duration);

fn timed<T>(f: impl FnOnce() -> T) -> Timed<T> {
    let t0 = Instant::now();
    let v = f();
    Timed(v, t0.elapsed())
}

impl<T> Timed<T> {
    fn map(&self, f: impl FnOnce(&T) -> Outcome) -> Outcome {
        let mut o = f(&self.0);
        o.detail
            .push_str(&format!("; {:.1}s", self.1.as_secs_f64()));
        o
    }
}

impl From<Timed<Outcome>> for Outcome {
    fn from(t: Timed<Outcome>) -> Self {
        t.map(|o| Outcome::new(o.pass, o.detail.clone()))
    }
}

/// Every run made by this suite, for the accounting criterion.
#[derive(Default)]
struct Ledgers(Vec<(String, Vec<LedgerRow>)>);

impl Ledgers {
    fn keep(&mut self, label: String, run: &RunResult) {
        self.0.push((label, run.ledger.clone()));
    }
}

fn main() {
    let started = Instant::now();
    let mut ledgers = Ledgers::default();
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &str, o: Outcome| {
        println!(
            "criterion {n} {name:<22} {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, o));
    };

    record(1, "determinism", timed(determinism).into());
    let fuzz = timed(|| FuzzSuite::run(&mut ledgers));
    record(2, "policy safety", fuzz.map(|f| f.safety()));
    record(3, "budget compliance", fuzz.map(|f| f.budget()));
    record(4, "classifier oracle", timed(classifier_oracle).into());
    let headline = timed(|| Headline::run(&mut ledgers));
    let equivalence = timed(|| baseline_equivalence(&mut ledgers));
    record(
        5,
        "record accounting",
        timed(|| accounting(&ledgers)).into(),
    );
    record(
        6,
        "baseline equivalence",
        equivalence.map(|o| Outcome::new(o.pass, o.detail.clone())),
    );
    record(7, "headline claims", headline.map(|h| h.verdict()));
    record(8, "anomaly detector", timed(anomaly_detector).into());
    record(9, "audit integrity", timed(audit_integrity).into());

    let failed: Vec<u32> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "{} of {} criteria passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}

// 1 ------------------------------------------------------------------------

fn compare_once(out: &Path) -> std::process::Output {
    Command::new(BIN)
        .args(["compare", "--quiet", "--scenario"])
        .arg(root().join("scenarios/canonical.json"))
        .arg("--policy")
        .arg(root().join("policies/default.json"))
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn governor")
}

fn read_dir_sorted(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn determinism() -> Outcome {
    let t0 = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (compare_once(a.path()), compare_once(b.path()));
    let elapsed = t0.elapsed();
    if !ra.status.success() || !rb.status.success() {
        return Outcome::new(
            false,
            format!("compare failed: {}", String::from_utf8_lossy(&ra.stderr)),
        );
    }
    let (fa, fb) = (read_dir_sorted(a.path()), read_dir_sorted(b.path()));
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let audits = fa.keys().filter(|k| k.starts_with("audit_")).count();
    let pass = differing.is_empty()
        && fa.len() == fb.len()
        && audits == 10
        && elapsed < Duration::from_secs(120);
    Outcome::new(
        pass,
        format!(
            "{} files, {audits} audit logs, {} differing, two compares in {:.1}s",
            fa.len(),
            differing.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// 2, 3 ---------------------------------------------------------------------

struct FuzzSuite {
    unauthorized: Vec<String>,
    replay_failures: Vec<String>,
    budget_breaches: Vec<String>,
    outcomes: usize,
    logs: usize,
    max_window: f64,
    budget: f64,
}

impl FuzzSuite {
    fn run(ledgers: &mut Ledgers) -> Self {
        let pol = policy();
        let dir = tempfile::tempdir().unwrap();
        let mut s = FuzzSuite {
            unauthorized: Vec::new(),
            replay_failures: Vec::new(),
            budget_breaches: Vec::new(),
            outcomes: 0,
            logs: 0,
            max_window: 0.0,
            budget: pol.cost.budget_per_window,
        };
        for seed in 1..=50u64 {
            let sc = fuzz_scenario(seed);
            let base = BaselineConfig::calibrated(&sc).unwrap();
            for spec in [
                ControllerSpec::Static(base.clone()),
                agentic(&base, AgentSet::all()),
            ] {
                let run = run_experiment(&sc, &pol, &spec, seed, RunOptions::default()).unwrap();
                let label = format!("fuzz seed {seed} {}", run.controller);
                ledgers.keep(label.clone(), &run);
                let log = dir.path().join(format!("{}_{seed}.jsonl", run.controller));
                std::fs::write(&log, run.audit.to_jsonl()).unwrap();
                s.logs += 1;
                let st = Command::new(BIN)
                    .arg("replay-audit")
                    .arg(&log)
                    .output()
                    .unwrap();
                if st.status.code() != Some(0) {
                    s.replay_failures.push(format!(
                        "{label}: {}",
                        String::from_utf8_lossy(&st.stderr).trim()
                    ));
                }
                s.scan(&label, &run);
                if run.controller == "agentic" {
                    for (w, c) in run.window_costs.iter().enumerate() {
                        s.max_window = s.max_window.max(*c);
                        if *c > s.budget {
                            s.budget_breaches
                                .push(format!("{label} window {w}: {c:.3}"));
                        }
                    }
                }
            }
        }
        s
    }

    /// Independent of the replay checker: every outcome must follow an
    /// Allow from the policy engine, or a RequireApproval then an operator
    /// Allow, for the same proposal.
    fn scan(&mut self, label: &str, run: &RunResult) {
        let records = verify_jsonl(run.audit.to_jsonl().as_bytes()).unwrap();
        let mut allowed = BTreeSet::new();
        let mut held = BTreeSet::new();
        for r in &records {
            match &r.payload {
                AuditPayload::Decision {
                    proposal_id,
                    decision,
                    ..
                } => match (r.actor, decision.verdict) {
                    (Actor::PolicyEngine, Verdict::Allow) => {
                        allowed.insert(*proposal_id);
                    }
                    (Actor::PolicyEngine, Verdict::RequireApproval) => {
                        held.insert(*proposal_id);
                    }
                    (Actor::Operator, Verdict::Allow) if held.remove(proposal_id) => {
                        allowed.insert(*proposal_id);
                    }
                    _ => {}
                },
                AuditPayload::Outcome { proposal_id, .. } => {
                    self.outcomes += 1;
                    if !allowed.remove(proposal_id) {
                        self.unauthorized
                            .push(format!("{label}: seq {} proposal {proposal_id}", r.seq));
                    }
                }
                _ => {}
            }
        }
    }

    fn safety(&self) -> Outcome {
        let pass = self.unauthorized.is_empty() && self.replay_failures.is_empty();
        let mut d = format!(
            "{} logs, {} applied actions, {} unauthorized, {} replay failures",
            self.logs,
            self.outcomes,
            self.unauthorized.len(),
            self.replay_failures.len()
        );
        if let Some(f) = self.unauthorized.first().or(self.replay_failures.first()) {
            d.push_str(&format!("; first: {f}"));
        }
        Outcome::new(pass, d)
    }

    fn budget(&self) -> Outcome {
        let mut d = format!(
            "max agentic window cost {:.2} vs budget {}, {} breaches",
            self.max_window,
            self.budget,
            self.budget_breaches.len()
        );
        if let Some(f) = self.budget_breaches.first() {
            d.push_str(&format!("; first: {f}"));
        }
        Outcome::new(self.budget_breaches.is_empty(), d)
    }
}

// 4 ------------------------------------------------------------------------

const WIDENING: [(DataType, DataType); 3] = [
    (DataType::Int32, DataType::Int64),
    (DataType::Int32, DataType::Float64),
    (DataType::Int64, DataType::Float64),
];

/// Column names used by the enumeration: c0..c3 exist up front, x and y
/// are added, r0..r3 are rename targets.
const NAMES: [&str; 10] = ["c0", "c1", "c2", "c3", "x", "y", "r0", "r1", "r2", "r3"];

type Cols = [Option<(DataType, bool)>; 10];

fn slot(name: &str) -> usize {
    NAMES
        .iter()
        .position(|n| *n == name)
        .expect("enumerated name")
}

/// Old consumers must find every column they read, under the same name,
/// with a type and nullability they still accept; columns they do not
/// know must be optional.
fn oracle_compatible<'a>(old: &Cols, changes: impl IntoIterator<Item = &'a Change>) -> bool {
    let mut new = *old;
    for c in changes {
        match c {
            Change::AddColumn { column, .. } => {
                new[slot(&column.name)] = Some((column.dtype, column.nullable))
            }
            Change::DropColumn { name } => new[slot(name)] = None,
            Change::RenameColumn { from, to } => new[slot(to)] = new[slot(from)].take(),
            Change::ChangeType { name, to, .. } => new[slot(name)].as_mut().unwrap().0 = *to,
            Change::ChangeNullability { name, to, .. } => new[slot(name)].as_mut().unwrap().1 = *to,
        }
    }
    old.iter().zip(&new).all(|(o, n)| match (o, n) {
        (Some((ot, on)), Some((nt, nn))) => {
            (ot == nt || WIDENING.contains(&(*ot, *nt))) && !(*on && !*nn)
        }
        (Some(_), None) => false,
        (None, Some((_, nn))) => *nn,
        (None, None) => true,
    })
}

fn touched(c: &Change) -> [usize; 2] {
    match c {
        Change::AddColumn { column, .. } => [slot(&column.name); 2],
        Change::DropColumn { name }
        | Change::ChangeType { name, .. }
        | Change::ChangeNullability { name, .. } => [slot(name); 2],
        Change::RenameColumn { from, to } => [slot(from), slot(to)],
    }
}

fn single_changes(cols: &Cols, n: usize) -> Vec<Change> {
    let mut out = Vec::new();
    for name in ["x", "y"] {
        for t in DataType::ALL {
            for nullable in [false, true] {
                for position in [0, n] {
                    out.push(Change::AddColumn {
                        column: Column::new(name, t, nullable),
                        position,
                    });
                }
            }
        }
    }
    for (i, &(t, nl)) in cols.iter().take(n).map(|c| c.as_ref().unwrap()).enumerate() {
        let name = NAMES[i].to_string();
        out.push(Change::DropColumn { name: name.clone() });
        out.push(Change::RenameColumn {
            from: name.clone(),
            to: NAMES[6 + i].to_string(),
        });
        for to in DataType::ALL.into_iter().filter(|&to| to != t) {
            out.push(Change::ChangeType {
                name: name.clone(),
                from: t,
                to,
            });
        }
        out.push(Change::ChangeNullability {
            name,
            from: nl,
            to: !nl,
        });
    }
    out
}

/// Check one delta against the oracle. An incompatible verdict must name
/// exactly the offending changes.
fn agrees(cols: &Cols, delta: &SchemaDelta) -> bool {
    let expected = oracle_compatible(cols, &delta.changes);
    match classify_delta(delta) {
        DriftClass::BackwardCompatible => expected,
        DriftClass::Incompatible { reasons } => {
            !expected
                && !reasons.is_empty()
                && reasons
                    .iter()
                    .all(|r| delta.changes.contains(r) && !oracle_compatible(cols, [r]))
                && oracle_compatible(cols, delta.changes.iter().filter(|c| !reasons.contains(c)))
        }
        DriftClass::NoDrift => false,
    }
}

fn classifier_oracle() -> Outcome {
    let combos: Vec<(DataType, bool)> = DataType::ALL
        .into_iter()
        .flat_map(|t| [(t, false), (t, true)])
        .collect();
    let (mut schemas, mut deltas) = (0u64, 0u64);
    let mut mismatches: Vec<String> = Vec::new();
    if classify_delta(&SchemaDelta::default()) != DriftClass::NoDrift {
        mismatches.push("empty delta".into());
    }
    // changes are moved in and out of one delta to keep the loop free of
    // allocation
    let mut delta = SchemaDelta::default();
    for n in 1..=4usize {
        for code in 0..combos.len().pow(n as u32) {
            let mut cols: Cols = [None; 10];
            let mut k = code;
            for c in cols.iter_mut().take(n) {
                *c = Some(combos[k % combos.len()]);
                k /= combos.len();
            }
            schemas += 1;
            let mut singles: Vec<Option<Change>> =
                single_changes(&cols, n).into_iter().map(Some).collect();
            let spans: Vec<[usize; 2]> = singles
                .iter()
                .map(|c| touched(c.as_ref().unwrap()))
                .collect();
            for i in 0..singles.len() {
                delta.changes.push(singles[i].take().unwrap());
                deltas += 1;
                if !agrees(&cols, &delta) && mismatches.len() < 5 {
                    mismatches.push(format!("{cols:?} {:?}", delta.changes));
                }
                for j in i + 1..singles.len() {
                    if spans[j].iter().any(|x| spans[i].contains(x)) {
                        continue;
                    }
                    delta.changes.push(singles[j].take().unwrap());
                    deltas += 1;
                    if !agrees(&cols, &delta) && mismatches.len() < 5 {
                        mismatches.push(format!("{cols:?} {:?}", delta.changes));
                    }
                    singles[j] = delta.changes.pop();
                }
                singles[i] = delta.changes.pop();
            }
        }
    }
    let mut d = format!(
        "{schemas} schemas, {deltas} deltas, {} mismatches",
        mismatches.len()
    );
    if let Some(m) = mismatches.first() {
        d.push_str(&format!("; first: {m}"));
    }
    Outcome::new(mismatches.is_empty(), d)
}

// 5 ------------------------------------------------------------------------

fn accounting(ledgers: &Ledgers) -> Outcome {
    let mut ticks = 0usize;
    let mut bad: Option<String> = None;
    for (label, rows) in &ledgers.0 {
        ticks += rows.len();
        if let Some(r) = rows.iter().find(|r| !r.balanced()) {
            bad.get_or_insert_with(|| format!("{label} tick {}: {r:?}", r.tick));
        }
    }
    let mut d = format!("{} runs, {ticks} ticks checked", ledgers.0.len());
    if let Some(b) = &bad {
        d.push_str(&format!("; first imbalance: {b}"));
    }
    Outcome::new(bad.is_none(), d)
}

// 6 ------------------------------------------------------------------------

/// Audit payloads with actors dropped.
fn payloads(run: &RunResult) -> Vec<String> {
    run.audit
        .records()
        .iter()
        .map(|r| serde_json::to_string(&r.payload).unwrap())
        .collect()
}

fn baseline_equivalence(ledgers: &mut Ledgers) -> Outcome {
    let pol = policy();
    let mut cases: Vec<(String, ScenarioSpec, u64)> = vec![("canonical".into(), canonical(), 1)];
    cases.extend((1..=5).map(|s| (format!("fuzz {s}"), fuzz_scenario(s), s)));
    let mut diverged = Vec::new();
    for (label, sc, seed) in &cases {
        let base = BaselineConfig::calibrated(sc).unwrap();
        let s = run_experiment(
            sc,
            &pol,
            &ControllerSpec::Static(base.clone()),
            *seed,
            RunOptions::default(),
        )
        .unwrap();
        let a = run_experiment(
            sc,
            &pol,
            &agentic(&base, AgentSet::none()),
            *seed,
            RunOptions::default(),
        )
        .unwrap();
        ledgers.keep(format!("{label} static"), &s);
        ledgers.keep(format!("{label} agentic, no agents"), &a);
        let same_incidents = s.incidents.len() == a.incidents.len()
            && s.incidents.iter().zip(&a.incidents).all(|(x, y)| {
                (x.class, x.detected_tick, x.resumed_tick)
                    == (y.class, y.detected_tick, y.resumed_tick)
            });
        let checks = [
            ("telemetry", s.telemetry_digest == a.telemetry_digest),
            ("costs", s.tick_costs == a.tick_costs),
            ("incidents", same_incidents),
            ("audit payloads", payloads(&s) == payloads(&a)),
            ("interventions", s.interventions() == a.interventions()),
        ];
        for (what, ok) in checks {
            if !ok {
                diverged.push(format!("{label}: {what}"));
            }
        }
    }
    let mut d = format!(
        "{} scenario pairs, {} divergences",
        cases.len(),
        diverged.len()
    );
    if let Some(x) = diverged.first() {
        d.push_str(&format!("; first: {x}"));
    }
    Outcome::new(diverged.is_empty(), d)
}

// 7 ------------------------------------------------------------------------

struct Headline {
    deltas: BTreeMap<String, f64>,
    freshness: Vec<(String, f64, f64)>,
    elapsed: Duration,
}

impl Headline {
    fn run(ledgers: &mut Ledgers) -> Self {
        let t0 = Instant::now();
        let sc = canonical();
        let pol = policy();
        let base = BaselineConfig::calibrated(&sc).unwrap();
        let (mut s, mut a) = (Vec::new(), Vec::new());
        for seed in 1..=5 {
            let rs = run_experiment(
                &sc,
                &pol,
                &ControllerSpec::Static(base.clone()),
                seed,
                RunOptions::default(),
            )
            .unwrap();
            let ra = run_experiment(
                &sc,
                &pol,
                &agentic(&base, AgentSet::all()),
                seed,
                RunOptions::default(),
            )
            .unwrap();
            ledgers.keep(format!("canonical seed {seed} static"), &rs);
            ledgers.keep(format!("canonical seed {seed} agentic"), &ra);
            s.push(compute_metrics(&rs));
            a.push(compute_metrics(&ra));
        }
        let report = compare(&s, &a).unwrap();
        let streaming: Vec<String> = sc
            .pipelines
            .iter()
            .filter(|p| p.kind == governor_core::PipelineKind::Streaming)
            .map(|p| p.id.clone())
            .collect();
        let freshness = streaming
            .iter()
            .map(|p| {
                let key = format!("freshness_p95.{p}");
                let mean = |side: &governor_core::harness::MultiSeedSummary| {
                    side.stats.get(&key).map_or(f64::INFINITY, |s| s.mean)
                };
                (p.clone(), mean(&report.baseline), mean(&report.agentic))
            })
            .collect();
        Self {
            deltas: report.deltas_percent,
            freshness,
            elapsed: t0.elapsed(),
        }
    }

    fn verdict(&self) -> Outcome {
        let rows = [
            ("MTTR reduction", "mttr_mean", 30.0, "~45%"),
            ("cost reduction", "total_cost", 15.0, "~25%"),
            (
                "manual-intervention reduction",
                "manual_interventions",
                50.0,
                ">70%",
            ),
        ];
        let mut pass = self.elapsed < Duration::from_secs(600);
        println!(
            "  {:<32} {:>9} {:>9} {:>9}",
            "metric", "achieved", "required", "published"
        );
        for (label, key, min, published) in rows {
            let got = self.deltas.get(key).copied();
            let ok = got.is_some_and(|g| g >= min);
            pass &= ok;
            let shown = got.map_or_else(|| "absent".to_string(), |g| format!("{g:.1}%"));
            println!(
                "  {label:<32} {shown:>9} {:>9} {published:>9}  {}",
                format!(">={min:.0}%"),
                mark(ok)
            );
        }
        for (p, s, a) in &self.freshness {
            let ok = a <= s;
            pass &= ok;
            println!(
                "  {:<32} {:>9} {:>9} {:>9}  {}",
                format!("freshness_p95 {p}"),
                format!("{a} vs {s}"),
                "<=static",
                "improved",
                mark(ok)
            );
        }
        Outcome::new(
            pass,
            format!("seeds 1-5 in {:.1}s", self.elapsed.as_secs_f64()),
        )
    }
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "MISS"
    }
}

// 8 ------------------------------------------------------------------------

fn anomaly_detector() -> Outcome {
    let cfg = EwmaConfig::default();
    let mut problems = Vec::new();
    for c in [0.0, 1.0, 7.5, 250.0, 1.0e6] {
        let mut d = EwmaDetector::default();
        if (0..1_000).any(|_| d.observe(c, &cfg).is_some()) {
            problems.push(format!("constant {c} flagged"));
        }
        let mut m = Monitor::new(cfg);
        if (0..200).any(|t| m.observe("p", MetricName::QueueDepth, t, c).is_some()) {
            problems.push(format!("monitor flagged constant {c}"));
        }
    }
    // a step one part in a thousand above k * sigma_floor, landing on each
    // tick from min_samples on
    let step = cfg.k * cfg.sigma_floor + 1e-3;
    let mut steps = 0;
    for c in [0.0, 10.0, 1.0e6] {
        for at in cfg.min_samples..cfg.min_samples + 3 * cfg.window {
            let mut d = EwmaDetector::default();
            let mut flagged = None;
            for i in 1..=at + 1 {
                let x = if i >= at { c + step } else { c };
                if d.observe(x, &cfg).is_some() {
                    flagged = Some(i);
                    break;
                }
            }
            steps += 1;
            if !flagged.is_some_and(|i| i <= at + 1 && i >= at) {
                problems.push(format!(
                    "step at sample {at} over {c}: flagged at {flagged:?}"
                ));
            }
        }
    }
    let mut d = format!(
        "5 constant series, {steps} step placements, {} problems",
        problems.len()
    );
    if let Some(p) = problems.first() {
        d.push_str(&format!("; first: {p}"));
    }
    Outcome::new(problems.is_empty(), d)
}

// 9 ------------------------------------------------------------------------

fn audit_integrity() -> Outcome {
    // a short agentic run keeps exhaustive mutation fast while still
    // covering proposals, decisions, outcomes and observations
    let mut sc = fuzz_scenario(4);
    sc.horizon = 150;
    sc.fault_schedule.retain(|f| f.tick < sc.horizon);
    let base = BaselineConfig::calibrated(&sc).unwrap();
    let run = run_experiment(
        &sc,
        &policy(),
        &agentic(&base, AgentSet::all()),
        4,
        RunOptions::default(),
    )
    .unwrap();
    let log = run.audit.to_jsonl().into_bytes();
    let kinds: BTreeSet<&str> = run
        .audit
        .records()
        .iter()
        .map(|r| match r.payload {
            AuditPayload::Proposal { .. } => "proposal",
            AuditPayload::Decision { .. } => "decision",
            AuditPayload::Outcome { .. } => "outcome",
            AuditPayload::PolicyChange { .. } => "policy_change",
            AuditPayload::Observation { .. } => "observation",
        })
        .collect();

    // seq of the record each byte belongs to; a newline belongs to the
    // record it terminates
    let mut line_of = Vec::with_capacity(log.len());
    let mut seq = 1u64;
    for &b in &log {
        line_of.push(seq);
        if b == b'\n' {
            seq += 1;
        }
    }
    let mut misses = Vec::new();
    let mut mutations = 0u64;
    let mut rng = 0x9E37_79B9_7F4A_7C15u64;
    let mut buf = log.clone();
    for i in 0..log.len() {
        rng ^= rng << 13;
        rng ^= rng >> 7;
        rng ^= rng << 17;
        let random = (rng as u8).max(1);
        for x in [0x01u8, random] {
            buf[i] = log[i] ^ x;
            mutations += 1;
            match governor_core::harness::replay_audit(&buf) {
                Err(e) if e.seq == line_of[i] => {}
                other => {
                    if misses.len() < 5 {
                        misses.push(format!(
                            "byte {i} ^ {x:#04x}: expected seq {}, got {other:?}",
                            line_of[i]
                        ));
                    }
                }
            }
        }
        buf[i] = log[i];
    }

    // the command line reports the same seq and exits 1
    let dir = tempfile::tempdir().unwrap();
    let mut cli_ok = 0;
    for frac in [0.1, 0.5, 0.9] {
        let i = (log.len() as f64 * frac) as usize;
        let mut m = log.clone();
        m[i] ^= 0x01;
        let p = dir.path().join(format!("tampered_{i}.jsonl"));
        std::fs::write(&p, &m).unwrap();
        let out = Command::new(BIN)
            .arg("replay-audit")
            .arg(&p)
            .output()
            .unwrap();
        let stderr = String::from_utf8_lossy(&out.stderr);
        if out.status.code() == Some(1)
            && stderr.contains(&format!("first bad seq {}:", line_of[i]))
        {
            cli_ok += 1;
        } else {
            misses.push(format!(
                "cli on byte {i}: exit {:?}, {stderr}",
                out.status.code()
            ));
        }
    }
    let clean = governor_core::harness::replay_audit(&log).is_ok();
    let mut d = format!(
        "{} records ({}), {} bytes, {mutations} mutations, {cli_ok}/3 via cli, {} misses",
        seq - 1,
        kinds.into_iter().collect::<Vec<_>>().join("/"),
        log.len(),
        misses.len()
    );
    if let Some(m) = misses.first() {
        d.push_str(&format!("; first: {m}"));
    }
    Outcome::new(clean && misses.is_empty(), d)
}
