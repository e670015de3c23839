use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ComparisonReport, RunResult};
use crate::action::{Actor, ProposedAction};
use crate::policy::{validate_action, PolicyDocument, Verdict};
use crate::telemetry::{verify_jsonl, AuditPayload, ChainError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn write(path: PathBuf, body: &str) -> Result<PathBuf, ReportError> {
    std::fs::write(&path, body).map_err(|source| ReportError::IoFailure {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Write comparison.json, metrics.csv, the bar-chart series and one audit
/// log per run into `out`, which must already exist.
pub fn emit_report(
    report: &ComparisonReport,
    runs: &[RunResult],
    out: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    if !out.is_dir() {
        return Err(ReportError::IoFailure {
            path: out.to_path_buf(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "output directory does not exist",
            ),
        });
    }
    let mut files = Vec::new();
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    files.push(write(out.join("comparison.json"), &(json + "\n"))?);

    let sides = [("static", &report.baseline), ("agentic", &report.agentic)];
    let mut csv = String::from("controller,metric,value\n");
    for (name, side) in sides {
        for (metric, stat) in &side.stats {
            writeln!(csv, "{name},{metric},{}", stat.mean).unwrap();
        }
    }
    files.push(write(out.join("metrics.csv"), &csv)?);

    for (file, metric) in [
        ("mttr_bars.csv", "mttr_mean"),
        ("cost_bars.csv", "total_cost"),
    ] {
        let mut csv = String::from("controller,mean,stddev\n");
        for (name, side) in sides {
            if let Some(s) = side.stats.get(metric) {
                writeln!(csv, "{name},{},{}", s.mean, s.stddev).unwrap();
            }
        }
        files.push(write(out.join(file), &csv)?);
    }

    for r in runs {
        let name = format!("audit_{}_seed{}.jsonl", r.controller, r.seed);
        files.push(write(out.join(name), &r.audit.to_jsonl())?);
    }
    Ok(files)
}

/// What `replay_audit` checked.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub records: usize,
    pub decisions: usize,
    pub approvals: usize,
    pub outcomes: usize,
}

/// Verify the hash chain, re-evaluate every policy decision against the
/// policy version it cites and check that every executed action traces to
/// an Allow verdict or an operator approval.
pub fn replay_audit(bytes: &[u8]) -> Result<ReplaySummary, ChainError> {
    let records = verify_jsonl(bytes)?;
    let bad = |seq: u64, reason: String| ChainError { seq, reason };
    let mut policies: BTreeMap<u32, PolicyDocument> = BTreeMap::new();
    let mut proposals: BTreeMap<u64, ProposedAction> = BTreeMap::new();
    let mut pending_approval: BTreeSet<u64> = BTreeSet::new();
    let mut authorized: BTreeSet<u64> = BTreeSet::new();
    let mut executed: BTreeSet<u64> = BTreeSet::new();
    let mut sum = ReplaySummary {
        records: records.len(),
        ..ReplaySummary::default()
    };
    for r in &records {
        match &r.payload {
            AuditPayload::PolicyChange { policy } => {
                let doc: PolicyDocument = serde_json::from_value(policy.clone())
                    .map_err(|e| bad(r.seq, format!("policy does not parse: {e}")))?;
                doc.validate()
                    .map_err(|e| bad(r.seq, format!("policy is invalid: {e}")))?;
                policies.insert(doc.version, doc);
            }
            AuditPayload::Proposal { action } => {
                if action.agent != r.actor {
                    return Err(bad(
                        r.seq,
                        format!("proposal by {} logged as {}", action.agent, r.actor),
                    ));
                }
                if proposals.insert(action.id, action.clone()).is_some() {
                    return Err(bad(r.seq, format!("proposal id {} reused", action.id)));
                }
            }
            AuditPayload::Decision {
                proposal_id,
                decision,
                context,
            } => {
                let p = proposals.get(proposal_id).ok_or_else(|| {
                    bad(
                        r.seq,
                        format!("decision for unknown proposal {proposal_id}"),
                    )
                })?;
                match r.actor {
                    Actor::PolicyEngine => {
                        let policy = policies.get(&decision.policy_version).ok_or_else(|| {
                            bad(
                                r.seq,
                                format!(
                                    "policy version {} never recorded",
                                    decision.policy_version
                                ),
                            )
                        })?;
                        let again = validate_action(p, policy, context);
                        if &again != decision {
                            return Err(bad(
                                r.seq,
                                format!(
                                    "decision for proposal {proposal_id} does not replay: logged {:?}, recomputed {:?}",
                                    decision.verdict, again.verdict
                                ),
                            ));
                        }
                        sum.decisions += 1;
                        match decision.verdict {
                            Verdict::Allow => {
                                authorized.insert(*proposal_id);
                            }
                            Verdict::RequireApproval => {
                                pending_approval.insert(*proposal_id);
                            }
                            Verdict::Deny => {}
                        }
                    }
                    Actor::Operator => {
                        if !pending_approval.remove(proposal_id)
                            || decision.verdict != Verdict::Allow
                        {
                            return Err(bad(
                                r.seq,
                                format!("operator approval of proposal {proposal_id} without a pending request"),
                            ));
                        }
                        sum.approvals += 1;
                        authorized.insert(*proposal_id);
                    }
                    other => {
                        return Err(bad(r.seq, format!("decision recorded by {other}")));
                    }
                }
            }
            AuditPayload::Outcome { proposal_id, .. } => {
                if !authorized.contains(proposal_id) {
                    return Err(bad(
                        r.seq,
                        format!("proposal {proposal_id} executed without an Allow verdict"),
                    ));
                }
                if !executed.insert(*proposal_id) {
                    return Err(bad(r.seq, format!("proposal {proposal_id} executed twice")));
                }
                let p = &proposals[proposal_id];
                if p.agent != r.actor {
                    return Err(bad(
                        r.seq,
                        format!("outcome of {}'s proposal logged as {}", p.agent, r.actor),
                    ));
                }
                sum.outcomes += 1;
            }
            AuditPayload::Observation { .. } => {}
        }
    }
    Ok(sum)
}
