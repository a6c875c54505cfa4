//! Consolidated verdict table over a set of run manifests.

use crate::artifact::{write_json, RunManifest};
use crate::{Fail, Outcome};
use evanskit_core::hypotheses::CheckReport;
use serde::Serialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub id: String,
    pub assumption: String,
    /// "pass", "fail" or "not run".
    pub status: String,
    pub source: Option<String>,
}

fn missing(what: &Path, why: impl std::fmt::Display) -> Fail {
    Fail::Numeric(format!("missing artifact {}: {why}", what.display()))
}

fn read_json(path: &Path) -> Result<Value, Fail> {
    let s = std::fs::read_to_string(path).map_err(|e| missing(path, e))?;
    serde_json::from_str(&s).map_err(|e| missing(path, e))
}

fn status(pass: bool) -> String {
    if pass { "pass" } else { "fail" }.into()
}

/// Rows in assumption order; later manifests of the same command win.
pub fn table(manifests: &[PathBuf]) -> Result<Vec<Row>, Fail> {
    let mut checks: Option<(Vec<CheckReport>, String)> = None;
    let mut by_cmd: Vec<(String, RunManifest, String)> = Vec::new();
    for p in manifests {
        let v = read_json(p)?;
        let m: RunManifest = serde_json::from_value(v).map_err(|e| missing(p, e))?;
        let src = p.display().to_string();
        if m.command == "check" {
            let art = m.artifacts.first().ok_or_else(|| missing(p, "no artifact listed"))?;
            let reports: Vec<CheckReport> = serde_json::from_value(read_json(art)?).map_err(|e| missing(art, e))?;
            checks = Some((reports, src.clone()));
        } else {
            for a in &m.artifacts {
                if a.extension().is_some_and(|e| e == "json") {
                    read_json(a)?;
                }
            }
        }
        by_cmd.push((m.command.clone(), m, src));
    }
    let last = |cmd: &str| by_cmd.iter().rev().find(|(c, ..)| c == cmd);
    let mut rows = Vec::new();
    let check_row = |id: &str, what: &str, prefixes: &[&str]| -> Row {
        match &checks {
            None => Row { id: id.into(), assumption: what.into(), status: "not run".into(), source: None },
            Some((reps, src)) => {
                let sel: Vec<&CheckReport> = reps.iter().filter(|r| prefixes.iter().any(|p| r.check_id.starts_with(p))).collect();
                let st = if sel.is_empty() { "not run".into() } else { status(sel.iter().all(|r| r.passed())) };
                Row { id: id.into(), assumption: what.into(), status: st, source: Some(src.clone()) }
            }
        }
    };
    let cmd_row = |id: &str, what: &str, cmds: &[&str]| -> Row {
        match cmds.iter().find_map(|c| last(c)) {
            None => Row { id: id.into(), assumption: what.into(), status: "not run".into(), source: None },
            Some((_, m, src)) => Row {
                id: id.into(),
                assumption: what.into(),
                status: if m.verdict == "error" { "fail".into() } else { m.verdict.clone() },
                source: Some(src.clone()),
            },
        }
    };
    rows.push(check_row("S1", "Rankine-Hugoniot, Lax shock", &["S1_"]));
    rows.push(check_row("S2", "genuine nonlinearity, diffusion", &["S2_"]));
    rows.push(cmd_row("S3", "profile with one singular point", &["profile"]));
    rows.push(check_row("A1", "symmetrizer", &["A1_"]));
    rows.push(check_row("A2", "Kawashima condition", &["A2_", "K1_"]));
    rows.push(check_row("H1", "constant multiplicity", &["H1_"]));
    rows.push(cmd_row("D", "Evans condition", &["scan", "evans"]));
    rows.push(cmd_row("bounds", "resolvent bound scaling", &["bounds"]));
    rows.push(cmd_row("decay", "decay rates", &["simulate"]));
    let damping = match last("simulate") {
        None => Row { id: "damping".into(), assumption: "damping energy estimate".into(), status: "not run".into(), source: None },
        Some((_, m, src)) => Row {
            id: "damping".into(),
            assumption: "damping energy estimate".into(),
            status: status(m.summary.get("damping_pass").and_then(Value::as_bool).unwrap_or(false)),
            source: Some(src.clone()),
        },
    };
    rows.push(damping);
    Ok(rows)
}

pub fn run(manifests: &[PathBuf], out: &Path) -> Result<Outcome, Fail> {
    let rows = table(manifests)?;
    for r in &rows {
        println!("{:<8} {:<34} {}", r.id, r.assumption, r.status);
    }
    println!("decay rates in d = 2 carry an arbitrarily small loss; fits use slack 0.1 (L2) and 0.15 (Linf)");
    write_json(out, &json!({ "rows": rows }))?;
    let fails = rows.iter().filter(|r| r.status == "fail").count();
    Ok(Outcome { pass: true, artifacts: vec![out.to_path_buf()], summary: json!({ "rows": rows.len(), "fail": fails }) })
}
