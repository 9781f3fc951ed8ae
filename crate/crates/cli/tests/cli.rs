//! Runs the `anchorloop` binary against temporary directories.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use anchorloop_core::blueprint::parse_blueprint;
use anchorloop_core::orchestrator::parse_history;
use anchorloop_core::playbook::{reliability, MetaInfo, Playbook, PlaybookEvent, Reflection, Severity};
use anchorloop_core::refsim::{bundled_blueprint, World};
use serde_json::{json, Value};
use tempfile::TempDir;

fn anchorloop(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchorloop"))
        .args(args)
        .current_dir(dir)
        .env_remove("OPENAI_API_KEY")
        .output()
        .expect("binary runs")
}

fn with_stdin(args: &[&str], dir: &Path, input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_anchorloop"))
        .args(args)
        .current_dir(dir)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs");
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_bundled(dir: &Path) -> PathBuf {
    let path = dir.join("bp.json");
    fs::write(&path, bundled_blueprint().to_json()).unwrap();
    path
}

/// Mock run with few trials; returns (history path, playbook path).
fn mock_run(dir: &Path, extra: &[&str]) -> (Output, PathBuf, PathBuf) {
    let mut args = vec![
        "run",
        "--seed",
        "1",
        "--n-trials",
        "40",
        "--playbook",
        "pb.json",
        "--history",
        "h.jsonl",
        "--calib-log",
        "c.jsonl",
    ];
    args.extend_from_slice(extra);
    let out = anchorloop(&args, dir);
    (out, dir.join("h.jsonl"), dir.join("pb.json"))
}

#[test]
fn validate_exit_codes() {
    let dir = TempDir::new().unwrap();
    let good = write_bundled(dir.path());
    let ok = anchorloop(&["blueprint", "validate", "--blueprint", "bp.json"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(stdout(&ok).trim(), "valid");

    let mut doc: Value = serde_json::from_str(&fs::read_to_string(&good).unwrap()).unwrap();
    doc["calibratable_parameters"][0]["low"] = json!(5.0);
    doc["calibratable_parameters"][0]["high"] = json!(1.0);
    fs::write(dir.path().join("bad.json"), doc.to_string()).unwrap();
    let bad = anchorloop(&["blueprint", "validate", "--blueprint", "bad.json"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("calibratable_parameters[0]"), "{}", stderr(&bad));

    let missing = anchorloop(&["blueprint", "validate", "--blueprint", "nope.json"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn review_accept_all_only_bumps_version() {
    let dir = TempDir::new().unwrap();
    let path = write_bundled(dir.path());
    let out = with_stdin(&["blueprint", "review", "--blueprint", "bp.json"], dir.path(), "");
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let original = bundled_blueprint();
    let reviewed = parse_blueprint(&fs::read_to_string(dir.path().join("bp.v1.1.json")).unwrap()).unwrap();
    assert_eq!(reviewed.version(), "1.1");
    assert_eq!(reviewed.metrics(), original.metrics());
    assert_eq!(reviewed.parameters(), original.parameters());
    assert_eq!(reviewed.holdout(), original.holdout());
    assert_eq!(reviewed.schema_sections(), original.schema_sections());
    assert_eq!(fs::read_to_string(path).unwrap(), original.to_json());
}

#[test]
fn review_applies_valid_edits_and_reprompts_on_invalid_ones() {
    let dir = TempDir::new().unwrap();
    let path = write_bundled(dir.path());
    let before = fs::read_to_string(&path).unwrap();
    let input = "param risk.high = -1\nparam risk.high = 2.5\n\n";
    let out = with_stdin(
        &["blueprint", "review", "--blueprint", "bp.json", "--out", "edited.json"],
        dir.path(),
        input,
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("rejected"), "{text}");
    // the refused edit prompts again before the section is accepted
    assert!(text.matches("edit> ").count() >= 3);
    let edited = parse_blueprint(&fs::read_to_string(dir.path().join("edited.json")).unwrap()).unwrap();
    let risk = edited.parameters().iter().find(|p| p.name == "risk").unwrap();
    assert_eq!(risk.high, 2.5);
    assert_eq!(fs::read_to_string(&path).unwrap(), before);
}

#[test]
fn mock_run_writes_artifacts() {
    let dir = TempDir::new().unwrap();
    let (out, history, playbook) = mock_run(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("best: t="));
    let records = parse_history(&fs::read_to_string(&history).unwrap()).unwrap();
    assert!(!records.is_empty() && records.len() <= 9);
    let pb = Playbook::load(&fs::read_to_string(&playbook).unwrap()).unwrap();
    assert!(pb.metadata.finalized_at.as_deref().is_some_and(|t| t.ends_with('Z')));
    let calib = fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
    let successful = records.iter().filter(|r| r.report.is_some()).count();
    assert_eq!(calib.lines().count(), successful * 40);
    let first: Value = serde_json::from_str(calib.lines().next().unwrap()).unwrap();
    assert_eq!(first["iteration"], 0);
}

#[test]
fn runs_are_reproducible_apart_from_timestamps() {
    let strip = |path: &Path| {
        let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        v["playbook_metadata"]["last_updated_time"] = Value::Null;
        v["playbook_metadata"]["finalized_at"] = Value::Null;
        v
    };
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let (_, ha, pa) = mock_run(a.path(), &[]);
    let (_, hb, pb) = mock_run(b.path(), &[]);
    assert_eq!(fs::read(ha).unwrap(), fs::read(hb).unwrap());
    assert_eq!(strip(&pa), strip(&pb));
    assert_eq!(
        fs::read(a.path().join("c.jsonl")).unwrap(),
        fs::read(b.path().join("c.jsonl")).unwrap()
    );
}

#[test]
fn run_error_exit_codes() {
    let dir = TempDir::new().unwrap();
    let (missing, _, _) = mock_run(dir.path(), &["--blueprint", "absent.json"]);
    assert_eq!(missing.status.code(), Some(2));

    let (no_key, _, _) = mock_run(dir.path(), &["--generator", "llm", "--model", "m"]);
    assert_eq!(no_key.status.code(), Some(3));
    assert!(stderr(&no_key).contains("OPENAI_API_KEY"));

    let (zero, _, _) = mock_run(dir.path(), &["--max-iter", "0"]);
    assert_eq!(zero.status.code(), Some(1));
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"max_iter": 1, "seed": 4}"#).unwrap();
    let (out, history, _) = mock_run(dir.path(), &["--config", "cfg.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(parse_history(&fs::read_to_string(&history).unwrap()).unwrap().len(), 1);

    let (out, history, _) = mock_run(dir.path(), &["--config", "cfg.json", "--max-iter", "2"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(parse_history(&fs::read_to_string(&history).unwrap()).unwrap().len(), 2);
}

fn reflection(text: &str, severity: Severity) -> Reflection {
    Reflection::new(severity, text, format!("{text} cause"), format!("{text} fix"), ["rmse_calibration"])
}

/// Playbook with strategies in several states and uneven counters.
fn varied_playbook() -> Playbook {
    let mut pb = Playbook::new("p");
    let a = pb.insert(reflection("alpha drifts early", Severity::High));
    let b = pb.insert(reflection("beta stalls late", Severity::Low));
    let c = pb.insert(reflection("gamma overshoots", Severity::Blocker));
    use PlaybookEvent::*;
    for (id, events) in [
        (&a, vec![Selected, Resolved]),
        (&b, vec![NotSelected, NotSelected, Selected, Falsified, Selected, Falsified]),
        (&c, vec![Selected, Falsified, Selected, Uncertain, Selected, Resolved]),
    ] {
        for e in events {
            pb.apply(id, e).unwrap();
        }
    }
    pb
}

#[test]
fn playbook_show_rows_and_filters() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("empty.json"), Playbook::new("p").save()).unwrap();
    let empty = anchorloop(&["playbook", "show", "--playbook", "empty.json"], dir.path());
    assert_eq!(empty.status.code(), Some(0));
    assert_eq!(stdout(&empty).lines().count(), 1);

    let pb = varied_playbook();
    fs::write(dir.path().join("pb.json"), pb.save()).unwrap();
    let all = anchorloop(&["playbook", "show", "--playbook", "pb.json"], dir.path());
    let rows: Vec<String> = stdout(&all).lines().skip(1).map(String::from).collect();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        let cols: Vec<&str> = row.split_whitespace().collect();
        let n = cols.len();
        let num = |i: usize| cols[i].parse::<u32>().unwrap();
        let meta = MetaInfo {
            usage_count: num(n - 6),
            unusage_count: num(n - 5),
            success_attribution: num(n - 4),
            failure_attribution: num(n - 3),
        };
        let shown: f64 = cols[n - 2].parse().unwrap();
        assert!((shown - reliability(&meta)).abs() < 5e-5, "{row}");
        let strategy = pb.get(cols[0]).unwrap();
        assert_eq!(strategy.meta, meta);
    }

    let open = anchorloop(&["playbook", "show", "--playbook", "pb.json", "--state", "OPEN"], dir.path());
    let open_rows: Vec<String> = stdout(&open).lines().skip(1).map(String::from).collect();
    let want = pb.strategies().filter(|s| s.state.as_str() == "OPEN").count();
    assert_eq!(open_rows.len(), want);
    assert!(open_rows.iter().all(|r| r.contains(" OPEN ")));

    let bad = anchorloop(&["playbook", "show", "--playbook", "pb.json", "--state", "DONE"], dir.path());
    assert_eq!(bad.status.code(), Some(1), "usage errors are validation failures");
}

#[test]
fn diagnose_single_iteration_and_empty_registry() {
    let dir = TempDir::new().unwrap();
    let (out, _, _) = mock_run(dir.path(), &["--max-iter", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let cre = anchorloop(&["diagnose", "cre", "--history", "h.jsonl"], dir.path());
    assert_eq!(stdout(&cre), "iteration,programs,strategies,total\n0,0,0,0\n");
    let irr = anchorloop(&["diagnose", "irr", "--history", "h.jsonl"], dir.path());
    assert_eq!(stdout(&irr), "iteration,irr\n");
}

#[test]
fn diagnose_irr_all_resolved_fixture() {
    let dir = TempDir::new().unwrap();
    let (out, history, _) = mock_run(dir.path(), &["--max-iter", "2", "--patience", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(&history).unwrap();
    let mut lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    let ids = ["s-a", "s-b", "s-c"];
    lines[0]["issue_strategies"] = ids
        .iter()
        .enumerate()
        .map(|(i, s)| json!({"issue": format!("issue-{i}"), "strategy": s, "merged": false}))
        .collect();
    lines[1]["strategy_states"] = ids.iter().map(|s| (s.to_string(), json!("RESOLVED"))).collect();
    let fixture: String = lines.iter().map(|v| format!("{v}\n")).collect();
    fs::write(dir.path().join("fixture.jsonl"), fixture).unwrap();
    let irr = anchorloop(&["diagnose", "irr", "--history", "fixture.jsonl"], dir.path());
    assert_eq!(stdout(&irr), "iteration,irr\n0,1\n");

    lines[1]["strategy_states"]["s-b"] = json!("OPEN");
    let fixture: String = lines.iter().map(|v| format!("{v}\n")).collect();
    fs::write(dir.path().join("fixture.jsonl"), fixture).unwrap();
    let irr = anchorloop(&["diagnose", "irr", "--history", "fixture.jsonl"], dir.path());
    let value: f64 = stdout(&irr).lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((value - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn diagnose_rejects_garbage_history() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("h.jsonl"), "{not json}\n").unwrap();
    let out = anchorloop(&["diagnose", "cre", "--history", "h.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = anchorloop(&["diagnose", "cre", "--history", "none.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn refsim_generate_writes_world() {
    let dir = TempDir::new().unwrap();
    let out = anchorloop(&["refsim", "generate", "--seed", "5", "--out", "world"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let world: World = serde_json::from_str(&fs::read_to_string(dir.path().join("world/world.json")).unwrap()).unwrap();
    assert_eq!(world, World::generate(5));
    let obs: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("world/observations.json")).unwrap()).unwrap();
    assert_eq!(obs["days"].as_array().unwrap().len(), world.series.len());
    let bp = parse_blueprint(&fs::read_to_string(dir.path().join("world/blueprint.json")).unwrap()).unwrap();
    assert_eq!(bp, bundled_blueprint());
}
