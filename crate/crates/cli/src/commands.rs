//! Command implementations. Each returns the text for standard output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anchorloop_core::blueprint::{parse_blueprint, review_blueprint, Blueprint, BlueprintEdit, BlueprintError};
use anchorloop_core::calibrator::CalibrationResult;
use anchorloop_core::diagnostics::RECURRENCE_THRESHOLD;
use anchorloop_core::orchestrator::{
    cre_series, history_jsonl, irr_series, parse_history, run_loop, FeedbackAgent, Generator, IterationRecord,
    LoopObserver,
};
use anchorloop_core::playbook::{Playbook, Severity, StrategyState};
use anchorloop_core::refsim::{bundled_blueprint, MockFeedback, MockGenerator, RefsimExecutor, World};
use anchorloop_llm::{EndpointConfig, LlmFeedback, LlmGenerator};
use chrono::{SecondsFormat, Utc};
use log::info;

use crate::config::{GeneratorKind, RunConfig};
use crate::failure::{fail, loop_failure, Classify, CliResult, Code, Failure};

pub fn now_utc() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true)
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))
        .or_exit(Code::Io)
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text)
        .map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))
        .or_exit(Code::Io)
}

fn load_blueprint(path: &Path) -> CliResult<Blueprint> {
    let text = read(path)?;
    parse_blueprint(&text)
        .map_err(|e| anyhow::anyhow!("{}: {}", path.display(), describe(&e)))
        .or_exit(Code::Validation)
}

fn describe(e: &BlueprintError) -> String {
    match e {
        BlueprintError::SchemaViolation(v) => {
            let lines: Vec<String> = v.iter().map(|x| format!("  {x}")).collect();
            format!("{} violation(s)\n{}", v.len(), lines.join("\n"))
        }
        other => other.to_string(),
    }
}

pub fn blueprint_validate(path: &Path) -> CliResult<String> {
    load_blueprint(path)?;
    Ok("valid\n".into())
}

fn review_targets(b: &Blueprint) -> Vec<(String, String)> {
    let mut targets = Vec::new();
    let metrics: String = b
        .metrics()
        .iter()
        .map(|m| {
            let direction = serde_json::to_value(m.direction).unwrap_or_default();
            format!("  {} ({}, weight {}): {}\n", m.key, direction.as_str().unwrap_or("?"), m.weight, m.definition)
        })
        .collect();
    targets.push(("metrics".to_string(), metrics));
    let params: String = b
        .parameters()
        .iter()
        .map(|p| format!("  {} {:?} [{}, {}]\n", p.name, p.kind, p.low, p.high))
        .collect();
    targets.push(("calibratable_parameters".to_string(), params));
    let h = b.holdout();
    targets.push(("holdout".to_string(), format!("  train_fraction={} rule={}\n", h.train_fraction, h.rule)));
    for (name, text) in b.schema_sections() {
        targets.push((format!("section {name}"), format!("  {text}\n")));
    }
    targets
}

/// Walks the blueprint section by section. Each non-empty line is an edit
/// command; an empty line (or end of input) accepts the section. Edits that
/// would make the document invalid are refused and the prompt repeats.
pub fn review_session<R: BufRead, W: Write>(original: &Blueprint, input: R, out: &mut W) -> CliResult<Blueprint> {
    let io = |e: std::io::Error| Failure::from_io(e);
    let mut lines = input.lines();
    let mut edits: Vec<BlueprintEdit> = Vec::new();
    writeln!(
        out,
        "Edit syntax: `section <name> = <text>`, `metric <key>.<field> = <value>`, \
         `param <name>.<field> = <value>`, `holdout.<field> = <value>`. Empty line accepts."
    )
    .map_err(io)?;
    'targets: for (name, shown) in review_targets(original) {
        write!(out, "\n[{name}]\n{shown}").map_err(io)?;
        loop {
            write!(out, "edit> ").map_err(io)?;
            out.flush().map_err(io)?;
            let Some(line) = lines.next() else { break 'targets };
            let line = line.map_err(io)?;
            let line = line.trim();
            if line.is_empty() {
                break;
            }
            let attempt = BlueprintEdit::parse(line).and_then(|edit| {
                let mut trial = edits.clone();
                trial.push(edit);
                review_blueprint(original, &trial).map(|_| trial)
            });
            match attempt {
                Ok(trial) => edits = trial,
                Err(e) => writeln!(out, "rejected: {}", describe(&e)).map_err(io)?,
            }
        }
    }
    review_blueprint(original, &edits)
        .map_err(|e| anyhow::anyhow!(describe(&e)))
        .or_exit(Code::Validation)
}

/// `<stem>.v<version>.json` next to the original.
pub fn reviewed_path(original: &Path, version: &str) -> PathBuf {
    let stem = original.file_stem().and_then(|s| s.to_str()).unwrap_or("blueprint");
    let safe: String = version
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect();
    original.with_file_name(format!("{stem}.v{safe}.json"))
}

pub fn blueprint_review<R: BufRead, W: Write>(path: &Path, out_path: Option<&Path>, input: R, out: &mut W) -> CliResult<String> {
    let original = load_blueprint(path)?;
    let reviewed = review_session(&original, input, out)?;
    let target = out_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| reviewed_path(path, reviewed.version()));
    write(&target, &reviewed.to_json())?;
    Ok(format!("wrote {} (version {})\n", target.display(), reviewed.version()))
}

struct FileObserver<'a> {
    cfg: &'a RunConfig,
    history: Vec<IterationRecord>,
    calib_log: fs::File,
}

impl LoopObserver for FileObserver<'_> {
    fn on_iteration(
        &mut self,
        record: &IterationRecord,
        playbook: &Playbook,
        calibration: Option<&CalibrationResult>,
    ) -> Result<(), String> {
        self.history.push(record.clone());
        fs::write(&self.cfg.history, history_jsonl(&self.history)).map_err(|e| e.to_string())?;
        let mut pb = playbook.clone();
        pb.metadata.last_updated_time = Some(now_utc());
        fs::write(&self.cfg.playbook, pb.save()).map_err(|e| e.to_string())?;
        if let Some(c) = calibration {
            c.write_jsonl(record.t, &mut self.calib_log).map_err(|e| e.to_string())?;
        }
        info!(
            "iteration {}: {:?}, objective {:?}",
            record.t, record.status, record.objective
        );
        Ok(())
    }
}

pub fn run(cfg: &RunConfig) -> CliResult<String> {
    let blueprint = match &cfg.blueprint {
        Some(path) => load_blueprint(path)?,
        None => bundled_blueprint(),
    };
    let (mut generator, mut feedback): (Box<dyn Generator>, Box<dyn FeedbackAgent>) = match cfg.generator {
        GeneratorKind::Mock => (Box::new(MockGenerator::default()), Box::new(MockFeedback::default())),
        GeneratorKind::Llm => {
            if std::env::var(&cfg.api_key_env).map_or(true, |k| k.is_empty()) {
                return fail(Code::Auth, format!("environment variable {} is not set", cfg.api_key_env));
            }
            let Some(model) = &cfg.model else {
                return fail(Code::Validation, "--model is required with --generator llm");
            };
            let mut endpoint = EndpointConfig::new(&cfg.endpoint, model);
            endpoint.api_key_env = cfg.api_key_env.clone();
            endpoint.validate().or_exit(Code::Validation)?;
            (Box::new(LlmGenerator::new(endpoint.clone())), Box::new(LlmFeedback::new(endpoint)))
        }
    };
    let playbook = if cfg.playbook.exists() {
        Playbook::load(&read(&cfg.playbook)?)
            .map_err(|e| anyhow::anyhow!("{}: {e}", cfg.playbook.display()))
            .or_exit(Code::Validation)?
    } else {
        Playbook::new(blueprint.project_name())
    };
    let calib_log = fs::File::create(&cfg.calib_log)
        .map_err(|e| anyhow::anyhow!("creating {}: {e}", cfg.calib_log.display()))
        .or_exit(Code::Io)?;
    let mut observer = FileObserver {
        cfg,
        history: Vec::new(),
        calib_log,
    };
    let executor = RefsimExecutor::new(World::generate(cfg.seed));
    let outcome = run_loop(
        &blueprint,
        generator.as_mut(),
        &executor,
        feedback.as_mut(),
        &cfg.loop_config(),
        playbook,
        &mut observer,
    )
    .map_err(loop_failure)?;

    let mut final_playbook = outcome.playbook.clone();
    let stamp = now_utc();
    final_playbook.metadata.last_updated_time = Some(stamp.clone());
    final_playbook.metadata.finalized_at = Some(stamp);
    write(&cfg.playbook, &final_playbook.save())?;

    let mut out = format!(
        "{} iterations, stopped by {:?}\n",
        outcome.history.len(),
        outcome.stop_reason
    );
    match &outcome.best {
        Some(best) => {
            let _ = writeln!(
                out,
                "best: t={} program={} objective={:.6}",
                best.t,
                best.program_id.as_deref().unwrap_or("-"),
                best.objective_or_inf()
            );
            if let Some(report) = &best.report {
                let _ = writeln!(out, "metrics: {}", report.summary());
            }
        }
        None => out.push_str("no successful iteration\n"),
    }
    Ok(out)
}

pub fn playbook_show(path: &Path, state: Option<StrategyState>, severity: Option<Severity>) -> CliResult<String> {
    let pb = Playbook::load(&read(path)?)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
        .or_exit(Code::Validation)?;
    let rows: Vec<_> = pb
        .strategies()
        .filter(|s| state.is_none_or(|x| x == s.state) && severity.is_none_or(|x| x == s.reflection.severity))
        .collect();
    let w = rows.iter().map(|s| s.id.len()).max().unwrap_or(0).max(2);
    let mut out = format!(
        "{:<w$}  {:<11} {:<8} {:>4} {:>4} {:>4} {:>4} {:>11} {:>9}\n",
        "id", "state", "severity", "u", "un", "s", "f", "reliability", "valuation"
    );
    for s in rows {
        let m = &s.meta;
        let _ = writeln!(
            out,
            "{:<w$}  {:<11} {:<8} {:>4} {:>4} {:>4} {:>4} {:>11.4} {:>9.4}",
            s.id,
            s.state.as_str(),
            s.reflection.severity.as_str(),
            m.usage_count,
            m.unusage_count,
            m.success_attribution,
            m.failure_attribution,
            s.reliability(),
            s.valuation()
        );
    }
    Ok(out)
}

fn load_history(path: &Path) -> CliResult<Vec<IterationRecord>> {
    parse_history(&read(path)?)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
        .or_exit(Code::Validation)
}

pub fn diagnose_cre(path: &Path, threshold: Option<f64>) -> CliResult<String> {
    let history = load_history(path)?;
    let counts = cre_series(&history, threshold.unwrap_or(RECURRENCE_THRESHOLD));
    let mut out = String::from("iteration,programs,strategies,total\n");
    for (rec, c) in history.iter().zip(counts) {
        let _ = writeln!(out, "{},{},{},{}", rec.t, c.programs, c.strategies, c.total());
    }
    Ok(out)
}

/// One row per iteration that has a successor to judge it by.
pub fn diagnose_irr(path: &Path) -> CliResult<String> {
    let history = load_history(path)?;
    let mut out = String::from("iteration,irr\n");
    for (t, v) in irr_series(&history) {
        let _ = writeln!(out, "{t},{v}");
    }
    Ok(out)
}

pub fn refsim_generate(seed: u64, dir: &Path) -> CliResult<String> {
    fs::create_dir_all(dir)
        .map_err(|e| anyhow::anyhow!("creating {}: {e}", dir.display()))
        .or_exit(Code::Io)?;
    let world = World::generate(seed);
    let mut written = BTreeMap::new();
    let world_json = serde_json::to_string_pretty(&world).or_exit(Code::Io)?;
    written.insert("world.json", world_json);
    let observations = serde_json::to_string_pretty(&world.observations()).or_exit(Code::Io)?;
    written.insert("observations.json", observations);
    written.insert("blueprint.json", bundled_blueprint().to_json());
    let mut out = String::new();
    for (name, text) in written {
        let path = dir.join(name);
        write(&path, &format!("{text}\n"))?;
        let _ = writeln!(out, "wrote {}", path.display());
    }
    Ok(out)
}
