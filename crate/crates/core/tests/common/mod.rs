//! Independent oracles and random instance generators shared by the
//! integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use anchorloop_core::blueprint::{Blueprint, Direction, Holdout, MetricDef, ParamBound, ParamKind};
use anchorloop_core::playbook::{CodeRef, Evidence, Playbook, PlaybookEvent, Reflection, Severity};
use anchorloop_core::selection::Candidate;
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

/// W1 between two empirical samples as a min-cost transportation problem.
///
/// Every point of `a` supplies `m` units and every point of `b` demands `n`
/// units; successive shortest paths (Bellman-Ford) route the `n*m` units.
pub fn w1_min_cost_flow(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    // nodes: source, a_0..a_n, b_0..b_m, sink
    let src = 0;
    let sink = n + m + 1;
    let nodes = n + m + 2;
    struct Edge {
        to: usize,
        cap: i64,
        cost: f64,
    }
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let add = |edges: &mut Vec<Edge>, adj: &mut Vec<Vec<usize>>, u: usize, v: usize, cap: i64, cost: f64| {
        adj[u].push(edges.len());
        edges.push(Edge { to: v, cap, cost });
        adj[v].push(edges.len());
        edges.push(Edge { to: u, cap: 0, cost: -cost });
    };
    for i in 0..n {
        add(&mut edges, &mut adj, src, 1 + i, m as i64, 0.0);
        for j in 0..m {
            add(&mut edges, &mut adj, 1 + i, 1 + n + j, i64::MAX / 4, (a[i] - b[j]).abs());
        }
    }
    for j in 0..m {
        add(&mut edges, &mut adj, 1 + n + j, sink, n as i64, 0.0);
    }
    let mut remaining = (n * m) as i64;
    let mut total = 0.0;
    while remaining > 0 {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut via: Vec<Option<usize>> = vec![None; nodes];
        dist[src] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if dist[u].is_infinite() {
                    continue;
                }
                for &e in &adj[u] {
                    let edge = &edges[e];
                    if edge.cap > 0 && dist[u] + edge.cost < dist[edge.to] - 1e-15 {
                        dist[edge.to] = dist[u] + edge.cost;
                        via[edge.to] = Some(e);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        assert!(dist[sink].is_finite(), "flow network disconnected");
        let mut push = remaining;
        let mut v = sink;
        while let Some(e) = via[v] {
            push = push.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = sink;
        while let Some(e) = via[v] {
            edges[e].cap -= push;
            edges[e ^ 1].cap += push;
            v = edges[e ^ 1].to;
        }
        total += push as f64 * dist[sink];
        remaining -= push;
    }
    total / (n * m) as f64
}

fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.log2()).sum::<f64>()
}

/// JSD in bits through the entropy identity H(M) - (H(P) + H(Q)) / 2.
pub fn jsd_entropy_form(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    entropy_bits(&m) - (entropy_bits(p) + entropy_bits(q)) / 2.0
}

/// KL(p || smoothed q) in bits, accumulated in nats.
pub fn kl_direct(p: &[f64], q: &[f64], smoothing: f64) -> f64 {
    let z: f64 = q.iter().sum::<f64>() + smoothing * q.len() as f64;
    let mut nats = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi > 0.0 {
            nats += pi * (pi.ln() - ((qi + smoothing) / z).ln());
        }
    }
    nats / std::f64::consts::LN_2
}

pub fn random_distribution<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k)
        .map(|_| if rng.gen_bool(0.15) { 0.0 } else { rng.gen::<f64>() })
        .collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        let mut v = vec![0.0; k];
        v[0] = 1.0;
        return v;
    }
    raw.iter().map(|x| x / total).collect()
}

/// Best quantized total value over all subsets within budget.
pub fn knapsack_brute_force(items: &[Candidate], budget: usize) -> i64 {
    let n = items.len();
    let mut best = 0i64;
    for mask in 0u32..(1 << n) {
        let mut cost = 0usize;
        let mut value = 0i64;
        for (i, item) in items.iter().enumerate() {
            if mask >> i & 1 == 1 {
                cost += item.cost;
                value += (item.value * 1e6).round() as i64;
            }
        }
        if cost <= budget {
            best = best.max(value);
        }
    }
    best
}

pub fn quantized(items: &[Candidate], chosen: &[String]) -> i64 {
    items
        .iter()
        .filter(|c| chosen.contains(&c.id))
        .map(|c| (c.value * 1e6).round() as i64)
        .sum()
}

const WORDS: [&str; 24] = [
    "share", "layer", "peer", "bias", "drift", "visits", "stop", "count", "gap", "window", "family", "work",
    "timing", "sampler", "kernel", "lag", "weight", "calibrate", "curve", "tail", "mode", "noise", "signal",
    "budget",
];

pub fn random_sentence<R: Rng>(rng: &mut R, min_words: usize, max_words: usize) -> String {
    let n = rng.gen_range(min_words..=max_words);
    let mut words: Vec<String> = (0..n)
        .map(|_| WORDS.choose(rng).expect("non-empty").to_string())
        .collect();
    // a unique tag keeps independently drawn texts apart
    words.push(format!("x{}", rng.gen::<u32>()));
    words.join(" ")
}

pub fn random_reflection<R: Rng>(rng: &mut R, metrics: &[&str]) -> Reflection {
    let severity = *[Severity::Blocker, Severity::High, Severity::Medium, Severity::Low]
        .choose(rng)
        .expect("non-empty");
    let k = rng.gen_range(1..=metrics.len());
    let links: BTreeSet<String> = metrics
        .choose_multiple(rng, k)
        .map(|s| s.to_string())
        .collect();
    Reflection {
        issue_type: ["MODEL_STRUCTURE", "EVAL_SIGNAL", "RUNTIME_ERROR"]
            .choose(rng)
            .expect("non-empty")
            .to_string(),
        severity,
        from_user_feedback: rng.gen_bool(0.2),
        blueprint_refs: (0..rng.gen_range(0..3)).map(|_| random_sentence(rng, 1, 3)).collect(),
        code_refs: (0..rng.gen_range(0..3))
            .map(|_| CodeRef {
                symbol: format!("Sim.step_{}", rng.gen_range(0..50)),
                lines: if rng.gen_bool(0.5) {
                    "unknown".into()
                } else {
                    format!("{}-{}", rng.gen_range(1..100), rng.gen_range(100..200))
                },
            })
            .collect(),
        evidence: Evidence {
            metrics: format!("{}={:.4}", links.iter().next().expect("non-empty"), rng.gen::<f64>()),
            error_logs: rng.gen_bool(0.3).then(|| random_sentence(rng, 2, 6)),
            user_feedback: rng.gen_bool(0.1).then(|| "needs \"quotes\"\nand newlines".to_string()),
        },
        error_identification: random_sentence(rng, 4, 12),
        root_cause_analysis: random_sentence(rng, 4, 12),
        correct_approach: random_sentence(rng, 4, 12),
        key_insight: rng.gen_bool(0.5).then(|| random_sentence(rng, 2, 8)),
        metric_links: links,
    }
}

/// Playbook reached through legal lifecycle moves only.
pub fn random_playbook<R: Rng>(rng: &mut R) -> Playbook {
    let metrics = ["rmse_calibration", "rmse_evaluation", "stop_count_mae", "category_mix_jsd"];
    let mut pb = Playbook::new(format!("project_{}", rng.gen_range(0..100)));
    if rng.gen_bool(0.7) {
        pb.metadata.last_updated_time = Some(format!("2026-01-0{}T10:18:58Z", rng.gen_range(1..10)));
        pb.metadata.last_updated_iteration = Some(rng.gen_range(0..10));
    }
    if rng.gen_bool(0.3) {
        pb.metadata.finalized_at = Some("2026-01-03T18:07:02Z".into());
    }
    for _ in 0..rng.gen_range(0..6) {
        let id = pb.insert(random_reflection(rng, &metrics));
        for _ in 0..rng.gen_range(0..8) {
            let event = *PlaybookEvent::ALL[1..].choose(rng).expect("non-empty");
            // illegal moves are skipped; the playbook stays as it was
            let _ = pb.apply(&id, event);
        }
    }
    pb
}

pub fn random_identifier<R: Rng>(rng: &mut R, prefix: &str) -> String {
    format!("{prefix}_{}", rng.gen_range(0..1_000_000))
}

/// Valid blueprint with unique keys and well-formed bounds.
pub fn random_blueprint<R: Rng>(rng: &mut R) -> Blueprint {
    let mut keys = BTreeSet::new();
    let metrics: Vec<MetricDef> = (0..rng.gen_range(1..5))
        .filter_map(|_| {
            let key = random_identifier(rng, "metric");
            keys.insert(key.clone()).then(|| MetricDef {
                key,
                direction: if rng.gen_bool(0.7) {
                    Direction::LowerBetter
                } else {
                    Direction::HigherBetter
                },
                weight: (rng.gen_range(0.0..5.0f64) * 100.0).round() / 100.0,
                definition: random_sentence(rng, 0, 10),
            })
        })
        .collect();
    let mut names = BTreeSet::new();
    let parameters: Vec<ParamBound> = (0..rng.gen_range(1..6))
        .filter_map(|_| {
            let name = random_identifier(rng, "theta");
            if !names.insert(name.clone()) {
                return None;
            }
            Some(match rng.gen_range(0..3) {
                0 => {
                    let low = rng.gen_range(-100..100) as f64;
                    ParamBound {
                        name,
                        kind: ParamKind::Integer,
                        low,
                        high: low + rng.gen_range(1..50) as f64,
                        map_keys: Vec::new(),
                    }
                }
                1 => {
                    let low: f64 = rng.gen_range(-10.0..10.0);
                    ParamBound {
                        name,
                        kind: ParamKind::Real,
                        low,
                        high: low + rng.gen_range(0.001..10.0),
                        map_keys: Vec::new(),
                    }
                }
                _ => ParamBound {
                    name,
                    kind: ParamKind::RealMap,
                    low: 0.25,
                    high: 4.0,
                    map_keys: (0..rng.gen_range(1..4)).map(|i| format!("key{i}")).collect(),
                },
            })
        })
        .collect();
    let mut sections = IndexMap::new();
    for name in ["roles", "topology", "signals", "policies"] {
        if rng.gen_bool(0.6) {
            sections.insert(name.to_string(), random_sentence(rng, 3, 15));
        }
    }
    Blueprint::new(
        random_identifier(rng, "project"),
        format!("{}.{}", rng.gen_range(1..4), rng.gen_range(0..10)),
        metrics,
        parameters,
        Holdout {
            train_fraction: rng.gen_range(1..20) as f64 / 20.0,
            rule: random_sentence(rng, 2, 8),
        },
        sections,
    )
    .expect("generator emits valid blueprints")
}

/// Diagnosis-like document with every kind of defect mixed in.
pub fn random_diagnosis_document<R: Rng>(rng: &mut R, whitelist: &[&str]) -> String {
    let entries: Vec<Value> = (0..rng.gen_range(0..6)).map(|_| random_entry(rng, whitelist)).collect();
    let doc = if rng.gen_bool(0.5) {
        Value::Array(entries)
    } else {
        json!({ "issues": entries })
    };
    let text = doc.to_string();
    match rng.gen_range(0..10) {
        0 => format!("Here is my analysis.\n```json\n{text}\n```\nDone."),
        1 => text[..rng.gen_range(0..=text.len())].to_string(),
        _ => text,
    }
}

fn random_entry<R: Rng>(rng: &mut R, whitelist: &[&str]) -> Value {
    if rng.gen_bool(0.05) {
        return json!(rng.gen::<i32>());
    }
    let mut obj = serde_json::Map::new();
    for field in ["symptom", "mechanism_hypothesis", "remediation", "issue_type"] {
        match rng.gen_range(0..12) {
            0 => {}
            1 => {
                obj.insert(field.into(), json!(""));
            }
            2 => {
                obj.insert(field.into(), json!("   \n\t"));
            }
            3 => {
                obj.insert(field.into(), json!(42));
            }
            4 => {
                obj.insert(field.into(), Value::Null);
            }
            _ => {
                obj.insert(field.into(), json!(random_sentence(rng, 1, 6)));
            }
        }
    }
    let severity = match rng.gen_range(0..8) {
        0 => Value::Null,
        1 => json!("CRITICAL"),
        2 => json!(3),
        3 => json!("high"),
        _ => json!(["BLOCKER", "HIGH", "MEDIUM", "LOW"].choose(rng).expect("non-empty")),
    };
    if rng.gen_bool(0.95) {
        obj.insert("severity".into(), severity);
    }
    let links: Value = match rng.gen_range(0..8) {
        0 => json!([]),
        1 => json!("rmse"),
        2 => json!([whitelist[0], "nonexistent_metric"]),
        3 => json!([whitelist[0].to_uppercase()]),
        4 => json!([format!(" {}", whitelist[0])]),
        5 => json!([1, 2]),
        _ => {
            let k = rng.gen_range(1..=whitelist.len());
            json!(whitelist.choose_multiple(rng, k).collect::<Vec<_>>())
        }
    };
    if rng.gen_bool(0.95) {
        obj.insert("metric_links".into(), links);
    }
    if rng.gen_bool(0.3) {
        obj.insert("code_refs".into(), json!([{"symbol": "f", "lines": "unknown"}]));
    }
    Value::Object(obj)
}

pub fn map_keys(m: &BTreeMap<String, f64>) -> BTreeSet<String> {
    m.keys().cloned().collect()
}
