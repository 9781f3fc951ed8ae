//! Budgeted strategy retrieval (exact 0–1 knapsack) and three-zone prompt
//! layout.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::playbook::{token_count, Playbook, PlaybookError, PlaybookEvent, Strategy, StrategyState};

/// Default token budget for strategies in the instruction zone.
pub const DEFAULT_RECENCY_BUDGET: usize = 1000;

const VALUE_SCALE: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("selected strategies need {needed} tokens, budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub value: f64,
    pub cost: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: Vec<String>,
    pub total_cost: usize,
    pub total_value: f64,
}

/// OPEN and QUEUED strategies, highest valuation first, ids ascending on ties.
pub fn candidate_pool(pb: &Playbook) -> Vec<&Strategy> {
    let mut pool: Vec<(f64, &Strategy)> = pb
        .strategies()
        .filter(|s| matches!(s.state, StrategyState::Open | StrategyState::Queued))
        .map(|s| (s.valuation(), s))
        .collect();
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    pool.into_iter().map(|(_, s)| s).collect()
}

/// Text block a strategy occupies in the prompt. Always ends with a newline,
/// so blocks concatenate without separators.
pub fn render_strategy(s: &Strategy) -> String {
    let r = &s.reflection;
    let links: Vec<&str> = r.metric_links.iter().map(String::as_str).collect();
    let mut out = format!(
        "### Strategy: {}\nseverity: {} | reliability: {:.2} | metrics: {}\nsymptom: {}\nroot cause: {}\nremediation: {}\n",
        s.id,
        r.severity,
        s.reliability(),
        links.join(", "),
        r.error_identification.trim(),
        r.root_cause_analysis.trim(),
        r.correct_approach.trim(),
    );
    if let Some(insight) = r.key_insight.as_deref().filter(|k| !k.trim().is_empty()) {
        out.push_str(&format!("insight: {}\n", insight.trim()));
    }
    out
}

/// Knapsack items for a pool: valuation as value, rendered size as cost.
pub fn candidates(pool: &[&Strategy]) -> Vec<Candidate> {
    pool.iter()
        .map(|s| Candidate {
            id: s.id.clone(),
            value: s.valuation(),
            cost: token_count(&render_strategy(s)),
        })
        .collect()
}

/// Exact 0–1 knapsack over the token budget.
///
/// Values are compared as `round(v·10⁶)` integers. Among optimal subsets the
/// one with the smaller total cost wins, then the lexicographically smallest
/// sorted id tuple. `chosen` keeps the input order.
pub fn select_knapsack(items: &[Candidate], budget: usize) -> SelectionResult {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].id.cmp(&items[b].id).then(a.cmp(&b)));
    let n = order.len();
    let cap = budget.min(items.iter().map(|c| c.cost).sum());
    let value = |i: usize| (items[i].value * VALUE_SCALE).round() as i64;

    // best[k][c]: best (value, cost) using sorted items k.. within capacity c
    let mut best = vec![vec![(0i64, 0usize); cap + 1]; n + 1];
    for k in (0..n).rev() {
        let item = order[k];
        let (v, w) = (value(item), items[item].cost);
        for c in 0..=cap {
            let skip = best[k + 1][c];
            best[k][c] = if w <= c {
                let rest = best[k + 1][c - w];
                better(skip, (rest.0 + v, rest.1 + w))
            } else {
                skip
            };
        }
    }

    // walk forward taking the smallest id that still reaches the optimum
    let mut picked = BTreeSet::new();
    let (mut k, mut c) = (0, cap);
    while k < n && best[k][c] != (0, 0) {
        let target = best[k][c];
        let j = (k..n)
            .find(|&j| {
                let item = order[j];
                let w = items[item].cost;
                w <= c && {
                    let rest = best[j + 1][c - w];
                    (rest.0 + value(item), rest.1 + w) == target
                }
            })
            .expect("optimal value is reachable");
        picked.insert(order[j]);
        c -= items[order[j]].cost;
        k = j + 1;
    }

    let chosen: Vec<usize> = (0..items.len()).filter(|i| picked.contains(i)).collect();
    SelectionResult {
        chosen: chosen.iter().map(|&i| items[i].id.clone()).collect(),
        total_cost: chosen.iter().map(|&i| items[i].cost).sum(),
        total_value: chosen.iter().map(|&i| items[i].value).sum(),
    }
}

fn better(a: (i64, usize), b: (i64, usize)) -> (i64, usize) {
    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

/// Fires E_selected on chosen pool members and not_selected on the rest of
/// the pool. Fails without changes if a chosen id is not in the pool.
pub fn mark_selection(pb: &mut Playbook, result: &SelectionResult) -> Result<(), PlaybookError> {
    let pool: Vec<String> = candidate_pool(pb).into_iter().map(|s| s.id.clone()).collect();
    for id in &result.chosen {
        if !pool.contains(id) {
            return Err(match pb.get(id) {
                None => PlaybookError::UnknownStrategy(id.clone()),
                Some(s) => PlaybookError::IllegalTransition {
                    state: Some(s.state),
                    event: PlaybookEvent::Selected,
                },
            });
        }
    }
    for id in &pool {
        let event = if result.chosen.contains(id) {
            PlaybookEvent::Selected
        } else {
            PlaybookEvent::NotSelected
        };
        pb.apply(id, event)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub system_zone: String,
    pub background_zone: String,
    pub instruction_zone: String,
}

impl PromptLayout {
    /// Single prompt text with the instruction zone last.
    pub fn concatenated(&self) -> String {
        format!(
            "{}\n\n{}\n\n{}",
            self.system_zone, self.background_zone, self.instruction_zone
        )
    }
}

/// Places the blueprint and selected strategies in the final zone, where
/// the generator attends most reliably.
pub fn layout_prompt(
    system: &str,
    background: &str,
    blueprint_text: &str,
    selected: &[&Strategy],
    recency_budget: usize,
) -> Result<PromptLayout, SelectionError> {
    let rendered: String = selected.iter().map(|s| render_strategy(s)).collect();
    let needed = token_count(&rendered);
    if needed > recency_budget {
        return Err(SelectionError::BudgetExceeded {
            needed,
            budget: recency_budget,
        });
    }
    let instruction_zone = if rendered.is_empty() {
        blueprint_text.to_string()
    } else {
        format!("{blueprint_text}\n\n{rendered}")
    };
    Ok(PromptLayout {
        system_zone: system.to_string(),
        background_zone: background.to_string(),
        instruction_zone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::playbook::{Reflection, Severity};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn item(id: &str, value: f64, cost: usize) -> Candidate {
        Candidate {
            id: id.into(),
            value,
            cost,
        }
    }

    fn reflection(text: &str, sev: Severity) -> Reflection {
        Reflection::new(sev, text, format!("{text} cause"), format!("{text} fix"), ["m"])
    }

    #[test]
    fn knapsack_examples() {
        let empty = select_knapsack(&[], 10);
        assert!(empty.chosen.is_empty());
        assert_eq!(empty.total_value, 0.0);

        let one = select_knapsack(&[item("a", 0.5, 3)], 3);
        assert_eq!(one.chosen, vec!["a"]);
        assert_eq!(one.total_cost, 3);

        let r = select_knapsack(&[item("A", 0.9, 3), item("B", 0.8, 2), item("C", 0.3, 2)], 4);
        assert_eq!(r.chosen, vec!["B", "C"]);
        assert!((r.total_value - 1.1).abs() < 1e-12);
    }

    #[test]
    fn knapsack_tie_breaks() {
        // equal value: cheaper subset wins
        let r = select_knapsack(&[item("a", 0.5, 4), item("b", 0.5, 2)], 10);
        assert_eq!(r.chosen.len(), 2);
        let r = select_knapsack(&[item("a", 0.5, 4), item("b", 0.5, 2)], 4);
        assert_eq!(r.chosen, vec!["b"]);
        // equal value and cost: smaller id tuple wins, regardless of input order
        let r = select_knapsack(&[item("z", 0.5, 2), item("m", 0.5, 2)], 2);
        assert_eq!(r.chosen, vec!["m"]);
        // {a, d} beats {b, c} at equal value and cost
        let r = select_knapsack(
            &[item("d", 0.2, 1), item("c", 0.3, 1), item("b", 0.4, 1), item("a", 0.5, 1)],
            2,
        );
        assert_eq!(r.chosen, vec!["b", "a"]);
        let r = select_knapsack(
            &[item("d", 0.4, 1), item("c", 0.3, 1), item("b", 0.6, 1), item("a", 0.5, 1)],
            2,
        );
        assert_eq!(r.chosen, vec!["b", "a"]);
        let r = select_knapsack(
            &[item("a", 0.5, 1), item("b", 0.3, 1), item("c", 0.2, 1), item("d", 0.6, 1)],
            2,
        );
        assert_eq!(r.chosen, vec!["a", "d"]);
    }

    #[test]
    fn zero_value_items_are_left_out() {
        let r = select_knapsack(&[item("a", 0.0, 0), item("b", 0.0, 1)], 5);
        assert!(r.chosen.is_empty());
    }

    #[test]
    fn pool_examples() {
        let mut pb = Playbook::new("p");
        let id = pb.insert(reflection("resolved one", Severity::High));
        pb.apply(&id, PlaybookEvent::Selected).unwrap();
        pb.apply(&id, PlaybookEvent::Resolved).unwrap();
        assert!(candidate_pool(&pb).is_empty());

        let low = pb.insert(reflection("low", Severity::Low));
        let high = pb.insert(reflection("high", Severity::High));
        pb.apply(&low, PlaybookEvent::NotSelected).unwrap();
        let ids: Vec<&str> = candidate_pool(&pb).iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec![high.as_str(), low.as_str()]);

        let mut pb = Playbook::new("p");
        let b = pb.insert(reflection("bbb", Severity::Medium));
        let a = pb.insert(reflection("aaa", Severity::Medium));
        let ids: Vec<&str> = candidate_pool(&pb).iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec![a.as_str(), b.as_str()]);
    }

    #[test]
    fn mark_selection_examples() {
        let mut pb = Playbook::new("p");
        let x = pb.insert(reflection("x", Severity::High));
        let sel = SelectionResult {
            chosen: vec![x.clone()],
            ..Default::default()
        };
        mark_selection(&mut pb, &sel).unwrap();
        assert_eq!(pb.get(&x).unwrap().state, StrategyState::InProgress);
        assert_eq!(pb.get(&x).unwrap().meta.usage_count, 1);

        let mut pb = Playbook::new("p");
        let x = pb.insert(reflection("x", Severity::High));
        let y = pb.insert(reflection("y", Severity::High));
        let sel = SelectionResult {
            chosen: vec![x.clone()],
            ..Default::default()
        };
        mark_selection(&mut pb, &sel).unwrap();
        assert_eq!(pb.get(&y).unwrap().state, StrategyState::Queued);
        assert_eq!(pb.get(&y).unwrap().meta.unusage_count, 1);

        let mut pb = Playbook::new("p");
        let x = pb.insert(reflection("x", Severity::High));
        mark_selection(&mut pb, &SelectionResult::default()).unwrap();
        assert_eq!(pb.get(&x).unwrap().state, StrategyState::Queued);

        let sel = SelectionResult {
            chosen: vec!["ghost".into()],
            ..Default::default()
        };
        assert!(mark_selection(&mut pb, &sel).is_err());
    }

    #[test]
    fn layout_examples() {
        let l = layout_prompt("sys", "bg", "BLUEPRINT", &[], 1000).unwrap();
        assert_eq!(l.instruction_zone, "BLUEPRINT");

        let mut pb = Playbook::new("p");
        let id = pb.insert(reflection("some issue", Severity::High));
        let s = pb.get(&id).unwrap();
        let l = layout_prompt("sys", "bg", "BLUEPRINT", &[s], 1000).unwrap();
        let full = l.concatenated();
        let bp = full.find("BLUEPRINT").unwrap();
        let st = full.find("### Strategy:").unwrap();
        assert!(bp < st);
        assert!(full.ends_with(&render_strategy(s)));
        assert!(full.starts_with("sys"));

        let big = Reflection::new(Severity::High, "e".repeat(1500), "r".repeat(1500), "c".repeat(1400), ["m"]);
        let id = pb.insert(big);
        let s = pb.get(&id).unwrap();
        assert!(token_count(&render_strategy(s)) > 1000);
        assert!(matches!(
            layout_prompt("sys", "bg", "BLUEPRINT", &[s], 1000),
            Err(SelectionError::BudgetExceeded { .. })
        ));
    }

    fn brute_force(items: &[Candidate], budget: usize) -> i64 {
        (0u32..1 << items.len())
            .filter_map(|mask| {
                let (mut v, mut c) = (0i64, 0usize);
                for (i, it) in items.iter().enumerate() {
                    if mask >> i & 1 == 1 {
                        v += (it.value * VALUE_SCALE).round() as i64;
                        c += it.cost;
                    }
                }
                (c <= budget).then_some(v)
            })
            .max()
            .unwrap_or(0)
    }

    proptest! {
        #[test]
        fn knapsack_matches_enumeration(
            raw in proptest::collection::vec((0.0f64..1.5, 0usize..30), 0..13),
            budget in 0usize..120,
        ) {
            let items: Vec<Candidate> = raw
                .iter()
                .enumerate()
                .map(|(i, &(v, c))| item(&format!("s{i:02}"), v, c))
                .collect();
            let r = select_knapsack(&items, budget);
            prop_assert!(r.total_cost <= budget);
            let got: i64 = r
                .chosen
                .iter()
                .map(|id| items.iter().find(|c| &c.id == id).unwrap())
                .map(|c| (c.value * VALUE_SCALE).round() as i64)
                .sum();
            prop_assert_eq!(got, brute_force(&items, budget));
            let distinct: BTreeSet<&String> = r.chosen.iter().collect();
            prop_assert_eq!(distinct.len(), r.chosen.len());
        }

        #[test]
        fn mark_selection_partitions_pool(n in 1usize..6, mask in 0u32..64, budget in 0usize..400) {
            let mut pb = Playbook::new("p");
            for i in 0..n {
                let id = pb.insert(reflection(&format!("issue {i}"), Severity::Medium));
                if mask >> i & 1 == 1 {
                    pb.apply(&id, PlaybookEvent::NotSelected).unwrap();
                }
            }
            let pool = candidate_pool(&pb);
            let sel = select_knapsack(&candidates(&pool), budget);
            mark_selection(&mut pb, &sel).unwrap();
            for s in pb.strategies() {
                let expected = if sel.chosen.contains(&s.id) {
                    StrategyState::InProgress
                } else {
                    StrategyState::Queued
                };
                prop_assert_eq!(s.state, expected);
            }
        }
    }
}
