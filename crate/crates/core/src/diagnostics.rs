//! Cross-run failure accounting: text fingerprints, Ratcliff–Obershelp
//! similarity, cumulative recurrent errors and issue resolution rate.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::playbook::StrategyState;

/// Similarity at or above which a generated artifact counts as a retry of a
/// registered failure.
pub const RECURRENCE_THRESHOLD: f64 = 0.95;

/// Normalizes text so that formatting-only differences vanish.
///
/// Full-line comments (`#` or `//`) are dropped, the text is lowercased,
/// punctuation other than `_` is removed and whitespace runs collapse to a
/// single space.
pub fn fingerprint(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let trimmed = line.trim_start();
        if trimmed.starts_with('#') || trimmed.starts_with("//") {
            continue;
        }
        // line boundary acts as whitespace
        let mut pending_space = !out.is_empty();
        for c in line.chars() {
            if c.is_whitespace() {
                pending_space = !out.is_empty();
                continue;
            }
            for lc in c.to_lowercase() {
                if lc.is_alphanumeric() || lc == '_' {
                    if pending_space {
                        out.push(' ');
                        pending_space = false;
                    }
                    out.push(lc);
                }
            }
        }
    }
    out
}

/// Ratcliff–Obershelp ratio `2·M / (|a| + |b|)` over characters, where `M`
/// is the total size of the recursively found longest matching blocks.
///
/// Matches the behaviour of a junk-free `difflib.SequenceMatcher`; the ratio
/// can differ slightly when the arguments are swapped.
pub fn similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    2.0 * matching_characters(&a, &b) as f64 / total as f64
}

fn matching_characters(a: &[char], b: &[char]) -> usize {
    let mut b2j: HashMap<char, Vec<usize>> = HashMap::new();
    for (j, c) in b.iter().enumerate() {
        b2j.entry(*c).or_default().push(j);
    }
    let mut matched = 0;
    let mut queue = vec![(0, a.len(), 0, b.len())];
    while let Some((alo, ahi, blo, bhi)) = queue.pop() {
        let (i, j, k) = longest_match(a, &b2j, alo, ahi, blo, bhi);
        if k == 0 {
            continue;
        }
        matched += k;
        if alo < i && blo < j {
            queue.push((alo, i, blo, j));
        }
        if i + k < ahi && j + k < bhi {
            queue.push((i + k, ahi, j + k, bhi));
        }
    }
    matched
}

/// Longest common block in `a[alo..ahi]` and `b[blo..bhi]`; ties go to the
/// smallest start in `a`, then in `b`.
fn longest_match(
    a: &[char],
    b2j: &HashMap<char, Vec<usize>>,
    alo: usize,
    ahi: usize,
    blo: usize,
    bhi: usize,
) -> (usize, usize, usize) {
    let (mut best_i, mut best_j, mut best_k) = (alo, blo, 0);
    let mut j2len: HashMap<usize, usize> = HashMap::new();
    for (i, c) in a.iter().enumerate().take(ahi).skip(alo) {
        let mut next = HashMap::new();
        if let Some(positions) = b2j.get(c) {
            for &j in positions {
                if j < blo {
                    continue;
                }
                if j >= bhi {
                    break;
                }
                let k = if j > 0 { j2len.get(&(j - 1)).copied().unwrap_or(0) } else { 0 } + 1;
                next.insert(j, k);
                if k > best_k {
                    best_i = i + 1 - k;
                    best_j = j + 1 - k;
                    best_k = k;
                }
            }
        }
        j2len = next;
    }
    (best_i, best_j, best_k)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Strategy(String),
    Program(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub fingerprint: String,
    pub iteration: u32,
    pub origin: Origin,
}

/// History of falsified strategies and failed programs, in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureRegistry {
    entries: Vec<RegistryEntry>,
}

impl FailureRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers raw text; it is fingerprinted on the way in.
    pub fn record(&mut self, text: &str, iteration: u32, origin: Origin) {
        self.record_fingerprint(fingerprint(text), iteration, origin);
    }

    pub fn record_fingerprint(&mut self, fingerprint: String, iteration: u32, origin: Origin) {
        self.entries.push(RegistryEntry {
            fingerprint,
            iteration,
            origin,
        });
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whether an already-fingerprinted text repeats a registered failure.
    pub fn is_recurrent(&self, fp: &str, threshold: f64) -> bool {
        let len = fp.chars().count();
        self.entries.iter().any(|e| {
            let other = e.fingerprint.chars().count();
            // cheap upper bound on the ratio before the full comparison
            let bound = if len + other == 0 {
                1.0
            } else {
                2.0 * len.min(other) as f64 / (len + other) as f64
            };
            bound >= threshold && similarity(fp, &e.fingerprint) >= threshold
        })
    }
}

/// Number of outputs whose fingerprint is at least `threshold`-similar to
/// some registry entry. Each output counts once.
pub fn count_recurrent<S: AsRef<str>>(outputs: &[S], registry: &FailureRegistry, threshold: f64) -> usize {
    outputs
        .iter()
        .filter(|o| registry.is_recurrent(&fingerprint(o.as_ref()), threshold))
        .count()
}

/// Share of iteration-t issues whose strategy is RESOLVED at t+1; 1 when
/// there were no issues.
pub fn irr(issues_prev: &[(String, String)], states_next: &BTreeMap<String, StrategyState>) -> f64 {
    if issues_prev.is_empty() {
        return 1.0;
    }
    let resolved = issues_prev
        .iter()
        .filter(|(_, sid)| states_next.get(sid) == Some(&StrategyState::Resolved))
        .count();
    resolved as f64 / issues_prev.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fingerprint_folds_case_and_space() {
        assert_eq!(fingerprint("Foo  Bar"), fingerprint("foo bar"));
        assert_eq!(fingerprint(""), "");
        assert_eq!(fingerprint("x = f(a, b);"), "x fa b");
        assert_eq!(fingerprint("snake_case\tVALUE"), "snake_case value");
    }

    #[test]
    fn fingerprint_drops_comment_lines() {
        let base = "let x = 1;\nlet y = 2;";
        assert_eq!(fingerprint(base), fingerprint(&format!("{base}\n// trailing note")));
        assert_eq!(fingerprint(base), fingerprint(&format!("{base}\n  # another")));
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity("same text", "same text"), 1.0);
        assert_eq!(similarity("abcd", "wxyz"), 0.0);
        assert_eq!(similarity("abcd", "abce"), 0.75);
        assert_eq!(similarity("", ""), 1.0);
        assert_eq!(similarity("", "a"), 0.0);
    }

    #[test]
    fn similarity_finds_blocks_on_both_sides() {
        // blocks "ab" and "de" around a changed middle
        assert_eq!(similarity("abxde", "abyde"), 0.8);
    }

    #[test]
    fn recurrent_counting() {
        let empty = FailureRegistry::new();
        assert_eq!(count_recurrent(&["anything"], &empty, 0.95), 0);

        let mut reg = FailureRegistry::new();
        reg.record("Add a broadcast term", 0, Origin::Strategy("s".into()));
        assert_eq!(count_recurrent(&["add a broadcast term!"], &reg, 0.95), 1);
    }

    #[test]
    fn recurrent_threshold_separates_near_misses() {
        // 25-char entry; one substitution leaves 24 matches: 48/50 = 0.96
        let long = "abcdefghijklmnopqrstuvwxy";
        let near = "abcdefghijklznopqrstuvwxy";
        // 20-char entry; two substitutions leave 18 matches: 36/40 = 0.90
        let short = "0123456789klmnopqrst";
        let far = "0123456789kzmnopzrst";
        assert_eq!(similarity(near, long), 0.96);
        assert_eq!(similarity(far, short), 0.9);

        let mut reg = FailureRegistry::new();
        reg.record(long, 0, Origin::Program("p0".into()));
        reg.record(short, 0, Origin::Program("p1".into()));
        assert_eq!(count_recurrent(&[near, far], &reg, 0.95), 1);
    }

    #[test]
    fn irr_examples() {
        let issues: Vec<(String, String)> = (0..7).map(|i| (format!("i{i}"), format!("s{i}"))).collect();
        let all: BTreeMap<_, _> = issues
            .iter()
            .map(|(_, s)| (s.clone(), StrategyState::Resolved))
            .collect();
        assert_eq!(irr(&issues, &all), 1.0);

        let issues: Vec<(String, String)> = (0..5).map(|i| (format!("i{i}"), format!("s{i}"))).collect();
        let mut states: BTreeMap<_, _> = issues
            .iter()
            .map(|(_, s)| (s.clone(), StrategyState::Open))
            .collect();
        states.insert("s0".into(), StrategyState::Resolved);
        states.insert("s3".into(), StrategyState::Resolved);
        assert_eq!(irr(&issues, &states), 0.4);

        assert_eq!(irr(&[], &BTreeMap::new()), 1.0);
    }

    proptest! {
        #[test]
        fn similarity_bounds(a in ".{0,40}", b in ".{0,40}") {
            let s = similarity(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(similarity(&a, &a), 1.0);
        }

        #[test]
        fn fingerprint_idempotent(text in "(?s).{0,80}") {
            let once = fingerprint(&text);
            prop_assert_eq!(fingerprint(&once), once.clone());
        }

        #[test]
        fn recurrence_monotone_in_registry(
            outputs in proptest::collection::vec("[a-c ]{0,12}", 0..5),
            entries in proptest::collection::vec("[a-c ]{0,12}", 0..6),
        ) {
            let mut reg = FailureRegistry::new();
            let mut last = count_recurrent(&outputs, &reg, 0.8);
            for e in &entries {
                reg.record(e, 0, Origin::Program("p".into()));
                let now = count_recurrent(&outputs, &reg, 0.8);
                prop_assert!(now >= last);
                last = now;
            }
        }
    }
}
