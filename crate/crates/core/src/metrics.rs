//! Fidelity metrics and metric-driven feedback events.
//!
//! All logarithms are base 2, so [`jsd`] is bounded by 1.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blueprint::Direction;

/// Default relative-change threshold for feedback events.
pub const DEFAULT_TAU: f64 = 0.03;
/// Default stabilizer in the relative-change denominator.
pub const DEFAULT_EPSILON: f64 = 1e-9;

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("distribution is not normalized (sum {0})")]
    NotNormalized(f64),
    #[error("support size mismatch: {0} vs {1}")]
    SupportMismatch(usize, usize),
    #[error("metric link `{0}` missing from a report")]
    MissingLink(String),
    #[error("no metric links given")]
    EmptyLinks,
    #[error("metric `{0}` has no declared direction")]
    UnknownDirection(String),
    #[error("metric `{0}` is not finite")]
    NonFinite(String),
    #[error("metric `{0}` is not in the whitelist")]
    NotWhitelisted(String),
}

/// Iteration-indexed metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iteration: u32,
    pub values: BTreeMap<String, f64>,
}

impl MetricReport {
    /// Builds a report, rejecting non-finite values.
    pub fn new(iteration: u32, values: BTreeMap<String, f64>) -> Result<Self, MetricError> {
        if let Some((k, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(MetricError::NonFinite(k.clone()));
        }
        Ok(MetricReport { iteration, values })
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    /// Checks every key against the blueprint whitelist.
    pub fn check_whitelist(&self, whitelist: &BTreeSet<String>) -> Result<(), MetricError> {
        match self.values.keys().find(|k| !whitelist.contains(*k)) {
            Some(k) => Err(MetricError::NotWhitelisted(k.clone())),
            None => Ok(()),
        }
    }

    /// `key=value` pairs joined by `; `, used as evidence text.
    pub fn summary(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v:.4}"))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Resolved,
    Falsified,
    Uncertain,
}

fn check_pair(p: &[f64], t: &[f64]) -> Result<(), MetricError> {
    if p.len() != t.len() {
        return Err(MetricError::LengthMismatch(p.len(), t.len()));
    }
    if p.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    Ok(())
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64, MetricError> {
    check_pair(predictions, targets)?;
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(total / predictions.len() as f64)
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64, MetricError> {
    check_pair(predictions, targets)?;
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((total / predictions.len() as f64).sqrt())
}

fn check_distribution(p: &[f64]) -> Result<(), MetricError> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(MetricError::NotNormalized(sum));
    }
    Ok(())
}

fn check_distributions(p: &[f64], q: &[f64]) -> Result<(), MetricError> {
    if p.len() != q.len() {
        return Err(MetricError::SupportMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)
}

/// Σ p·log2(p/q), skipping zero-mass terms of `p`.
fn kl_bits(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| if *qi > 0.0 { pi * (pi / qi).log2() } else { f64::INFINITY })
        .sum()
}

/// Jensen–Shannon divergence in bits.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, MetricError> {
    check_distributions(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let value = 0.5 * kl_bits(p, &m) + 0.5 * kl_bits(q, &m);
    // rounding can push identical inputs a hair below zero or the maximum above one
    Ok(value.clamp(0.0, 1.0))
}

/// KL(p ‖ q') in bits with `q' = (q + smoothing) / Σ(q + smoothing)`.
///
/// Returns `+∞` when `smoothing` is zero and `q` misses mass where `p` has it.
pub fn kl_smoothed(p: &[f64], q: &[f64], smoothing: f64) -> Result<f64, MetricError> {
    check_distributions(p, q)?;
    let total: f64 = q.iter().map(|x| x + smoothing).sum();
    let smoothed: Vec<f64> = q.iter().map(|x| (x + smoothing) / total).collect();
    Ok(kl_bits(p, &smoothed).max(0.0))
}

/// 1-Wasserstein distance between two empirical distributions on the line.
///
/// Equal sample counts use the sorted pairing; otherwise the quantile
/// functions are integrated exactly over the merged breakpoints `i/n`, `j/m`.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    if n == m {
        let total: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y).abs()).sum();
        return Ok(total / n as f64);
    }
    // Walk the merged grid of quantile breakpoints. Positions are compared as
    // exact integers on the common denominator n*m.
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0u128;
    let mut total = 0.0;
    let denom = (n as u128) * (m as u128);
    while i < n && j < m {
        let next_a = (i as u128 + 1) * m as u128;
        let next_b = (j as u128 + 1) * n as u128;
        let next = next_a.min(next_b);
        total += (next - prev) as f64 * (xs[i] - ys[j]).abs();
        prev = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok(total / denom as f64)
}

/// |truth ∩ first-k(predicted)| / |truth|, or 1 when `truth` is empty.
pub fn recall_at_k<T: Eq + Hash + Ord>(truth: &BTreeSet<T>, predicted: &[T], k: usize) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let top: BTreeSet<&T> = predicted.iter().take(k).collect();
    let hits = truth.iter().filter(|t| top.contains(t)).count();
    hits as f64 / truth.len() as f64
}

/// Directed relative change of one metric; positive means improvement.
fn link_improvement(prev: f64, cur: f64, direction: Direction, eps: f64) -> f64 {
    direction.sign() * (prev - cur) / (prev.abs() + eps)
}

/// Per-link directed improvements, in `links` order.
pub fn link_improvements(
    prev: &MetricReport,
    cur: &MetricReport,
    links: &BTreeSet<String>,
    directions: &BTreeMap<String, Direction>,
    eps: f64,
) -> Result<Vec<f64>, MetricError> {
    if links.is_empty() {
        return Err(MetricError::EmptyLinks);
    }
    links
        .iter()
        .map(|key| {
            let p = prev.get(key).ok_or_else(|| MetricError::MissingLink(key.clone()))?;
            let c = cur.get(key).ok_or_else(|| MetricError::MissingLink(key.clone()))?;
            let d = directions
                .get(key)
                .ok_or_else(|| MetricError::UnknownDirection(key.clone()))?;
            Ok(link_improvement(p, c, *d, eps))
        })
        .collect()
}

/// Mean directed relative change over the linked metrics.
///
/// This is the average relative change re-signed per metric direction so
/// that a positive value always means the linked metrics got better.
pub fn directed_improvement(
    prev: &MetricReport,
    cur: &MetricReport,
    links: &BTreeSet<String>,
    directions: &BTreeMap<String, Direction>,
    eps: f64,
) -> Result<f64, MetricError> {
    let per_link = link_improvements(prev, cur, links, directions, eps)?;
    Ok(per_link.iter().sum::<f64>() / per_link.len() as f64)
}

pub fn classify_event(improvement: f64, tau: f64) -> EventKind {
    if improvement > tau {
        EventKind::Resolved
    } else if improvement < -tau {
        EventKind::Falsified
    } else {
        EventKind::Uncertain
    }
}

/// Event for a strategy's linked metrics. Links that move in opposite
/// directions beyond `tau` are inconsistent and yield `Uncertain` whatever
/// the mean says.
pub fn classify_links(
    prev: &MetricReport,
    cur: &MetricReport,
    links: &BTreeSet<String>,
    directions: &BTreeMap<String, Direction>,
    eps: f64,
    tau: f64,
) -> Result<(f64, EventKind), MetricError> {
    let per_link = link_improvements(prev, cur, links, directions, eps)?;
    let mean = per_link.iter().sum::<f64>() / per_link.len() as f64;
    let mixed = per_link.iter().any(|v| *v > tau) && per_link.iter().any(|v| *v < -tau);
    let kind = if mixed {
        EventKind::Uncertain
    } else {
        classify_event(mean, tau)
    };
    Ok((mean, kind))
}
