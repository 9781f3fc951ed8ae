//! Inner-loop calibration: bounded random search over a blueprint's
//! parameter space, minimizing a weighted metric objective.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::blueprint::{Blueprint, Direction, ParamBound, ParamKind};
use crate::metrics::MetricReport;

pub const DEFAULT_N_TRIALS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("metric `{0}` is weighted but missing from the report")]
    MissingMetric(String),
    #[error("metric `{0}` has no declared direction")]
    UnknownDirection(String),
    #[error("all {0} trials failed; first failure: {1}")]
    AllTrialsFailed(usize, String),
    #[error("n_trials must be at least 1")]
    NoTrials,
}

/// Value of one calibratable parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Integer(i64),
    Real(f64),
    Map(BTreeMap<String, f64>),
}

impl ParamValue {
    /// Scalar view; integers widen to reals, maps have none.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Integer(i) => Some(*i as f64),
            ParamValue::Real(x) => Some(*x),
            ParamValue::Map(_) => None,
        }
    }
}

pub type ParamVector = BTreeMap<String, ParamValue>;

/// Feasible domain: a box per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpace {
    pub bounds: Vec<ParamBound>,
}

impl ParamSpace {
    pub fn new(bounds: Vec<ParamBound>) -> Self {
        ParamSpace { bounds }
    }

    pub fn from_blueprint(b: &Blueprint) -> Self {
        ParamSpace::new(b.parameters().to_vec())
    }

    /// Whether `v` names exactly these parameters with in-range values.
    pub fn contains(&self, v: &ParamVector) -> bool {
        v.len() == self.bounds.len()
            && self.bounds.iter().all(|b| {
                let within = |x: f64| b.low <= x && x <= b.high;
                match (b.kind, v.get(&b.name)) {
                    (ParamKind::Real, Some(ParamValue::Real(x))) => within(*x),
                    (ParamKind::Integer, Some(ParamValue::Integer(i))) => within(*i as f64),
                    (ParamKind::RealMap, Some(ParamValue::Map(m))) => {
                        m.len() == b.map_keys.len()
                            && b.map_keys.iter().all(|k| m.get(k).is_some_and(|x| within(*x)))
                    }
                    _ => false,
                }
            })
    }
}

/// Uniform draw inside every bound; map keys are drawn independently.
pub fn sample_params<R: Rng + ?Sized>(space: &ParamSpace, rng: &mut R) -> ParamVector {
    space
        .bounds
        .iter()
        .map(|b| {
            let value = match b.kind {
                ParamKind::Real => ParamValue::Real(rng.gen_range(b.low..=b.high)),
                ParamKind::Integer => {
                    ParamValue::Integer(rng.gen_range(b.low.ceil() as i64..=b.high.floor() as i64))
                }
                ParamKind::RealMap => ParamValue::Map(
                    b.map_keys
                        .iter()
                        .map(|k| (k.clone(), rng.gen_range(b.low..=b.high)))
                        .collect(),
                ),
            };
            (b.name.clone(), value)
        })
        .collect()
}

/// Weighted loss to minimize: lower-better metrics count as-is,
/// higher-better ones as `1 − m`. Zero-weight metrics are ignored.
pub fn objective(
    report: &MetricReport,
    weights: &BTreeMap<String, f64>,
    directions: &BTreeMap<String, Direction>,
) -> Result<f64, CalibrationError> {
    let mut total = 0.0;
    for (key, &w) in weights {
        if w == 0.0 {
            continue;
        }
        let m = report
            .get(key)
            .ok_or_else(|| CalibrationError::MissingMetric(key.clone()))?;
        total += match directions.get(key) {
            Some(Direction::LowerBetter) => w * m,
            Some(Direction::HigherBetter) => w * (1.0 - m),
            None => return Err(CalibrationError::UnknownDirection(key.clone())),
        };
    }
    Ok(total)
}

/// Per-trial seed, independent of execution order.
pub fn trial_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn ser_objective<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn de_objective<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

/// One evaluation of the simulator. Failed trials carry `objective = +∞`
/// (serialized as `null`) and the failure message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub seed: u64,
    pub params: ParamVector,
    pub report: Option<MetricReport>,
    #[serde(serialize_with = "ser_objective", deserialize_with = "de_objective")]
    pub objective: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub best: Trial,
    pub log: Vec<Trial>,
}

impl CalibrationResult {
    /// Writes the log as JSON lines, tagging each trial with `iteration`.
    pub fn write_jsonl<W: Write>(&self, iteration: u32, out: &mut W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            iteration: u32,
            #[serde(flatten)]
            trial: &'a Trial,
        }
        for trial in &self.log {
            serde_json::to_writer(&mut *out, &Line { iteration, trial })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Simulator callback: parameters and a trial seed in, metrics out.
pub type Simulate<'a> = dyn Fn(&ParamVector, u64) -> Result<MetricReport, String> + Sync + 'a;

/// Inner-loop optimizer. Random search is the shipped implementation.
pub trait Calibrator {
    fn calibrate(
        &self,
        simulate: &Simulate<'_>,
        space: &ParamSpace,
        seed: u64,
        weights: &BTreeMap<String, f64>,
        directions: &BTreeMap<String, Direction>,
    ) -> Result<CalibrationResult, CalibrationError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomSearch {
    pub n_trials: usize,
}

impl Default for RandomSearch {
    fn default() -> Self {
        RandomSearch {
            n_trials: DEFAULT_N_TRIALS,
        }
    }
}

impl Calibrator for RandomSearch {
    fn calibrate(
        &self,
        simulate: &Simulate<'_>,
        space: &ParamSpace,
        seed: u64,
        weights: &BTreeMap<String, f64>,
        directions: &BTreeMap<String, Direction>,
    ) -> Result<CalibrationResult, CalibrationError> {
        calibrate(simulate, space, self.n_trials, seed, weights, directions)
    }
}

/// Runs `n_trials` independent random trials (in parallel) and keeps the
/// earliest trial with the lowest objective.
pub fn calibrate(
    simulate: &Simulate<'_>,
    space: &ParamSpace,
    n_trials: usize,
    seed: u64,
    weights: &BTreeMap<String, f64>,
    directions: &BTreeMap<String, Direction>,
) -> Result<CalibrationResult, CalibrationError> {
    if n_trials == 0 {
        return Err(CalibrationError::NoTrials);
    }
    let log: Vec<Trial> = (0..n_trials)
        .into_par_iter()
        .map(|index| -> Result<Trial, CalibrationError> {
            let seed = trial_seed(seed, index);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = sample_params(space, &mut rng);
            Ok(match simulate(&params, seed) {
                Ok(report) => Trial {
                    index,
                    seed,
                    objective: objective(&report, weights, directions)?,
                    params,
                    report: Some(report),
                    failure: None,
                },
                Err(msg) => Trial {
                    index,
                    seed,
                    params,
                    report: None,
                    objective: f64::INFINITY,
                    failure: Some(msg),
                },
            })
        })
        .collect::<Result<_, _>>()?;

    let best = log
        .iter()
        .filter(|t| t.failure.is_none() && t.objective.is_finite())
        .fold(None::<&Trial>, |best, t| match best {
            Some(b) if b.objective <= t.objective => Some(b),
            _ => Some(t),
        })
        .cloned();
    match best {
        Some(best) => Ok(CalibrationResult { best, log }),
        None => {
            let first = log[0].failure.clone().unwrap_or_else(|| "non-finite objective".into());
            Err(CalibrationError::AllTrialsFailed(n_trials, first))
        }
    }
}
