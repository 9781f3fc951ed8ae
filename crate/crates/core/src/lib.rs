//! Orchestration kernel for automated simulator construction.
//!
//! The kernel runs a bi-level search: an outer loop proposes simulator
//! structures (programs) while an inner loop calibrates their continuous
//! parameters. Two anchors keep the outer loop on track:
//!
//! - a static [`blueprint::Blueprint`] holding the metric whitelist,
//!   parameter bounds and holdout plan;
//! - a dynamic [`playbook::Playbook`] of remedial strategies whose
//!   reliability is updated from observed metric changes.
//!
//! [`refsim`] bundles a synthetic mask-adoption world plus deterministic
//! stand-ins for the generator and feedback agents so the whole loop runs
//! offline.

pub mod blueprint;
pub mod calibrator;
pub mod canonical;
pub mod diagnostics;
pub mod metrics;
pub mod orchestrator;
pub mod playbook;
pub mod refsim;
pub mod selection;

pub use blueprint::{Blueprint, Direction, MetricDef, ParamBound, ParamKind};
pub use calibrator::{CalibrationResult, ParamSpace, ParamValue, ParamVector, Trial};
pub use metrics::{EventKind, MetricReport};
pub use orchestrator::{IterationRecord, LoopConfig};
pub use playbook::{Playbook, Severity, Strategy, StrategyState};
