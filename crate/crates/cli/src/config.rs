//! Run settings: flags over the `--config` file over built-in defaults.

use std::path::{Path, PathBuf};

use anchorloop_core::orchestrator::{DEFAULT_MAX_ITER, DEFAULT_PATIENCE, DEFAULT_TAU_STOP};
use anchorloop_core::calibrator::DEFAULT_N_TRIALS;
use anchorloop_core::metrics::DEFAULT_TAU;
use anchorloop_core::selection::DEFAULT_RECENCY_BUDGET;
use anchorloop_core::LoopConfig;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::failure::{fail, Classify, CliResult, Code};

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Mock,
    Llm,
}

/// Every field optional so that flags and the config file can be layered.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_stop: Option<f64>,
    #[arg(long)]
    pub recency_budget: Option<usize>,
    #[arg(long)]
    pub n_trials: Option<usize>,
    /// Blueprint file; the bundled reference blueprint when omitted.
    #[arg(long)]
    pub blueprint: Option<PathBuf>,
    /// Playbook file; loaded when present, rewritten after every iteration.
    #[arg(long)]
    pub playbook: Option<PathBuf>,
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub calib_log: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub generator: Option<GeneratorKind>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
}

impl RunOverrides {
    /// Fills every unset field of `self` from `lower`.
    fn over(self, lower: RunOverrides) -> RunOverrides {
        macro_rules! pick {
            ($($f:ident),*) => { RunOverrides { $($f: self.$f.or(lower.$f)),* } };
        }
        pick!(
            seed, max_iter, patience, tau, tau_stop, recency_budget, n_trials, blueprint, playbook, history,
            calib_log, generator, endpoint, model, api_key_env
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub max_iter: usize,
    pub patience: usize,
    pub tau: f64,
    pub tau_stop: f64,
    pub recency_budget: usize,
    pub n_trials: usize,
    pub blueprint: Option<PathBuf>,
    pub playbook: PathBuf,
    pub history: PathBuf,
    pub calib_log: PathBuf,
    pub generator: GeneratorKind,
    pub endpoint: String,
    pub model: Option<String>,
    pub api_key_env: String,
}

impl RunConfig {
    pub fn resolve(flags: RunOverrides, config_file: Option<&Path>) -> CliResult<RunConfig> {
        let file = match config_file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))
                    .or_exit(Code::Io)?;
                serde_json::from_str::<RunOverrides>(&text)
                    .map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))
                    .or_exit(Code::Validation)?
            }
            None => RunOverrides::default(),
        };
        let o = flags.over(file);
        let cfg = RunConfig {
            seed: o.seed.unwrap_or(0),
            max_iter: o.max_iter.unwrap_or(DEFAULT_MAX_ITER),
            patience: o.patience.unwrap_or(DEFAULT_PATIENCE),
            tau: o.tau.unwrap_or(DEFAULT_TAU),
            tau_stop: o.tau_stop.unwrap_or(DEFAULT_TAU_STOP),
            recency_budget: o.recency_budget.unwrap_or(DEFAULT_RECENCY_BUDGET),
            n_trials: o.n_trials.unwrap_or(DEFAULT_N_TRIALS),
            blueprint: o.blueprint,
            playbook: o.playbook.unwrap_or_else(|| "playbook.json".into()),
            history: o.history.unwrap_or_else(|| "history.jsonl".into()),
            calib_log: o.calib_log.unwrap_or_else(|| "calibration.jsonl".into()),
            generator: o.generator.unwrap_or(GeneratorKind::Mock),
            endpoint: o.endpoint.unwrap_or_else(|| DEFAULT_ENDPOINT.into()),
            model: o.model,
            api_key_env: o.api_key_env.unwrap_or_else(|| anchorloop_llm::DEFAULT_API_KEY_ENV.into()),
        };
        if cfg.max_iter == 0 {
            return fail(Code::Validation, "max_iter must be at least 1");
        }
        if cfg.n_trials == 0 {
            return fail(Code::Validation, "n_trials must be at least 1");
        }
        Ok(cfg)
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            seed: self.seed,
            max_iter: self.max_iter,
            patience: self.patience,
            tau: self.tau,
            tau_stop: self.tau_stop,
            recency_budget: self.recency_budget,
            n_trials: self.n_trials,
            ..LoopConfig::default()
        }
    }
}
