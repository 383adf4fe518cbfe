use std::path::{Path, PathBuf};

use adaseek::driver::{DriverKnobs, PartitionRule};
use adaseek::objectives::{EvaluatorSpec, Objective, Threshold};
use adaseek::search::{EarlyStopParams, PriorMode};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Run settings shared by `optimize` and `baseline`. The same fields form the
/// flat `run.json` document; flags given on the command line win.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Flat JSON document with any of these settings.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Cog space document; defaults to the surface's own catalog.
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Surface parameters written by `gen-surface`.
    #[arg(long)]
    pub surface: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Total evaluation budget.
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long, env = "ADASEEK_SEED")]
    pub seed: Option<u64>,

    /// Comma separated: quality, cost, latency.
    #[arg(long, value_delimiter = ',')]
    pub objectives: Option<Vec<String>>,
    /// Feasibility bound such as `cost<=2.5`; repeatable.
    #[arg(long = "threshold")]
    pub thresholds: Option<Vec<String>>,

    /// Exponent of the layer size estimate.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Halving rate.
    #[arg(long)]
    pub eta: Option<u64>,
    /// Samples per chunk (W).
    #[arg(long)]
    pub chunk_size: Option<u64>,
    /// Good-group fraction of the surrogate.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Candidates drawn per surrogate sample.
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub early_stop: Option<bool>,
    #[arg(long)]
    pub early_stop_window: Option<usize>,
    #[arg(long)]
    pub early_stop_epsilon: Option<f64>,
    /// Worker threads for chunk evaluation.
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Split round budgets with a square root whatever the layer count.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub paper_exact_sqrt: Option<bool>,
    /// auto, 1, 2 or 3.
    #[arg(long)]
    pub layers: Option<String>,
    /// conditional or marginal.
    #[arg(long)]
    pub prior: Option<String>,
    /// Configurations returned by the final selection.
    #[arg(long)]
    pub select_k: Option<usize>,
    /// Keep only this percentage of steps, ranked by probing.
    #[arg(long)]
    pub importance_top: Option<f64>,
    /// Pin architecture cogs of low-complexity steps.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub complexity_filter: Option<bool>,
    /// Options evolved per dynamic cog at each outer chunk.
    #[arg(long)]
    pub evolve: Option<usize>,
    /// Write search and surrogate traces.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub trace: Option<bool>,

    /// Baseline kind when the file drives `baseline`.
    #[arg(skip)]
    pub baseline: Option<String>,
}

macro_rules! merge {
    ($flags:ident, $file:ident; $($f:ident),*) => {
        RunConfig { config: $flags.config, $($f: $flags.$f.or($file.$f)),* }
    };
}

impl RunConfig {
    /// Loads the config file, if any, under the flags.
    pub fn resolve(self) -> Result<Self, Failure> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let mut file: RunConfig = serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut file.space, &mut file.surface, &mut file.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        let flags = self;
        Ok(merge!(flags, file; space, surface, out, budget, seed, objectives, thresholds, alpha, eta,
            chunk_size, gamma, candidates, early_stop, early_stop_window, early_stop_epsilon, parallel,
            paper_exact_sqrt, layers, prior, select_k, importance_top, complexity_filter, evolve, trace, baseline))
    }

    pub fn spec(&self) -> Result<EvaluatorSpec, Failure> {
        let names = self.objectives.clone().unwrap_or_else(|| vec!["quality".into(), "cost".into()]);
        let objectives = names
            .iter()
            .map(|n| n.parse::<Objective>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(Failure::from)?;
        let thresholds = self
            .thresholds
            .iter()
            .flatten()
            .map(|t| t.parse::<Threshold>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(Failure::from)?;
        Ok(EvaluatorSpec::new(objectives)?.with_thresholds(thresholds))
    }

    pub fn knobs(&self) -> Result<DriverKnobs, Failure> {
        let mut k = DriverKnobs::default();
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(Failure::config(format!("alpha must be positive, got {a}")));
            }
            k.alpha = a;
        }
        let s = &mut k.search;
        s.eta = self.eta.unwrap_or(s.eta);
        s.chunk_size = self.chunk_size.unwrap_or(s.chunk_size);
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(Failure::config(format!("gamma must lie in (0, 1), got {g}")));
            }
            s.tpe.gamma = g;
        }
        if let Some(n) = self.candidates {
            if n == 0 {
                return Err(Failure::config("candidates must be at least 1"));
            }
            s.tpe.n_candidates = n;
        }
        if self.early_stop == Some(false) {
            s.early_stop = None;
        } else {
            let d = EarlyStopParams::default();
            let window = self.early_stop_window.unwrap_or(d.window);
            let epsilon = self.early_stop_epsilon.unwrap_or(d.epsilon);
            if window == 0 || !(epsilon >= 0.0) {
                return Err(Failure::config("early stop needs window >= 1 and epsilon >= 0"));
            }
            s.early_stop = Some(EarlyStopParams { window, epsilon });
        }
        if let Some(p) = self.parallel {
            s.parallelism = p.max(1);
        }
        s.prior = match self.prior.as_deref() {
            None | Some("conditional") => PriorMode::Conditional,
            Some("marginal") => PriorMode::Marginal,
            Some(other) => return Err(Failure::config(format!("unknown prior {other:?}"))),
        };
        let trace = self.trace.unwrap_or(false);
        s.trace = trace;
        s.surrogate_trace = trace;
        if self.paper_exact_sqrt.unwrap_or(false) {
            k.partition = PartitionRule::Sqrt;
        }
        k.forced_layers = match self.layers.as_deref() {
            None | Some("auto") => None,
            Some(v @ ("1" | "2" | "3")) => Some(v.parse().expect("digit")),
            Some(other) => return Err(Failure::config(format!("layers must be auto, 1, 2 or 3, got {other:?}"))),
        };
        if let Some(sk) = self.select_k {
            k.select_k = sk;
        }
        Ok(k)
    }

    pub fn out_dir(&self) -> Result<&Path, Failure> {
        self.out.as_deref().ok_or_else(|| Failure::config("--out is required"))
    }
}
