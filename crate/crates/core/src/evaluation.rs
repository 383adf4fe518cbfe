//! The evaluator contract and the per-run evaluation cache.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cogspace::{assignment_key, Assignment, CogCatalog, Configuration};
use crate::error::Result;
use crate::objectives::{EvaluatorSpec, MetricVector, Observation, Rankable};
use crate::surrogate::FeedbackEntry;

/// Scores one complete configuration. Implementations must be pure: the same
/// configuration always yields the same metrics.
pub trait Evaluator: Sync {
    fn evaluate(&self, catalog: &CogCatalog, config: &Configuration) -> Result<MetricVector>;
}

/// Adapts a closure into an [`Evaluator`].
pub struct FnEvaluator<F>(pub F);

impl<F> Evaluator for FnEvaluator<F>
where
    F: Fn(&CogCatalog, &Configuration) -> Result<MetricVector> + Sync,
{
    fn evaluate(&self, catalog: &CogCatalog, config: &Configuration) -> Result<MetricVector> {
        (self.0)(catalog, config)
    }
}

/// Result of evaluating one full assignment, before it gets an archive index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub key: String,
    pub assignment: Assignment,
    pub metrics: MetricVector,
    pub feasible: bool,
    /// The evaluator returned an error; `metrics` holds the sentinel.
    pub failed: bool,
    /// Position the record will take in the archive if flushed in order.
    pub provisional_index: u64,
}

impl EvalRecord {
    pub fn from_observation(obs: &Observation) -> Self {
        Self {
            key: obs.key.clone(),
            assignment: obs.config.assignments.clone(),
            metrics: obs.metrics,
            feasible: obs.feasible,
            failed: false,
            provisional_index: obs.eval_index,
        }
    }

    pub fn into_observation(self, catalog_version: u64, chunk_id: u64, layer_round: u8) -> Observation {
        Observation {
            key: self.key,
            config: Configuration::new(self.assignment, catalog_version),
            metrics: self.metrics,
            feasible: self.feasible,
            eval_index: self.provisional_index,
            chunk_id,
            layer_round,
        }
    }

    pub fn effective_score(&self, spec: &EvaluatorSpec) -> f64 {
        if self.feasible {
            spec.raw_score(&self.metrics)
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Whether this record agrees with every assignment in `chosen`.
    pub fn consistent_with(&self, chosen: &Assignment) -> bool {
        chosen
            .iter()
            .all(|(cog, opt)| self.assignment.get(cog) == Some(opt))
    }

    /// Restriction to `scope` as a feedback entry.
    pub fn project(&self, scope: &[String], spec: &EvaluatorSpec) -> FeedbackEntry {
        FeedbackEntry {
            assignment: scope
                .iter()
                .filter_map(|c| self.assignment.get(c).map(|o| (c.clone(), o.clone())))
                .collect(),
            metrics: self.metrics,
            score: spec.raw_score(&self.metrics),
            feasible: self.feasible,
            eval_index: self.provisional_index,
        }
    }
}

impl Rankable for EvalRecord {
    fn metrics(&self) -> &MetricVector {
        &self.metrics
    }
    fn feasible(&self) -> bool {
        self.feasible
    }
    fn eval_index(&self) -> u64 {
        self.provisional_index
    }
}

#[derive(Debug, Clone, Copy)]
struct Cached {
    metrics: MetricVector,
    failed: bool,
}

/// Memoizes evaluator calls by canonical key. Re-proposals still count
/// against budgets; the cache only saves evaluator work.
#[derive(Debug, Default)]
pub struct EvalCache {
    entries: Mutex<HashMap<String, Cached>>,
    calls: Mutex<u64>,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeds the cache from archived observations. Infeasible sentinel
    /// entries are taken to be evaluator failures.
    pub fn warm<'a>(&self, observations: impl IntoIterator<Item = &'a Observation>) {
        let mut map = self.entries.lock().expect("cache lock");
        for o in observations {
            map.entry(o.key.clone()).or_insert(Cached {
                metrics: o.metrics,
                failed: !o.feasible && o.metrics == MetricVector::sentinel(),
            });
        }
    }

    /// Number of calls that reached the evaluator.
    pub fn evaluator_calls(&self) -> u64 {
        *self.calls.lock().expect("cache lock")
    }

    /// Evaluates `assignment`, turning evaluator errors into infeasible
    /// sentinel records.
    pub fn evaluate(
        &self,
        evaluator: &dyn Evaluator,
        catalog: &CogCatalog,
        spec: &EvaluatorSpec,
        assignment: Assignment,
        provisional_index: u64,
    ) -> EvalRecord {
        let key = assignment_key(&assignment);
        let hit = self.entries.lock().expect("cache lock").get(&key).copied();
        let cached = match hit {
            Some(c) => c,
            None => {
                *self.calls.lock().expect("cache lock") += 1;
                let config = catalog.configuration(assignment.clone());
                let outcome = evaluator
                    .evaluate(catalog, &config)
                    .and_then(|m| m.check().map(|_| m));
                let c = match outcome {
                    Ok(metrics) => Cached {
                        metrics,
                        failed: false,
                    },
                    Err(_) => Cached {
                        metrics: MetricVector::sentinel(),
                        failed: true,
                    },
                };
                self.entries
                    .lock()
                    .expect("cache lock")
                    .insert(key.clone(), c);
                c
            }
        };
        EvalRecord {
            key,
            assignment,
            metrics: cached.metrics,
            feasible: !cached.failed && spec.is_feasible(&cached.metrics),
            failed: cached.failed,
            provisional_index,
        }
    }
}

/// SplitMix64 finalizer folded over `parts`; derives independent RNG
/// substreams from a run seed and a position in the search tree.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}
