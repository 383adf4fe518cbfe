//! Tree-structured Parzen estimator over discrete cogs.
//!
//! Feedback is split into a good group (top quantile of feasible scores) and
//! a bad group (the rest, plus every threshold violator). Each group gets one
//! smoothed categorical mass function per cog, and new points are the
//! candidate, drawn from the good densities, that maximizes `l(x) / g(x)`.
//! Maximizing that ratio is how expected improvement is optimized; the EI
//! integral itself is never evaluated.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cogspace::{Assignment, CogCatalog};
use crate::error::{Error, Result};
use crate::objectives::{MetricVector, Rankable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpeParams {
    /// Fraction of feasible feedback forming the good group.
    pub gamma: f64,
    /// Additive (Laplace) smoothing per option.
    pub smoothing: f64,
    /// Candidates drawn from the good density per returned sample.
    pub n_candidates: usize,
}

impl Default for TpeParams {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            smoothing: 1.0,
            n_candidates: 24,
        }
    }
}

/// One point of layer feedback: an assignment over the layer's scope with
/// the metrics of the best evaluation found under it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub assignment: Assignment,
    pub metrics: MetricVector,
    /// Score ignoring thresholds.
    pub score: f64,
    pub feasible: bool,
    pub eval_index: u64,
}

impl FeedbackEntry {
    pub fn effective_score(&self) -> f64 {
        if self.feasible {
            self.score
        } else {
            f64::NEG_INFINITY
        }
    }
}

impl Rankable for FeedbackEntry {
    fn metrics(&self) -> &MetricVector {
        &self.metrics
    }
    fn feasible(&self) -> bool {
        self.feasible
    }
    fn eval_index(&self) -> u64 {
        self.eval_index
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeedbackSet {
    pub scope: Vec<String>,
    pub entries: Vec<FeedbackEntry>,
}

impl FeedbackSet {
    pub fn new(scope: Vec<String>) -> Self {
        Self {
            scope,
            entries: Vec::new(),
        }
    }

    pub fn with_entries(scope: Vec<String>, entries: Vec<FeedbackEntry>) -> Self {
        Self { scope, entries }
    }
}

/// Indices into the feedback entries for each group.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub good: Vec<usize>,
    pub bad: Vec<usize>,
    pub gamma: f64,
    pub split_score: f64,
    /// No feasible entry existed; the good group is the single best raw score.
    pub degenerate: bool,
}

/// Separates feedback into the good and bad groups.
pub fn split_observations(feedback: &FeedbackSet, gamma: f64) -> Result<Split> {
    if feedback.entries.is_empty() {
        return Err(Error::Argument("cannot split empty feedback".into()));
    }
    let entries = &feedback.entries;
    let by_score = |a: &usize, b: &usize| {
        entries[*b]
            .score
            .total_cmp(&entries[*a].score)
            .then(entries[*a].eval_index.cmp(&entries[*b].eval_index))
            .then(a.cmp(b))
    };
    let mut feasible: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].feasible).collect();
    let infeasible: Vec<usize> = (0..entries.len()).filter(|&i| !entries[i].feasible).collect();

    if feasible.is_empty() {
        let mut all: Vec<usize> = (0..entries.len()).collect();
        all.sort_by(by_score);
        let best = all.remove(0);
        return Ok(Split {
            good: vec![best],
            split_score: entries[best].score,
            bad: all,
            gamma,
            degenerate: true,
        });
    }

    feasible.sort_by(by_score);
    let n_good = ((gamma * feasible.len() as f64).ceil() as usize).clamp(1, feasible.len());
    let bad: Vec<usize> = feasible[n_good..].iter().chain(&infeasible).copied().collect();
    feasible.truncate(n_good);
    let split_score = entries[*feasible.last().expect("n_good >= 1")].score;
    Ok(Split {
        good: feasible,
        bad,
        gamma,
        split_score,
        degenerate: false,
    })
}

/// Smoothed categorical distribution over one cog's options.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MassFunction {
    pub cog: String,
    pub options: Vec<String>,
    pub mass: Vec<f64>,
}

/// One mass function per scope cog: `(count + s) / (n + m * s)`.
///
/// Options never observed (including ones appended at run time) keep the
/// smoothing floor, so every mass is strictly positive.
pub fn fit_density<'a, I>(
    assignments: I,
    scope: &[String],
    catalog: &CogCatalog,
    smoothing: f64,
) -> Result<Vec<MassFunction>>
where
    I: IntoIterator<Item = &'a Assignment>,
{
    let mut counts: Vec<Vec<f64>> = Vec::with_capacity(scope.len());
    let mut option_ids = Vec::with_capacity(scope.len());
    for id in scope {
        let cog = catalog
            .cog(id)
            .ok_or_else(|| Error::Argument(format!("unknown cog {id:?} in scope")))?;
        counts.push(vec![0.0; cog.options.len()]);
        option_ids.push(cog.options.iter().map(|o| o.id.clone()).collect::<Vec<_>>());
    }
    let mut n = 0.0;
    for a in assignments {
        n += 1.0;
        for (k, id) in scope.iter().enumerate() {
            let chosen = a.get(id).ok_or_else(|| {
                Error::Contract(format!("feedback entry does not assign scope cog {id:?}"))
            })?;
            let idx = option_ids[k].iter().position(|o| o == chosen).ok_or_else(|| {
                Error::Contract(format!("cog {id:?} has no option {chosen:?}"))
            })?;
            counts[k][idx] += 1.0;
        }
    }
    Ok(scope
        .iter()
        .zip(counts)
        .zip(option_ids)
        .map(|((cog, c), options)| {
            let m = c.len() as f64;
            let denom = n + m * smoothing;
            MassFunction {
                cog: cog.clone(),
                options,
                mass: c.iter().map(|&k| (k + smoothing) / denom).collect(),
            }
        })
        .collect())
}

/// Fitted good/bad densities for one layer scope. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityModel {
    pub scope: Vec<String>,
    pub good: Vec<MassFunction>,
    pub bad: Vec<MassFunction>,
    pub gamma: f64,
    pub split_score: Option<f64>,
    pub degenerate: bool,
}

/// Candidate encoded as one option index per scope cog.
pub type Candidate = Vec<usize>;

impl DensityModel {
    pub fn fit(feedback: &FeedbackSet, catalog: &CogCatalog, params: &TpeParams) -> Result<Self> {
        let scope = &feedback.scope;
        if feedback.entries.is_empty() {
            let uniform = fit_density(std::iter::empty(), scope, catalog, params.smoothing)?;
            return Ok(Self {
                scope: scope.clone(),
                good: uniform.clone(),
                bad: uniform,
                gamma: params.gamma,
                split_score: None,
                degenerate: false,
            });
        }
        let split = split_observations(feedback, params.gamma)?;
        let pick = |idx: &[usize]| {
            idx.iter()
                .map(|&i| &feedback.entries[i].assignment)
                .collect::<Vec<_>>()
        };
        let good = fit_density(pick(&split.good), scope, catalog, params.smoothing)?;
        let bad = fit_density(pick(&split.bad), scope, catalog, params.smoothing)?;
        Ok(Self {
            scope: scope.clone(),
            good,
            bad,
            gamma: split.gamma,
            split_score: Some(split.split_score),
            degenerate: split.degenerate,
        })
    }

    /// Draws one candidate from the good densities, independently per cog.
    pub fn draw_candidate<R: Rng + ?Sized>(&self, rng: &mut R) -> Candidate {
        self.good
            .iter()
            .map(|m| {
                WeightedIndex::new(&m.mass)
                    .expect("mass functions are positive")
                    .sample(rng)
            })
            .collect()
    }

    /// `l(x) / g(x)` under the per-cog factorization.
    pub fn ratio(&self, candidate: &[usize]) -> f64 {
        self.good
            .iter()
            .zip(&self.bad)
            .zip(candidate)
            .fold(1.0, |acc, ((l, g), &i)| acc * (l.mass[i] / g.mass[i]))
    }

    /// Index of the best candidate; the first drawn wins ties.
    pub fn select(&self, candidates: &[Candidate]) -> usize {
        let mut best = 0;
        let mut best_ratio = f64::NEG_INFINITY;
        for (i, c) in candidates.iter().enumerate() {
            let r = self.ratio(c);
            if r > best_ratio {
                best = i;
                best_ratio = r;
            }
        }
        best
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n_candidates: usize) -> Candidate {
        let candidates: Vec<Candidate> = (0..n_candidates.max(1))
            .map(|_| self.draw_candidate(rng))
            .collect();
        let best = self.select(&candidates);
        candidates.into_iter().nth(best).expect("non-empty")
    }

    /// Like [`sample`](Self::sample) but returns the best-ranked candidate
    /// accepted by `fresh`. When every candidate is rejected, up to
    /// `n_candidates` uniform draws are tried before falling back to the
    /// plain argmax.
    pub fn sample_fresh<R, F>(&self, rng: &mut R, n_candidates: usize, mut fresh: F) -> Candidate
    where
        R: Rng + ?Sized,
        F: FnMut(&Candidate) -> bool,
    {
        let candidates: Vec<Candidate> = (0..n_candidates.max(1))
            .map(|_| self.draw_candidate(rng))
            .collect();
        let ratios: Vec<f64> = candidates.iter().map(|c| self.ratio(c)).collect();
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| ratios[b].total_cmp(&ratios[a]));
        if let Some(&i) = order.iter().find(|&&i| fresh(&candidates[i])) {
            return candidates[i].clone();
        }
        for _ in 0..n_candidates.max(1) {
            let c: Candidate = self.good.iter().map(|m| rng.random_range(0..m.mass.len())).collect();
            if fresh(&c) {
                return c;
            }
        }
        candidates[self.select(&candidates)].clone()
    }

    pub fn to_assignment(&self, candidate: &[usize]) -> Assignment {
        self.good
            .iter()
            .zip(candidate)
            .map(|(m, &i)| (m.cog.clone(), m.options[i].clone()))
            .collect()
    }
}

/// Proposes `n` assignments over the feedback scope from one fitted model.
pub fn tpe_sample<R: Rng + ?Sized>(
    feedback: &FeedbackSet,
    catalog: &CogCatalog,
    n: usize,
    rng: &mut R,
    params: &TpeParams,
) -> Result<Vec<Assignment>> {
    let model = DensityModel::fit(feedback, catalog, params)?;
    Ok((0..n)
        .map(|_| {
            let c = model.sample(rng, params.n_candidates);
            model.to_assignment(&c)
        })
        .collect())
}
