//! Metrics, feasibility, dominance and result selection.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cogspace::Configuration;
use crate::error::{Error, Result};

/// Floor applied to normalized cost and latency before dividing by them.
pub const COST_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Quality,
    Cost,
    Latency,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Quality, Objective::Cost, Objective::Latency];

    pub fn maximize(self) -> bool {
        matches!(self, Objective::Quality)
    }

    pub fn value(self, m: &MetricVector) -> f64 {
        match self {
            Objective::Quality => m.quality,
            Objective::Cost => m.cost,
            Objective::Latency => m.latency,
        }
    }

    /// `Less` when `a` is strictly better than `b` on this objective.
    pub fn compare(self, a: &MetricVector, b: &MetricVector) -> Ordering {
        let (x, y) = (self.value(a), self.value(b));
        if self.maximize() {
            y.total_cmp(&x)
        } else {
            x.total_cmp(&y)
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Quality => "quality",
            Objective::Cost => "cost",
            Objective::Latency => "latency",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "quality" => Ok(Objective::Quality),
            "cost" => Ok(Objective::Cost),
            "latency" => Ok(Objective::Latency),
            other => Err(Error::Argument(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub quality: f64,
    pub cost: f64,
    pub latency: f64,
}

impl MetricVector {
    pub fn new(quality: f64, cost: f64, latency: f64) -> Result<Self> {
        let m = Self {
            quality,
            cost,
            latency,
        };
        m.check()?;
        Ok(m)
    }

    /// Metrics recorded for a configuration whose evaluation failed.
    pub fn sentinel() -> Self {
        Self {
            quality: 0.0,
            cost: 0.0,
            latency: 0.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.quality.is_finite() && self.cost.is_finite() && self.latency.is_finite()) {
            return Err(Error::Evaluation(format!("non-finite metrics {self:?}")));
        }
        if self.cost < 0.0 || self.latency < 0.0 {
            return Err(Error::Evaluation(format!("negative cost or latency {self:?}")));
        }
        Ok(())
    }

    pub fn get(&self, objective: Objective) -> f64 {
        objective.value(self)
    }
}

/// A bound on one metric: quality must be at least `bound`, cost and latency
/// at most `bound`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub metric: Objective,
    pub bound: f64,
}

impl Threshold {
    pub fn holds(&self, m: &MetricVector) -> bool {
        let v = m.get(self.metric);
        if self.metric.maximize() {
            v >= self.bound
        } else {
            v <= self.bound
        }
    }
}

impl FromStr for Threshold {
    type Err = Error;

    /// Parses `quality>=0.5`, `cost<=3` or `latency<=2`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, bound, maximize) = if let Some((n, b)) = s.split_once(">=") {
            (n, b, true)
        } else if let Some((n, b)) = s.split_once("<=") {
            (n, b, false)
        } else {
            return Err(Error::Argument(format!("threshold {s:?} needs >= or <=")));
        };
        let metric: Objective = name.parse()?;
        if metric.maximize() != maximize {
            return Err(Error::Argument(format!(
                "threshold {s:?}: {metric} bounds use {}",
                if metric.maximize() { ">=" } else { "<=" }
            )));
        }
        let bound: f64 = bound
            .trim()
            .parse()
            .map_err(|_| Error::Argument(format!("threshold {s:?}: bad number")))?;
        Ok(Threshold { metric, bound })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scalarizer {
    /// Quality divided by the product of the active cost-like objectives.
    #[default]
    Product,
    /// Quality alone, whatever the objectives.
    Quality,
}

/// The user-side evaluation contract: which objectives matter, which bounds
/// make a result feasible, and how to collapse metrics into one score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorSpec {
    pub objectives: Vec<Objective>,
    #[serde(default)]
    pub thresholds: Vec<Threshold>,
    #[serde(default)]
    pub scalarizer: Scalarizer,
    /// Divisors for cost and latency in the three-objective product; the
    /// driver sets them to observed medians.
    #[serde(default = "one")]
    pub cost_scale: f64,
    #[serde(default = "one")]
    pub latency_scale: f64,
    /// Picks per objective per round-robin turn in [`select_best`]. Empty
    /// means one each.
    #[serde(default)]
    pub queue_weights: Vec<usize>,
}

fn one() -> f64 {
    1.0
}

impl EvaluatorSpec {
    pub fn new(objectives: Vec<Objective>) -> Result<Self> {
        if objectives.is_empty() {
            return Err(Error::Argument("at least one objective is required".into()));
        }
        let unique: HashSet<_> = objectives.iter().collect();
        if unique.len() != objectives.len() {
            return Err(Error::Argument("objectives listed twice".into()));
        }
        Ok(Self {
            objectives,
            thresholds: Vec::new(),
            scalarizer: Scalarizer::Product,
            cost_scale: 1.0,
            latency_scale: 1.0,
            queue_weights: Vec::new(),
        })
    }

    pub fn quality_only() -> Self {
        Self::new(vec![Objective::Quality]).expect("non-empty")
    }

    pub fn with_thresholds(mut self, thresholds: Vec<Threshold>) -> Self {
        self.thresholds = thresholds;
        self
    }

    pub fn is_single_objective(&self) -> bool {
        self.objectives.len() == 1
    }

    pub fn uses_all_objectives(&self) -> bool {
        self.objectives.len() == Objective::ALL.len()
    }

    pub fn is_feasible(&self, m: &MetricVector) -> bool {
        self.thresholds.iter().all(|t| t.holds(m))
    }

    /// Score ignoring thresholds.
    pub fn raw_score(&self, m: &MetricVector) -> f64 {
        match self.scalarizer {
            Scalarizer::Quality => m.quality,
            Scalarizer::Product => {
                let numerator = if self.objectives.contains(&Objective::Quality) {
                    m.quality
                } else {
                    1.0
                };
                let mut denominator = 1.0;
                for o in &self.objectives {
                    let scaled = match o {
                        Objective::Quality => continue,
                        Objective::Cost => m.cost / self.cost_scale,
                        Objective::Latency => m.latency / self.latency_scale,
                    };
                    denominator *= scaled.max(COST_EPSILON);
                }
                numerator / denominator
            }
        }
    }
}

/// Single-number score used wherever one ordering is needed. Infeasible
/// metrics score negative infinity.
pub fn scalar_score(metrics: &MetricVector, spec: &EvaluatorSpec) -> f64 {
    if spec.is_feasible(metrics) {
        spec.raw_score(metrics)
    } else {
        f64::NEG_INFINITY
    }
}

/// True iff `a` is no worse than `b` on every selected objective and
/// strictly better on at least one.
pub fn dominates(a: &MetricVector, b: &MetricVector, spec: &EvaluatorSpec) -> bool {
    let mut strictly = false;
    for o in &spec.objectives {
        match o.compare(a, b) {
            Ordering::Greater => return false,
            Ordering::Less => strictly = true,
            Ordering::Equal => {}
        }
    }
    strictly
}

/// Nondomination rank of each point: 0 for the frontier, 1 for the frontier
/// of the rest, and so on.
pub fn nondomination_ranks(points: &[MetricVector], spec: &EvaluatorSpec) -> Vec<usize> {
    let n = points.len();
    let mut rank = vec![usize::MAX; n];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut level = 0;
    while !remaining.is_empty() {
        let front: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| {
                !remaining
                    .iter()
                    .any(|&j| j != i && dominates(&points[j], &points[i], spec))
            })
            .collect();
        for &i in &front {
            rank[i] = level;
        }
        remaining.retain(|i| rank[*i] == usize::MAX);
        level += 1;
    }
    rank
}

/// Anything carrying metrics that can be ranked for search.
pub trait Rankable {
    fn metrics(&self) -> &MetricVector;
    fn feasible(&self) -> bool;
    fn eval_index(&self) -> u64;
}

/// Total order over feedback for survivor selection, best first.
///
/// Single objective: descending score. Several objectives: ascending
/// nondomination rank among feasible entries, then descending score. Ties
/// fall back to `eval_index` and finally input position. Infeasible entries
/// score negative infinity and sort after every feasible one.
pub fn rank_for_search<T: Rankable>(entries: &[T], spec: &EvaluatorSpec) -> Vec<usize> {
    let scores: Vec<f64> = entries
        .iter()
        .map(|e| {
            if e.feasible() {
                scalar_score(e.metrics(), spec)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let ranks: Vec<usize> = if spec.is_single_objective() {
        vec![0; entries.len()]
    } else {
        let feasible: Vec<usize> = (0..entries.len())
            .filter(|&i| scores[i] > f64::NEG_INFINITY)
            .collect();
        let points: Vec<MetricVector> = feasible.iter().map(|&i| *entries[i].metrics()).collect();
        let sub = nondomination_ranks(&points, spec);
        let mut ranks = vec![usize::MAX; entries.len()];
        for (k, &i) in feasible.iter().enumerate() {
            ranks[i] = sub[k];
        }
        ranks
    };
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        ranks[a]
            .cmp(&ranks[b])
            .then_with(|| scores[b].total_cmp(&scores[a]))
            .then_with(|| entries[a].eval_index().cmp(&entries[b].eval_index()))
            .then_with(|| a.cmp(&b))
    });
    order
}

// --- archive ----------------------------------------------------------------

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub key: String,
    pub config: Configuration,
    pub metrics: MetricVector,
    pub feasible: bool,
    pub eval_index: u64,
    pub chunk_id: u64,
    pub layer_round: u8,
}

impl Rankable for Observation {
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

impl<T: Rankable> Rankable for &T {
    fn metrics(&self) -> &MetricVector {
        (*self).metrics()
    }
    fn feasible(&self) -> bool {
        (*self).feasible()
    }
    fn eval_index(&self) -> u64 {
        (*self).eval_index()
    }
}

/// Append-only global result set with one sorted queue per objective.
#[derive(Debug, Clone, Default)]
pub struct ResultArchive {
    observations: Vec<Observation>,
    queues: BTreeMap<Objective, Vec<usize>>,
    key_index: HashMap<String, Vec<u64>>,
}

impl ResultArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn get(&self, eval_index: u64) -> Option<&Observation> {
        self.observations.get(eval_index as usize)
    }

    pub fn lookup(&self, key: &str) -> &[u64] {
        self.key_index.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn next_index(&self) -> u64 {
        self.observations.len() as u64
    }

    /// Appends an observation. Its `eval_index` is overwritten with the
    /// append position.
    pub fn push(&mut self, mut obs: Observation) -> u64 {
        let index = self.observations.len();
        obs.eval_index = index as u64;
        self.key_index
            .entry(obs.key.clone())
            .or_default()
            .push(obs.eval_index);
        for objective in Objective::ALL {
            let queue = self.queues.entry(objective).or_default();
            let pos = queue.partition_point(|&i| {
                objective.compare(&self.observations[i].metrics, &obs.metrics) != Ordering::Greater
            });
            queue.insert(pos, index);
        }
        self.observations.push(obs);
        index as u64
    }

    /// Observations sorted best-first on `objective`, ties by `eval_index`.
    pub fn queue(&self, objective: Objective) -> impl Iterator<Item = &Observation> {
        self.queues
            .get(&objective)
            .into_iter()
            .flatten()
            .map(|&i| &self.observations[i])
    }
}

impl FromIterator<Observation> for ResultArchive {
    fn from_iter<I: IntoIterator<Item = Observation>>(iter: I) -> Self {
        let mut archive = ResultArchive::new();
        for o in iter {
            archive.push(o);
        }
        archive
    }
}

/// Feasible observations not dominated by any other feasible observation,
/// one per canonical key, sorted best-first on the first objective.
pub fn pareto_frontier<'a>(archive: &'a ResultArchive, spec: &EvaluatorSpec) -> Vec<&'a Observation> {
    let mut seen = HashSet::new();
    let candidates: Vec<&Observation> = archive
        .observations()
        .iter()
        .filter(|o| o.feasible && spec.is_feasible(&o.metrics))
        .filter(|o| seen.insert(o.key.as_str()))
        .collect();
    let mut front: Vec<&Observation> = candidates
        .iter()
        .copied()
        .filter(|o| {
            !candidates
                .iter()
                .any(|p| dominates(&p.metrics, &o.metrics, spec))
        })
        .collect();
    let first = spec.objectives[0];
    front.sort_by(|a, b| {
        first
            .compare(&a.metrics, &b.metrics)
            .then(a.eval_index.cmp(&b.eval_index))
    });
    front
}

/// Up to `k` frontier members. When the frontier is larger than `k`, picks
/// round-robin from the per-objective queues, best of each objective first.
pub fn select_best<'a>(
    archive: &'a ResultArchive,
    spec: &EvaluatorSpec,
    k: usize,
) -> Result<Vec<&'a Observation>> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let front = pareto_frontier(archive, spec);
    if front.len() <= k {
        return Ok(front);
    }
    let members: HashSet<u64> = front.iter().map(|o| o.eval_index).collect();
    let mut queues: Vec<Vec<&Observation>> = spec
        .objectives
        .iter()
        .map(|&o| {
            archive
                .queue(o)
                .filter(|obs| members.contains(&obs.eval_index))
                .collect()
        })
        .collect();
    let weights: Vec<usize> = (0..queues.len())
        .map(|i| spec.queue_weights.get(i).copied().unwrap_or(1).max(1))
        .collect();
    let mut taken = HashSet::new();
    let mut out = Vec::with_capacity(k);
    let mut cursors = vec![0usize; queues.len()];
    while out.len() < k {
        let mut progressed = false;
        for (q, queue) in queues.iter_mut().enumerate() {
            for _ in 0..weights[q] {
                while cursors[q] < queue.len() && taken.contains(&queue[cursors[q]].eval_index) {
                    cursors[q] += 1;
                }
                if cursors[q] < queue.len() && out.len() < k {
                    let obs = queue[cursors[q]];
                    taken.insert(obs.eval_index);
                    out.push(obs);
                    progressed = true;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cogspace::Assignment;

    fn qc() -> EvaluatorSpec {
        EvaluatorSpec::new(vec![Objective::Quality, Objective::Cost]).unwrap()
    }

    fn mv(q: f64, c: f64, l: f64) -> MetricVector {
        MetricVector::new(q, c, l).unwrap()
    }

    fn obs(i: usize, q: f64, c: f64, l: f64, feasible: bool) -> Observation {
        let assignments: Assignment = [("x".to_string(), i.to_string())].into();
        let config = Configuration::new(assignments, 0);
        Observation {
            key: config.key(),
            config,
            metrics: mv(q, c, l),
            feasible,
            eval_index: i as u64,
            chunk_id: 0,
            layer_round: 1,
        }
    }

    #[test]
    fn product_score() {
        assert!((scalar_score(&mv(0.8, 4.0, 1.0), &qc()) - 0.2).abs() < 1e-12);
        let q = EvaluatorSpec::quality_only();
        assert_eq!(scalar_score(&mv(0.7, 5.0, 2.0), &q), 0.7);
        let bounded = q.with_thresholds(vec![Threshold {
            metric: Objective::Latency,
            bound: 1.0,
        }]);
        assert_eq!(scalar_score(&mv(0.9, 1.0, 2.0), &bounded), f64::NEG_INFINITY);
        // zero cost is floored, not an error
        assert!(scalar_score(&mv(0.5, 0.0, 0.0), &qc()).is_finite());
    }

    #[test]
    fn three_objective_product_uses_scales() {
        let mut spec =
            EvaluatorSpec::new(vec![Objective::Quality, Objective::Cost, Objective::Latency])
                .unwrap();
        spec.cost_scale = 2.0;
        spec.latency_scale = 4.0;
        let s = scalar_score(&mv(0.6, 2.0, 8.0), &spec);
        assert!((s - 0.6 / (1.0 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn parses_thresholds() {
        let t: Threshold = "quality>=0.5".parse().unwrap();
        assert_eq!(t.metric, Objective::Quality);
        assert_eq!(t.bound, 0.5);
        let t: Threshold = "cost<=3".parse().unwrap();
        assert!(t.holds(&mv(0.1, 3.0, 0.0)));
        assert!("quality<=0.5".parse::<Threshold>().is_err());
        assert!("speed>=1".parse::<Threshold>().is_err());
    }

    #[test]
    fn rejects_bad_metrics() {
        assert!(MetricVector::new(f64::NAN, 0.0, 0.0).is_err());
        assert!(MetricVector::new(0.5, -1.0, 0.0).is_err());
    }

    #[test]
    fn dominance() {
        let spec = qc();
        assert!(dominates(&mv(0.8, 5.0, 0.0), &mv(0.7, 6.0, 0.0), &spec));
        assert!(!dominates(&mv(0.9, 6.0, 0.0), &mv(0.8, 5.0, 0.0), &spec));
        assert!(!dominates(&mv(0.8, 5.0, 0.0), &mv(0.8, 5.0, 0.0), &spec));
        // latency is ignored when not selected
        assert!(!dominates(&mv(0.8, 5.0, 9.0), &mv(0.8, 5.0, 1.0), &spec));
    }

    #[test]
    fn frontier_filters_dominated_and_infeasible() {
        let spec = qc();
        let archive: ResultArchive = vec![
            obs(0, 0.9, 6.0, 0.0, true),
            obs(1, 0.8, 5.0, 0.0, true),
            obs(2, 0.7, 7.0, 0.0, true),
        ]
        .into_iter()
        .collect();
        let front: Vec<u64> = pareto_frontier(&archive, &spec)
            .iter()
            .map(|o| o.eval_index)
            .collect();
        assert_eq!(front, [0, 1]);

        assert!(pareto_frontier(&ResultArchive::new(), &spec).is_empty());
        let infeasible: ResultArchive = vec![obs(0, 0.9, 6.0, 0.0, false)].into_iter().collect();
        assert!(pareto_frontier(&infeasible, &spec).is_empty());
    }

    #[test]
    fn frontier_dedups_by_key() {
        let spec = qc();
        let mut a = obs(0, 0.9, 6.0, 0.0, true);
        let mut b = a.clone();
        b.eval_index = 1;
        a.eval_index = 0;
        let archive: ResultArchive = vec![a, b].into_iter().collect();
        let front = pareto_frontier(&archive, &spec);
        assert_eq!(front.len(), 1);
        assert_eq!(front[0].eval_index, 0);
    }

    #[test]
    fn select_best_round_robin() {
        let spec = qc();
        let small: ResultArchive =
            vec![obs(0, 0.9, 6.0, 0.0, true), obs(1, 0.8, 5.0, 0.0, true)].into_iter().collect();
        assert_eq!(select_best(&small, &spec, 5).unwrap().len(), 2);

        // 4-point frontier: quality queue 0.9, 0.8, 0.7, 0.6; cost queue 2, 3, 5, 6.
        // Round-robin with k=2 takes the head of each queue.
        let four: ResultArchive = vec![
            obs(0, 0.9, 6.0, 0.0, true),
            obs(1, 0.8, 5.0, 0.0, true),
            obs(2, 0.7, 3.0, 0.0, true),
            obs(3, 0.6, 2.0, 0.0, true),
        ]
        .into_iter()
        .collect();
        let picked: Vec<u64> = select_best(&four, &spec, 2)
            .unwrap()
            .iter()
            .map(|o| o.eval_index)
            .collect();
        assert_eq!(picked, [0, 3]);
        let picked: Vec<u64> = select_best(&four, &spec, 3)
            .unwrap()
            .iter()
            .map(|o| o.eval_index)
            .collect();
        assert_eq!(picked, [0, 3, 1]);

        let q = EvaluatorSpec::quality_only();
        let best = select_best(&four, &q, 1).unwrap();
        assert_eq!(best[0].eval_index, 0);
        assert!(select_best(&four, &q, 0).is_err());
    }

    #[test]
    fn ranking_for_search() {
        let q = EvaluatorSpec::quality_only();
        let entries = vec![
            obs(0, 0.5, 1.0, 0.0, true),
            obs(1, 0.9, 1.0, 0.0, true),
            obs(2, 0.7, 1.0, 0.0, true),
        ];
        assert_eq!(rank_for_search(&entries, &q), [1, 2, 0]);

        let points = [mv(0.9, 6.0, 0.0), mv(0.8, 5.0, 0.0), mv(0.7, 7.0, 0.0)];
        assert_eq!(nondomination_ranks(&points, &qc()), [0, 0, 1]);

        let infeasible = vec![
            obs(2, 0.9, 1.0, 0.0, false),
            obs(0, 0.1, 1.0, 0.0, false),
            obs(1, 0.5, 1.0, 0.0, false),
        ];
        assert_eq!(rank_for_search(&infeasible, &qc()), [1, 2, 0]);
    }

    #[test]
    fn queues_sorted_with_index_ties() {
        let archive: ResultArchive = vec![
            obs(0, 0.5, 3.0, 1.0, true),
            obs(1, 0.9, 3.0, 2.0, true),
            obs(2, 0.5, 1.0, 0.5, true),
        ]
        .into_iter()
        .collect();
        let q: Vec<u64> = archive.queue(Objective::Quality).map(|o| o.eval_index).collect();
        assert_eq!(q, [1, 0, 2]);
        let c: Vec<u64> = archive.queue(Objective::Cost).map(|o| o.eval_index).collect();
        assert_eq!(c, [2, 0, 1]);
        assert_eq!(archive.lookup(&archive.observations()[1].key), &[1]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_obs() -> impl Strategy<Value = Vec<Observation>> {
            // metrics and feasibility are a function of the key, as with a pure evaluator
            let table = prop::collection::vec(
                (0u32..6, 0u32..6, 0u32..6, prop::bool::weighted(0.85)),
                12,
            );
            (table, prop::collection::vec(0usize..12, 0..40)).prop_map(|(table, keys)| {
                keys.into_iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let (q, c, l, f) = table[k];
                        let mut o = obs(k, q as f64 / 5.0, c as f64, l as f64, f);
                        o.eval_index = i as u64;
                        o
                    })
                    .collect()
            })
        }

        fn arb_spec() -> impl Strategy<Value = EvaluatorSpec> {
            prop::sample::subsequence(Objective::ALL.to_vec(), 1..=3)
                .prop_map(|objs| EvaluatorSpec::new(objs).unwrap())
        }

        proptest! {
            #[test]
            fn frontier_sound_and_complete(rows in arb_obs(), spec in arb_spec()) {
                let archive: ResultArchive = rows.into_iter().collect();
                let front = pareto_frontier(&archive, &spec);
                let feasible: Vec<_> = archive.observations().iter().filter(|o| o.feasible).collect();
                for f in &front {
                    prop_assert!(!feasible.iter().any(|o| dominates(&o.metrics, &f.metrics, &spec)));
                }
                for o in &feasible {
                    let on_front = front.iter().any(|f| f.key == o.key);
                    let covered = front.iter().any(|f| dominates(&f.metrics, &o.metrics, &spec)
                        || f.metrics == o.metrics);
                    prop_assert!(on_front || covered);
                }
            }

            #[test]
            fn selection_is_subset_of_frontier(rows in arb_obs(), spec in arb_spec(), k in 1usize..6) {
                let archive: ResultArchive = rows.into_iter().collect();
                let front: HashSet<u64> = pareto_frontier(&archive, &spec).iter().map(|o| o.eval_index).collect();
                let picked = select_best(&archive, &spec, k).unwrap();
                prop_assert!(picked.len() <= k);
                prop_assert_eq!(picked.len(), k.min(front.len()));
                for p in picked {
                    prop_assert!(front.contains(&p.eval_index));
                }
            }

            #[test]
            fn product_score_is_monotone(q in 0.0f64..1.0, c in 0.0f64..10.0, dq in 0.0f64..1.0, dc in 0.0f64..10.0) {
                let spec = qc();
                let base = scalar_score(&mv(q, c, 0.0), &spec);
                prop_assert!(scalar_score(&mv(q + dq, c, 0.0), &spec) >= base);
                prop_assert!(scalar_score(&mv(q, c + dc, 0.0), &spec) <= base);
            }

            #[test]
            fn ranking_is_a_permutation_and_consistent(rows in arb_obs(), spec in arb_spec()) {
                let order = rank_for_search(&rows, &spec);
                let mut sorted = order.clone();
                sorted.sort_unstable();
                prop_assert_eq!(sorted, (0..rows.len()).collect::<Vec<_>>());
                // reranking any pair in isolation agrees with the full order on feasibility and score
                for w in order.windows(2) {
                    let (a, b) = (&rows[w[0]], &rows[w[1]]);
                    if spec.is_single_objective() {
                        let sa = if a.feasible { scalar_score(&a.metrics, &spec) } else { f64::NEG_INFINITY };
                        let sb = if b.feasible { scalar_score(&b.metrics, &spec) } else { f64::NEG_INFINITY };
                        prop_assert!(sa >= sb);
                    } else {
                        prop_assert!(!(b.feasible && !a.feasible));
                    }
                }
            }
        }
    }
}
