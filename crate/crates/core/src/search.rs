//! Recursive layer search.
//!
//! The innermost layer runs a plain TPE loop. Every outer layer samples a
//! chunk of up to `W` assignments over its own cogs, then runs successive
//! halving over the chunk: in rung `s` each survivor gets a nested search of
//! budget `r0 * eta^s` in the next layer down, and only the best
//! `floor(|survivors| / eta)` move on.
//!
//! Sub-searches of one rung are independent. Each sees the same snapshot of
//! earlier results and draws from its own RNG substream, so serial and
//! parallel execution produce identical records in identical order.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cogspace::{assignment_key, Assignment, CogCatalog};
use crate::error::{Error, Result};
use crate::evaluation::{derive_seed, stream_rng, EvalCache, EvalRecord, Evaluator};
use crate::objectives::{rank_for_search, EvaluatorSpec};
use crate::surrogate::{DensityModel, FeedbackEntry, FeedbackSet, TpeParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopParams {
    pub window: usize,
    pub epsilon: f64,
}

impl Default for EarlyStopParams {
    fn default() -> Self {
        Self {
            window: 3,
            epsilon: 1e-3,
        }
    }
}

/// Which earlier results seed a layer's surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Only results whose upper-layer choices match the current ones.
    #[default]
    Conditional,
    /// Every result, projected onto the layer's cogs.
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchKnobs {
    pub eta: u64,
    pub chunk_size: u64,
    pub tpe: TpeParams,
    pub early_stop: Option<EarlyStopParams>,
    pub prior: PriorMode,
    pub parallelism: usize,
    /// Collect per-chunk rung audits.
    pub trace: bool,
    /// Collect fitted densities per chunk.
    pub surrogate_trace: bool,
}

impl Default for SearchKnobs {
    fn default() -> Self {
        Self {
            eta: 2,
            chunk_size: 8,
            tpe: TpeParams::default(),
            early_stop: Some(EarlyStopParams::default()),
            prior: PriorMode::default(),
            parallelism: 1,
            trace: false,
            surrogate_trace: false,
        }
    }
}

/// Successive-halving schedule derived from the next layer's budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RungSchedule {
    pub eta: u64,
    pub r0: u64,
    pub rungs: u64,
}

impl RungSchedule {
    pub fn budget(&self, rung: u64) -> u64 {
        self.r0 * self.eta.pow(rung as u32)
    }

    pub fn budgets(&self) -> Vec<u64> {
        (0..self.rungs).map(|s| self.budget(s)).collect()
    }
}

/// `r0 = ceil(b / eta)`, `S = max(1, floor(b / r0))`, `r_s = r0 * eta^s`.
pub fn make_rung_schedule(next_layer_budget: u64, eta: u64) -> Result<RungSchedule> {
    if next_layer_budget == 0 {
        return Err(Error::Argument("next-layer budget must be at least 1".into()));
    }
    if eta < 2 {
        return Err(Error::Argument(format!("eta must be at least 2, got {eta}")));
    }
    let r0 = next_layer_budget.div_ceil(eta);
    let rungs = (next_layer_budget / r0).max(1);
    Ok(RungSchedule { eta, r0, rungs })
}

/// Keeps the best `floor(len / eta)` members. `order` lists member indices
/// best first.
pub fn halve<T>(members: Vec<T>, eta: u64, order: &[usize]) -> Vec<T> {
    let keep = members.len() / eta.max(1) as usize;
    let mut slots: Vec<Option<T>> = members.into_iter().map(Some).collect();
    order
        .iter()
        .take(keep)
        .map(|&i| slots[i].take().expect("order is a permutation"))
        .collect()
}

/// Sliding record of best-so-far scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub window: usize,
    pub epsilon: f64,
    history: VecDeque<f64>,
}

impl EarlyStopState {
    pub fn new(params: EarlyStopParams) -> Self {
        Self {
            window: params.window.max(1),
            epsilon: params.epsilon,
            history: VecDeque::with_capacity(params.window + 2),
        }
    }

    /// Starts the history at a known incumbent.
    pub fn seeded(params: EarlyStopParams, incumbent: Option<f64>) -> Self {
        let mut s = Self::new(params);
        if let Some(v) = incumbent {
            s.history.push_back(v);
        }
        s
    }

    pub fn history(&self) -> &VecDeque<f64> {
        &self.history
    }

    /// Records `new_best` and reports whether the last `window` entries
    /// failed to improve on the one before them by the relative threshold.
    pub fn check(&mut self, new_best: f64) -> bool {
        self.history.push_back(new_best);
        while self.history.len() > self.window + 1 {
            self.history.pop_front();
        }
        self.is_converged()
    }

    pub fn is_converged(&self) -> bool {
        if self.history.len() < self.window + 1 {
            return false;
        }
        let previous = self.history[0];
        let recent = self
            .history
            .iter()
            .skip(1)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if recent == f64::NEG_INFINITY {
            return true;
        }
        if previous == f64::NEG_INFINITY {
            return false;
        }
        recent - previous < self.epsilon * previous.abs().max(1.0)
    }
}

/// Replays the running best of `records` through a fresh state.
pub fn sequence_converged(records: &[EvalRecord], spec: &EvaluatorSpec, params: EarlyStopParams) -> bool {
    let mut state = EarlyStopState::new(params);
    let mut best = f64::NEG_INFINITY;
    let mut converged = false;
    for r in records {
        best = best.max(r.effective_score(spec));
        converged = state.check(best);
    }
    converged
}

/// Groups results by their restriction to `scope`; each group is credited
/// with its best member per [`rank_for_search`].
#[derive(Debug, Clone)]
struct Projection {
    scope: Vec<String>,
    groups: Vec<Vec<FeedbackEntry>>,
    representative: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Projection {
    fn new(scope: Vec<String>) -> Self {
        Self {
            scope,
            groups: Vec::new(),
            representative: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn add(&mut self, record: &EvalRecord, spec: &EvaluatorSpec) {
        let entry = record.project(&self.scope, spec);
        let key = assignment_key(&entry.assignment);
        let g = match self.index.get(&key) {
            Some(&g) => g,
            None => {
                self.index.insert(key, self.groups.len());
                self.groups.push(Vec::new());
                self.representative.push(0);
                self.groups.len() - 1
            }
        };
        self.groups[g].push(entry);
        self.representative[g] = rank_for_search(&self.groups[g], spec)[0];
    }

    fn entries(&self) -> Vec<FeedbackEntry> {
        self.groups
            .iter()
            .zip(&self.representative)
            .map(|(g, &r)| g[r].clone())
            .collect()
    }

    fn feedback(&self) -> FeedbackSet {
        FeedbackSet::with_entries(self.scope.clone(), self.entries())
    }
}

/// Best-credit projection of evaluated records onto `scope`, in order of
/// first appearance.
pub fn project_feedback(records: &[EvalRecord], scope: &[String], spec: &EvaluatorSpec) -> Vec<FeedbackEntry> {
    let mut p = Projection::new(scope.to_vec());
    for r in records {
        p.add(r, spec);
    }
    p.entries()
}

/// Successive-halving bookkeeping for one chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkAudit {
    pub round: u8,
    pub level: usize,
    /// Position of the owning call in the search tree.
    pub path: Vec<u64>,
    pub chunk: u64,
    pub chunk_size: u64,
    pub configs: u64,
    pub eta: u64,
    pub r0: u64,
    pub rungs: u64,
    /// `(r_s, |theta_s|)` for every rung that ran.
    pub rung_sizes: Vec<(u64, u64)>,
    /// Canonical keys of the layer assignments surviving each rung.
    pub survivors: Vec<Vec<String>>,
}

impl ChunkAudit {
    /// `sum_s r_s * |theta_s|`.
    pub fn consumed(&self) -> u64 {
        self.rung_sizes.iter().map(|(r, n)| r * n).sum()
    }

    /// `S * r0 * W`.
    pub fn bound(&self) -> u64 {
        self.rungs * self.r0 * self.chunk_size
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityTrace {
    pub round: u8,
    pub level: usize,
    pub path: Vec<u64>,
    pub chunk: u64,
    pub model: DensityModel,
}

/// Everything a (sub-)search produced, in canonical order.
#[derive(Debug, Clone, Default)]
pub struct SearchOutcome {
    pub records: Vec<EvalRecord>,
    /// Configurations proposed per level (index 0 = innermost).
    pub proposals: [u64; 3],
    pub audits: Vec<ChunkAudit>,
    pub densities: Vec<DensityTrace>,
}

impl SearchOutcome {
    fn absorb(&mut self, other: SearchOutcome) {
        self.records.extend(other.records);
        for (a, b) in self.proposals.iter_mut().zip(other.proposals) {
            *a += b;
        }
        self.audits.extend(other.audits);
        self.densities.extend(other.densities);
    }
}

/// Data handed to the caller at every outermost chunk boundary.
#[derive(Debug, Clone, Default)]
pub struct ChunkFlush {
    pub records: Vec<EvalRecord>,
    pub audits: Vec<ChunkAudit>,
    pub densities: Vec<DensityTrace>,
}

/// What the caller wants done at a chunk boundary.
#[derive(Debug, Default)]
pub struct BoundaryAction {
    /// Replacement catalog (only option appends are legal).
    pub catalog: Option<CogCatalog>,
}

pub type FlushHook<'h> = dyn FnMut(ChunkFlush) -> Result<BoundaryAction> + 'h;

/// Totals for one top-level layer search.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TopLevelStats {
    pub evaluations: u64,
    pub proposals: [u64; 3],
    pub chunks: u64,
}

/// One round's layer search. Layers are innermost first; `budgets[i]` is the
/// budget assigned to `layers[i]`.
pub struct LayerSearch<'a> {
    catalog: RwLock<Arc<CogCatalog>>,
    evaluator: &'a dyn Evaluator,
    spec: &'a EvaluatorSpec,
    knobs: &'a SearchKnobs,
    layers: Vec<Vec<String>>,
    budgets: Vec<u64>,
    fixed: Assignment,
    round: u8,
    seed: u64,
    cache: &'a EvalCache,
    prior: Vec<EvalRecord>,
    pool: Option<Arc<rayon::ThreadPool>>,
}

struct Call<'c> {
    level: usize,
    chosen: Assignment,
    budget: u64,
    path: Vec<u64>,
    inherited: &'c [EvalRecord],
}

impl<'a> LayerSearch<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        catalog: CogCatalog,
        evaluator: &'a dyn Evaluator,
        spec: &'a EvaluatorSpec,
        knobs: &'a SearchKnobs,
        layers: Vec<Vec<String>>,
        budgets: Vec<u64>,
        round: u8,
        seed: u64,
        cache: &'a EvalCache,
    ) -> Result<Self> {
        if layers.is_empty() || layers.len() > 3 || layers.len() != budgets.len() {
            return Err(Error::Argument(format!(
                "need 1 to 3 layers with one budget each, got {} layers and {} budgets",
                layers.len(),
                budgets.len()
            )));
        }
        if knobs.eta < 2 || knobs.chunk_size == 0 {
            return Err(Error::Argument("eta must be >= 2 and chunk size >= 1".into()));
        }
        Ok(Self {
            catalog: RwLock::new(Arc::new(catalog)),
            evaluator,
            spec,
            knobs,
            layers,
            budgets,
            fixed: Assignment::new(),
            round,
            seed,
            cache,
            prior: Vec::new(),
            pool: None,
        })
    }

    /// Thread pool for concurrent sub-searches when `parallelism > 1`.
    pub fn with_pool(mut self, pool: Arc<rayon::ThreadPool>) -> Self {
        self.pool = Some(pool);
        self
    }

    /// Cogs pinned outside the search; they are removed from every layer
    /// and merged into every evaluated configuration.
    pub fn with_fixed(mut self, fixed: Assignment) -> Self {
        for layer in &mut self.layers {
            layer.retain(|c| !fixed.contains_key(c));
        }
        self.fixed = fixed;
        self
    }

    /// Earlier results (already archived) used to seed the surrogates.
    pub fn with_prior(mut self, prior: Vec<EvalRecord>) -> Self {
        self.prior = prior;
        self
    }

    pub fn catalog(&self) -> Arc<CogCatalog> {
        self.catalog.read().expect("catalog lock").clone()
    }

    pub fn layers(&self) -> &[Vec<String>] {
        &self.layers
    }

    /// Runs the outermost layer with its assigned budget, handing results to
    /// `flush` after every outermost chunk.
    pub fn run(&self, flush: &mut FlushHook<'_>) -> Result<TopLevelStats> {
        let mut level = self.layers.len();
        let mut budget = self.budgets[level - 1];
        while level > 1 && self.layers[level - 1].is_empty() {
            budget = budget.saturating_mul(self.budgets[level - 2]);
            level -= 1;
        }
        let call = Call {
            level,
            chosen: Assignment::new(),
            budget,
            path: vec![],
            inherited: &[],
        };
        let mut stats = TopLevelStats::default();
        let mut hook = |chunk: ChunkFlush, proposals: [u64; 3]| -> Result<()> {
            stats.evaluations += chunk.records.len() as u64;
            stats.chunks += 1;
            for (a, b) in stats.proposals.iter_mut().zip(proposals) {
                *a += b;
            }
            let action = flush(chunk)?;
            if let Some(catalog) = action.catalog {
                *self.catalog.write().expect("catalog lock") = Arc::new(catalog);
            }
            Ok(())
        };
        if level == 1 {
            self.innermost(call, Some(&mut hook))?;
        } else {
            self.outer(call, Some(&mut hook))?;
        }
        Ok(stats)
    }

    /// Nested search without flushing; returns every record it produced.
    pub fn search(&self, level: usize, chosen: Assignment, budget: u64, path: Vec<u64>, inherited: &[EvalRecord]) -> Result<SearchOutcome> {
        let call = Call {
            level,
            chosen,
            budget,
            path,
            inherited,
        };
        self.dispatch(call)
    }

    fn dispatch(&self, call: Call<'_>) -> Result<SearchOutcome> {
        if call.level == 0 || call.level > self.layers.len() {
            return Err(Error::Argument(format!("no layer {}", call.level)));
        }
        if call.level == 1 {
            self.innermost(call, None)
        } else {
            self.outer(call, None)
        }
    }

    fn relevant<'r>(&'r self, chosen: &'r Assignment, inherited: &'r [EvalRecord]) -> impl Iterator<Item = &'r EvalRecord> + 'r {
        let conditional = self.knobs.prior == PriorMode::Conditional;
        self.prior
            .iter()
            .chain(inherited)
            .filter(move |r| !conditional || r.consistent_with(chosen))
    }

    fn incumbent(&self, chosen: &Assignment, inherited: &[EvalRecord]) -> Option<f64> {
        self.prior
            .iter()
            .chain(inherited)
            .filter(|r| r.consistent_with(chosen))
            .map(|r| r.effective_score(self.spec))
            .reduce(f64::max)
    }

    fn full_key(&self, chosen: &Assignment, local: Assignment) -> String {
        let mut full = self.fixed.clone();
        full.extend(chosen.iter().map(|(k, v)| (k.clone(), v.clone())));
        full.extend(local);
        assignment_key(&full)
    }

    fn evaluate(&self, catalog: &CogCatalog, chosen: &Assignment, local: Assignment, index: u64) -> EvalRecord {
        let mut full = self.fixed.clone();
        full.extend(chosen.iter().map(|(k, v)| (k.clone(), v.clone())));
        full.extend(local);
        self.cache
            .evaluate(self.evaluator, catalog, self.spec, full, index)
    }

    fn innermost(&self, call: Call<'_>, mut flush: Option<&mut dyn FnMut(ChunkFlush, [u64; 3]) -> Result<()>>) -> Result<SearchOutcome> {
        let mut out = SearchOutcome::default();
        if call.budget == 0 {
            return Ok(out);
        }
        let base_index = (self.prior.len() + call.inherited.len()) as u64;
        let scope = &self.layers[0];
        if scope.is_empty() {
            let catalog = self.catalog();
            out.records
                .push(self.evaluate(&catalog, &call.chosen, Assignment::new(), base_index));
            out.proposals[0] = 1;
            if let Some(f) = flush.as_mut() {
                f(
                    ChunkFlush {
                        records: std::mem::take(&mut out.records),
                        ..ChunkFlush::default()
                    },
                    std::mem::take(&mut out.proposals),
                )?;
            }
            return Ok(out);
        }

        let mut projection = Projection::new(scope.clone());
        for r in self.relevant(&call.chosen, call.inherited) {
            projection.add(r, self.spec);
        }
        let mut seen: HashSet<String> = self
            .prior
            .iter()
            .chain(call.inherited)
            .map(|r| r.key.clone())
            .collect();
        let mut best = self.incumbent(&call.chosen, call.inherited);
        let mut stop = self.knobs.early_stop.map(EarlyStopState::new);
        let mut rng = stream_rng(self.seed, &[self.round as u64, 1, derive_seed(0, &call.path)]);
        let mut produced = 0u64;
        let mut pending: Vec<EvalRecord> = Vec::new();
        let mut pending_proposals = 0u64;
        let mut chunk = 0u64;

        for step in 0..call.budget {
            let catalog = self.catalog();
            let feedback = projection.feedback();
            let model = DensityModel::fit(&feedback, &catalog, &self.knobs.tpe)?;
            if self.knobs.surrogate_trace && step % self.knobs.chunk_size == 0 {
                out.densities.push(DensityTrace {
                    round: self.round,
                    level: 1,
                    path: call.path.clone(),
                    chunk: step / self.knobs.chunk_size,
                    model: model.clone(),
                });
            }
            let candidate = model.sample_fresh(&mut rng, self.knobs.tpe.n_candidates, |c| {
                !seen.contains(&self.full_key(&call.chosen, model.to_assignment(c)))
            });
            let record = self.evaluate(
                &catalog,
                &call.chosen,
                model.to_assignment(&candidate),
                base_index + produced,
            );
            seen.insert(record.key.clone());
            produced += 1;
            projection.add(&record, self.spec);
            let score = record.effective_score(self.spec);
            best = Some(best.map_or(score, |b| b.max(score)));
            pending.push(record);
            pending_proposals += 1;

            let stopped = match stop.as_mut() {
                Some(s) => s.check(best.expect("set above")),
                None => false,
            };
            let last = stopped || step + 1 == call.budget;
            if let Some(f) = flush.as_mut() {
                if last || pending.len() as u64 == self.knobs.chunk_size {
                    let mut densities = std::mem::take(&mut out.densities);
                    densities.retain(|d| d.chunk == chunk);
                    f(
                        ChunkFlush {
                            records: std::mem::take(&mut pending),
                            audits: Vec::new(),
                            densities,
                        },
                        [pending_proposals, 0, 0],
                    )?;
                    pending_proposals = 0;
                    chunk += 1;
                }
            }
            if stopped {
                break;
            }
        }
        out.proposals[0] = produced;
        out.records = pending;
        Ok(out)
    }

    fn outer(&self, call: Call<'_>, mut flush: Option<&mut dyn FnMut(ChunkFlush, [u64; 3]) -> Result<()>>) -> Result<SearchOutcome> {
        let level = call.level;
        let mut out = SearchOutcome::default();
        if call.budget == 0 {
            return Ok(out);
        }
        let scope = self.layers[level - 1].clone();
        if scope.is_empty() {
            // An empty layer proposes nothing and hands its whole share down.
            let mut path = call.path.clone();
            path.push(u64::MAX);
            let child = Call {
                level: level - 1,
                chosen: call.chosen,
                budget: call.budget.saturating_mul(self.budgets[level - 2]),
                path,
                inherited: call.inherited,
            };
            return self.dispatch(child);
        }

        let schedule = make_rung_schedule(self.budgets[level - 2], self.knobs.eta)?;
        let w = self.knobs.chunk_size;
        let mut projection = Projection::new(scope.clone());
        for r in self.relevant(&call.chosen, call.inherited) {
            projection.add(r, self.spec);
        }
        let mut tried: HashSet<String> = self
            .prior
            .iter()
            .chain(call.inherited)
            .filter(|r| r.consistent_with(&call.chosen))
            .map(|r| assignment_key(&r.project(&scope, self.spec).assignment))
            .collect();
        let mut best = self.incumbent(&call.chosen, call.inherited);
        // Layer-level state, advanced once per chunk.
        let mut stop = self.knobs.early_stop.map(EarlyStopState::new);

        // Records of this call not yet flushed, visible to later sub-searches.
        let mut local: Vec<EvalRecord> = Vec::new();
        let mut used = 0u64;
        let mut chunk = 0u64;
        while used < call.budget {
            let n = w.min(call.budget - used);
            used += n;
            let catalog = self.catalog();
            let feedback = projection.feedback();
            let model = DensityModel::fit(&feedback, &catalog, &self.knobs.tpe)?;
            let mut rng = stream_rng(
                self.seed,
                &[self.round as u64, level as u64, derive_seed(0, &call.path), chunk],
            );
            let thetas: Vec<Assignment> = (0..n)
                .map(|_| {
                    let c = model.sample_fresh(&mut rng, self.knobs.tpe.n_candidates, |c| {
                        !tried.contains(&assignment_key(&model.to_assignment(c)))
                    });
                    let theta = model.to_assignment(&c);
                    tried.insert(assignment_key(&theta));
                    theta
                })
                .collect();
            let mut chunk_out = SearchOutcome::default();
            chunk_out.proposals[level - 1] += n;
            if self.knobs.surrogate_trace {
                chunk_out.densities.push(DensityTrace {
                    round: self.round,
                    level,
                    path: call.path.clone(),
                    chunk,
                    model,
                });
            }
            let mut audit = ChunkAudit {
                round: self.round,
                level,
                path: call.path.clone(),
                chunk,
                chunk_size: w,
                configs: n,
                eta: schedule.eta,
                r0: schedule.r0,
                rungs: schedule.rungs,
                rung_sizes: Vec::new(),
                survivors: Vec::new(),
            };

            struct Member {
                slot: u64,
                theta: Assignment,
                records: Vec<EvalRecord>,
            }
            let mut members: Vec<Member> = thetas
                .into_iter()
                .enumerate()
                .map(|(i, theta)| Member {
                    slot: i as u64,
                    theta,
                    records: Vec::new(),
                })
                .collect();

            for s in 0..schedule.rungs {
                if members.is_empty() {
                    break;
                }
                let r = schedule.budget(s);
                audit.rung_sizes.push((r, members.len() as u64));
                let snapshot: Vec<EvalRecord> = call
                    .inherited
                    .iter()
                    .chain(&local)
                    .chain(&chunk_out.records)
                    .cloned()
                    .collect();
                let run_child = |m: &Member| -> Result<SearchOutcome> {
                    let mut chosen = call.chosen.clone();
                    chosen.extend(m.theta.iter().map(|(k, v)| (k.clone(), v.clone())));
                    let mut path = call.path.clone();
                    path.extend([chunk, s, m.slot]);
                    self.dispatch(Call {
                        level: level - 1,
                        chosen,
                        budget: r,
                        path,
                        inherited: &snapshot,
                    })
                };
                let results: Vec<Result<SearchOutcome>> = match (&self.pool, self.knobs.parallelism > 1) {
                    (Some(pool), true) => pool.install(|| members.par_iter().map(run_child).collect()),
                    (None, true) => members.par_iter().map(run_child).collect(),
                    _ => members.iter().map(run_child).collect(),
                };

                let mut converged = vec![false; members.len()];
                for (j, result) in results.into_iter().enumerate() {
                    let child = result?;
                    for rec in &child.records {
                        projection.add(rec, self.spec);
                        let score = rec.effective_score(self.spec);
                        best = Some(best.map_or(score, |b| b.max(score)));
                    }
                    members[j].records.extend(child.records.iter().cloned());
                    chunk_out.absorb(child);
                    if let Some(p) = self.knobs.early_stop {
                        converged[j] = sequence_converged(&members[j].records, self.spec, p);
                    }
                }

                let mut idx = 0;
                members.retain(|_| {
                    let keep = !converged[idx];
                    idx += 1;
                    keep
                });
                let credits: Vec<FeedbackEntry> = members
                    .iter()
                    .map(|m| {
                        let order = rank_for_search(&m.records, self.spec);
                        match order.first() {
                            Some(&b) => m.records[b].project(&scope, self.spec),
                            None => FeedbackEntry {
                                assignment: m.theta.clone(),
                                metrics: crate::objectives::MetricVector::sentinel(),
                                score: f64::NEG_INFINITY,
                                feasible: false,
                                eval_index: u64::MAX,
                            },
                        }
                    })
                    .collect();
                let order = rank_for_search(&credits, self.spec);
                members = halve(members, self.knobs.eta, &order);
                audit
                    .survivors
                    .push(members.iter().map(|m| assignment_key(&m.theta)).collect());
            }

            if self.knobs.trace {
                chunk_out.audits.insert(0, audit);
            }
            match flush.as_mut() {
                Some(f) => {
                    let proposals = chunk_out.proposals;
                    local.extend(chunk_out.records.iter().cloned());
                    f(
                        ChunkFlush {
                            records: chunk_out.records,
                            audits: chunk_out.audits,
                            densities: chunk_out.densities,
                        },
                        proposals,
                    )?;
                }
                None => {
                    local.extend(chunk_out.records.iter().cloned());
                    out.absorb(chunk_out);
                }
            }
            chunk += 1;
            if let (Some(state), Some(b)) = (stop.as_mut(), best) {
                if state.check(b) {
                    break;
                }
            }
        }
        Ok(out)
    }
}
