//! Round loop: grows the layer count from 1 to 3, sizes each round's
//! budget, partitions it across layers, runs the layer search and persists
//! progress at every outermost chunk boundary.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cogspace::{Assignment, CogCatalog, LayerPlan};
use crate::error::{Error, Result};
use crate::evaluation::{EvalCache, EvalRecord, Evaluator};
use crate::objectives::{select_best, EvaluatorSpec, MetricVector, Observation, ResultArchive};
use crate::report::write_frontier_csv;
use crate::search::{BoundaryAction, ChunkAudit, ChunkFlush, LayerSearch, SearchKnobs};
use crate::store::{
    load_archive, RunDir, ARCHIVE_FILE, FRONTIER_FILE, MANIFEST_FILE, SEARCH_TRACE_FILE, SURROGATE_TRACE_FILE,
};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// How a round's budget is split across its layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionRule {
    /// `B_i = floor(S_i * (E / E_L)^(1/L))`.
    #[default]
    Root,
    /// `B_i = floor(S_i * sqrt(E / E_L))` whatever `L` is.
    Sqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverKnobs {
    pub alpha: f64,
    pub search: SearchKnobs,
    pub partition: PartitionRule,
    /// Run a single round with this many layers and all the budget.
    pub forced_layers: Option<u8>,
    /// How many configurations the final selection returns.
    pub select_k: usize,
}

impl Default for DriverKnobs {
    fn default() -> Self {
        Self {
            alpha: 1.1,
            search: SearchKnobs::default(),
            partition: PartitionRule::Root,
            forced_layers: None,
            select_k: 5,
        }
    }
}

/// `S_i = NC_i^alpha`; empty layers count as 1.
pub fn estimate_sizes(cog_counts: &[usize], alpha: f64) -> Vec<f64> {
    cog_counts
        .iter()
        .map(|&n| if n == 0 { 1.0 } else { (n as f64).powf(alpha) })
        .collect()
}

/// Budget granted to a round: the expected need `E_L` capped by what is
/// left, except that the three-layer round takes everything left.
pub fn round_budget(total: u64, used: u64, expected: f64, layers: u8) -> u64 {
    let remaining = total.saturating_sub(used);
    if layers >= 3 {
        return remaining;
    }
    remaining.min(expected.ceil().max(0.0) as u64)
}

/// Per-layer budgets. Non-empty layers get `max(1, floor(S_i * scale))`,
/// empty ones 1. If flooring still overshoots `granted`, the largest
/// budgets are decremented until the product fits.
pub fn partition_budget(sizes: &[f64], nonempty: &[bool], granted: u64, expected: f64, rule: PartitionRule) -> Vec<u64> {
    let l = sizes.len() as f64;
    let ratio = if expected > 0.0 { granted as f64 / expected } else { 0.0 };
    let scale = match rule {
        PartitionRule::Root => ratio.powf(1.0 / l),
        PartitionRule::Sqrt => ratio.sqrt(),
    };
    let mut budgets: Vec<u64> = sizes
        .iter()
        .zip(nonempty)
        .map(|(&s, &ne)| if ne { ((s * scale + 1e-9).floor() as u64).max(1) } else { 1 })
        .collect();
    while budgets.iter().product::<u64>() > granted.max(1) {
        let Some((i, _)) = budgets.iter().enumerate().filter(|(_, &b)| b > 1).max_by_key(|&(i, &b)| (b, std::cmp::Reverse(i))) else {
            break;
        };
        budgets[i] -= 1;
    }
    budgets
}

/// Plan for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub layers: u8,
    pub layer_plan: LayerPlan,
    pub sizes: Vec<f64>,
    pub expected: f64,
    pub granted: u64,
    pub budgets: Vec<u64>,
}

pub fn plan_round(
    catalog: &CogCatalog,
    fixed: &Assignment,
    layers: u8,
    total: u64,
    used: u64,
    knobs: &DriverKnobs,
    take_all: bool,
) -> Result<RoundPlan> {
    if knobs.alpha <= 0.0 {
        return Err(Error::Argument(format!("alpha must be positive, got {}", knobs.alpha)));
    }
    let mut layer_plan = catalog.group_layers(layers)?;
    for layer in &mut layer_plan.layers {
        layer.retain(|c| !fixed.contains_key(c));
    }
    let counts = layer_plan.cog_counts();
    let sizes = estimate_sizes(&counts, knobs.alpha);
    let expected: f64 = sizes.iter().product();
    let granted = if take_all {
        total.saturating_sub(used)
    } else {
        round_budget(total, used, expected, layers)
    };
    let nonempty: Vec<bool> = counts.iter().map(|&n| n > 0).collect();
    let budgets = partition_budget(&sizes, &nonempty, granted, expected, knobs.partition);
    layer_plan.sizes = sizes.clone();
    layer_plan.budgets = budgets.clone();
    Ok(RoundPlan {
        layers,
        layer_plan,
        sizes,
        expected,
        granted,
        budgets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub layers: u8,
    pub expected: f64,
    pub granted: u64,
    pub budgets: Vec<u64>,
    pub evals_consumed: u64,
    /// Configurations proposed per level, innermost first.
    pub proposals: [u64; 3],
    pub cost_scale: f64,
    pub latency_scale: f64,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub total: u64,
    /// Budget charged so far: probes, plus each finished round's grant.
    pub used: u64,
    /// Archive lines written.
    #[serde(default)]
    pub evaluated: u64,
    pub per_round: Vec<RoundRecord>,
}

/// Everything needed to resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub seed: u64,
    pub catalog: CogCatalog,
    pub spec: EvaluatorSpec,
    pub knobs: DriverKnobs,
    pub ledger: BudgetLedger,
    /// Layer counts of the rounds to run, in order.
    pub schedule: Vec<u8>,
    /// Cogs pinned by pre-filters.
    pub fixed: Assignment,
    pub prefilter_done: bool,
    pub next_chunk_id: u64,
    /// Opaque description of the evaluator, owned by the caller.
    #[serde(default)]
    pub evaluator: serde_json::Value,
    /// Eval indices of the final selection.
    #[serde(default)]
    pub selected: Vec<u64>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        if version != Some(MANIFEST_FORMAT_VERSION as u64) {
            return Err(Error::Schema(format!(
                "{}: unsupported manifest format version {:?}",
                path.display(),
                version
            )));
        }
        let manifest: Self = serde_json::from_value(value).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        CogCatalog::new(manifest.catalog.cogs().to_vec())?;
        Ok(manifest)
    }
}

/// Lets a pre-filter spend budget on probe evaluations.
pub struct ProbeContext<'p> {
    catalog: &'p CogCatalog,
    spec: &'p EvaluatorSpec,
    evaluator: &'p dyn Evaluator,
    cache: &'p EvalCache,
    limit: u64,
    base: u64,
    records: Vec<EvalRecord>,
}

impl ProbeContext<'_> {
    pub fn catalog(&self) -> &CogCatalog {
        self.catalog
    }

    pub fn spec(&self) -> &EvaluatorSpec {
        self.spec
    }

    /// Probes still affordable.
    pub fn remaining(&self) -> u64 {
        self.limit - self.records.len() as u64
    }

    pub fn probe(&mut self, assignment: &Assignment) -> Result<EvalRecord> {
        if self.remaining() == 0 {
            return Err(Error::Argument("probe budget exhausted".into()));
        }
        self.catalog.validate_assignment(assignment, false)?;
        let r = self.cache.evaluate(
            self.evaluator,
            self.catalog,
            self.spec,
            assignment.clone(),
            self.base + self.records.len() as u64,
        );
        self.records.push(r.clone());
        Ok(r)
    }
}

/// Extension points around the round loop.
pub trait RunHooks {
    /// Runs once before the first round; returns cogs to pin.
    fn prefilter(&mut self, _ctx: &mut ProbeContext<'_>) -> Result<Assignment> {
        Ok(Assignment::new())
    }

    /// Runs at every outermost chunk boundary; may return a grown catalog.
    fn at_boundary(&mut self, _catalog: &CogCatalog, _archive: &ResultArchive, _spec: &EvaluatorSpec) -> Result<Option<CogCatalog>> {
        Ok(None)
    }
}

pub struct NoHooks;

impl RunHooks for NoHooks {}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub archive: ResultArchive,
    pub selected: Vec<Observation>,
    /// Rung audits, collected when tracing is on.
    pub audits: Vec<ChunkAudit>,
    /// Set when a resume had nothing to do.
    pub notice: Option<String>,
}

/// Parameters of a fresh run.
pub struct RunRequest<'a> {
    pub catalog: CogCatalog,
    pub evaluator: &'a dyn Evaluator,
    pub spec: EvaluatorSpec,
    pub budget: u64,
    pub seed: u64,
    pub knobs: DriverKnobs,
    /// Run directory; `None` keeps everything in memory.
    pub dir: Option<&'a Path>,
    pub evaluator_ref: serde_json::Value,
}

pub fn adaseek_run(req: RunRequest<'_>, hooks: &mut dyn RunHooks) -> Result<RunOutput> {
    if req.budget == 0 {
        return Err(Error::Argument("budget must be at least 1".into()));
    }
    validate_knobs(&req.knobs)?;
    let dir = match req.dir {
        Some(p) => {
            if p.join(MANIFEST_FILE).exists() {
                return Err(Error::Argument(format!("{} already holds a run; resume it instead", p.display())));
            }
            Some(RunDir::open(p)?)
        }
        None => None,
    };
    let schedule = match req.knobs.forced_layers {
        Some(l) => vec![l],
        None => vec![1, 2, 3],
    };
    let manifest = RunManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        seed: req.seed,
        catalog: req.catalog,
        spec: req.spec,
        knobs: req.knobs,
        ledger: BudgetLedger {
            total: req.budget,
            used: 0,
            evaluated: 0,
            per_round: Vec::new(),
        },
        schedule,
        fixed: Assignment::new(),
        prefilter_done: false,
        next_chunk_id: 0,
        evaluator: req.evaluator_ref,
        selected: Vec::new(),
    };
    let mut run = Run {
        manifest,
        archive: ResultArchive::new(),
        cache: EvalCache::new(),
        evaluator: req.evaluator,
        dir,
        audits: Vec::new(),
    };
    run.persist_manifest()?;
    run.execute(hooks)?;
    Ok(run.finish(None))
}

/// Continues a persisted run under a new total budget.
pub fn resume_run(dir: &Path, new_budget: u64, evaluator: &dyn Evaluator, hooks: &mut dyn RunHooks) -> Result<RunOutput> {
    let run_dir = RunDir::open(dir)?;
    let mut manifest = RunManifest::read(&run_dir.path(MANIFEST_FILE))?;
    let archive_path = run_dir.path(ARCHIVE_FILE);
    let archive = if archive_path.exists() {
        load_archive(&archive_path)?
    } else {
        ResultArchive::new()
    };
    // Lines appended after the last manifest write still count as spent.
    let late = (archive.len() as u64).saturating_sub(manifest.ledger.evaluated);
    manifest.ledger.used += late;
    manifest.ledger.evaluated = archive.len() as u64;
    let cache = EvalCache::new();
    cache.warm(archive.observations());
    let mut run = Run {
        manifest,
        archive,
        cache,
        evaluator,
        dir: Some(run_dir),
        audits: Vec::new(),
    };
    if new_budget <= run.manifest.ledger.used {
        let notice = format!(
            "budget {new_budget} does not exceed the {} already charged; nothing to do",
            run.manifest.ledger.used
        );
        run.select()?;
        return Ok(run.finish(Some(notice)));
    }
    let extended = new_budget > run.manifest.ledger.total;
    run.manifest.ledger.total = new_budget;
    let all_done = run.manifest.ledger.per_round.len() >= run.manifest.schedule.len()
        && run.manifest.ledger.per_round.iter().all(|r| r.complete);
    if all_done && extended {
        let l = run.manifest.knobs.forced_layers.unwrap_or(3);
        run.manifest.schedule.push(l);
    }
    run.persist_manifest()?;
    run.execute(hooks)?;
    Ok(run.finish(None))
}

fn validate_knobs(k: &DriverKnobs) -> Result<()> {
    if let Some(l) = k.forced_layers {
        if !(1..=3).contains(&l) {
            return Err(Error::Argument(format!("forced layer count must be 1, 2 or 3, got {l}")));
        }
    }
    if k.search.eta < 2 || k.search.chunk_size == 0 || k.select_k == 0 {
        return Err(Error::Argument("eta >= 2, chunk size >= 1 and select k >= 1 are required".into()));
    }
    Ok(())
}

struct Run<'a> {
    manifest: RunManifest,
    archive: ResultArchive,
    cache: EvalCache,
    evaluator: &'a dyn Evaluator,
    dir: Option<RunDir>,
    audits: Vec<ChunkAudit>,
}

impl Run<'_> {
    fn persist_manifest(&self) -> Result<()> {
        match &self.dir {
            Some(d) => d.write_json(MANIFEST_FILE, &self.manifest),
            None => Ok(()),
        }
    }

    fn append(&mut self, records: Vec<EvalRecord>, chunk_id: u64, round: u8) -> Result<Vec<Observation>> {
        let version = self.manifest.catalog.version();
        let mut pushed = Vec::with_capacity(records.len());
        for r in records {
            let obs = r.into_observation(version, chunk_id, round);
            let i = self.archive.push(obs);
            pushed.push(self.archive.get(i).expect("just pushed").clone());
        }
        if let Some(d) = &self.dir {
            d.append_observations(&pushed)?;
        }
        self.manifest.ledger.used += pushed.len() as u64;
        self.manifest.ledger.evaluated += pushed.len() as u64;
        Ok(pushed)
    }

    fn execute(&mut self, hooks: &mut dyn RunHooks) -> Result<()> {
        if !self.manifest.prefilter_done {
            self.prefilter(hooks)?;
        }
        let pool = match self.manifest.knobs.search.parallelism {
            0 | 1 => None,
            n => Some(Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Argument(format!("thread pool: {e}")))?,
            )),
        };
        let mut index = 0;
        while index < self.manifest.schedule.len() {
            let layers = self.manifest.schedule[index];
            let done = self
                .manifest
                .ledger
                .per_round
                .get(index)
                .is_some_and(|r| r.complete);
            if !done {
                if self.manifest.ledger.used >= self.manifest.ledger.total {
                    break;
                }
                self.round(index, layers, pool.clone(), hooks)?;
            }
            index += 1;
        }
        if self.manifest.ledger.evaluated > self.manifest.ledger.total {
            return Err(Error::Contract(format!(
                "spent {} evaluations against a budget of {}",
                self.manifest.ledger.evaluated, self.manifest.ledger.total
            )));
        }
        self.select()?;
        if let Some(d) = &self.dir {
            write_frontier_csv(&d.path(FRONTIER_FILE), &self.archive, &self.manifest.spec)?;
        }
        self.persist_manifest()
    }

    fn prefilter(&mut self, hooks: &mut dyn RunHooks) -> Result<()> {
        let remaining = self.manifest.ledger.total - self.manifest.ledger.used;
        let (fixed, records) = {
            let mut ctx = ProbeContext {
                catalog: &self.manifest.catalog,
                spec: &self.manifest.spec,
                evaluator: self.evaluator,
                cache: &self.cache,
                limit: remaining,
                base: self.archive.next_index(),
                records: Vec::new(),
            };
            let fixed = hooks.prefilter(&mut ctx)?;
            (fixed, ctx.records)
        };
        self.manifest.catalog.validate_assignment(&fixed, true)?;
        if !records.is_empty() {
            let chunk = self.manifest.next_chunk_id;
            self.manifest.next_chunk_id += 1;
            self.append(records, chunk, 0)?;
        }
        self.manifest.fixed = fixed;
        self.manifest.prefilter_done = true;
        self.persist_manifest()
    }

    fn round(&mut self, index: usize, layers: u8, pool: Option<Arc<rayon::ThreadPool>>, hooks: &mut dyn RunHooks) -> Result<()> {
        let take_all = self.manifest.knobs.forced_layers.is_some();
        let plan = plan_round(
            &self.manifest.catalog,
            &self.manifest.fixed,
            layers,
            self.manifest.ledger.total,
            self.manifest.ledger.used,
            &self.manifest.knobs,
            take_all,
        )?;
        if self.manifest.spec.uses_all_objectives() {
            let feasible: Vec<&MetricVector> = self
                .archive
                .observations()
                .iter()
                .filter(|o| o.feasible)
                .map(|o| &o.metrics)
                .collect();
            if let Some(c) = median(feasible.iter().map(|m| m.cost)) {
                self.manifest.spec.cost_scale = c;
            }
            if let Some(l) = median(feasible.iter().map(|m| m.latency)) {
                self.manifest.spec.latency_scale = l;
            }
        }
        let record = RoundRecord {
            layers,
            expected: plan.expected,
            granted: plan.granted,
            budgets: plan.budgets.clone(),
            evals_consumed: 0,
            proposals: [0; 3],
            cost_scale: self.manifest.spec.cost_scale,
            latency_scale: self.manifest.spec.latency_scale,
            complete: false,
        };
        if index < self.manifest.ledger.per_round.len() {
            self.manifest.ledger.per_round[index] = record;
        } else {
            self.manifest.ledger.per_round.push(record);
        }
        self.persist_manifest()?;

        let charged_before = self.manifest.ledger.used;
        if plan.granted > 0 {
            let spec = self.manifest.spec.clone();
            let knobs = self.manifest.knobs.search.clone();
            let prior: Vec<EvalRecord> = self.archive.observations().iter().map(EvalRecord::from_observation).collect();
            let cache = std::mem::take(&mut self.cache);
            let mut search = LayerSearch::new(
                self.manifest.catalog.clone(),
                self.evaluator,
                &spec,
                &knobs,
                plan.layer_plan.layers.clone(),
                plan.budgets.clone(),
                layers,
                self.manifest.seed ^ ((index as u64) << 32),
                &cache,
            )?
            .with_fixed(self.manifest.fixed.clone())
            .with_prior(prior);
            if let Some(pool) = pool {
                search = search.with_pool(pool);
            }
            let mut flush = |chunk: ChunkFlush| -> Result<BoundaryAction> { self.boundary(index, layers, chunk, &spec, hooks) };
            let outcome = search.run(&mut flush);
            drop(search);
            self.cache = cache;
            let stats = outcome?;
            self.manifest.ledger.per_round[index].proposals = stats.proposals;
        }
        let ledger = &mut self.manifest.ledger;
        ledger.used = ledger.used.max(charged_before + plan.granted);
        ledger.per_round[index].complete = true;
        self.persist_manifest()
    }

    fn boundary(&mut self, index: usize, layers: u8, chunk: ChunkFlush, spec: &EvaluatorSpec, hooks: &mut dyn RunHooks) -> Result<BoundaryAction> {
        let chunk_id = self.manifest.next_chunk_id;
        self.manifest.next_chunk_id += 1;
        let n = chunk.records.len() as u64;
        self.append(chunk.records, chunk_id, layers)?;
        self.manifest.ledger.per_round[index].evals_consumed += n;
        if let Some(d) = &self.dir {
            if self.manifest.knobs.search.trace && !chunk.audits.is_empty() {
                let lines = chunk.audits.iter().map(serde_json::to_string).collect::<std::result::Result<Vec<_>, _>>()?;
                d.append_lines(SEARCH_TRACE_FILE, lines)?;
            }
            if self.manifest.knobs.search.surrogate_trace && !chunk.densities.is_empty() {
                let lines = chunk.densities.iter().map(serde_json::to_string).collect::<std::result::Result<Vec<_>, _>>()?;
                d.append_lines(SURROGATE_TRACE_FILE, lines)?;
            }
        }
        self.audits.extend(chunk.audits);
        let grown = hooks.at_boundary(&self.manifest.catalog, &self.archive, spec)?;
        if let Some(c) = &grown {
            if c.version() <= self.manifest.catalog.version() {
                return Err(Error::Contract("a replacement catalog must carry a newer version".into()));
            }
            self.manifest.catalog = c.clone();
        }
        self.persist_manifest()?;
        Ok(BoundaryAction { catalog: grown })
    }

    fn select(&mut self) -> Result<()> {
        self.manifest.selected = if self.archive.is_empty() {
            Vec::new()
        } else {
            select_best(&self.archive, &self.manifest.spec, self.manifest.knobs.select_k)?
                .iter()
                .map(|o| o.eval_index)
                .collect()
        };
        Ok(())
    }

    fn finish(self, notice: Option<String>) -> RunOutput {
        let selected = self
            .manifest
            .selected
            .iter()
            .filter_map(|&i| self.archive.get(i).cloned())
            .collect();
        RunOutput {
            manifest: self.manifest,
            archive: self.archive,
            selected,
            audits: self.audits,
            notice,
        }
    }
}

fn median(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.filter(|x| *x > 0.0).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}
