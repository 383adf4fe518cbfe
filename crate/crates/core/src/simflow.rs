//! Seeded synthetic workflows standing in for real model-backed pipelines.
//!
//! A generated surface pairs a small step graph with a catalog of cogs and a
//! hidden additive-in-logit quality function with sparse pairwise
//! interactions. Architecture cogs rewrite the graph (decompose, ensemble),
//! which drives cost and latency; step and weight cogs add per-option
//! deltas. Everything is a pure function of the seed.

use std::collections::{BTreeMap, HashMap};

use petgraph::algo::{condensation, toposort};
use petgraph::graph::DiGraph;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cogspace::{Assignment, Cog, CogCatalog, CogCategory, Configuration, OptionRef, Provenance};
use crate::driver::{ProbeContext, RunHooks};
use crate::error::{Error, Result};
use crate::evaluation::{derive_seed, stream_rng, Evaluator};
use crate::objectives::{pareto_frontier, scalar_score, EvaluatorSpec, MetricVector, Observation, ResultArchive};

/// Spaces up to this size get an exhaustive optimum scan and may be
/// brute-forced.
pub const ORACLE_LIMIT: u128 = 1 << 20;
/// Generation refuses spaces above this size.
pub const GENERATION_LIMIT: u128 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    ModelCall,
    ToolCall,
    Code,
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "role", content = "index")]
pub enum NodeRole {
    Whole,
    Sub(u32),
    Sampler(u32),
    Aggregator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepNode {
    pub id: String,
    pub kind: NodeKind,
    pub base_cost: f64,
    pub base_latency: f64,
    pub iteration_bound: u32,
    /// Node of the unrewritten graph this one stands in for.
    pub origin: String,
    pub role: NodeRole,
}

impl StepNode {
    pub fn new(id: impl Into<String>, kind: NodeKind, base_cost: f64, base_latency: f64) -> Self {
        let id = id.into();
        Self {
            origin: id.clone(),
            id,
            kind,
            base_cost,
            base_latency,
            iteration_bound: 1,
            role: NodeRole::Whole,
        }
    }

    /// Share of the origin's per-option deltas this instance carries.
    fn delta_share(&self) -> (f64, f64) {
        match self.role {
            NodeRole::Whole | NodeRole::Sampler(_) => (1.0, 1.0),
            NodeRole::Sub(_) => (DECOMPOSE_COST, DECOMPOSE_LATENCY),
            NodeRole::Aggregator => (0.0, 0.0),
        }
    }
}

const DECOMPOSE_COST: f64 = 0.4;
const DECOMPOSE_LATENCY: f64 = 0.5;
const AGGREGATOR_COST: f64 = 0.2;
const AGGREGATOR_LATENCY: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowGraph {
    pub nodes: Vec<StepNode>,
    pub edges: Vec<(String, String)>,
    pub entry: String,
    pub exit: String,
}

impl WorkflowGraph {
    pub fn node(&self, id: &str) -> Option<&StepNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn out_degree(&self, id: &str) -> usize {
        self.edges.iter().filter(|(a, _)| a == id).count()
    }

    pub fn validate(&self) -> Result<()> {
        let ids: HashMap<&str, &StepNode> = self.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
        if ids.len() != self.nodes.len() {
            return Err(Error::Schema("duplicate node id".into()));
        }
        for n in &self.nodes {
            if n.iteration_bound == 0 || !n.base_cost.is_finite() || !n.base_latency.is_finite() || n.base_cost < 0.0 || n.base_latency < 0.0 {
                return Err(Error::Schema(format!("node {} has invalid base quantities", n.id)));
            }
        }
        for (a, b) in &self.edges {
            if !ids.contains_key(a.as_str()) || !ids.contains_key(b.as_str()) {
                return Err(Error::Schema(format!("edge {a} -> {b} names a missing node")));
            }
        }
        if !self.reachable(&self.entry).contains(&self.exit) {
            return Err(Error::Schema("exit is not reachable from entry".into()));
        }
        Ok(())
    }

    fn reachable(&self, from: &str) -> Vec<String> {
        let mut seen = vec![from.to_string()];
        let mut i = 0;
        while i < seen.len() {
            let cur = seen[i].clone();
            for (a, b) in &self.edges {
                if *a == cur && !seen.contains(b) {
                    seen.push(b.clone());
                }
            }
            i += 1;
        }
        seen
    }

    /// Total cost and critical-path latency given per-node costs and
    /// latencies (indexed like `nodes`). Cycles repeat `iteration_bound`
    /// times and run sequentially.
    pub fn cost_and_latency(&self, cost: &[f64], latency: &[f64]) -> (f64, f64) {
        let total_cost = self
            .nodes
            .iter()
            .zip(cost)
            .map(|(n, c)| c * n.iteration_bound as f64)
            .sum();

        let mut g = DiGraph::<usize, ()>::new();
        let idx: Vec<_> = (0..self.nodes.len()).map(|i| g.add_node(i)).collect();
        let pos: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        for (a, b) in &self.edges {
            g.add_edge(idx[pos[a.as_str()]], idx[pos[b.as_str()]], ());
        }
        let dag = condensation(g, true);
        let weight: Vec<f64> = dag
            .node_indices()
            .map(|c| {
                dag[c]
                    .iter()
                    .map(|&i| latency[i] * self.nodes[i].iteration_bound as f64)
                    .sum()
            })
            .collect();
        let order = toposort(&dag, None).expect("condensation is acyclic");
        let mut finish = vec![0.0f64; dag.node_count()];
        let mut critical = 0.0f64;
        for c in order {
            let start = dag
                .neighbors_directed(c, petgraph::Direction::Incoming)
                .map(|p| finish[p.index()])
                .fold(0.0, f64::max);
            finish[c.index()] = start + weight[c.index()];
            critical = critical.max(finish[c.index()]);
        }
        (total_cost, critical)
    }
}

/// Structural meaning of an architecture option, by option position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum Rewrite {
    Identity,
    Decompose,
    Ensemble(u32),
}

impl Rewrite {
    pub fn for_index(index: usize) -> Self {
        match index {
            0 => Rewrite::Identity,
            1 => Rewrite::Decompose,
            k => Rewrite::Ensemble(k as u32),
        }
    }

    pub fn option_id(self) -> String {
        match self {
            Rewrite::Identity => "identity".into(),
            Rewrite::Decompose => "decompose".into(),
            Rewrite::Ensemble(k) => format!("ensemble-{k}"),
        }
    }

    pub fn from_payload(payload: &serde_json::Value) -> Option<Self> {
        serde_json::from_value(payload.get("rewrite")?.clone()).ok()
    }
}

/// Pure graph rewrite for one architecture choice on `target`.
pub fn apply_architecture_option(graph: &WorkflowGraph, target: &str, rewrite: Rewrite) -> Result<WorkflowGraph> {
    let node = graph
        .node(target)
        .ok_or_else(|| Error::Argument(format!("unknown rewrite target {target}")))?
        .clone();
    let mut out = graph.clone();
    let replacements: Vec<StepNode> = match rewrite {
        Rewrite::Identity => return Ok(out),
        Rewrite::Decompose => (1..=2)
            .map(|i| StepNode {
                id: format!("{}.sub{i}", node.id),
                base_cost: node.base_cost * DECOMPOSE_COST,
                base_latency: node.base_latency * DECOMPOSE_LATENCY,
                role: NodeRole::Sub(i),
                ..node.clone()
            })
            .collect(),
        Rewrite::Ensemble(k) => {
            let mut v: Vec<StepNode> = (0..k)
                .map(|i| StepNode {
                    id: format!("{}.s{i}", node.id),
                    role: NodeRole::Sampler(i),
                    ..node.clone()
                })
                .collect();
            v.push(StepNode {
                id: format!("{}.agg", node.id),
                kind: NodeKind::Code,
                base_cost: node.base_cost * AGGREGATOR_COST,
                base_latency: node.base_latency * AGGREGATOR_LATENCY,
                role: NodeRole::Aggregator,
                ..node.clone()
            });
            v
        }
    };
    let heads: Vec<String> = match rewrite {
        Rewrite::Decompose => vec![replacements[0].id.clone()],
        _ => replacements[..replacements.len() - 1]
            .iter()
            .map(|n| n.id.clone())
            .collect(),
    };
    let tail = replacements.last().expect("non-empty").id.clone();
    let mut internal: Vec<(String, String)> = match rewrite {
        Rewrite::Decompose => vec![(heads[0].clone(), tail.clone())],
        _ => heads.iter().map(|h| (h.clone(), tail.clone())).collect(),
    };

    let at = out.nodes.iter().position(|n| n.id == target).expect("found above");
    out.nodes.splice(at..=at, replacements);
    let mut edges = Vec::with_capacity(out.edges.len() + internal.len());
    for (a, b) in &graph.edges {
        match (a == target, b == target) {
            (false, false) => edges.push((a.clone(), b.clone())),
            (false, true) => edges.extend(heads.iter().map(|h| (a.clone(), h.clone()))),
            (true, false) => edges.push((tail.clone(), b.clone())),
            (true, true) => edges.extend(heads.iter().map(|h| (tail.clone(), h.clone()))),
        }
    }
    edges.append(&mut internal);
    out.edges = edges;
    if out.entry == target {
        out.entry = heads[0].clone();
    }
    if out.exit == target {
        out.exit = tail;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceParams {
    pub seed: u64,
    pub n_steps: usize,
    pub cogs_per_step: usize,
    pub options_per_cog: usize,
    pub interaction_density: f64,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default = "default_penalty")]
    pub aggregation_penalty: f64,
}

fn default_penalty() -> f64 {
    0.05
}

impl SurfaceParams {
    pub fn new(seed: u64, n_steps: usize, cogs_per_step: usize, options_per_cog: usize, interaction_density: f64) -> Self {
        Self {
            seed,
            n_steps,
            cogs_per_step,
            options_per_cog,
            interaction_density,
            noise_sd: 0.0,
            aggregation_penalty: default_penalty(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionEffect {
    pub effect: f64,
    pub cost_delta: f64,
    pub latency_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub a: String,
    pub b: String,
    /// `terms[i][j]` applies when `a` takes static option `i` and `b` static option `j`.
    pub terms: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub assignment: Assignment,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSurface {
    pub params: SurfaceParams,
    /// Static option effects per cog, in option order.
    pub effects: BTreeMap<String, Vec<OptionEffect>>,
    pub interactions: Vec<Interaction>,
    /// Strict upper bound for evolved option effects.
    pub effect_max: f64,
    pub optimum: Option<Optimum>,
}

const STEP_EFFECT_SD: f64 = 0.6;
const WEIGHT_EFFECT_SD: f64 = 0.4;
const INTERACTION_SD: f64 = 0.5;
const SAMPLER_SD: f64 = 0.3;
const EVOLVE_SD: f64 = 0.15;

fn category_for(j: usize) -> CogCategory {
    match j {
        0 => CogCategory::Step,
        2 => CogCategory::Architecture,
        _ => CogCategory::Weight,
    }
}

/// Simulated workflow: graph plus hidden surface. Implements [`Evaluator`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulator {
    pub graph: WorkflowGraph,
    pub surface: LatentSurface,
}

pub fn generate_surface(params: &SurfaceParams) -> Result<(WorkflowGraph, CogCatalog, LatentSurface)> {
    let sim = Simulator::generate(params)?;
    let catalog = sim.catalog()?;
    Ok((sim.graph, catalog, sim.surface))
}

impl Simulator {
    pub fn generate(params: &SurfaceParams) -> Result<Self> {
        if params.n_steps == 0 || params.cogs_per_step == 0 || params.options_per_cog == 0 {
            return Err(Error::Argument("surface counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&params.interaction_density) {
            return Err(Error::Argument(format!(
                "interaction density {} outside [0, 1]",
                params.interaction_density
            )));
        }
        if !(params.noise_sd >= 0.0 && params.noise_sd.is_finite()) {
            return Err(Error::Argument("noise_sd must be finite and >= 0".into()));
        }
        let total_cogs = params.n_steps * params.cogs_per_step;
        let size = (params.options_per_cog as u128)
            .checked_pow(total_cogs as u32)
            .unwrap_or(u128::MAX);
        if size > GENERATION_LIMIT {
            return Err(Error::SpaceTooLarge {
                size,
                limit: GENERATION_LIMIT,
            });
        }

        let graph = generate_graph(params);
        let mut rng = stream_rng(params.seed, &[0x5eed, 1]);
        let step_effect = Normal::new(0.0, STEP_EFFECT_SD).expect("valid sd");
        let weight_effect = Normal::new(0.0, WEIGHT_EFFECT_SD).expect("valid sd");
        let sampler = Normal::new(0.0, SAMPLER_SD).expect("valid sd");
        let mut effects = BTreeMap::new();
        let mut cog_order = Vec::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            for j in 0..params.cogs_per_step {
                let id = format!("n{i}.c{j}");
                let options = match category_for(j) {
                    CogCategory::Step => (0..params.options_per_cog)
                        .map(|_| {
                            let e = step_effect.sample(&mut rng);
                            let tilt = e / STEP_EFFECT_SD;
                            OptionEffect {
                                effect: e,
                                cost_delta: node.base_cost * (0.5 * tilt + rng.random_range(-0.2..0.2)).max(-0.9),
                                latency_delta: node.base_latency * (0.25 * tilt + rng.random_range(-0.2..0.2)).max(-0.9),
                            }
                        })
                        .collect(),
                    CogCategory::Weight => (0..params.options_per_cog)
                        .map(|_| OptionEffect {
                            effect: weight_effect.sample(&mut rng),
                            cost_delta: node.base_cost * rng.random_range(-0.2..0.3),
                            latency_delta: node.base_latency * rng.random_range(-0.1..0.2),
                        })
                        .collect(),
                    CogCategory::Architecture => {
                        let k_max = params.options_per_cog.max(2);
                        let pool: Vec<f64> = (0..k_max).map(|_| sampler.sample(&mut rng)).collect();
                        let halves = (sampler.sample(&mut rng), sampler.sample(&mut rng));
                        (0..params.options_per_cog)
                            .map(|o| {
                                let effect = match Rewrite::for_index(o) {
                                    Rewrite::Identity => 0.0,
                                    Rewrite::Decompose => halves.0 + halves.1,
                                    Rewrite::Ensemble(k) => {
                                        pool[..k as usize].iter().copied().fold(f64::NEG_INFINITY, f64::max)
                                            - params.aggregation_penalty
                                    }
                                };
                                OptionEffect {
                                    effect,
                                    cost_delta: 0.0,
                                    latency_delta: 0.0,
                                }
                            })
                            .collect()
                    }
                };
                effects.insert(id.clone(), options);
                cog_order.push(id);
            }
        }

        let mut pairs: Vec<(usize, usize)> = (0..total_cogs)
            .flat_map(|a| ((a + 1)..total_cogs).map(move |b| (a, b)))
            .collect();
        let n_pairs = (params.interaction_density * pairs.len() as f64).floor() as usize;
        pairs.shuffle(&mut rng);
        let mut chosen = pairs[..n_pairs].to_vec();
        chosen.sort_unstable();
        let inter = Normal::new(0.0, INTERACTION_SD).expect("valid sd");
        let interactions = chosen
            .into_iter()
            .map(|(a, b)| Interaction {
                a: cog_order[a].clone(),
                b: cog_order[b].clone(),
                terms: (0..params.options_per_cog)
                    .map(|_| (0..params.options_per_cog).map(|_| inter.sample(&mut rng)).collect())
                    .collect(),
            })
            .collect();

        let effect_max = effects
            .values()
            .flatten()
            .map(|o: &OptionEffect| o.effect)
            .fold(0.0, f64::max)
            + 1.0;
        let mut sim = Self {
            graph,
            surface: LatentSurface {
                params: *params,
                effects,
                interactions,
                effect_max,
                optimum: None,
            },
        };
        if size <= ORACLE_LIMIT {
            sim.surface.optimum = Some(sim.scan_optimum());
        }
        Ok(sim)
    }

    pub fn params(&self) -> &SurfaceParams {
        &self.surface.params
    }

    /// The catalog matching this surface's static options.
    pub fn catalog(&self) -> Result<CogCatalog> {
        let mut cogs = Vec::new();
        for (i, node) in self.graph.nodes.iter().enumerate() {
            for j in 0..self.surface.params.cogs_per_step {
                let category = category_for(j);
                let options = (0..self.surface.params.options_per_cog)
                    .map(|o| match category {
                        CogCategory::Architecture => {
                            let r = Rewrite::for_index(o);
                            OptionRef::new(r.option_id(), serde_json::json!({ "rewrite": r }))
                        }
                        CogCategory::Step => OptionRef::new(format!("model-{o}"), serde_json::Value::Null),
                        CogCategory::Weight => OptionRef::new(format!("style-{o}"), serde_json::Value::Null),
                    })
                    .collect();
                cogs.push(Cog {
                    id: format!("n{i}.c{j}"),
                    category,
                    target: node.id.clone(),
                    options,
                    dynamic: category == CogCategory::Weight,
                });
            }
        }
        CogCatalog::new(cogs)
    }

    fn option_effect(&self, cog: &Cog, option_id: &str) -> Result<(usize, OptionEffect)> {
        let index = cog
            .option_index(option_id)
            .ok_or_else(|| Error::Contract(format!("cog {} has no option {option_id}", cog.id)))?;
        let option = &cog.options[index];
        if option.provenance == Provenance::Evolved {
            let value: OptionEffect = serde_json::from_value(option.payload.clone())
                .map_err(|e| Error::Schema(format!("evolved option {option_id}: {e}")))?;
            return Ok((index, value));
        }
        let table = self
            .surface
            .effects
            .get(&cog.id)
            .ok_or_else(|| Error::Contract(format!("cog {} is not part of this surface", cog.id)))?;
        let value = *table
            .get(index)
            .ok_or_else(|| Error::Contract(format!("cog {} option {option_id} unknown to surface", cog.id)))?;
        Ok((index, value))
    }

    /// Logit of quality, without noise.
    pub fn logit(&self, catalog: &CogCatalog, config: &Configuration) -> Result<f64> {
        let mut chosen: HashMap<&str, usize> = HashMap::new();
        let mut total = 0.0;
        for cog in catalog.cogs() {
            let option = config
                .get(&cog.id)
                .ok_or_else(|| Error::Contract(format!("configuration is missing cog {}", cog.id)))?;
            let (index, e) = self.option_effect(cog, option)?;
            chosen.insert(cog.id.as_str(), index);
            total += e.effect;
        }
        for it in &self.surface.interactions {
            let (Some(&i), Some(&j)) = (chosen.get(it.a.as_str()), chosen.get(it.b.as_str())) else {
                continue;
            };
            if let Some(t) = it.terms.get(i).and_then(|row| row.get(j)) {
                total += t;
            }
        }
        Ok(total)
    }

    pub fn sim_evaluate(&self, catalog: &CogCatalog, config: &Configuration) -> Result<MetricVector> {
        let mut logit = self.logit(catalog, config)?;
        let noise_sd = self.surface.params.noise_sd;
        if noise_sd > 0.0 {
            let mut rng = stream_rng(self.surface.params.seed, &[0x0015e, derive_seed(0, &key_words(&config.key()))]);
            logit += Normal::new(0.0, noise_sd).expect("checked").sample(&mut rng);
        }
        let quality = 1.0 / (1.0 + (-logit).exp());

        let mut graph = self.graph.clone();
        let mut deltas: HashMap<String, (f64, f64)> = HashMap::new();
        for cog in catalog.cogs() {
            let option_id = config.get(&cog.id).expect("checked in logit");
            if cog.category == CogCategory::Architecture {
                let option = cog.option(option_id).expect("checked in logit");
                let rewrite = Rewrite::from_payload(&option.payload)
                    .unwrap_or_else(|| Rewrite::for_index(cog.option_index(option_id).expect("checked")));
                if !cog.is_global() {
                    graph = apply_architecture_option(&graph, &cog.target, rewrite)?;
                }
            } else if !cog.is_global() {
                let (_, e) = self.option_effect(cog, option_id)?;
                let d = deltas.entry(cog.target.clone()).or_default();
                d.0 += e.cost_delta;
                d.1 += e.latency_delta;
            }
        }
        let (cost, latency): (Vec<f64>, Vec<f64>) = graph
            .nodes
            .iter()
            .map(|n| {
                let (dc, dl) = deltas.get(&n.origin).copied().unwrap_or_default();
                let (sc, sl) = n.delta_share();
                ((n.base_cost + sc * dc).max(0.0), (n.base_latency + sl * dl).max(0.0))
            })
            .unzip();
        let (cost, latency) = graph.cost_and_latency(&cost, &latency);
        MetricVector::new(quality, cost, latency)
    }

    fn scan_optimum(&self) -> Optimum {
        let catalog = self.catalog().expect("generated catalog is valid");
        let mut best: Option<(f64, Assignment)> = None;
        for a in catalog.enumerate() {
            let config = catalog.configuration(a);
            let l = self.logit(&catalog, &config).expect("complete configuration");
            if best.as_ref().is_none_or(|(b, _)| l > *b) {
                best = Some((l, config.assignments));
            }
        }
        let (l, assignment) = best.expect("space is non-empty");
        Optimum {
            assignment,
            quality: 1.0 / (1.0 + (-l).exp()),
        }
    }

    /// Per-cog option with the lowest cost delta; identity for
    /// architecture cogs.
    pub fn cheapest_options(&self, catalog: &CogCatalog) -> Assignment {
        catalog
            .cogs()
            .iter()
            .map(|cog| {
                let pick = match (cog.category, self.surface.effects.get(&cog.id)) {
                    (CogCategory::Architecture, _) | (_, None) => 0,
                    (_, Some(table)) => table
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.cost_delta.total_cmp(&b.1.cost_delta))
                        .map(|(i, _)| i)
                        .unwrap_or(0),
                };
                (cog.id.clone(), cog.options[pick].id.clone())
            })
            .collect()
    }

    /// Seeded stand-in for an external complexity judge: integer ratings
    /// in 1..=5.
    pub fn default_ratings(&self) -> BTreeMap<String, f64> {
        let mut rng = stream_rng(self.surface.params.seed, &[0x7a7e]);
        self.graph
            .nodes
            .iter()
            .map(|n| (n.id.clone(), rng.random_range(1..=5) as f64))
            .collect()
    }
}

fn key_words(key: &str) -> Vec<u64> {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(key.as_bytes());
    digest
        .chunks(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

impl Evaluator for Simulator {
    fn evaluate(&self, catalog: &CogCatalog, config: &Configuration) -> Result<MetricVector> {
        self.sim_evaluate(catalog, config)
    }
}

fn generate_graph(params: &SurfaceParams) -> WorkflowGraph {
    let mut rng = stream_rng(params.seed, &[0x5eed, 0]);
    let n = params.n_steps;
    let kinds = [NodeKind::ModelCall, NodeKind::ToolCall, NodeKind::Code, NodeKind::Retrieval];
    let mut nodes: Vec<StepNode> = (0..n)
        .map(|i| {
            let kind = if i == 0 { NodeKind::ModelCall } else { kinds[rng.random_range(0..kinds.len())] };
            StepNode::new(format!("step-{i}"), kind, rng.random_range(0.5..2.0), rng.random_range(0.5..2.0))
        })
        .collect();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 1..n {
        let lo = i.saturating_sub(3);
        edges.push((rng.random_range(lo..i), i));
    }
    for i in 0..n.saturating_sub(1) {
        if !edges.iter().any(|&(a, _)| a == i) {
            let hi = (i + 3).min(n - 1);
            edges.push((i, rng.random_range(i + 1..=hi)));
        }
    }
    if n >= 3 && rng.random_bool(0.3) {
        let (a, b) = edges[rng.random_range(0..edges.len())];
        edges.push((b, a));
        nodes[a].iteration_bound = 2;
        nodes[b].iteration_bound = 2;
    }
    edges.sort_unstable();
    edges.dedup();
    WorkflowGraph {
        edges: edges
            .into_iter()
            .map(|(a, b)| (nodes[a].id.clone(), nodes[b].id.clone()))
            .collect(),
        entry: nodes[0].id.clone(),
        exit: nodes[n - 1].id.clone(),
        nodes,
    }
}

/// Evaluates every configuration once. Refuses spaces above [`ORACLE_LIMIT`].
pub fn brute_force_oracle(
    evaluator: &dyn Evaluator,
    catalog: &CogCatalog,
    spec: &EvaluatorSpec,
) -> Result<(ResultArchive, Vec<Observation>)> {
    let size = catalog.total_size()?;
    if size > ORACLE_LIMIT {
        return Err(Error::SpaceTooLarge {
            size,
            limit: ORACLE_LIMIT,
        });
    }
    let mut archive = ResultArchive::new();
    for (i, a) in catalog.enumerate().enumerate() {
        let config = catalog.configuration(a);
        let metrics = evaluator.evaluate(catalog, &config)?;
        archive.push(Observation {
            key: config.key(),
            feasible: spec.is_feasible(&metrics),
            config,
            metrics,
            eval_index: i as u64,
            chunk_id: 0,
            layer_round: 0,
        });
    }
    let frontier = pareto_frontier(&archive, spec).into_iter().cloned().collect();
    Ok((archive, frontier))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub scores: BTreeMap<String, f64>,
    pub threshold: f64,
    pub selected: Vec<String>,
}

/// `rating x out-degree` per node; nodes strictly above `threshold`
/// (default: the median score) are selected, in graph order.
pub fn complexity_scores(
    graph: &WorkflowGraph,
    ratings: &BTreeMap<String, f64>,
    threshold: Option<f64>,
) -> Result<ComplexityReport> {
    let mut scores = BTreeMap::new();
    for n in &graph.nodes {
        let r = ratings
            .get(&n.id)
            .ok_or_else(|| Error::Argument(format!("no rating for node {}", n.id)))?;
        scores.insert(n.id.clone(), r * graph.out_degree(&n.id) as f64);
    }
    let threshold = threshold.unwrap_or_else(|| median(scores.values().copied().collect()));
    let selected = graph
        .nodes
        .iter()
        .filter(|n| scores[&n.id] > threshold)
        .map(|n| n.id.clone())
        .collect();
    Ok(ComplexityReport {
        scores,
        threshold,
        selected,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// Steps in catalog order with their importance.
    pub importance: Vec<(String, f64)>,
    pub selected: Vec<String>,
    /// Probe configurations in the order they were evaluated.
    pub probes: Vec<Assignment>,
}

/// Probes each step's step-category cogs one option at a time with every
/// other cog at `cheapest`. A step's importance is the largest best-minus-
/// worst spread of `score` over its cogs; the top `ceil(top_percent% of
/// steps)` are selected.
pub fn step_importance(
    catalog: &CogCatalog,
    cheapest: &Assignment,
    top_percent: f64,
    mut score: impl FnMut(&Assignment) -> Result<f64>,
) -> Result<ImportanceReport> {
    if !(0.0..=100.0).contains(&top_percent) {
        return Err(Error::Argument(format!("top percent {top_percent} outside [0, 100]")));
    }
    catalog.validate_assignment(cheapest, false)?;
    let mut steps: Vec<(String, f64)> = Vec::new();
    let mut probes = Vec::new();
    for cog in catalog.cogs().iter().filter(|c| c.category == CogCategory::Step) {
        let mut best = f64::NEG_INFINITY;
        let mut worst = f64::INFINITY;
        for option in &cog.options {
            let mut a = cheapest.clone();
            a.insert(cog.id.clone(), option.id.clone());
            let s = score(&a)?;
            probes.push(a);
            best = best.max(s);
            worst = worst.min(s);
        }
        let spread = (best - worst).max(0.0);
        match steps.iter_mut().find(|(t, _)| *t == cog.target) {
            Some(entry) => entry.1 = entry.1.max(spread),
            None => steps.push((cog.target.clone(), spread)),
        }
    }
    let take = ((top_percent / 100.0) * steps.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..steps.len()).collect();
    order.sort_by(|&a, &b| steps[b].1.total_cmp(&steps[a].1).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(take).collect();
    chosen.sort_unstable();
    Ok(ImportanceReport {
        selected: chosen.into_iter().map(|i| steps[i].0.clone()).collect(),
        importance: steps,
        probes,
    })
}

/// Appends up to `k` options to dynamic cog `cog_id`, one per top-scoring
/// archive observation not already used as a source. Each new option
/// perturbs the realized effect of the source's choice for that cog.
pub fn evolve_dynamic_options(
    sim: &Simulator,
    catalog: &mut CogCatalog,
    archive: &ResultArchive,
    spec: &EvaluatorSpec,
    cog_id: &str,
    k: usize,
) -> Result<Vec<OptionRef>> {
    let cog = catalog
        .cog(cog_id)
        .ok_or_else(|| Error::Argument(format!("unknown cog {cog_id}")))?
        .clone();
    if !cog.dynamic {
        return Err(Error::Contract(format!("cog {cog_id} is not dynamic")));
    }
    let mut ranked: Vec<&Observation> = archive.observations().iter().filter(|o| o.feasible).collect();
    ranked.sort_by(|a, b| {
        scalar_score(&b.metrics, spec)
            .total_cmp(&scalar_score(&a.metrics, spec))
            .then(a.eval_index.cmp(&b.eval_index))
    });
    let mut new_options = Vec::new();
    for obs in ranked.into_iter().take(k) {
        let id = format!("evo-{}", obs.eval_index);
        if cog.option_index(&id).is_some() {
            continue;
        }
        let Some(source) = obs.config.get(cog_id) else {
            continue;
        };
        let Ok((_, base)) = sim.option_effect(&cog, source) else {
            continue;
        };
        let mut rng = stream_rng(sim.surface.params.seed, &[0xe70, derive_seed(0, &key_words(cog_id)), obs.eval_index]);
        let jitter = Normal::new(0.0, EVOLVE_SD).expect("valid sd");
        let bound = sim.surface.effect_max - 1e-6;
        let value = OptionEffect {
            effect: (base.effect + jitter.sample(&mut rng)).min(bound),
            cost_delta: base.cost_delta,
            latency_delta: base.latency_delta,
        };
        new_options.push(OptionRef::evolved(id, serde_json::to_value(value)?));
    }
    catalog.extend_options(cog_id, new_options.clone())?;
    Ok(new_options)
}

/// Simulator-backed run hooks: optional step-importance and complexity
/// pre-filters, and option evolution for dynamic cogs.
pub struct SimHooks<'s> {
    pub sim: &'s Simulator,
    /// Percentage of steps kept by importance; `None` disables the probe.
    pub importance_top_percent: Option<f64>,
    pub complexity_filter: bool,
    /// Options derived per dynamic cog at each boundary; `None` disables.
    pub evolve_k: Option<usize>,
    pub importance: Option<ImportanceReport>,
    pub complexity: Option<ComplexityReport>,
}

impl<'s> SimHooks<'s> {
    pub fn new(sim: &'s Simulator) -> Self {
        Self {
            sim,
            importance_top_percent: None,
            complexity_filter: false,
            evolve_k: None,
            importance: None,
            complexity: None,
        }
    }
}

impl RunHooks for SimHooks<'_> {
    fn prefilter(&mut self, ctx: &mut ProbeContext<'_>) -> Result<Assignment> {
        let catalog = ctx.catalog().clone();
        let spec = ctx.spec().clone();
        let cheapest = self.sim.cheapest_options(&catalog);
        let mut fixed = Assignment::new();
        if let Some(k) = self.importance_top_percent {
            let needed: usize = catalog
                .cogs()
                .iter()
                .filter(|c| c.category == CogCategory::Step)
                .map(|c| c.options.len())
                .sum();
            if (needed as u64) < ctx.remaining() {
                let report = step_importance(&catalog, &cheapest, k, |a| Ok(spec.raw_score(&ctx.probe(a)?.metrics)))?;
                for cog in catalog.cogs().iter().filter(|c| c.category == CogCategory::Step) {
                    if !report.selected.contains(&cog.target) {
                        fixed.insert(cog.id.clone(), cheapest[&cog.id].clone());
                    }
                }
                self.importance = Some(report);
            }
        }
        if self.complexity_filter {
            let report = complexity_scores(&self.sim.graph, &self.sim.default_ratings(), None)?;
            for cog in catalog.cogs().iter().filter(|c| c.category == CogCategory::Architecture) {
                if !report.selected.contains(&cog.target) {
                    fixed.insert(cog.id.clone(), cog.options[0].id.clone());
                }
            }
            self.complexity = Some(report);
        }
        Ok(fixed)
    }

    fn at_boundary(&mut self, catalog: &CogCatalog, archive: &ResultArchive, spec: &EvaluatorSpec) -> Result<Option<CogCatalog>> {
        let Some(k) = self.evolve_k else {
            return Ok(None);
        };
        let mut grown = catalog.clone();
        let mut added = 0;
        for cog in catalog.cogs().iter().filter(|c| c.dynamic) {
            added += evolve_dynamic_options(self.sim, &mut grown, archive, spec, &cog.id, k)?.len();
        }
        Ok((added > 0).then_some(grown))
    }
}
