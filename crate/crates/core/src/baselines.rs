//! Reference searches sharing the archive format: uniform random, full
//! grid, and single-layer TPE.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cogspace::{Assignment, CogCatalog};
use crate::error::{Error, Result};
use crate::evaluation::{stream_rng, EvalCache, EvalRecord, Evaluator};
use crate::objectives::{EvaluatorSpec, ResultArchive};
use crate::report::write_frontier_csv;
use crate::search::{BoundaryAction, ChunkFlush, LayerSearch, SearchKnobs};
use crate::simflow::ORACLE_LIMIT;
use crate::store::{RunDir, ARCHIVE_FILE, FRONTIER_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    Grid,
    FlatTpe,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Random => "random",
            BaselineKind::Grid => "grid",
            BaselineKind::FlatTpe => "flat_tpe",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BaselineKind::Random),
            "grid" => Ok(BaselineKind::Grid),
            "flat_tpe" | "flat-tpe" => Ok(BaselineKind::FlatTpe),
            other => Err(Error::Argument(format!("unknown baseline {other:?}"))),
        }
    }
}

fn archive_from(records: impl IntoIterator<Item = (EvalRecord, u64)>, version: u64) -> ResultArchive {
    let mut archive = ResultArchive::new();
    for (r, chunk) in records {
        archive.push(r.into_observation(version, chunk, 0));
    }
    archive
}

/// `budget` i.i.d. uniform configurations.
pub fn random_search(catalog: &CogCatalog, evaluator: &dyn Evaluator, spec: &EvaluatorSpec, budget: u64, seed: u64, chunk_size: u64) -> ResultArchive {
    let cache = EvalCache::new();
    let mut rng = stream_rng(seed, &[0xba5e, 0]);
    let records = (0..budget).map(|i| {
        let a: Assignment = catalog
            .cogs()
            .iter()
            .map(|c| (c.id.clone(), c.options[rng.random_range(0..c.options.len())].id.clone()))
            .collect();
        (cache.evaluate(evaluator, catalog, spec, a, i), i / chunk_size.max(1))
    });
    let records: Vec<_> = records.collect();
    archive_from(records, catalog.version())
}

/// Every configuration once, in enumeration order.
pub fn grid_search(catalog: &CogCatalog, evaluator: &dyn Evaluator, spec: &EvaluatorSpec) -> Result<ResultArchive> {
    let size = catalog.total_size()?;
    if size > ORACLE_LIMIT {
        return Err(Error::SpaceTooLarge {
            size,
            limit: ORACLE_LIMIT,
        });
    }
    let cache = EvalCache::new();
    let records: Vec<_> = catalog
        .enumerate()
        .enumerate()
        .map(|(i, a)| (cache.evaluate(evaluator, catalog, spec, a, i as u64), 0))
        .collect();
    Ok(archive_from(records, catalog.version()))
}

/// One TPE loop over all cogs, `budget` samples, no early stop.
pub fn flat_tpe(
    catalog: &CogCatalog,
    evaluator: &dyn Evaluator,
    spec: &EvaluatorSpec,
    budget: u64,
    seed: u64,
    knobs: &SearchKnobs,
) -> Result<ResultArchive> {
    let knobs = SearchKnobs {
        early_stop: None,
        ..knobs.clone()
    };
    let cache = EvalCache::new();
    let search = LayerSearch::new(
        catalog.clone(),
        evaluator,
        spec,
        &knobs,
        vec![catalog.cog_ids()],
        vec![budget],
        0,
        seed,
        &cache,
    )?;
    let mut records = Vec::new();
    let mut chunk = 0u64;
    search.run(&mut |f: ChunkFlush| {
        records.extend(f.records.into_iter().map(|r| (r, chunk)));
        chunk += 1;
        Ok(BoundaryAction::default())
    })?;
    Ok(archive_from(records, catalog.version()))
}

pub fn run_baseline(
    kind: BaselineKind,
    catalog: &CogCatalog,
    evaluator: &dyn Evaluator,
    spec: &EvaluatorSpec,
    budget: u64,
    seed: u64,
    knobs: &SearchKnobs,
) -> Result<ResultArchive> {
    if budget == 0 && kind != BaselineKind::Grid {
        return Err(Error::Argument("budget must be at least 1".into()));
    }
    match kind {
        BaselineKind::Random => Ok(random_search(catalog, evaluator, spec, budget, seed, knobs.chunk_size)),
        BaselineKind::Grid => grid_search(catalog, evaluator, spec),
        BaselineKind::FlatTpe => flat_tpe(catalog, evaluator, spec, budget, seed, knobs),
    }
}

/// Writes a baseline archive and frontier into `dir`, plus `meta` as
/// `baseline.json`.
pub fn persist_baseline(dir: &Path, archive: &ResultArchive, spec: &EvaluatorSpec, meta: &serde_json::Value) -> Result<()> {
    let run = RunDir::open(dir)?;
    let path = run.path(ARCHIVE_FILE);
    if path.exists() {
        return Err(Error::Argument(format!("{} already exists", path.display())));
    }
    run.append_observations(archive.observations())?;
    write_frontier_csv(&run.path(FRONTIER_FILE), archive, spec)?;
    run.write_json("baseline.json", meta)
}
