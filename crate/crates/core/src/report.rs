//! Frontier export and hypervolume.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::objectives::{pareto_frontier, EvaluatorSpec, Objective, ResultArchive};
use crate::store::io_err;

/// Maps a metric into maximization orientation.
fn oriented(objective: Objective, value: f64) -> f64 {
    if objective.maximize() {
        value
    } else {
        -value
    }
}

/// Reference point: quality 0, cost and latency at 1.1 times the largest
/// value observed across `archives`. Ordered like `spec.objectives`, in
/// natural units.
pub fn reference_point(archives: &[&ResultArchive], spec: &EvaluatorSpec) -> Vec<f64> {
    spec.objectives
        .iter()
        .map(|&o| match o {
            Objective::Quality => 0.0,
            _ => {
                1.1 * archives
                    .iter()
                    .flat_map(|a| a.observations())
                    .map(|obs| o.value(&obs.metrics))
                    .fold(0.0, f64::max)
            }
        })
        .collect()
}

/// Hypervolume of the archive's feasible frontier against `reference`
/// (natural units, ordered like `spec.objectives`).
pub fn frontier_hypervolume(archive: &ResultArchive, spec: &EvaluatorSpec, reference: &[f64]) -> f64 {
    let points: Vec<Vec<f64>> = pareto_frontier(archive, spec)
        .iter()
        .map(|o| spec.objectives.iter().map(|&obj| oriented(obj, obj.value(&o.metrics))).collect())
        .collect();
    let r: Vec<f64> = spec
        .objectives
        .iter()
        .zip(reference)
        .map(|(&o, &v)| oriented(o, v))
        .collect();
    hypervolume(&points, &r)
}

/// Volume dominated by `points` and bounded below by `reference`, every
/// coordinate maximized. Handles one to three dimensions exactly.
pub fn hypervolume(points: &[Vec<f64>], reference: &[f64]) -> f64 {
    let d = reference.len();
    assert!((1..=3).contains(&d), "hypervolume supports 1 to 3 objectives");
    let pts: Vec<&Vec<f64>> = points
        .iter()
        .filter(|p| p.len() == d && p.iter().zip(reference).all(|(x, r)| x > r))
        .collect();
    match d {
        1 => pts.iter().map(|p| p[0] - reference[0]).fold(0.0, f64::max),
        2 => area(pts.iter().map(|p| (p[0], p[1])).collect(), reference[0], reference[1]),
        _ => {
            let mut levels: Vec<f64> = pts.iter().map(|p| p[2]).collect();
            levels.sort_by(|a, b| b.total_cmp(a));
            levels.dedup();
            let mut volume = 0.0;
            for (i, &z) in levels.iter().enumerate() {
                let below = levels.get(i + 1).copied().unwrap_or(reference[2]);
                let slab: Vec<(f64, f64)> = pts.iter().filter(|p| p[2] >= z).map(|p| (p[0], p[1])).collect();
                volume += area(slab, reference[0], reference[1]) * (z - below);
            }
            volume
        }
    }
}

fn area(mut pts: Vec<(f64, f64)>, rx: f64, ry: f64) -> f64 {
    pts.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut covered_y = ry;
    let mut total = 0.0;
    for (x, y) in pts {
        if y > covered_y {
            total += (x - rx) * (y - covered_y);
            covered_y = y;
        }
    }
    total
}

/// Hypervolume by inclusion-exclusion over all point subsets. Exponential;
/// meant for cross-checking small sets.
pub fn hypervolume_inclusion_exclusion(points: &[Vec<f64>], reference: &[f64]) -> f64 {
    let pts: Vec<&Vec<f64>> = points
        .iter()
        .filter(|p| p.iter().zip(reference).all(|(x, r)| x > r))
        .collect();
    assert!(pts.len() <= 20, "inclusion-exclusion is exponential");
    let mut total = 0.0;
    for mask in 1u32..(1 << pts.len()) {
        let mut corner: Vec<f64> = vec![f64::INFINITY; reference.len()];
        for (i, p) in pts.iter().enumerate() {
            if mask & (1 << i) != 0 {
                for (c, x) in corner.iter_mut().zip(p.iter()) {
                    *c = c.min(*x);
                }
            }
        }
        let vol: f64 = corner.iter().zip(reference).map(|(c, r)| c - r).product();
        if mask.count_ones() % 2 == 1 {
            total += vol;
        } else {
            total -= vol;
        }
    }
    total
}

/// Writes the archive's frontier as CSV (header row, one member per line).
pub fn write_frontier_csv(path: &Path, archive: &ResultArchive, spec: &EvaluatorSpec) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["eval_index", "quality", "cost", "latency", "layer_round", "canonical_key"])
        .map_err(|e| csv_err(path, e))?;
    for o in pareto_frontier(archive, spec) {
        w.write_record([
            o.eval_index.to_string(),
            o.metrics.quality.to_string(),
            o.metrics.cost.to_string(),
            o.metrics.latency.to_string(),
            o.layer_round.to_string(),
            o.key.clone(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Schema(format!("{}: {other:?}", path.display())),
    }
}

/// One row of a multi-archive comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub evaluations: usize,
    pub frontier_size: usize,
    pub hypervolume: f64,
    pub best_quality: f64,
    pub best_cost: f64,
    pub best_latency: f64,
}

/// Compares archives against one shared reference point.
pub fn compare(named: &[(String, &ResultArchive)], spec: &EvaluatorSpec) -> (Vec<f64>, Vec<ComparisonRow>) {
    let all: Vec<&ResultArchive> = named.iter().map(|(_, a)| *a).collect();
    let reference = reference_point(&all, spec);
    let rows = named
        .iter()
        .map(|(name, a)| {
            let feasible = a.observations().iter().filter(|o| o.feasible);
            let (mut q, mut c, mut l) = (f64::NEG_INFINITY, f64::INFINITY, f64::INFINITY);
            for o in feasible {
                q = q.max(o.metrics.quality);
                c = c.min(o.metrics.cost);
                l = l.min(o.metrics.latency);
            }
            ComparisonRow {
                name: name.clone(),
                evaluations: a.len(),
                frontier_size: pareto_frontier(a, spec).len(),
                hypervolume: frontier_hypervolume(a, spec, &reference),
                best_quality: q,
                best_cost: c,
                best_latency: l,
            }
        })
        .collect();
    (reference, rows)
}

pub fn write_comparison_csv(path: &Path, reference: &[f64], rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "archive",
        "evaluations",
        "frontier_size",
        "hypervolume",
        "best_quality",
        "best_cost",
        "best_latency",
        "reference",
    ])
    .map_err(|e| csv_err(path, e))?;
    let reference = reference.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.evaluations.to_string(),
            r.frontier_size.to_string(),
            r.hypervolume.to_string(),
            r.best_quality.to_string(),
            r.best_cost.to_string(),
            r.best_latency.to_string(),
            reference.clone(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// Fixed-width text rendering of a comparison.
pub fn comparison_table(rows: &[ComparisonRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "{:<24} {:>6} {:>8} {:>12} {:>9} {:>9} {:>9}",
        "archive", "evals", "frontier", "hypervolume", "quality", "cost", "latency"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<24} {:>6} {:>8} {:>12.6} {:>9.4} {:>9.4} {:>9.4}",
            r.name, r.evaluations, r.frontier_size, r.hypervolume, r.best_quality, r.best_cost, r.best_latency
        )?;
    }
    Ok(())
}
