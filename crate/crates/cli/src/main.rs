mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaseek::baselines::{persist_baseline, run_baseline, BaselineKind};
use adaseek::cogspace::CogCatalog;
use adaseek::driver::{adaseek_run, resume_run, RunManifest, RunOutput, RunRequest};
use adaseek::objectives::{select_best, EvaluatorSpec, Objective, Observation, ResultArchive};
use adaseek::report::{compare, comparison_table, write_comparison_csv, write_frontier_csv};
use adaseek::simflow::{SimHooks, Simulator, SurfaceParams};
use adaseek::store::{load_archive, write_atomic, ARCHIVE_FILE, MANIFEST_FILE};
use adaseek::Error;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::RunConfig;

const SUMMARY_FILE: &str = "summary.txt";

#[derive(Parser)]
#[command(name = "adaseek", version, about = "Adaptive hierarchical search over workflow configurations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the layered search, or resume a run directory.
    Optimize {
        #[command(flatten)]
        run: RunConfig,
        /// Continue the run in `--out` when it already holds one.
        #[arg(long)]
        resume: bool,
    },
    /// Run a comparison baseline: random, grid or flat_tpe.
    Baseline {
        kind: Option<String>,
        #[command(flatten)]
        run: RunConfig,
    },
    /// Compare archives: frontiers, hypervolume and best values.
    Report {
        /// Archive files or run directories.
        #[arg(required = true)]
        archives: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "quality,cost")]
        objectives: Vec<String>,
        #[arg(long = "threshold")]
        thresholds: Vec<String>,
        /// Directory for the CSV and text outputs.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate a synthetic surface with its cog space.
    GenSurface {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        cogs_per_step: usize,
        #[arg(long, default_value_t = 4)]
        options: usize,
        #[arg(long, default_value_t = 0.3)]
        density: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        penalty: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// An exit status with its message.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn setup(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Schema(_) | Error::Argument(_) | Error::Json(_) => 2,
            Error::Locked(_) => 3,
            Error::SpaceTooLarge { .. } => 5,
            Error::CorruptArchive { .. } => 6,
            Error::Contract(_) | Error::Evaluation(_) | Error::Io { .. } => 1,
        };
        Self { code, message: e.to_string() }
    }
}

/// What a run directory records about its simulator and hooks.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvaluatorRef {
    surface: SurfaceParams,
    #[serde(default)]
    importance_top: Option<f64>,
    #[serde(default)]
    complexity_filter: bool,
    #[serde(default)]
    evolve: Option<usize>,
}

impl EvaluatorRef {
    fn hooks<'s>(&self, sim: &'s Simulator) -> SimHooks<'s> {
        let mut h = SimHooks::new(sim);
        h.importance_top_percent = self.importance_top;
        h.complexity_filter = self.complexity_filter;
        h.evolve_k = self.evolve;
        h
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Optimize { run, resume } => optimize(run, resume),
        Command::Baseline { kind, run } => baseline(kind, run),
        Command::Report {
            archives,
            objectives,
            thresholds,
            out,
        } => report(&archives, objectives, thresholds, &out),
        Command::GenSurface {
            seed,
            steps,
            cogs_per_step,
            options,
            density,
            noise,
            penalty,
            out,
        } => {
            let mut p = SurfaceParams::new(seed, steps, cogs_per_step, options, density);
            p.noise_sd = noise;
            if let Some(v) = penalty {
                p.aggregation_penalty = v;
            }
            gen_surface(&p, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn read_text(path: &Path, what: &str) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {what} {}: {e}", path.display())))
}

fn load_surface(path: &Path) -> Result<SurfaceParams, Failure> {
    let text = read_text(path, "surface")?;
    serde_json::from_str(&text).map_err(|e| Failure::setup(format!("{}: {e}", path.display())))
}

fn build_simulator(params: &SurfaceParams) -> Result<Simulator, Failure> {
    Simulator::generate(params).map_err(|e| Failure::setup(format!("cannot build the simulator: {e}")))
}

/// The space to search: the given document, checked against the surface, or
/// the surface's own catalog.
fn load_space(space: Option<&Path>, sim: &Simulator) -> Result<CogCatalog, Failure> {
    let own = sim.catalog().map_err(|e| Failure::setup(e.to_string()))?;
    let Some(path) = space else {
        return Ok(own);
    };
    let text = read_text(path, "space")?;
    let catalog = CogCatalog::from_json_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    for cog in catalog.cogs() {
        let known = own
            .cog(&cog.id)
            .ok_or_else(|| Failure::setup(format!("cog {} is not part of the surface", cog.id)))?;
        if known.category != cog.category {
            return Err(Failure::setup(format!("cog {} has a different category in the surface", cog.id)));
        }
        if let Some(o) = cog.options.iter().find(|o| known.option(&o.id).is_none()) {
            return Err(Failure::setup(format!("option {} of cog {} is unknown to the surface", o.id, cog.id)));
        }
    }
    Ok(catalog)
}

struct Prepared {
    sim: Simulator,
    catalog: CogCatalog,
    surface: SurfaceParams,
    spec: EvaluatorSpec,
}

fn prepare(run: &RunConfig) -> Result<Prepared, Failure> {
    let spec = run.spec()?;
    let surface_path = run.surface.as_deref().ok_or_else(|| Failure::config("--surface is required"))?;
    if let Some(space) = &run.space {
        if !space.is_file() {
            return Err(Failure::config(format!("space file {} does not exist", space.display())));
        }
    }
    let surface = load_surface(surface_path)?;
    let sim = build_simulator(&surface)?;
    let catalog = load_space(run.space.as_deref(), &sim)?;
    Ok(Prepared {
        sim,
        catalog,
        surface,
        spec,
    })
}

fn optimize(run: RunConfig, resume: bool) -> Result<(), Failure> {
    let run = run.resolve()?;
    let out = run.out_dir()?.to_path_buf();
    let knobs = run.knobs()?;
    let existing = out.join(MANIFEST_FILE).exists();
    if existing && !resume {
        return Err(Failure::config(format!("{} already holds a run; pass --resume to continue it", out.display())));
    }
    let output = if existing {
        let manifest = RunManifest::read(&out.join(MANIFEST_FILE))?;
        let eref: EvaluatorRef = serde_json::from_value(manifest.evaluator.clone())
            .map_err(|e| Failure::setup(format!("run directory has no usable evaluator record: {e}")))?;
        let surface = match &run.surface {
            Some(p) => load_surface(p)?,
            None => eref.surface,
        };
        if surface != eref.surface {
            return Err(Failure::setup("the surface differs from the one the run started with"));
        }
        let sim = build_simulator(&surface)?;
        let budget = run.budget.unwrap_or(manifest.ledger.total);
        let out_run = resume_run(&out, budget, &sim, &mut eref.hooks(&sim))?;
        if let Some(n) = &out_run.notice {
            eprintln!("{n}");
        }
        out_run
    } else {
        let budget = run.budget.ok_or_else(|| Failure::config("--budget is required"))?;
        let p = prepare(&run)?;
        let eref = EvaluatorRef {
            surface: p.surface,
            importance_top: run.importance_top,
            complexity_filter: run.complexity_filter.unwrap_or(false),
            evolve: run.evolve,
        };
        let request = RunRequest {
            catalog: p.catalog,
            evaluator: &p.sim,
            spec: p.spec,
            budget,
            seed: run.seed.unwrap_or(0),
            knobs,
            dir: Some(&out),
            evaluator_ref: serde_json::to_value(&eref).map_err(Error::from)?,
        };
        adaseek_run(request, &mut eref.hooks(&p.sim))?
    };
    let text = run_summary(&output);
    write_atomic(&out.join(SUMMARY_FILE), text.as_bytes())?;
    print!("{}", selection_table(&output.selected, &output.manifest.spec));
    let l = &output.manifest.ledger;
    eprintln!(
        "{}: {} evaluations, {} of {} charged",
        out.display(),
        output.archive.len(),
        l.used,
        l.total
    );
    Ok(())
}

fn baseline(kind: Option<String>, run: RunConfig) -> Result<(), Failure> {
    let run = run.resolve()?;
    let name = kind
        .or_else(|| run.baseline.clone())
        .ok_or_else(|| Failure::config("baseline kind is required: random, grid or flat_tpe"))?;
    let kind: BaselineKind = name.parse()?;
    let out = run.out_dir()?.to_path_buf();
    let knobs = run.knobs()?;
    let budget = match kind {
        BaselineKind::Grid => run.budget.unwrap_or(0),
        _ => run.budget.ok_or_else(|| Failure::config("--budget is required"))?,
    };
    let seed = run.seed.unwrap_or(0);
    let p = prepare(&run)?;
    let archive = run_baseline(kind, &p.catalog, &p.sim, &p.spec, budget, seed, &knobs.search)?;
    let meta = serde_json::json!({
        "kind": kind,
        "budget": budget,
        "seed": seed,
        "evaluations": archive.len(),
        "spec": p.spec,
        "evaluator": { "surface": p.surface },
    });
    persist_baseline(&out, &archive, &p.spec, &meta)?;
    let selected: Vec<Observation> = select_best(&archive, &p.spec, knobs.select_k)?.into_iter().cloned().collect();
    let mut text = format!("baseline {kind}: {} evaluations, seed {seed}\n\n", archive.len());
    text.push_str(&per_objective(&selected, &p.spec));
    write_atomic(&out.join(SUMMARY_FILE), text.as_bytes())?;
    print!("{}", selection_table(&selected, &p.spec));
    eprintln!("{}: {kind} baseline, {} evaluations", out.display(), archive.len());
    Ok(())
}

fn report(archives: &[PathBuf], objectives: Vec<String>, thresholds: Vec<String>, out: &Path) -> Result<(), Failure> {
    let run = RunConfig {
        objectives: Some(objectives),
        thresholds: Some(thresholds),
        ..RunConfig::default()
    };
    let spec = run.spec()?;
    let mut loaded: Vec<(String, ResultArchive)> = Vec::new();
    for path in archives {
        let file = if path.is_dir() { path.join(ARCHIVE_FILE) } else { path.clone() };
        if !file.is_file() {
            return Err(Failure::config(format!("archive {} does not exist", file.display())));
        }
        let archive = load_archive(&file)?;
        let mut name = archive_name(path);
        let taken = |n: &str| loaded.iter().any(|(m, _)| m == n);
        if taken(&name) {
            let mut i = 2;
            while taken(&format!("{name}-{i}")) {
                i += 1;
            }
            name = format!("{name}-{i}");
        }
        loaded.push((name, archive));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (name, archive) in &loaded {
        write_frontier_csv(&out.join(format!("{name}.frontier.csv")), archive, &spec)?;
    }
    let named: Vec<(String, &ResultArchive)> = loaded.iter().map(|(n, a)| (n.clone(), a)).collect();
    let (reference, rows) = compare(&named, &spec);
    write_comparison_csv(&out.join("comparison.csv"), &reference, &rows)?;
    let mut table = Vec::new();
    comparison_table(&rows, &mut table).expect("writing to memory");
    write_atomic(&out.join("report.txt"), &table)?;
    print!("{}", String::from_utf8_lossy(&table));
    let axes: Vec<String> = spec
        .objectives
        .iter()
        .zip(&reference)
        .map(|(o, r)| format!("{o}={r}"))
        .collect();
    eprintln!("hypervolume reference point: {}", axes.join(", "));
    Ok(())
}

/// Run directory name for `run/archive.jsonl` or `run/`, file stem otherwise.
fn archive_name(path: &Path) -> String {
    let dir = if path.is_dir() {
        Some(path)
    } else if path.file_name().is_some_and(|n| n == ARCHIVE_FILE) {
        path.parent()
    } else {
        None
    };
    dir.and_then(|d| fs::canonicalize(d).ok())
        .and_then(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()))
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "archive".into())
}

fn gen_surface(params: &SurfaceParams, out: &Path) -> Result<(), Failure> {
    let sim = Simulator::generate(params)?;
    let catalog = sim.catalog()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("surface.json"), &pretty(params)?)?;
    write_atomic(&out.join("space.json"), &pretty(&catalog.to_document())?)?;
    write_atomic(&out.join("surface_dump.json"), &pretty(&sim)?)?;
    eprintln!(
        "{}: {} steps, {} cogs, {} configurations",
        out.display(),
        params.n_steps,
        catalog.len(),
        catalog.total_size()?
    );
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>, Error> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn run_summary(output: &RunOutput) -> String {
    let m = &output.manifest;
    let mut s = String::new();
    let _ = writeln!(s, "seed {}, budget {}, charged {}, evaluations {}", m.seed, m.ledger.total, m.ledger.used, output.archive.len());
    for r in &m.ledger.per_round {
        let _ = writeln!(
            s,
            "round with {} layer(s): granted {}, evaluated {}{}",
            r.layers,
            r.granted,
            r.evals_consumed,
            if r.complete { "" } else { " (incomplete)" }
        );
    }
    if !m.fixed.is_empty() {
        let pinned: Vec<String> = m.fixed.iter().map(|(c, o)| format!("{c}={o}")).collect();
        let _ = writeln!(s, "pinned by pre-filters: {}", pinned.join(" "));
    }
    if let Some(n) = &output.notice {
        let _ = writeln!(s, "{n}");
    }
    s.push('\n');
    s.push_str(&per_objective(&output.selected, &m.spec));
    s
}

/// The selection ranked under each objective in turn.
fn per_objective(selected: &[Observation], spec: &EvaluatorSpec) -> String {
    let mut s = String::new();
    for &o in &spec.objectives {
        let mut ranked: Vec<&Observation> = selected.iter().collect();
        ranked.sort_by(|a, b| o.compare(&a.metrics, &b.metrics).then(a.eval_index.cmp(&b.eval_index)));
        let _ = writeln!(s, "selected configurations by {o}:");
        for obs in ranked {
            let _ = writeln!(
                s,
                "  #{:<5} {}={:.6}  {}",
                obs.eval_index,
                o,
                o.value(&obs.metrics),
                describe(obs)
            );
        }
        s.push('\n');
    }
    s
}

fn describe(obs: &Observation) -> String {
    obs.config
        .assignments
        .iter()
        .map(|(c, o)| format!("{c}={o}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn selection_table(selected: &[Observation], spec: &EvaluatorSpec) -> String {
    let mut s = format!("{:>6} {:>9} {:>9} {:>9} {:>8}  configuration\n", "eval", "quality", "cost", "latency", "feasible");
    let mut rows: Vec<&Observation> = selected.iter().collect();
    let first = spec.objectives.first().copied().unwrap_or(Objective::Quality);
    rows.sort_by(|a, b| first.compare(&a.metrics, &b.metrics).then(a.eval_index.cmp(&b.eval_index)));
    for o in rows {
        let _ = writeln!(
            s,
            "{:>6} {:>9.4} {:>9.4} {:>9.4} {:>8}  {}",
            o.eval_index,
            o.metrics.quality,
            o.metrics.cost,
            o.metrics.latency,
            o.feasible,
            describe(o)
        );
    }
    s
}
