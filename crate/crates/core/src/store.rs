//! Run-directory persistence: lock file, append-only archive, atomic
//! manifest writes, trace logs.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cogspace::{assignment_key, Assignment, Configuration};
use crate::error::{Error, Result};
use crate::objectives::{MetricVector, Observation, ResultArchive};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARCHIVE_FILE: &str = "archive.jsonl";
pub const FRONTIER_FILE: &str = "frontier.csv";
pub const SEARCH_TRACE_FILE: &str = "search_trace.jsonl";
pub const SURROGATE_TRACE_FILE: &str = "surrogate_trace.jsonl";
pub const LOCK_FILE: &str = "run.lock";

/// One archive.jsonl record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveLine {
    pub canonical_key: String,
    pub assignments: Assignment,
    pub metrics: MetricVector,
    pub feasible: bool,
    pub eval_index: u64,
    pub chunk_id: u64,
    pub layer_round: u8,
    pub catalog_version: u64,
}

impl From<&Observation> for ArchiveLine {
    fn from(o: &Observation) -> Self {
        Self {
            canonical_key: o.key.clone(),
            assignments: o.config.assignments.clone(),
            metrics: o.metrics,
            feasible: o.feasible,
            eval_index: o.eval_index,
            chunk_id: o.chunk_id,
            layer_round: o.layer_round,
            catalog_version: o.config.catalog_version,
        }
    }
}

impl From<ArchiveLine> for Observation {
    fn from(l: ArchiveLine) -> Self {
        Observation {
            key: l.canonical_key,
            config: Configuration::new(l.assignments, l.catalog_version),
            metrics: l.metrics,
            feasible: l.feasible,
            eval_index: l.eval_index,
            chunk_id: l.chunk_id,
            layer_round: l.layer_round,
        }
    }
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::io(path, source)
}

pub fn encode_line(o: &Observation) -> Result<String> {
    Ok(serde_json::to_string(&ArchiveLine::from(o))?)
}

/// Parses an archive file. Any malformed line, key mismatch or index gap is
/// reported with its 1-based line number.
pub fn load_archive(path: &Path) -> Result<ResultArchive> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut archive = ResultArchive::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let corrupt = |reason: String| Error::CorruptArchive {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let parsed: ArchiveLine = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        if parsed.canonical_key != assignment_key(&parsed.assignments) {
            return Err(corrupt("canonical_key does not match assignments".into()));
        }
        if parsed.eval_index != i as u64 {
            return Err(corrupt(format!("eval_index {} at position {i}", parsed.eval_index)));
        }
        parsed.metrics.check().map_err(|e| corrupt(e.to_string()))?;
        archive.push(parsed.into());
    }
    Ok(archive)
}

pub fn write_archive(path: &Path, archive: &ResultArchive) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for o in archive.observations() {
        writeln!(w, "{}", encode_line(o)?).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Exclusive handle on a run directory; the lock file is removed on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Locked(root.to_path_buf()));
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        Ok(Self {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn append_lines<I, S>(&self, name: &str, lines: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let path = self.path(name);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        for l in lines {
            writeln!(w, "{}", l.as_ref()).map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))
    }

    pub fn append_observations(&self, obs: &[Observation]) -> Result<()> {
        let lines = obs.iter().map(encode_line).collect::<Result<Vec<_>>>()?;
        self.append_lines(ARCHIVE_FILE, lines)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        write_atomic(&self.path(name), text.as_bytes())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
