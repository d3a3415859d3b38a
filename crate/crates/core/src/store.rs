//! Durable, append-only on-disk store for captured runs and flows.
//!
//! Layout: a store directory holds two line-delimited JSON files,
//! `runs.jsonl` and `flows.jsonl`. Every line is a self-describing record
//! with a leading `schema` version field. Flows are staged first; the run
//! record is the commit point, so readers never observe a partial run. A
//! torn final line (interrupted append) is ignored on load; corruption
//! anywhere else is reported with its byte offset.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FlowError, HttpFlow, JourneyRun, RunId};

pub const SCHEMA_VERSION: &str = "1";
pub const RUNS_FILE: &str = "runs.jsonl";
pub const FLOWS_FILE: &str = "flows.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run {0} already exists in store")]
    DuplicateRun(RunId),
    #[error("corrupt record in {file} at byte {offset}: {reason}")]
    CorruptStore {
        file: String,
        offset: u64,
        reason: String,
    },
    #[error("unsupported schema version {found:?} in {file} at byte {offset}")]
    UnsupportedSchema {
        file: String,
        offset: u64,
        found: String,
    },
    #[error("invalid record: {0}")]
    InvalidRecord(#[from] FlowError),
    #[error("flow {flow_id} does not belong to run {run_id}")]
    ForeignFlow {
        flow_id: crate::flow::FlowId,
        run_id: RunId,
    },
    #[error("store I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StoreError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunRecord {
    schema: String,
    run: JourneyRun,
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowRecord {
    schema: String,
    flow: HttpFlow,
}

/// Receipt for a committed run.
#[derive(Debug, Clone, Serialize)]
pub struct CommitReceipt {
    pub run_id: RunId,
    pub flows_appended: usize,
    /// Byte offset of the run record in `runs.jsonl`.
    pub runs_offset: u64,
    /// Byte offset of the first staged flow in `flows.jsonl`.
    pub flows_offset: u64,
}

/// Optional filter for [`load_runs`].
#[derive(Debug, Clone, Default)]
pub struct RunFilter {
    pub platform_id: Option<String>,
    pub journey_name: Option<String>,
}

impl RunFilter {
    pub fn matches(&self, run: &JourneyRun) -> bool {
        self.platform_id
            .as_ref()
            .is_none_or(|p| *p == run.platform_id)
            && self
                .journey_name
                .as_ref()
                .is_none_or(|j| *j == run.journey_name)
    }
}

/// Writer handle. Single writer per store directory; readers go through
/// [`load_runs`] and only ever see committed runs.
#[derive(Debug)]
pub struct FlowStore {
    dir: PathBuf,
    runs_file: File,
    flows_file: File,
    runs_len: u64,
    flows_len: u64,
    known_runs: HashSet<RunId>,
    staged: Vec<crate::flow::FlowId>,
    staged_start: u64,
}

impl FlowStore {
    /// Opens (creating if needed) a store directory for appending.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| StoreError::io(&dir, e))?;
        let runs_path = dir.join(RUNS_FILE);
        let flows_path = dir.join(FLOWS_FILE);

        // Scan existing records to build the duplicate index and find the
        // end of committed data (a torn tail from a crashed append is
        // overwritten by the next commit).
        let runs_scan = scan_file::<RunRecord>(&runs_path)?;
        let flows_scan = scan_file::<FlowRecord>(&flows_path)?;
        let known_runs = runs_scan
            .records
            .iter()
            .map(|r| r.run.run_id.clone())
            .collect();

        let open = |path: &Path, clean_len: u64| -> Result<File, StoreError> {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| StoreError::io(path, e))?;
            // Drop a torn tail left by an interrupted append so new
            // records start on a clean line.
            let actual = file.metadata().map_err(|e| StoreError::io(path, e))?.len();
            if actual > clean_len {
                file.set_len(clean_len).map_err(|e| StoreError::io(path, e))?;
            }
            Ok(file)
        };
        let flows_len = flows_scan.clean_len;
        Ok(Self {
            runs_file: open(&runs_path, runs_scan.clean_len)?,
            flows_file: open(&flows_path, flows_scan.clean_len)?,
            dir,
            runs_len: runs_scan.clean_len,
            flows_len,
            known_runs,
            staged: Vec::new(),
            staged_start: flows_len,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn contains_run(&self, run_id: &RunId) -> bool {
        self.known_runs.contains(run_id)
    }

    /// Appends a complete run atomically: all flows, then the run record
    /// as the commit point. On failure the files are truncated back so no
    /// partial run is visible.
    pub fn append_run(
        &mut self,
        run: &JourneyRun,
        flows: &[HttpFlow],
    ) -> Result<CommitReceipt, StoreError> {
        let rollback_flows = self.flows_len;
        let result = (|| {
            for flow in flows {
                self.stage_flow(flow)?;
            }
            self.commit_run(run)
        })();
        if result.is_err() {
            self.truncate_flows_to(rollback_flows);
            self.staged.clear();
            self.staged_start = self.flows_len;
        }
        result
    }

    /// Stages one flow line. Staged flows are durable immediately but stay
    /// invisible to readers until [`commit_run`](Self::commit_run) writes
    /// the owning run record. Live capture appends each completed exchange
    /// through this path.
    pub fn stage_flow(&mut self, flow: &HttpFlow) -> Result<(), StoreError> {
        flow.validate()?;
        if self.staged.is_empty() {
            self.staged_start = self.flows_len;
        }
        let record = FlowRecord {
            schema: SCHEMA_VERSION.to_string(),
            flow: flow.clone(),
        };
        let line = encode_line(&record);
        let path = self.dir.join(FLOWS_FILE);
        self.flows_file
            .write_all(&line)
            .and_then(|()| self.flows_file.sync_data())
            .map_err(|e| StoreError::io(&path, e))?;
        self.flows_len += line.len() as u64;
        self.staged.push(flow.flow_id.clone());
        Ok(())
    }

    /// Commits a run whose flows were previously staged. The run's
    /// `flow_ids` must match the staged flows exactly.
    pub fn commit_run(&mut self, run: &JourneyRun) -> Result<CommitReceipt, StoreError> {
        run.validate()?;
        if self.known_runs.contains(&run.run_id) {
            return Err(StoreError::DuplicateRun(run.run_id.clone()));
        }
        for flow_id in &self.staged {
            if !run.flow_ids.contains(flow_id) {
                return Err(StoreError::ForeignFlow {
                    flow_id: flow_id.clone(),
                    run_id: run.run_id.clone(),
                });
            }
        }
        let record = RunRecord {
            schema: SCHEMA_VERSION.to_string(),
            run: run.clone(),
        };
        let line = encode_line(&record);
        let offset = self.runs_len;
        let path = self.dir.join(RUNS_FILE);
        self.runs_file
            .write_all(&line)
            .and_then(|()| self.runs_file.sync_data())
            .map_err(|e| StoreError::io(&path, e))?;
        self.runs_len += line.len() as u64;
        self.known_runs.insert(run.run_id.clone());
        let receipt = CommitReceipt {
            run_id: run.run_id.clone(),
            flows_appended: self.staged.len(),
            runs_offset: offset,
            flows_offset: self.staged_start,
        };
        self.staged.clear();
        self.staged_start = self.flows_len;
        Ok(receipt)
    }

    /// Re-reads all committed runs from disk. Equivalent to [`load_runs`]
    /// on the store's directory.
    pub fn load(
        &self,
        filter: &RunFilter,
    ) -> Result<Vec<(JourneyRun, Vec<HttpFlow>)>, StoreError> {
        load_runs(&self.dir, filter)
    }

    fn truncate_flows_to(&mut self, len: u64) {
        // Best-effort rollback after a failed append.
        if self.flows_file.set_len(len).is_ok() {
            self.flows_len = len;
        }
    }
}

/// Loads all committed runs (insertion order) with their flows. Flows
/// staged by an interrupted append, having no run record, are skipped.
pub fn load_runs(
    dir: impl AsRef<Path>,
    filter: &RunFilter,
) -> Result<Vec<(JourneyRun, Vec<HttpFlow>)>, StoreError> {
    let dir = dir.as_ref();
    let runs = scan_file::<RunRecord>(&dir.join(RUNS_FILE))?.records;
    let flows = scan_file::<FlowRecord>(&dir.join(FLOWS_FILE))?.records;

    let mut by_run: HashMap<RunId, Vec<HttpFlow>> = HashMap::new();
    for record in flows {
        by_run
            .entry(record.flow.run_id.clone())
            .or_default()
            .push(record.flow);
    }
    Ok(runs
        .into_iter()
        .map(|r| r.run)
        .filter(|run| filter.matches(run))
        .map(|run| {
            let flows = by_run.remove(&run.run_id).unwrap_or_default();
            (run, flows)
        })
        .collect())
}

/// Loads a single run by id.
pub fn load_run(
    dir: impl AsRef<Path>,
    run_id: &RunId,
) -> Result<Option<(JourneyRun, Vec<HttpFlow>)>, StoreError> {
    Ok(load_runs(dir, &RunFilter::default())?
        .into_iter()
        .find(|(run, _)| run.run_id == *run_id))
}

fn encode_line<T: Serialize>(record: &T) -> Vec<u8> {
    let mut line = serde_json::to_vec(record).expect("record serialization cannot fail");
    line.push(b'\n');
    line
}

struct Scan<T> {
    records: Vec<T>,
    /// Length of the file up to and including the last complete line.
    clean_len: u64,
}

fn scan_file<T: for<'de> Deserialize<'de> + SchemaTagged>(path: &Path) -> Result<Scan<T>, StoreError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok(Scan {
                records: Vec::new(),
                clean_len: 0,
            })
        }
        Err(e) => return Err(StoreError::io(path, e)),
    };
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());

    let mut records = Vec::new();
    let mut offset: u64 = 0;
    let mut clean_len: u64 = 0;
    for chunk in bytes.split_inclusive(|b| *b == b'\n') {
        let terminated = chunk.ends_with(b"\n");
        let line = if terminated {
            &chunk[..chunk.len() - 1]
        } else {
            chunk
        };
        if line.is_empty() {
            offset += chunk.len() as u64;
            if terminated {
                clean_len = offset;
            }
            continue;
        }
        match serde_json::from_slice::<T>(line) {
            Ok(record) => {
                if record.schema() != SCHEMA_VERSION {
                    return Err(StoreError::UnsupportedSchema {
                        file: file_name,
                        offset,
                        found: record.schema().to_string(),
                    });
                }
                records.push(record);
                offset += chunk.len() as u64;
                clean_len = offset;
            }
            Err(e) => {
                if !terminated {
                    // Torn tail from an interrupted append: ignore it. The
                    // writer overwrites it on the next open.
                    break;
                }
                return Err(StoreError::CorruptStore {
                    file: file_name,
                    offset,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(Scan { records, clean_len })
}

trait SchemaTagged {
    fn schema(&self) -> &str;
}

impl SchemaTagged for RunRecord {
    fn schema(&self) -> &str {
        &self.schema
    }
}

impl SchemaTagged for FlowRecord {
    fn schema(&self) -> &str {
        &self.schema
    }
}
