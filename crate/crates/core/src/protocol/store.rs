//! Log store backing audits: per-request openings with bounded retention.
//!
//! The server must keep each request's full opening (seed and trace) until
//! its audit window lapses. The store holds entries in memory, optionally
//! journaling every mutation to an append-only JSONL file. An index sidecar
//! written on flush maps live request ids to byte offsets in the journal so
//! a reload can seek straight to live entries instead of replaying history.

use super::message::RequestId;
use crate::commit::Commitment;
use crate::model::ExecutionResult;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("duplicate request id {0}")]
    DuplicateId(RequestId),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt journal: {0}")]
    Corrupt(String),
}

/// One request's audit material.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub request_id: RequestId,
    pub prompt: Vec<u32>,
    pub result: ExecutionResult,
    pub commitment: Commitment,
    /// Logical seconds at insertion.
    pub created_at: u64,
    /// Live entries only; a purged entry leaves the store entirely and can
    /// no longer serve audits.
    pub retained: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum JournalOp {
    Put { entry: LogEntry },
    Purge { request_id: RequestId },
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    /// Journal length the index describes; a shorter value than the file on
    /// disk marks the index stale.
    journal_len: u64,
    /// Offsets of the put line for every live entry.
    live: Vec<(RequestId, u64)>,
}

struct Journal {
    writer: BufWriter<File>,
    path: PathBuf,
    offset: u64,
}

/// In-memory map plus insertion order, with optional journal.
pub struct LogStore {
    entries: HashMap<RequestId, LogEntry>,
    order: VecDeque<RequestId>,
    offsets: HashMap<RequestId, u64>,
    journal: Option<Journal>,
}

fn index_path(journal: &Path) -> PathBuf {
    let mut p = journal.as_os_str().to_owned();
    p.push(".index");
    PathBuf::from(p)
}

impl LogStore {
    pub fn in_memory() -> LogStore {
        LogStore {
            entries: HashMap::new(),
            order: VecDeque::new(),
            offsets: HashMap::new(),
            journal: None,
        }
    }

    /// Opens a journaled store, loading any existing journal at `path`. The
    /// index sidecar, when present and matching, short-circuits the replay.
    pub fn persistent(path: &Path) -> Result<LogStore, StoreError> {
        let mut store = if path.exists() {
            Self::load(path)?
        } else {
            Self::in_memory()
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let offset = file.metadata()?.len();
        store.journal = Some(Journal {
            writer: BufWriter::new(file),
            path: path.to_path_buf(),
            offset,
        });
        Ok(store)
    }

    fn load(path: &Path) -> Result<LogStore, StoreError> {
        let mut store = Self::in_memory();
        let idx_path = index_path(path);
        let journal_len = std::fs::metadata(path)?.len();
        if let Ok(text) = std::fs::read_to_string(&idx_path) {
            if let Ok(index) = serde_json::from_str::<IndexFile>(&text) {
                if index.journal_len == journal_len {
                    if let Ok(loaded) = Self::load_from_index(path, &index) {
                        return Ok(loaded);
                    }
                }
            }
        }
        // Full replay.
        let file = File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        let mut offset = 0u64;
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            let op: JournalOp = serde_json::from_str(line.trim_end())
                .map_err(|e| StoreError::Corrupt(e.to_string()))?;
            match op {
                JournalOp::Put { entry } => {
                    let id = entry.request_id;
                    store.entries.insert(id, entry);
                    store.order.push_back(id);
                    store.offsets.insert(id, offset);
                }
                JournalOp::Purge { request_id } => {
                    store.entries.remove(&request_id);
                    store.offsets.remove(&request_id);
                }
            }
            offset += n as u64;
        }
        store.order.retain(|id| store.entries.contains_key(id));
        Ok(store)
    }

    fn load_from_index(path: &Path, index: &IndexFile) -> Result<LogStore, StoreError> {
        let mut store = Self::in_memory();
        let mut file = File::open(path)?;
        let mut rows: Vec<(RequestId, u64)> = index.live.clone();
        rows.sort_by_key(|&(_, off)| off);
        for (id, off) in rows {
            file.seek(SeekFrom::Start(off))?;
            let mut reader = BufReader::new(&mut file);
            let mut line = String::new();
            reader.read_line(&mut line)?;
            let op: JournalOp = serde_json::from_str(line.trim_end())
                .map_err(|e| StoreError::Corrupt(e.to_string()))?;
            match op {
                JournalOp::Put { entry } if entry.request_id == id => {
                    store.entries.insert(id, entry);
                    store.order.push_back(id);
                    store.offsets.insert(id, off);
                }
                _ => return Err(StoreError::Corrupt(format!("index points past entry {id}"))),
            }
        }
        Ok(store)
    }

    fn append(&mut self, op: &JournalOp) -> Result<Option<u64>, StoreError> {
        let Some(journal) = self.journal.as_mut() else { return Ok(None) };
        let mut line = serde_json::to_vec(op).expect("journal op serializes");
        line.push(b'\n');
        journal.writer.write_all(&line)?;
        let at = journal.offset;
        journal.offset += line.len() as u64;
        Ok(Some(at))
    }

    pub fn put(&mut self, entry: LogEntry) -> Result<(), StoreError> {
        let id = entry.request_id;
        if self.entries.contains_key(&id) {
            return Err(StoreError::DuplicateId(id));
        }
        if let Some(off) = self.append(&JournalOp::Put { entry: entry.clone() })? {
            self.offsets.insert(id, off);
        }
        self.entries.insert(id, entry);
        self.order.push_back(id);
        Ok(())
    }

    pub fn get(&self, id: &RequestId) -> Option<&LogEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn purge_one(&mut self, id: RequestId) -> Result<(), StoreError> {
        self.append(&JournalOp::Purge { request_id: id })?;
        self.entries.remove(&id);
        self.offsets.remove(&id);
        Ok(())
    }

    /// Removes entries with `created_at + max_age <= now`; returns the count.
    pub fn purge_older_than(&mut self, now: u64, max_age: u64) -> Result<usize, StoreError> {
        let mut purged = 0;
        while let Some(&front) = self.order.front() {
            match self.entries.get(&front) {
                Some(e) if e.created_at.saturating_add(max_age) <= now => {
                    self.order.pop_front();
                    self.purge_one(front)?;
                    purged += 1;
               }
                Some(_) => break,
                None => {
                    self.order.pop_front();
                }
            }
        }
        Ok(purged)
    }

    /// Evicts oldest entries until at most `max_entries` remain.
    pub fn evict_to_capacity(&mut self, max_entries: usize) -> Result<usize, StoreError> {
        let mut evicted = 0;
        while self.entries.len() > max_entries {
            let Some(front) = self.order.pop_front() else { break };
            if self.entries.contains_key(&front) {
                self.purge_one(front)?;
                evicted += 1;
            }
        }
        Ok(evicted)
    }

    /// Flushes the journal and rewrites the index sidecar.
    pub fn flush(&mut self) -> Result<(), StoreError> {
        let Some(journal) = self.journal.as_mut() else { return Ok(()) };
        journal.writer.flush()?;
        let index = IndexFile {
            journal_len: journal.offset,
            live: self.order.iter().filter_map(|id| Some((*id, *self.offsets.get(id)?))).collect(),
        };
        let text = serde_json::to_string(&index).expect("index serializes");
        std::fs::write(index_path(&journal.path), text)?;
        Ok(())
    }
}
