//! Content-addressed, append-only storage of immutable table snapshots.
//!
//! Each snapshot lives at `objects/<first2>/<rest62>` under the data
//! directory, named by the SHA-256 of its canonical encoding. Writers stage
//! into a temp file and publish with a hard link, so exactly one writer wins
//! when several race on identical content.

mod codec;
mod table;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;
use thiserror::Error;

pub use codec::{decode_table, encode_table};
pub use table::{is_identifier, Column, ColumnType, Row, Schema, TableData, Value};

crate::id::hex_id!(
    /// SHA-256 of a snapshot's canonical encoding.
    SnapshotId
);

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("decode error at line {line}: {msg}")]
    Decode { line: usize, msg: String },
    #[error("snapshot {0} not found")]
    NotFound(SnapshotId),
    #[error("snapshot {0} is corrupt: content hash mismatch")]
    CorruptSnapshot(SnapshotId),
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
}

/// Snapshot-content I/O since the store was opened.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IoCounters {
    pub data_reads: u64,
    pub data_writes: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

#[derive(Debug)]
pub struct Store {
    objects: PathBuf,
    reads: AtomicU64,
    writes: AtomicU64,
    bytes_read: AtomicU64,
    bytes_written: AtomicU64,
}

impl Store {
    pub fn open(data_dir: &Path) -> Result<Self, StoreError> {
        let objects = data_dir.join("objects");
        fs::create_dir_all(&objects)?;
        Ok(Store {
            objects,
            reads: AtomicU64::new(0),
            writes: AtomicU64::new(0),
            bytes_read: AtomicU64::new(0),
            bytes_written: AtomicU64::new(0),
        })
    }

    pub fn path_of(&self, id: &SnapshotId) -> PathBuf {
        let hex = id.as_str();
        self.objects.join(&hex[..2]).join(&hex[2..])
    }

    pub fn put_snapshot(&self, table: &TableData) -> Result<SnapshotId, StoreError> {
        let bytes = encode_table(table);
        let id = SnapshotId::of_bytes(&bytes);
        let path = self.path_of(&id);
        if path.exists() {
            return Ok(id);
        }
        let dir = path.parent().expect("object path has a parent");
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.flush()?;
        match fs::hard_link(tmp.path(), &path) {
            Ok(()) => {
                self.writes.fetch_add(1, Ordering::SeqCst);
                self.bytes_written
                    .fetch_add(bytes.len() as u64, Ordering::SeqCst);
            }
            // Another writer published identical content first.
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {}
            Err(e) => return Err(e.into()),
        }
        Ok(id)
    }

    pub fn get_snapshot(&self, id: &SnapshotId) -> Result<TableData, StoreError> {
        let bytes = match fs::read(self.path_of(id)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(id.clone()))
            }
            Err(e) => return Err(e.into()),
        };
        self.reads.fetch_add(1, Ordering::SeqCst);
        self.bytes_read
            .fetch_add(bytes.len() as u64, Ordering::SeqCst);
        if SnapshotId::of_bytes(&bytes) != *id {
            return Err(StoreError::CorruptSnapshot(id.clone()));
        }
        decode_table(&bytes).map_err(|_| StoreError::CorruptSnapshot(id.clone()))
    }

    /// Existence check; touches metadata only, never content.
    pub fn contains(&self, id: &SnapshotId) -> bool {
        self.path_of(id).is_file()
    }

    pub fn io_counters(&self) -> IoCounters {
        IoCounters {
            data_reads: self.reads.load(Ordering::SeqCst),
            data_writes: self.writes.load(Ordering::SeqCst),
            bytes_read: self.bytes_read.load(Ordering::SeqCst),
            bytes_written: self.bytes_written.load(Ordering::SeqCst),
        }
    }
}
