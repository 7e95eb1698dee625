use std::io;
use std::path::PathBuf;

use crate::pheap::PRef;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("range [{offset}, {offset}+{len}) outside limit {limit}")]
    Range { offset: u64, len: u64, limit: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pool file {0} already exists (pass truncate to overwrite)")]
    Exists(PathBuf),

    #[error("pool corrupted: {0}")]
    Corruption(String),

    #[error("out of persistent space (requested {requested} bytes)")]
    OutOfSpace { requested: u64 },

    #[error("transaction log slot exhausted")]
    OutOfLog,

    #[error("invalid free of {0}")]
    InvalidFree(PRef),

    #[error("invalid persistent reference {0}")]
    InvalidRef(PRef),

    #[error("precondition violated: {0}")]
    Precondition(&'static str),

    #[error("a transaction is already active on this thread")]
    Nesting,

    #[error("transaction is not active")]
    TxState,

    #[error("name {0:?} already allocated")]
    NameCollision(String),

    #[error("name {0:?} not found")]
    NotFound(String),

    #[error("handle belongs to another session")]
    StaleHandle,

    #[error("checkpoint failed: {0}")]
    CheckpointFailed(String),

    #[error("hash table full")]
    TableFull,

    #[error("crash point {requested} beyond trace of {reached} events")]
    TraceExhausted { requested: u64, reached: u64 },

    #[error("operation refused in direct mode")]
    DirectMode,

    #[error("backend mismatch: {0}")]
    Backend(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
