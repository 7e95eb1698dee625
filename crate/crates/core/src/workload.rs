//! Deterministic operation streams.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Insert,
    Delete,
    Find,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Insert => "insert",
            OpKind::Delete => "delete",
            OpKind::Find => "find",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Op {
    pub kind: OpKind,
    pub key: i64,
    /// Value stored by an insert; ignored otherwise.
    pub value: u64,
}

/// Insert/delete/find percentages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mix {
    pub insert: u32,
    pub delete: u32,
    pub find: u32,
}

impl Mix {
    pub const DEFAULT: Mix = Mix {
        insert: 50,
        delete: 40,
        find: 10,
    };

    pub fn new(insert: u32, delete: u32, find: u32) -> Result<Self> {
        if insert + delete + find != 100 {
            return Err(Error::Config(format!(
                "mix {insert}:{delete}:{find} does not sum to 100"
            )));
        }
        Ok(Mix {
            insert,
            delete,
            find,
        })
    }
}

impl Default for Mix {
    fn default() -> Self {
        Mix::DEFAULT
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.insert, self.delete, self.find)
    }
}

impl std::str::FromStr for Mix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("mix {s:?} is not I:D:F"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let n = |p: &str| p.trim().parse::<u32>().map_err(|_| bad());
        Mix::new(n(parts[0])?, n(parts[1])?, n(parts[2])?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub threads: usize,
    pub ops_per_thread: usize,
    pub mix: Mix,
    /// Keys are drawn uniformly from `[key_lo, key_hi)`.
    pub key_lo: i64,
    pub key_hi: i64,
    pub seed: u64,
    pub runs: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            threads: 1,
            ops_per_thread: 100,
            mix: Mix::DEFAULT,
            key_lo: 0,
            key_hi: 1024,
            seed: 0,
            runs: 1,
        }
    }
}

impl WorkloadSpec {
    /// Single-threaded, single-run stream of `ops` operations.
    pub fn single(ops: usize, seed: u64) -> Self {
        WorkloadSpec {
            ops_per_thread: ops,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("at least one thread is required".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("at least one run is required".into()));
        }
        if self.key_lo >= self.key_hi || self.key_lo == i64::MIN || self.key_hi == i64::MAX {
            return Err(Error::Config(format!(
                "key range [{}, {}) is empty or touches a sentinel",
                self.key_lo, self.key_hi
            )));
        }
        Mix::new(self.mix.insert, self.mix.delete, self.mix.find)?;
        Ok(())
    }

    /// Operations for `thread` in `run`. Depends only on the seed, the run
    /// and the thread.
    pub fn thread_ops(&self, run: usize, thread: usize) -> Vec<Op> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((run as u64) << 32) | thread as u64);
        (0..self.ops_per_thread)
            .map(|_| {
                let roll = rng.gen_range(0..100);
                let kind = if roll < self.mix.insert {
                    OpKind::Insert
                } else if roll < self.mix.insert + self.mix.delete {
                    OpKind::Delete
                } else {
                    OpKind::Find
                };
                Op {
                    kind,
                    key: rng.gen_range(self.key_lo..self.key_hi),
                    value: rng.gen::<u64>(),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_parsing() {
        assert_eq!("50:40:10".parse::<Mix>().unwrap(), Mix::DEFAULT);
        assert!("50:40:20".parse::<Mix>().is_err());
        assert!("50:50".parse::<Mix>().is_err());
        assert_eq!(Mix::DEFAULT.to_string(), "50:40:10");
    }

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let spec = WorkloadSpec {
            threads: 4,
            ops_per_thread: 200,
            ..Default::default()
        };
        assert_eq!(spec.thread_ops(0, 1), spec.thread_ops(0, 1));
        assert_ne!(spec.thread_ops(0, 1), spec.thread_ops(0, 2));
        assert_ne!(spec.thread_ops(0, 1), spec.thread_ops(1, 1));
        let ops = spec.thread_ops(0, 0);
        assert!(ops.iter().all(|o| (0..1024).contains(&o.key)));
        let inserts = ops.iter().filter(|o| o.kind == OpKind::Insert).count();
        assert!((70..130).contains(&inserts), "{inserts}");
    }

    #[test]
    fn validation() {
        assert!(WorkloadSpec::default().validate().is_ok());
        let bad = WorkloadSpec {
            key_lo: 5,
            key_hi: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = WorkloadSpec {
            threads: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
