//! Sorted singly linked lists between two sentinel nodes.
//!
//! Redo/undo node payload: `key i64, value u64, next u64` (next is the
//! successor's header offset). Named node payload: `own_name [32],
//! next_name [32], key i64, value u64`; successor offsets are kept in a
//! session-only link map rebuilt from the names on recovery.
//!
//! Root record payload: `kind u64, buckets u64`, then for redo/undo one
//! `(head, tail)` offset pair per bucket.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, MutexGuard, RwLock};

use super::{check_key, LockRegistry, Mode, NodeGuard, VerificationReport, Violation};
use super::{KIND_HT_CLOSED, KIND_SET};
use crate::error::{Error, Result};
use crate::named::NAME_MAX;
use crate::pheap::{Backend, PRef, Pool};
use crate::txn::{Transaction, Tx, TxMem};

const NODE_SIZE: u64 = 24;
const NAMED_NODE_SIZE: u64 = 80;
const NEXT: u64 = 16;
const NEXT_NAME: u64 = 32;
const NAMED_KEY: u64 = 64;

type Name = [u8; NAME_MAX];

fn name_bytes(s: &str) -> Name {
    let mut b = [0u8; NAME_MAX];
    b[..s.len()].copy_from_slice(s.as_bytes());
    b
}

fn name_str(b: &Name) -> Option<String> {
    let len = b.iter().position(|&c| c == 0).unwrap_or(NAME_MAX);
    if len == 0 {
        return None;
    }
    std::str::from_utf8(&b[..len]).ok().map(str::to_string)
}

fn payload(off: u64) -> u64 {
    PRef::new(off).payload()
}

struct Bucket {
    head: u64,
    tail: u64,
    coarse: Mutex<()>,
}

/// Locks protecting a `(pred, curr)` window.
#[allow(dead_code)]
enum Held<'a> {
    Coarse(MutexGuard<'a, ()>),
    Fine(NodeGuard, NodeGuard),
}

pub(crate) struct ListTable<'p> {
    pool: &'p Pool,
    mode: Mode,
    named: bool,
    prefix: &'static str,
    root: u64,
    buckets: Vec<Bucket>,
    locks: LockRegistry,
    links: RwLock<HashMap<u64, u64>>,
    next_id: AtomicU64,
}

impl<'p> ListTable<'p> {
    fn create(pool: &'p Pool, mode: Mode, kind: u64, n: u32) -> Result<Self> {
        let named = pool.backend() == Backend::Named;
        let prefix = if kind == KIND_SET { "set" } else { "ht" };
        let ds = if kind == KIND_SET { super::DsKind::Set } else { super::DsKind::HtClosed };
        if super::exists(pool, ds)? {
            return Err(Error::Precondition("pool already holds a structure"));
        }
        let mut tx = pool.begin()?;
        let mut pairs = Vec::with_capacity(n as usize);
        let root = if named {
            let root = tx.nv_alloc(prefix, 16)?;
            for i in 0..n {
                let (hn, tn) = (format!("{prefix}-h{i}"), format!("{prefix}-t{i}"));
                let h = tx.nv_alloc(&hn, NAMED_NODE_SIZE)?;
                let t = tx.nv_alloc(&tn, NAMED_NODE_SIZE)?;
                write_named(&mut tx, h, &hn, Some(&tn), i64::MIN, 0)?;
                write_named(&mut tx, t, &tn, None, i64::MAX, 0)?;
                pairs.push((h.offset(), t.offset()));
            }
            root
        } else {
            let root = tx.alloc(16 + 16 * n as u64)?;
            for i in 0..n as u64 {
                let h = tx.alloc(NODE_SIZE)?;
                let t = tx.alloc(NODE_SIZE)?;
                write_node(&mut tx, h, i64::MIN, 0, t.offset())?;
                write_node(&mut tx, t, i64::MAX, 0, 0)?;
                tx.write_u64(root.payload() + 16 + 16 * i, h.offset())?;
                tx.write_u64(root.payload() + 24 + 16 * i, t.offset())?;
                pairs.push((h.offset(), t.offset()));
            }
            tx.set_root(root)?;
            root
        };
        tx.write_u64(root.payload(), kind)?;
        tx.write_u64(root.payload() + 8, n as u64)?;
        tx.commit()?;
        if named {
            pool.checkpoint()?;
        }
        let t = Self::shell(pool, mode, named, prefix, root.offset(), &pairs);
        if named {
            let mut links = t.links.write();
            for &(h, tl) in &pairs {
                links.insert(h, tl);
            }
        }
        Ok(t)
    }

    fn shell(
        pool: &'p Pool,
        mode: Mode,
        named: bool,
        prefix: &'static str,
        root: u64,
        pairs: &[(u64, u64)],
    ) -> Self {
        ListTable {
            pool,
            mode,
            named,
            prefix,
            root,
            buckets: pairs
                .iter()
                .map(|&(head, tail)| Bucket {
                    head,
                    tail,
                    coarse: Mutex::new(()),
                })
                .collect(),
            locks: LockRegistry::new(),
            links: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(0),
        }
    }

    fn recover(pool: &'p Pool, mode: Mode, kind: u64) -> Result<Self> {
        let named = pool.backend() == Backend::Named;
        let prefix = if kind == KIND_SET { "set" } else { "ht" };
        let root = if named {
            pool.nv_lookup_quiet(prefix)?
                .ok_or(Error::Precondition("pool holds no structure"))?
        } else {
            let r = pool.get_root()?;
            if r.is_null() {
                return Err(Error::Precondition("pool holds no structure"));
            }
            r
        };
        let size = pool
            .live_block(root)?
            .ok_or_else(|| Error::Corruption(format!("root {root} is not a live block")))?
            .size;
        let stored_kind = pool.read_u64(root.payload())?;
        if stored_kind != kind {
            return Err(Error::Config(format!(
                "pool holds structure kind {stored_kind}, expected {kind}"
            )));
        }
        let n = pool.read_u64(root.payload() + 8)?;
        let need = if named { 16 } else { 16 + 16 * n };
        if n == 0 || n > u32::MAX as u64 || need > size {
            return Err(Error::Corruption(format!("root record claims {n} buckets")));
        }
        let mut pairs = Vec::with_capacity(n as usize);
        for i in 0..n {
            pairs.push(if named {
                let find = |s: String| {
                    pool.nv_lookup_quiet(&s)?
                        .ok_or_else(|| Error::Corruption(format!("sentinel {s:?} missing")))
                };
                (
                    find(format!("{prefix}-h{i}"))?.offset(),
                    find(format!("{prefix}-t{i}"))?.offset(),
                )
            } else {
                (
                    pool.read_u64(root.payload() + 16 + 16 * i)?,
                    pool.read_u64(root.payload() + 24 + 16 * i)?,
                )
            });
        }
        let t = Self::shell(pool, mode, named, prefix, root.offset(), &pairs);
        if named {
            t.relink()?;
        }
        let report = t.verify_lists();
        if let Some(v) = report.violations.first() {
            return Err(Error::Corruption(format!("list damaged: {v:?}")));
        }
        Ok(t)
    }

    /// Rebuild the successor map by resolving every node's `next_name`.
    fn relink(&self) -> Result<()> {
        let mut links = HashMap::new();
        let mut max_id = None;
        for (b, bucket) in self.buckets.iter().enumerate() {
            let tail_name = format!("{}-t{b}", self.prefix);
            let mut seen = HashSet::new();
            let mut cur = bucket.head;
            while cur != bucket.tail {
                if !seen.insert(cur) {
                    return Err(Error::Corruption(format!("cycle in bucket {b}")));
                }
                let mut raw = [0u8; NAME_MAX];
                self.pool.read(payload(cur) + NEXT_NAME, &mut raw)?;
                let name = name_str(&raw)
                    .ok_or_else(|| Error::Corruption(format!("bucket {b} ends before its tail")))?;
                let next = if name == tail_name {
                    bucket.tail
                } else {
                    if let Some(id) = name.strip_prefix("node-").and_then(|s| s.parse::<u64>().ok()) {
                        max_id = max_id.max(Some(id));
                    }
                    match self.pool.nv_recover(&name) {
                        Ok(h) => h.offset(),
                        Err(Error::NotFound(n)) => {
                            return Err(Error::Corruption(format!("bucket {b} links to missing {n:?}")))
                        }
                        Err(e) => return Err(e),
                    }
                };
                links.insert(cur, next);
                cur = next;
            }
        }
        for name in self.pool.nv_names()? {
            if let Some(id) = name.strip_prefix("node-").and_then(|s| s.parse::<u64>().ok()) {
                max_id = max_id.max(Some(id));
            }
        }
        self.next_id.store(max_id.map_or(0, |m| m + 1), Ordering::Relaxed);
        *self.links.write() = links;
        Ok(())
    }

    fn key(&self, off: u64) -> Result<i64> {
        let at = if self.named { NAMED_KEY } else { 0 };
        Ok(self.pool.read_u64(payload(off) + at)? as i64)
    }

    fn value(&self, off: u64) -> Result<u64> {
        let at = if self.named { NAMED_KEY + 8 } else { 8 };
        self.pool.read_u64(payload(off) + at)
    }

    fn next(&self, off: u64) -> Result<u64> {
        if self.named {
            self.links
                .read()
                .get(&off)
                .copied()
                .ok_or_else(|| Error::Corruption(format!("no successor recorded for {off:#x}")))
        } else {
            self.pool.read_u64(payload(off) + NEXT)
        }
    }

    fn own_name(&self, off: u64) -> Result<Name> {
        let mut raw = [0u8; NAME_MAX];
        self.pool.read(payload(off), &mut raw)?;
        Ok(raw)
    }

    fn bucket_of(&self, key: i64) -> usize {
        key.rem_euclid(self.buckets.len() as i64) as usize
    }

    /// Lock and return the window `(pred, curr)` with `key(pred) < key <=
    /// key(curr)`.
    fn locate(&self, b: usize, key: i64) -> Result<(u64, u64, Held<'_>)> {
        let bucket = &self.buckets[b];
        match self.mode {
            Mode::Coarse => {
                let g = bucket.coarse.lock();
                let mut pred = bucket.head;
                let mut curr = self.next(pred)?;
                while self.key(curr)? < key {
                    pred = curr;
                    curr = self.next(curr)?;
                }
                Ok((pred, curr, Held::Coarse(g)))
            }
            Mode::Fine => {
                let mut pg = self.locks.lock(bucket.head);
                let mut pred = bucket.head;
                let mut curr = self.next(pred)?;
                let mut cg = self.locks.lock(curr);
                while self.key(curr)? < key {
                    pred = curr;
                    pg = cg;
                    curr = self.next(curr)?;
                    cg = self.locks.lock(curr);
                }
                Ok((pred, curr, Held::Fine(pg, cg)))
            }
        }
    }

    fn add(&self, key: i64, value: u64) -> Result<bool> {
        check_key(key)?;
        let (pred, curr, _held) = self.locate(self.bucket_of(key), key)?;
        if self.key(curr)? == key {
            return Ok(false);
        }
        let mut tx = self.pool.begin()?;
        if self.named {
            let name = format!("node-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
            let node = tx.nv_alloc(&name, NAMED_NODE_SIZE)?;
            let mut buf = [0u8; NAMED_NODE_SIZE as usize];
            buf[..32].copy_from_slice(&name_bytes(&name));
            buf[32..64].copy_from_slice(&self.own_name(curr)?);
            buf[64..72].copy_from_slice(&key.to_le_bytes());
            buf[72..80].copy_from_slice(&value.to_le_bytes());
            tx.write(node.payload(), &buf)?;
            tx.write(payload(pred) + NEXT_NAME, &name_bytes(&name))?;
            tx.commit()?;
            let mut links = self.links.write();
            links.insert(pred, node.offset());
            links.insert(node.offset(), curr);
        } else {
            let node = tx.alloc(NODE_SIZE)?;
            write_node(&mut tx, node, key, value, curr)?;
            tx.write_u64(payload(pred) + NEXT, node.offset())?;
            tx.commit()?;
        }
        Ok(true)
    }

    fn remove(&self, key: i64) -> Result<bool> {
        check_key(key)?;
        let (pred, curr, _held) = self.locate(self.bucket_of(key), key)?;
        if self.key(curr)? != key {
            return Ok(false);
        }
        let succ = self.next(curr)?;
        let mut tx = self.pool.begin()?;
        if self.named {
            let own = self.own_name(curr)?;
            let mut next_name = [0u8; NAME_MAX];
            self.pool.read(payload(curr) + NEXT_NAME, &mut next_name)?;
            tx.write(payload(pred) + NEXT_NAME, &next_name)?;
            let own = name_str(&own)
                .ok_or_else(|| Error::Corruption(format!("node {curr:#x} has no name")))?;
            tx.nv_free(&own)?;
            // the transaction holds the allocator until it ends, so `curr`
            // cannot be handed out again before its link entry is gone
            {
                let mut links = self.links.write();
                links.insert(pred, succ);
                links.remove(&curr);
            }
            if let Err(e) = tx.commit() {
                let mut links = self.links.write();
                links.insert(pred, curr);
                links.insert(curr, succ);
                return Err(e);
            }
        } else {
            tx.write_u64(payload(pred) + NEXT, succ)?;
            tx.free(PRef::new(curr))?;
            tx.commit()?;
        }
        Ok(true)
    }

    fn contains(&self, key: i64) -> Result<bool> {
        check_key(key)?;
        let (_, curr, _held) = self.locate(self.bucket_of(key), key)?;
        Ok(self.key(curr)? == key)
    }

    fn bucket_entries(&self, b: usize) -> Result<Vec<(i64, u64)>> {
        let bucket = &self.buckets[b];
        let mut out = Vec::new();
        let mut cur = self.next(bucket.head)?;
        while cur != bucket.tail {
            out.push((self.key(cur)?, self.value(cur)?));
            cur = self.next(cur)?;
        }
        Ok(out)
    }

    fn entries(&self) -> Result<Vec<(i64, u64)>> {
        let mut out = Vec::new();
        for b in 0..self.buckets.len() {
            out.extend(self.bucket_entries(b)?);
        }
        out.sort_unstable();
        Ok(out)
    }

    fn node_offsets(&self) -> Result<Vec<u64>> {
        let mut out = vec![self.root];
        for bucket in &self.buckets {
            let mut cur = bucket.head;
            while cur != bucket.tail {
                out.push(cur);
                cur = self.next(cur)?;
            }
            out.push(bucket.tail);
        }
        Ok(out)
    }

    /// Persistent successor of `off` as stored in the pool, `None` at a
    /// null link.
    fn stored_next(&self, off: u64) -> Result<Option<u64>> {
        if self.named {
            let mut raw = [0u8; NAME_MAX];
            self.pool.read(payload(off) + NEXT_NAME, &mut raw)?;
            match name_str(&raw) {
                None => Ok(None),
                Some(n) => Ok(Some(self.pool.nv_lookup_quiet(&n)?.map_or(0, |r| r.offset()))),
            }
        } else {
            Ok(Some(self.pool.read_u64(payload(off) + NEXT)?).filter(|&n| n != 0))
        }
    }

    fn node_ok(&self, off: u64) -> Result<bool> {
        let min = if self.named { NAMED_NODE_SIZE } else { NODE_SIZE };
        Ok(off != 0 && self.pool.live_block(PRef::new(off))?.is_some_and(|h| h.size >= min))
    }

    /// Walk every bucket through the stored links with a two-cursor cycle
    /// check.
    fn verify_lists(&self) -> VerificationReport {
        let mut report = VerificationReport::default();
        for (b, bucket) in self.buckets.iter().enumerate() {
            if let Err(e) = self.verify_bucket(b as u32, bucket, &mut report) {
                report.push(Violation::BadRoot(format!("bucket {b}: {e}")));
            }
        }
        report
    }

    fn verify_bucket(&self, b: u32, bucket: &Bucket, report: &mut VerificationReport) -> Result<()> {
        for (off, want) in [(bucket.head, i64::MIN), (bucket.tail, i64::MAX)] {
            if !self.node_ok(off)? || self.key(off)? != want {
                report.push(Violation::BadSentinel { bucket: b, offset: off });
                return Ok(());
            }
        }
        let n = self.buckets.len() as i64;
        let mut cur = bucket.head;
        let mut slow = bucket.head;
        let mut prev = i64::MIN;
        let mut steps = 0u64;
        while cur != bucket.tail {
            let Some(next) = self.stored_next(cur)? else {
                report.push(Violation::TailUnreachable { bucket: b });
                return Ok(());
            };
            if !self.node_ok(next)? {
                report.push(Violation::Dangling {
                    bucket: b,
                    from: cur,
                    to: next,
                });
                return Ok(());
            }
            let k = self.key(next)?;
            if next != bucket.tail {
                if k <= prev {
                    report.push(Violation::Unsorted { bucket: b, offset: next });
                    return Ok(());
                }
                if n > 1 && k.rem_euclid(n) != b as i64 {
                    report.push(Violation::WrongBucket { bucket: b, key: k });
                }
                report.entries += 1;
            }
            prev = k;
            cur = next;
            steps += 1;
            if steps.is_multiple_of(2) {
                slow = self.stored_next(slow)?.unwrap_or(0);
            }
            if cur == slow {
                report.push(Violation::Cycle { bucket: b });
                return Ok(());
            }
        }
        if self.stored_next(bucket.tail)?.is_some() {
            report.push(Violation::BadSentinel {
                bucket: b,
                offset: bucket.tail,
            });
        }
        Ok(())
    }

    fn verify(&self) -> Result<VerificationReport> {
        let mut report = self.verify_lists();
        let audit = self.pool.audit_heap()?;
        if report.is_clean() {
            // meta block, log region, catalog (named), root record, sentinels
            let reserved = 3 + self.named as u64;
            let expected = reserved + 2 * self.buckets.len() as u64 + report.entries;
            if audit.live_blocks != expected {
                report.push(Violation::Leak {
                    expected,
                    found: audit.live_blocks,
                });
            }
        }
        report.violations.extend(audit.violations.into_iter().map(Violation::Heap));
        Ok(report)
    }
}

fn write_node(tx: &mut Tx<'_>, node: PRef, key: i64, value: u64, next: u64) -> Result<()> {
    let mut buf = [0u8; NODE_SIZE as usize];
    buf[0..8].copy_from_slice(&key.to_le_bytes());
    buf[8..16].copy_from_slice(&value.to_le_bytes());
    buf[16..24].copy_from_slice(&next.to_le_bytes());
    tx.write(node.payload(), &buf)
}

fn write_named(
    tx: &mut Tx<'_>,
    node: PRef,
    own: &str,
    next: Option<&str>,
    key: i64,
    value: u64,
) -> Result<()> {
    let mut buf = [0u8; NAMED_NODE_SIZE as usize];
    buf[..32].copy_from_slice(&name_bytes(own));
    if let Some(n) = next {
        buf[32..64].copy_from_slice(&name_bytes(n));
    }
    buf[64..72].copy_from_slice(&key.to_le_bytes());
    buf[72..80].copy_from_slice(&value.to_le_bytes());
    tx.write(node.payload(), &buf)
}

/// Concurrent persistent sorted set.
pub struct SortedSet<'p>(ListTable<'p>);

impl<'p> SortedSet<'p> {
    pub fn create(pool: &'p Pool, mode: Mode) -> Result<Self> {
        ListTable::create(pool, mode, KIND_SET, 1).map(SortedSet)
    }

    pub fn recover(pool: &'p Pool, mode: Mode) -> Result<Self> {
        ListTable::recover(pool, mode, KIND_SET).map(SortedSet)
    }

    pub fn pool(&self) -> &'p Pool {
        self.0.pool
    }

    pub fn mode(&self) -> Mode {
        self.0.mode
    }

    pub fn add(&self, key: i64, value: u64) -> Result<bool> {
        self.0.add(key, value)
    }

    pub fn remove(&self, key: i64) -> Result<bool> {
        self.0.remove(key)
    }

    pub fn contains(&self, key: i64) -> Result<bool> {
        self.0.contains(key)
    }

    pub fn entries(&self) -> Result<Vec<(i64, u64)>> {
        self.0.entries()
    }

    pub fn len(&self) -> Result<usize> {
        Ok(self.0.entries()?.len())
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    pub fn verify(&self) -> Result<VerificationReport> {
        self.0.verify()
    }

    pub fn node_offsets(&self) -> Result<Vec<u64>> {
        self.0.node_offsets()
    }

    pub fn locks(&self) -> &LockRegistry {
        &self.0.locks
    }
}

/// Closed-addressed hash table: `buckets` independent sorted lists.
pub struct ChainedTable<'p>(ListTable<'p>);

impl<'p> ChainedTable<'p> {
    pub fn create(pool: &'p Pool, mode: Mode, buckets: u32) -> Result<Self> {
        if !buckets.is_power_of_two() {
            return Err(Error::Config(format!("bucket count {buckets} must be a power of two")));
        }
        ListTable::create(pool, mode, KIND_HT_CLOSED, buckets).map(ChainedTable)
    }

    pub fn recover(pool: &'p Pool, mode: Mode) -> Result<Self> {
        ListTable::recover(pool, mode, KIND_HT_CLOSED).map(ChainedTable)
    }

    pub fn pool(&self) -> &'p Pool {
        self.0.pool
    }

    pub fn buckets(&self) -> u32 {
        self.0.buckets.len() as u32
    }

    pub fn bucket_of(&self, key: i64) -> u32 {
        self.0.bucket_of(key) as u32
    }

    /// Entries of one bucket in list order.
    pub fn bucket_entries(&self, bucket: u32) -> Result<Vec<(i64, u64)>> {
        self.0.bucket_entries(bucket as usize)
    }

    pub fn add(&self, key: i64, value: u64) -> Result<bool> {
        self.0.add(key, value)
    }

    pub fn remove(&self, key: i64) -> Result<bool> {
        self.0.remove(key)
    }

    pub fn contains(&self, key: i64) -> Result<bool> {
        self.0.contains(key)
    }

    pub fn entries(&self) -> Result<Vec<(i64, u64)>> {
        self.0.entries()
    }

    pub fn verify(&self) -> Result<VerificationReport> {
        self.0.verify()
    }

    pub fn node_offsets(&self) -> Result<Vec<u64>> {
        self.0.node_offsets()
    }

    pub fn locks(&self) -> &LockRegistry {
        &self.0.locks
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persist::PersistDomain;
    use crate::pheap::PoolOptions;

    fn pool(backend: Backend) -> Pool {
        let opts = PoolOptions::compact(backend, 2 << 20);
        Pool::create_in(PersistDomain::new(opts.size), &opts).unwrap()
    }

    #[test]
    fn empty_set_round_trip() {
        for backend in Backend::ALL {
            let p = pool(backend);
            let s = SortedSet::create(&p, Mode::Coarse).unwrap();
            assert!(s.is_empty().unwrap());
            assert!(s.verify().unwrap().is_clean(), "{backend}");
            assert!(!s.contains(5).unwrap());
            assert!(!s.remove(5).unwrap());
            assert!(matches!(SortedSet::create(&p, Mode::Coarse), Err(Error::Precondition(_))));
            drop(s);
            let img = p.close().unwrap().unwrap();
            let p = Pool::open_image(img).unwrap();
            let s = SortedSet::recover(&p, Mode::Fine).unwrap();
            assert_eq!(s.len().unwrap(), 0);
        }
    }

    #[test]
    fn add_remove_contains() {
        for backend in Backend::ALL {
            for mode in [Mode::Coarse, Mode::Fine] {
                let p = pool(backend);
                let s = SortedSet::create(&p, mode).unwrap();
                for k in [5, -3, 9, 0, 7] {
                    assert!(s.add(k, (k * 10) as u64).unwrap());
                }
                assert!(!s.add(5, 1).unwrap());
                assert!(s.contains(-3).unwrap());
                assert!(s.remove(9).unwrap());
                assert!(!s.contains(9).unwrap());
                assert_eq!(
                    s.entries().unwrap(),
                    vec![(-3, (-30i64) as u64), (0, 0), (5, 50), (7, 70)]
                );
                let rep = s.verify().unwrap();
                assert!(rep.is_clean(), "{backend} {mode}: {:?}", rep.violations);
                assert!(matches!(s.add(i64::MIN, 0), Err(Error::Precondition(_))));
            }
        }
    }

    #[test]
    fn duplicate_add_and_contains_write_nothing() {
        for backend in [Backend::Redo, Backend::Undo] {
            let p = pool(backend);
            let s = SortedSet::create(&p, Mode::Fine).unwrap();
            s.add(4, 4).unwrap();
            let before = p.domain().events();
            let image = p.domain().volatile_image();
            assert!(!s.add(4, 9).unwrap());
            assert!(s.contains(4).unwrap());
            assert!(!s.contains(5).unwrap());
            assert_eq!(p.domain().events(), before);
            assert!(p.domain().volatile_image() == image);
        }
    }

    #[test]
    fn remove_frees_the_node() {
        let p = pool(Backend::Redo);
        let s = SortedSet::create(&p, Mode::Coarse).unwrap();
        let base = p.audit_heap().unwrap().live_blocks;
        s.add(1, 1).unwrap();
        assert_eq!(p.audit_heap().unwrap().live_blocks, base + 1);
        s.remove(1).unwrap();
        assert_eq!(p.audit_heap().unwrap().live_blocks, base);
    }

    #[test]
    fn recovers_committed_inserts() {
        for backend in [Backend::Redo, Backend::Undo] {
            let p = pool(backend);
            let s = SortedSet::create(&p, Mode::Coarse).unwrap();
            for k in 1..=5 {
                s.add(k, 0).unwrap();
            }
            let img = p.domain().durable_image().unwrap();
            let p2 = Pool::open_image(img).unwrap();
            let s2 = SortedSet::recover(&p2, Mode::Coarse).unwrap();
            let keys: Vec<i64> = s2.entries().unwrap().into_iter().map(|e| e.0).collect();
            assert_eq!(keys, vec![1, 2, 3, 4, 5]);
        }
    }

    #[test]
    fn named_recovery_resolves_each_node() {
        let p = pool(Backend::Named);
        let s = SortedSet::create(&p, Mode::Coarse).unwrap();
        for k in [3, 1, 2] {
            s.add(k, 0).unwrap();
        }
        drop(s);
        let p = Pool::open_image(p.close().unwrap().unwrap()).unwrap();
        let before = p.stats().name_resolutions;
        let s = SortedSet::recover(&p, Mode::Coarse).unwrap();
        assert_eq!(p.stats().name_resolutions - before, 3);
        assert_eq!(s.len().unwrap(), 3);
        // fresh ids continue after the recovered ones
        s.add(10, 0).unwrap();
        assert!(p.nv_names().unwrap().contains(&"node-3".to_string()));
    }

    #[test]
    fn dangling_next_is_reported() {
        let p = pool(Backend::Redo);
        let s = SortedSet::create(&p, Mode::Coarse).unwrap();
        s.add(1, 1).unwrap();
        s.add(2, 2).unwrap();
        let first = s.node_offsets().unwrap()[2];
        p.domain().store(payload(first) + NEXT, &0x5550u64.to_le_bytes()).unwrap();
        let rep = s.verify().unwrap();
        assert!(
            rep.violations.iter().any(|v| matches!(v, Violation::Dangling { .. })),
            "{:?}",
            rep.violations
        );
    }

    #[test]
    fn cycle_is_reported_and_blocks_recovery() {
        let p = pool(Backend::Undo);
        let s = SortedSet::create(&p, Mode::Coarse).unwrap();
        for k in 1..=4 {
            s.add(k, 0).unwrap();
        }
        let nodes = s.node_offsets().unwrap();
        // node 4 points back at node 2
        p.domain().store(payload(nodes[5]) + NEXT, &nodes[3].to_le_bytes()).unwrap();
        let rep = s.verify().unwrap();
        assert!(rep.violations.iter().any(|v| matches!(v, Violation::Unsorted { .. } | Violation::Cycle { .. })));
        p.domain().store(payload(nodes[3]), &9i64.to_le_bytes()).unwrap();
        drop(s);
        assert!(matches!(SortedSet::recover(&p, Mode::Coarse), Err(Error::Corruption(_))));
    }

    #[test]
    fn bucket_routing() {
        let p = pool(Backend::Redo);
        let t = ChainedTable::create(&p, Mode::Fine, 16).unwrap();
        assert_eq!(t.bucket_of(17), 1);
        assert_eq!(t.bucket_of(-1), 15);
        for k in -64..=64 {
            if k % 3 == 0 {
                t.add(k, 0).unwrap();
            }
        }
        for k in -64..=64i64 {
            let in_bucket = t
                .bucket_entries(t.bucket_of(k))
                .unwrap()
                .iter()
                .any(|e| e.0 == k);
            assert_eq!(t.contains(k).unwrap(), in_bucket);
        }
        assert!(t.verify().unwrap().is_clean());
        assert!(matches!(ChainedTable::create(&p, Mode::Fine, 12), Err(Error::Config(_))));
    }

    #[test]
    fn concurrent_fine_adds() {
        for backend in Backend::ALL {
            let p = {
                let opts = PoolOptions::compact(backend, 4 << 20).log_slots(16, 64 << 10);
                Pool::create_in(PersistDomain::new(opts.size), &opts).unwrap()
            };
            let s = SortedSet::create(&p, Mode::Fine).unwrap();
            std::thread::scope(|sc| {
                for t in 0..8i64 {
                    let s = &s;
                    sc.spawn(move || {
                        for i in 0..40 {
                            s.add(i * 8 + t, 0).unwrap();
                            if i % 4 == 0 {
                                s.remove(i * 8 + t).unwrap();
                            }
                        }
                    });
                }
            });
            assert_eq!(s.len().unwrap(), 8 * 30);
            let rep = s.verify().unwrap();
            assert!(rep.is_clean(), "{backend}: {:?}", rep.violations);
        }
    }
}
