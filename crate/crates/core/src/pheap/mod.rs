//! Persistent heap over a single pool file.
//!
//! Pool file layout, all integers little-endian:
//!
//! ```text
//! 0..8     magic "PMKTPOOL"
//! 8..12    version (1)
//! 12..16   backend tag (1 redo, 2 undo, 3 named)
//! 16..24   pool size
//! 24..32   root reference
//! 32..40   allocator metadata reference
//! 40..48   log region reference
//! 48       clean shutdown flag
//! 4096..   object space, tiled by allocator blocks
//! ```
//!
//! The object space starts with the allocator metadata block, followed by
//! the backend's page-aligned log region (and, for the named backend, the
//! name catalog). Everything after that is one free block on a fresh pool.

pub(crate) mod alloc;

use std::fmt;
use std::fs::OpenOptions;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, MutexGuard};

use crate::error::{Error, Result};
use crate::log::LogEngine;
use crate::named::NamedEngine;
use crate::persist::{PersistDomain, PoolImage, SimMode};
use crate::txn::{NestGuard, Transaction, Tx, TxMem};
use crate::{named, redo, undo};

pub use alloc::{BlockHeader, BlockState, HeapAudit, HeapViolation, ALIGN, BLOCK_HEADER};

pub const POOL_MAGIC: [u8; 8] = *b"PMKTPOOL";
pub const POOL_VERSION: u32 = 1;
pub const PAGE_SIZE: u64 = 4096;
pub const OBJECT_SPACE_START: u64 = 4096;

pub(crate) const OFF_ROOT: u64 = 24;
pub(crate) const OFF_CLEAN: u64 = 48;

const META_PAYLOAD: u64 = PAGE_SIZE - 2 * BLOCK_HEADER;
const LOG_REGION_PAYLOAD: u64 = OBJECT_SPACE_START + PAGE_SIZE;

/// Offset-based persistent reference to an allocation header. Zero is null.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PRef(u64);

impl PRef {
    pub const NULL: PRef = PRef(0);

    pub const fn new(offset: u64) -> Self {
        PRef(offset)
    }

    pub const fn offset(self) -> u64 {
        self.0
    }

    pub const fn is_null(self) -> bool {
        self.0 == 0
    }

    /// Offset of the first payload byte.
    pub const fn payload(self) -> u64 {
        self.0 + BLOCK_HEADER
    }
}

impl fmt::Debug for PRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PRef({:#x})", self.0)
    }
}

impl fmt::Display for PRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backend {
    Redo,
    Undo,
    Named,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Redo, Backend::Undo, Backend::Named];

    pub fn tag(self) -> u32 {
        match self {
            Backend::Redo => 1,
            Backend::Undo => 2,
            Backend::Named => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(Backend::Redo),
            2 => Some(Backend::Undo),
            3 => Some(Backend::Named),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Redo => "redo",
            Backend::Undo => "undo",
            Backend::Named => "named",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "redo" => Ok(Backend::Redo),
            "undo" => Ok(Backend::Undo),
            "named" => Ok(Backend::Named),
            other => Err(Error::Config(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolHeader {
    pub version: u32,
    pub backend: Backend,
    pub pool_size: u64,
    pub root: PRef,
    pub alloc_meta: PRef,
    pub log_region: PRef,
    pub clean_shutdown: bool,
}

impl PoolHeader {
    pub const ENCODED_LEN: usize = 49;

    pub fn encode(&self) -> [u8; Self::ENCODED_LEN] {
        let mut b = [0u8; Self::ENCODED_LEN];
        b[0..8].copy_from_slice(&POOL_MAGIC);
        b[8..12].copy_from_slice(&self.version.to_le_bytes());
        b[12..16].copy_from_slice(&self.backend.tag().to_le_bytes());
        b[16..24].copy_from_slice(&self.pool_size.to_le_bytes());
        b[24..32].copy_from_slice(&self.root.offset().to_le_bytes());
        b[32..40].copy_from_slice(&self.alloc_meta.offset().to_le_bytes());
        b[40..48].copy_from_slice(&self.log_region.offset().to_le_bytes());
        b[48] = self.clean_shutdown as u8;
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < Self::ENCODED_LEN || b[0..8] != POOL_MAGIC {
            return Err(Error::Corruption("bad pool magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != POOL_VERSION {
            return Err(Error::Corruption(format!("unsupported pool version {version}")));
        }
        let backend = Backend::from_tag(u32_at(12))
            .ok_or_else(|| Error::Corruption(format!("unknown backend tag {}", u32_at(12))))?;
        let header = PoolHeader {
            version,
            backend,
            pool_size: u64_at(16),
            root: PRef(u64_at(24)),
            alloc_meta: PRef(u64_at(32)),
            log_region: PRef(u64_at(40)),
            clean_shutdown: b[48] != 0,
        };
        for (what, r) in [
            ("root", header.root),
            ("allocator metadata", header.alloc_meta),
            ("log region", header.log_region),
        ] {
            if !r.is_null() && (r.0 < OBJECT_SPACE_START || r.0 >= header.pool_size) {
                return Err(Error::Corruption(format!("{what} reference {r} out of range")));
            }
        }
        if header.alloc_meta.is_null() || header.log_region.is_null() {
            return Err(Error::Corruption("missing allocator or log region".into()));
        }
        Ok(header)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolOptions {
    pub backend: Backend,
    pub size: u64,
    /// Redo/undo: number of per-thread log slots.
    pub log_slots: u32,
    /// Redo/undo: bytes per log slot.
    pub log_slot_size: u64,
    /// Undo: snapshot unit in bytes (64, 256 or 4096).
    pub snapshot_unit: u64,
    /// Named: bytes reserved for checkpoint epochs.
    pub checkpoint_log_size: u64,
    /// Named: maximum number of catalog entries.
    pub catalog_capacity: u32,
    /// Overwrite an existing pool file.
    pub truncate: bool,
}

impl PoolOptions {
    pub fn new(backend: Backend, size: u64) -> Self {
        PoolOptions {
            backend,
            size,
            log_slots: 64,
            log_slot_size: 1 << 20,
            snapshot_unit: 4096,
            checkpoint_log_size: 4 << 20,
            catalog_capacity: 4096,
            truncate: false,
        }
    }

    pub fn log_slots(mut self, slots: u32, slot_size: u64) -> Self {
        self.log_slots = slots;
        self.log_slot_size = slot_size;
        self
    }

    pub fn snapshot_unit(mut self, unit: u64) -> Self {
        self.snapshot_unit = unit;
        self
    }

    pub fn checkpoint_log(mut self, bytes: u64) -> Self {
        self.checkpoint_log_size = bytes;
        self
    }

    pub fn catalog_capacity(mut self, entries: u32) -> Self {
        self.catalog_capacity = entries;
        self
    }

    pub fn truncate(mut self, yes: bool) -> Self {
        self.truncate = yes;
        self
    }

    /// Small geometry for tests and crash sweeps.
    pub fn compact(backend: Backend, size: u64) -> Self {
        PoolOptions::new(backend, size)
            .log_slots(4, 64 << 10)
            .checkpoint_log(256 << 10)
            .catalog_capacity(512)
    }

    fn log_region_bytes(&self) -> Result<u64> {
        match self.backend {
            Backend::Redo | Backend::Undo => {
                if self.log_slots == 0 {
                    return Err(Error::Config("at least one log slot is required".into()));
                }
                if self.log_slot_size < 256 || !self.log_slot_size.is_multiple_of(64) {
                    return Err(Error::Config(
                        "log slot size must be a multiple of 64 and at least 256".into(),
                    ));
                }
                if self.backend == Backend::Undo && ![64, 256, 4096].contains(&self.snapshot_unit) {
                    return Err(Error::Config("snapshot unit must be 64, 256 or 4096".into()));
                }
                if self.backend == Backend::Undo && self.log_slot_size < 64 + self.snapshot_unit {
                    return Err(Error::Config(
                        "log slot cannot hold one snapshot and a commit marker".into(),
                    ));
                }
                Ok(alloc::round_up(
                    64 + self.log_slots as u64 * self.log_slot_size,
                    PAGE_SIZE,
                ))
            }
            Backend::Named => {
                if self.checkpoint_log_size < 2 * PAGE_SIZE {
                    return Err(Error::Config("checkpoint log too small".into()));
                }
                if self.catalog_capacity == 0 {
                    return Err(Error::Config("catalog capacity must be positive".into()));
                }
                Ok(alloc::round_up(self.checkpoint_log_size, PAGE_SIZE))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub clean_shutdown: bool,
    /// Redo: committed transactions replayed from the log.
    pub replayed: u64,
    /// Redo: uncommitted or damaged transactions dropped.
    pub discarded: u64,
    /// Undo: uncommitted transactions rolled back.
    pub rolled_back: u64,
    /// Undo: committed transactions whose slot was only truncated.
    pub committed: u64,
    /// Named: committed checkpoint epochs replayed.
    pub epochs_replayed: u64,
    /// Named: partial trailing epochs ignored.
    pub epochs_discarded: u64,
    /// Named: live catalog entries after recovery.
    pub catalog_entries: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub bytes_logged: u64,
    pub commits: u64,
    /// Persistence event index of the most recent durable acknowledgment
    /// (commit marker fence or checkpoint marker fence).
    pub last_ack_event: u64,
    pub name_resolutions: u64,
}

#[derive(Default)]
pub(crate) struct StatCells {
    pub bytes_logged: AtomicU64,
    pub commits: AtomicU64,
    pub last_ack_event: AtomicU64,
    pub name_resolutions: AtomicU64,
}

impl StatCells {
    pub(crate) fn logged(&self, bytes: u64) {
        self.bytes_logged.fetch_add(bytes, Ordering::Relaxed);
    }

    pub(crate) fn ack(&self, event: u64) {
        self.last_ack_event.store(event, Ordering::Release);
        self.commits.fetch_add(1, Ordering::AcqRel);
    }
}

pub(crate) enum Engine {
    Log(LogEngine),
    Named(NamedEngine),
}

static NEXT_POOL_ID: AtomicU64 = AtomicU64::new(1);

pub struct Pool {
    domain: PersistDomain,
    id: u64,
    backend: Backend,
    size: u64,
    heap: alloc::Heap,
    log_region: PRef,
    log_end: u64,
    alloc_lock: Mutex<()>,
    pub(crate) stats: StatCells,
    pub(crate) engine: Engine,
    recovery: RecoveryReport,
}

impl fmt::Debug for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pool")
            .field("backend", &self.backend)
            .field("size", &self.size)
            .field("events", &self.domain.events())
            .finish()
    }
}

/// Writes straight to the domain, flushing each store. Used only while a
/// pool is being laid out and nothing else can observe it.
struct SetupWriter<'a>(&'a PersistDomain);

impl TxMem for SetupWriter<'_> {
    fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.0.read(offset, buf)
    }

    fn write(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        self.0.store(offset, data)?;
        self.0.flush(offset, data.len() as u64)
    }
}

impl Pool {
    /// Create a pool file at `path`.
    pub fn create(path: impl AsRef<Path>, opts: &PoolOptions, mode: SimMode) -> Result<Pool> {
        let path = path.as_ref();
        opts.log_region_bytes()?;
        check_size(opts)?;
        if path.exists() && !opts.truncate {
            return Err(Error::Exists(path.to_path_buf()));
        }
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.set_len(opts.size)?;
        let domain = PersistDomain::with_file(file, mode)?;
        Self::create_in(domain, opts)
    }

    /// Lay out a new pool inside an existing zero-filled domain.
    pub fn create_in(domain: PersistDomain, opts: &PoolOptions) -> Result<Pool> {
        let log_bytes = opts.log_region_bytes()?;
        check_size(opts)?;
        if domain.size() != opts.size {
            return Err(Error::Config(format!(
                "domain size {} does not match pool size {}",
                domain.size(),
                opts.size
            )));
        }
        let size = opts.size;
        let meta = PRef(OBJECT_SPACE_START);
        let log_region = PRef(LOG_REGION_PAYLOAD - BLOCK_HEADER);
        let mut next = LOG_REGION_PAYLOAD + log_bytes;
        let mut w = SetupWriter(&domain);
        let live = |size| BlockHeader {
            size,
            next_free: 0,
            state: BlockState::Live,
        };
        w.write(meta.0, &alloc::encode_header(meta.0, &live(META_PAYLOAD)))?;
        w.write(log_region.0, &alloc::encode_header(log_region.0, &live(log_bytes)))?;
        let catalog = if opts.backend == Backend::Named {
            let bytes = alloc::round_up(named::catalog_bytes(opts.catalog_capacity), ALIGN);
            let c = PRef(next);
            w.write(c.0, &alloc::encode_header(c.0, &live(bytes)))?;
            next += BLOCK_HEADER + bytes;
            Some(c)
        } else {
            None
        };
        let free = BlockHeader {
            size: size - next - BLOCK_HEADER,
            next_free: 0,
            state: BlockState::Free,
        };
        w.write(next, &alloc::encode_header(next, &free))?;
        w.write_u64(meta.payload(), next)?;
        match opts.backend {
            Backend::Redo | Backend::Undo => {
                LogEngine::format(&mut w, opts, log_region.payload(), log_bytes)?
            }
            Backend::Named => named::format(
                &mut w,
                log_region.payload(),
                log_bytes,
                catalog.expect("catalog block"),
                opts.catalog_capacity,
            )?,
        }
        domain.fence()?;

        let header = PoolHeader {
            version: POOL_VERSION,
            backend: opts.backend,
            pool_size: size,
            root: PRef::NULL,
            alloc_meta: meta,
            log_region,
            clean_shutdown: true,
        };
        let bytes = header.encode();
        domain.store(0, &bytes)?;
        domain.flush(0, bytes.len() as u64)?;
        domain.fence()?;
        Self::open_in(domain)
    }

    pub fn open(path: impl AsRef<Path>, mode: SimMode) -> Result<Pool> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        if file.metadata()?.len() < OBJECT_SPACE_START {
            return Err(Error::Corruption("pool file too short".into()));
        }
        Self::open_in(PersistDomain::with_file(file, mode)?)
    }

    pub fn open_image(image: PoolImage) -> Result<Pool> {
        Self::open_in(PersistDomain::from_image(image))
    }

    /// Validate the header, run backend recovery and start a session.
    pub fn open_in(domain: PersistDomain) -> Result<Pool> {
        if domain.size() < OBJECT_SPACE_START {
            return Err(Error::Corruption("pool smaller than its header".into()));
        }
        let mut raw = [0u8; PoolHeader::ENCODED_LEN];
        domain.read(0, &mut raw)?;
        let header = PoolHeader::decode(&raw)?;
        if header.pool_size != domain.size() {
            return Err(Error::Corruption(format!(
                "header size {} does not match file length {}",
                header.pool_size,
                domain.size()
            )));
        }
        let heap = alloc::Heap {
            start: OBJECT_SPACE_START,
            end: header.pool_size,
            meta: header.alloc_meta,
        };
        let log_hdr = alloc::read_header(&ReadView(&domain), &heap, header.log_region.0)?
            .filter(|h| h.state == BlockState::Live)
            .ok_or_else(|| Error::Corruption("log region header invalid".into()))?;
        let region = header.log_region.payload();
        let engine = match header.backend {
            Backend::Redo | Backend::Undo => {
                Engine::Log(LogEngine::load(&domain, header.backend, region, log_hdr.size)?)
            }
            Backend::Named => Engine::Named(NamedEngine::load(&domain, &heap, region, log_hdr.size)?),
        };
        let mut pool = Pool {
            domain,
            id: NEXT_POOL_ID.fetch_add(1, Ordering::Relaxed),
            backend: header.backend,
            size: header.pool_size,
            heap,
            log_region: header.log_region,
            log_end: region + log_hdr.size,
            alloc_lock: Mutex::new(()),
            stats: StatCells::default(),
            engine,
            recovery: RecoveryReport::default(),
        };
        let mut report = pool.recover_inner(header.clean_shutdown)?;
        report.clean_shutdown = header.clean_shutdown;
        if let Engine::Log(log) = &mut pool.engine {
            log.start_session(&pool.domain)?;
        }
        pool.set_clean(false)?;
        pool.recovery = report;
        Ok(pool)
    }

    fn recover_inner(&self, clean: bool) -> Result<RecoveryReport> {
        match self.backend {
            Backend::Redo if clean => Ok(RecoveryReport::default()),
            Backend::Undo if clean => Ok(RecoveryReport::default()),
            Backend::Redo => redo::recover(self),
            Backend::Undo => undo::recover(self),
            Backend::Named => named::recover(self, clean),
        }
    }

    /// Run backend recovery again. Must be called with no transaction in
    /// flight; running it on an already recovered pool changes nothing.
    pub fn recover(&self) -> Result<RecoveryReport> {
        let _alloc = self.alloc_lock.lock();
        self.recover_inner(false)
    }

    /// Report produced by the recovery that ran when this pool was opened.
    pub fn recovery_report(&self) -> &RecoveryReport {
        &self.recovery
    }

    fn set_clean(&self, clean: bool) -> Result<()> {
        self.domain.store(OFF_CLEAN, &[clean as u8])?;
        self.domain.flush(OFF_CLEAN, 1)?;
        self.domain.fence()
    }

    /// Clean shutdown: checkpoint (named backend), set the clean flag and
    /// sync the backing file. Returns the final durable image in simulate
    /// mode.
    pub fn close(self) -> Result<Option<PoolImage>> {
        if self.backend == Backend::Named {
            self.checkpoint()?;
        }
        self.set_clean(true)?;
        self.domain.sync()?;
        match self.domain.mode() {
            SimMode::Simulate => Ok(Some(self.domain.durable_image()?)),
            SimMode::Direct => Ok(None),
        }
    }

    pub fn domain(&self) -> &PersistDomain {
        &self.domain
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub(crate) fn heap(&self) -> alloc::Heap {
        self.heap
    }

    pub fn log_region(&self) -> PRef {
        self.log_region
    }

    /// Byte range `[start, end)` of the log region payload.
    pub fn log_region_range(&self) -> (u64, u64) {
        (self.log_region.payload(), self.log_end)
    }

    /// Transactional writes must land in the object space and stay clear
    /// of the log region. The root field is the one header word a redo or
    /// undo transaction may change.
    pub(crate) fn check_target(&self, offset: u64, len: u64) -> Result<()> {
        if offset == OFF_ROOT && len == 8 && self.backend != Backend::Named {
            return Ok(());
        }
        let end = offset.saturating_add(len);
        let (log_start, log_end) = self.log_region_range();
        if offset < OBJECT_SPACE_START || end > self.size || (offset < log_end && end > log_start) {
            return Err(Error::Range {
                offset,
                len,
                limit: self.size,
            });
        }
        Ok(())
    }

    /// Blocks the pool itself owns and callers may never free.
    pub(crate) fn is_reserved(&self, r: PRef) -> bool {
        r == self.log_region || matches!(&self.engine, Engine::Named(n) if n.catalog_ref() == r)
    }

    pub(crate) fn alloc_lock(&self) -> MutexGuard<'_, ()> {
        self.alloc_lock.lock()
    }

    pub fn header(&self) -> Result<PoolHeader> {
        let mut raw = [0u8; PoolHeader::ENCODED_LEN];
        self.domain.read(0, &mut raw)?;
        PoolHeader::decode(&raw)
    }

    pub fn stats(&self) -> PoolStats {
        PoolStats {
            bytes_logged: self.stats.bytes_logged.load(Ordering::Relaxed),
            commits: self.stats.commits.load(Ordering::Acquire),
            last_ack_event: self.stats.last_ack_event.load(Ordering::Acquire),
            name_resolutions: self.stats.name_resolutions.load(Ordering::Relaxed),
        }
    }

    pub fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.domain.read(offset, buf)
    }

    pub fn read_u64(&self, offset: u64) -> Result<u64> {
        self.domain.read_u64(offset)
    }

    /// Header of `r` if it names a live allocation.
    pub fn live_block(&self, r: PRef) -> Result<Option<BlockHeader>> {
        alloc::live_header(&ReadView(&self.domain), &self.heap, r)
    }

    pub fn read_field(&self, r: PRef, field_offset: u64, buf: &mut [u8]) -> Result<()> {
        let h = self.live_block(r)?.ok_or(Error::InvalidRef(r))?;
        crate::txn::check_field(field_offset, buf.len() as u64, h.size)?;
        self.domain.read(r.payload() + field_offset, buf)
    }

    pub fn get_root(&self) -> Result<PRef> {
        Ok(PRef(self.domain.read_u64(OFF_ROOT)?))
    }

    /// Durably point the root at `r` (null or a live allocation).
    pub fn set_root(&self, r: PRef) -> Result<()> {
        if !r.is_null() && self.live_block(r)?.is_none() {
            return Err(Error::InvalidRef(r));
        }
        self.domain.store(OFF_ROOT, &r.0.to_le_bytes())?;
        self.domain.flush(OFF_ROOT, 8)?;
        self.domain.fence()
    }

    /// Start a transaction on this pool's backend.
    pub fn begin(&self) -> Result<Tx<'_>> {
        let nest = NestGuard::enter(self.id)?;
        match &self.engine {
            Engine::Log(log) => match self.backend {
                Backend::Redo => Ok(Tx::Redo(redo::RedoTxn::begin(self, log, nest)?)),
                _ => Ok(Tx::Undo(undo::UndoTxn::begin(self, log, nest)?)),
            },
            Engine::Named(n) => Ok(Tx::Named(named::NamedTxn::begin(self, n, nest)?)),
        }
    }

    /// Allocate in a transaction of its own.
    pub fn p_alloc(&self, size: u64) -> Result<PRef> {
        let mut tx = self.begin()?;
        let r = tx.alloc(size)?;
        tx.commit()?;
        Ok(r)
    }

    /// Free in a transaction of its own.
    pub fn p_free(&self, r: PRef) -> Result<()> {
        let mut tx = self.begin()?;
        tx.free(r)?;
        tx.commit()
    }

    /// Walk every block header and the free list. Call at quiescence.
    pub fn audit_heap(&self) -> Result<HeapAudit> {
        alloc::audit(&ReadView(&self.domain), &self.heap)
    }

    pub(crate) fn named_engine(&self) -> Result<&NamedEngine> {
        match &self.engine {
            Engine::Named(n) => Ok(n),
            Engine::Log(_) => Err(Error::Backend(format!(
                "{} pool has no checkpoint log",
                self.backend
            ))),
        }
    }

    pub(crate) fn log_engine(&self) -> Result<&LogEngine> {
        match &self.engine {
            Engine::Log(l) => Ok(l),
            Engine::Named(_) => Err(Error::Backend("named pool has no transaction log".into())),
        }
    }
}

fn check_size(opts: &PoolOptions) -> Result<()> {
    let log = opts.log_region_bytes()?;
    let mut need = LOG_REGION_PAYLOAD + log;
    if opts.backend == Backend::Named {
        need += BLOCK_HEADER + alloc::round_up(named::catalog_bytes(opts.catalog_capacity), ALIGN);
    }
    need += BLOCK_HEADER + PAGE_SIZE;
    if !opts.size.is_multiple_of(PAGE_SIZE) {
        return Err(Error::Config(format!(
            "pool size {} is not a multiple of {PAGE_SIZE}",
            opts.size
        )));
    }
    if opts.size < need {
        return Err(Error::Config(format!(
            "pool size {} below minimum {} for this geometry",
            opts.size,
            alloc::round_up(need, PAGE_SIZE)
        )));
    }
    Ok(())
}

/// Read-only view of the volatile image.
pub(crate) struct ReadView<'a>(pub &'a PersistDomain);

impl TxMem for ReadView<'_> {
    fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.0.read(offset, buf)
    }

    fn write(&mut self, _offset: u64, _data: &[u8]) -> Result<()> {
        Err(Error::Precondition("read-only view"))
    }
}
