//! Persistence-domain model.
//!
//! A [`PersistDomain`] keeps two copies of the pool: the volatile image that
//! CPU stores land in, and the durable image that survives a crash. A line
//! only moves from the first to the second when it has been flushed and a
//! fence has run since. Every flush and every fence is a numbered
//! persistence event; the crash harness arms one event index and the domain
//! captures the durable state at that instant.
//!
//! `Direct` mode drops the shadow images and maps the pool file instead:
//! flushes are recorded and a fence forces the recorded ranges to storage
//! with `msync`. It exists for wall-clock benchmarking and cannot produce
//! crash images.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::ops::Deref;
use std::os::unix::fs::FileExt;
use std::sync::atomic::{AtomicU64, Ordering};

use memmap2::MmapMut;
use parking_lot::RwLock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LINE_SIZE: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SimMode {
    Simulate,
    Direct,
}

impl SimMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SimMode::Simulate => "simulate",
            SimMode::Direct => "direct",
        }
    }
}

impl std::str::FromStr for SimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulate" => Ok(SimMode::Simulate),
            "direct" => Ok(SimMode::Direct),
            other => Err(Error::Config(format!("unknown sim mode {other:?}"))),
        }
    }
}

/// Raw bytes of a pool, laid out exactly as the pool file.
#[derive(Clone, PartialEq, Eq)]
pub struct PoolImage(Vec<u8>);

impl PoolImage {
    pub fn from_vec(bytes: Vec<u8>) -> Self {
        PoolImage(bytes)
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.0
    }
}

impl Deref for PoolImage {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for PoolImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PoolImage({} bytes)", self.0.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrashPlan {
    pub crash_after_event: u64,
    pub adversary_seed: u64,
    pub adversary_enabled: bool,
}

impl CrashPlan {
    pub fn at(crash_after_event: u64) -> Self {
        CrashPlan {
            crash_after_event,
            adversary_seed: 0,
            adversary_enabled: false,
        }
    }

    pub fn with_adversary(mut self, seed: u64) -> Self {
        self.adversary_seed = seed;
        self.adversary_enabled = true;
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PersistCounters {
    pub events: u64,
    pub flush_calls: u64,
    pub fence_calls: u64,
    pub bytes_flushed: u64,
}

impl PersistCounters {
    pub fn since(&self, earlier: &PersistCounters) -> PersistCounters {
        PersistCounters {
            events: self.events - earlier.events,
            flush_calls: self.flush_calls - earlier.flush_calls,
            fence_calls: self.fence_calls - earlier.fence_calls,
            bytes_flushed: self.bytes_flushed - earlier.bytes_flushed,
        }
    }
}

struct CrashCapture {
    event: u64,
    durable: Vec<u8>,
    // flushed-but-unfenced lines with their volatile content at capture time
    pending: Vec<(u64, Vec<u8>)>,
}

enum Storage {
    Sim {
        volatile: Vec<u8>,
        durable: Vec<u8>,
        file: Option<File>,
    },
    Direct {
        map: MmapMut,
    },
}

impl Storage {
    fn volatile(&self) -> &[u8] {
        match self {
            Storage::Sim { volatile, .. } => volatile,
            Storage::Direct { map } => map,
        }
    }

    fn volatile_mut(&mut self) -> &mut [u8] {
        match self {
            Storage::Sim { volatile, .. } => volatile,
            Storage::Direct { map } => map,
        }
    }
}

struct State {
    storage: Storage,
    pending: BTreeSet<u64>,
    // lines stored to since they were last made durable
    unpersisted: Vec<u64>,
    armed: Option<u64>,
    capture: Option<CrashCapture>,
}

impl State {
    fn mark_unpersisted(&mut self, first: u64, last: u64) {
        for line in first..=last {
            self.unpersisted[(line / 64) as usize] |= 1 << (line % 64);
        }
    }

    fn clear_unpersisted(&mut self, line: u64) {
        self.unpersisted[(line / 64) as usize] &= !(1 << (line % 64));
    }
}

pub struct PersistDomain {
    state: RwLock<State>,
    size: u64,
    line_size: u64,
    mode: SimMode,
    events: AtomicU64,
    flush_calls: AtomicU64,
    fence_calls: AtomicU64,
    bytes_flushed: AtomicU64,
}

impl fmt::Debug for PersistDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PersistDomain")
            .field("size", &self.size)
            .field("mode", &self.mode)
            .field("events", &self.events())
            .finish()
    }
}

impl PersistDomain {
    /// Fresh zero-filled simulated domain with no backing file.
    pub fn new(size: u64) -> Self {
        Self::from_storage(
            Storage::Sim {
                volatile: vec![0; size as usize],
                durable: vec![0; size as usize],
                file: None,
            },
            size,
            LINE_SIZE,
            SimMode::Simulate,
        )
    }

    /// Simulated domain whose volatile and durable images both start as `image`.
    pub fn from_image(image: PoolImage) -> Self {
        let size = image.len() as u64;
        let durable = image.into_vec();
        Self::from_storage(
            Storage::Sim {
                volatile: durable.clone(),
                durable,
                file: None,
            },
            size,
            LINE_SIZE,
            SimMode::Simulate,
        )
    }

    /// Domain backed by `file`. In simulate mode the durable image is loaded
    /// from the file and every fence mirrors persisted lines back into it.
    pub fn with_file(file: File, mode: SimMode) -> Result<Self> {
        let size = file.metadata()?.len();
        let storage = match mode {
            SimMode::Simulate => {
                let mut durable = vec![0; size as usize];
                file.read_exact_at(&mut durable, 0)?;
                Storage::Sim {
                    volatile: durable.clone(),
                    durable,
                    file: Some(file),
                }
            }
            SimMode::Direct => {
                // SAFETY: the pool file is owned by this process for the
                // lifetime of the mapping; concurrent external modification
                // is outside the supported use.
                let map = unsafe { MmapMut::map_mut(&file)? };
                Storage::Direct { map }
            }
        };
        Ok(Self::from_storage(storage, size, LINE_SIZE, mode))
    }

    /// Zero-filled simulated domain with a non-default line size.
    pub fn with_line_size(size: u64, line_size: u64) -> Self {
        assert!(line_size.is_power_of_two(), "line size must be a power of two");
        Self::from_storage(
            Storage::Sim {
                volatile: vec![0; size as usize],
                durable: vec![0; size as usize],
                file: None,
            },
            size,
            line_size,
            SimMode::Simulate,
        )
    }

    fn from_storage(storage: Storage, size: u64, line_size: u64, mode: SimMode) -> Self {
        let lines = size.div_ceil(line_size);
        PersistDomain {
            state: RwLock::new(State {
                storage,
                pending: BTreeSet::new(),
                unpersisted: vec![0; lines.div_ceil(64) as usize],
                armed: None,
                capture: None,
            }),
            size,
            line_size,
            mode,
            events: AtomicU64::new(0),
            flush_calls: AtomicU64::new(0),
            fence_calls: AtomicU64::new(0),
            bytes_flushed: AtomicU64::new(0),
        }
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn line_size(&self) -> u64 {
        self.line_size
    }

    pub fn mode(&self) -> SimMode {
        self.mode
    }

    fn check(&self, offset: u64, len: u64) -> Result<()> {
        match offset.checked_add(len) {
            Some(end) if end <= self.size => Ok(()),
            _ => Err(Error::Range {
                offset,
                len,
                limit: self.size,
            }),
        }
    }

    pub fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.check(offset, buf.len() as u64)?;
        let state = self.state.read();
        let start = offset as usize;
        buf.copy_from_slice(&state.storage.volatile()[start..start + buf.len()]);
        Ok(())
    }

    pub fn read_u64(&self, offset: u64) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read(offset, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    /// CPU store into the volatile image. Never a persistence event.
    pub fn store(&self, offset: u64, data: &[u8]) -> Result<()> {
        self.check(offset, data.len() as u64)?;
        if data.is_empty() {
            return Ok(());
        }
        let mut state = self.state.write();
        let start = offset as usize;
        state.storage.volatile_mut()[start..start + data.len()].copy_from_slice(data);
        if self.mode == SimMode::Simulate {
            let first = offset / self.line_size;
            let last = (offset + data.len() as u64 - 1) / self.line_size;
            state.mark_unpersisted(first, last);
        }
        Ok(())
    }

    /// Queue every line overlapping `[offset, offset + len)` for write-back.
    /// A zero-length flush queues nothing but still counts as an event.
    pub fn flush(&self, offset: u64, len: u64) -> Result<()> {
        self.check(offset, len)?;
        let mut state = self.state.write();
        if len > 0 {
            let first = offset / self.line_size;
            let last = (offset + len - 1) / self.line_size;
            state.pending.extend(first..=last);
        }
        self.flush_calls.fetch_add(1, Ordering::Relaxed);
        self.bytes_flushed.fetch_add(len, Ordering::Relaxed);
        self.bump(&mut state);
        Ok(())
    }

    /// Make every pending line durable.
    pub fn fence(&self) -> Result<()> {
        let mut state = self.state.write();
        let pending = std::mem::take(&mut state.pending);
        let ls = self.line_size as usize;
        let size = self.size as usize;
        let mut io_result = Ok(());
        match &mut state.storage {
            Storage::Sim {
                volatile,
                durable,
                file,
            } => {
                for &line in &pending {
                    let s = line as usize * ls;
                    let e = (s + ls).min(size);
                    durable[s..e].copy_from_slice(&volatile[s..e]);
                }
                if let Some(file) = file {
                    io_result = for_each_run(&pending, |first, last| {
                        let s = first as usize * ls;
                        let e = ((last as usize + 1) * ls).min(size);
                        file.write_all_at(&durable[s..e], s as u64)
                    });
                }
            }
            Storage::Direct { map } => {
                io_result = for_each_run(&pending, |first, last| {
                    let s = first as usize * ls;
                    let e = ((last as usize + 1) * ls).min(size);
                    map.flush_range(s, e - s)
                });
            }
        }
        if self.mode == SimMode::Simulate {
            for &line in &pending {
                state.clear_unpersisted(line);
            }
        }
        self.fence_calls.fetch_add(1, Ordering::Relaxed);
        self.bump(&mut state);
        io_result.map_err(Error::from)
    }

    fn bump(&self, state: &mut State) {
        let now = self.events.fetch_add(1, Ordering::AcqRel) + 1;
        if state.armed == Some(now) {
            self.capture(state, now);
        }
    }

    fn capture(&self, state: &mut State, event: u64) {
        if let Storage::Sim {
            volatile, durable, ..
        } = &state.storage
        {
            let ls = self.line_size as usize;
            let pending = state
                .pending
                .iter()
                .map(|&line| {
                    let s = line as usize * ls;
                    let e = (s + ls).min(volatile.len());
                    (line, volatile[s..e].to_vec())
                })
                .collect();
            state.capture = Some(CrashCapture {
                event,
                durable: durable.clone(),
                pending,
            });
        }
    }

    pub fn events(&self) -> u64 {
        self.events.load(Ordering::Acquire)
    }

    pub fn counters(&self) -> PersistCounters {
        let _state = self.state.read();
        PersistCounters {
            events: self.events(),
            flush_calls: self.flush_calls.load(Ordering::Relaxed),
            fence_calls: self.fence_calls.load(Ordering::Relaxed),
            bytes_flushed: self.bytes_flushed.load(Ordering::Relaxed),
        }
    }

    /// Capture the durable state when the event counter reaches
    /// `crash_after_event`. Execution continues; the capture is read back
    /// with [`PersistDomain::materialize_crash`].
    pub fn arm(&self, crash_after_event: u64) -> Result<()> {
        if self.mode == SimMode::Direct {
            return Err(Error::DirectMode);
        }
        let mut state = self.state.write();
        state.armed = Some(crash_after_event);
        state.capture = None;
        if self.events() == crash_after_event {
            self.capture(&mut state, crash_after_event);
        }
        Ok(())
    }

    /// Durable image as of event `plan.crash_after_event`. With the adversary
    /// on, a seeded subset of the lines that were flushed but not yet fenced
    /// at that instant is persisted too.
    pub fn materialize_crash(&self, plan: &CrashPlan) -> Result<PoolImage> {
        if self.mode == SimMode::Direct {
            return Err(Error::DirectMode);
        }
        let mut state = self.state.write();
        let k = plan.crash_after_event;
        let ready = matches!(&state.capture, Some(c) if c.event == k);
        if !ready {
            let now = self.events();
            if k > now {
                return Err(Error::TraceExhausted {
                    requested: k,
                    reached: now,
                });
            }
            if k < now {
                return Err(Error::Config(format!(
                    "crash point {k} was not armed before execution"
                )));
            }
            self.capture(&mut state, k);
        }
        let capture = state.capture.as_ref().expect("capture present");
        let mut image = capture.durable.clone();
        if plan.adversary_enabled {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.adversary_seed);
            let ls = self.line_size as usize;
            for (line, content) in &capture.pending {
                if rng.gen_bool(0.5) {
                    let s = *line as usize * ls;
                    image[s..s + content.len()].copy_from_slice(content);
                }
            }
        }
        Ok(PoolImage(image))
    }

    pub fn durable_image(&self) -> Result<PoolImage> {
        let state = self.state.read();
        match &state.storage {
            Storage::Sim { durable, .. } => Ok(PoolImage(durable.clone())),
            Storage::Direct { .. } => Err(Error::DirectMode),
        }
    }

    pub fn volatile_image(&self) -> PoolImage {
        PoolImage(self.state.read().storage.volatile().to_vec())
    }

    /// Lines queued by a flush and not yet covered by a fence.
    pub fn pending_lines(&self) -> Vec<u64> {
        self.state.read().pending.iter().copied().collect()
    }

    /// Lines stored to since they were last made durable.
    pub fn unpersisted_lines(&self) -> Vec<u64> {
        let state = self.state.read();
        let lines = self.size.div_ceil(self.line_size);
        (0..lines)
            .filter(|l| state.unpersisted[(l / 64) as usize] & (1 << (l % 64)) != 0)
            .collect()
    }

    /// Force the backing file (if any) to stable storage.
    pub fn sync(&self) -> Result<()> {
        let state = self.state.read();
        match &state.storage {
            Storage::Sim { file: Some(f), .. } => f.sync_all()?,
            Storage::Sim { file: None, .. } => {}
            Storage::Direct { map } => map.flush()?,
        }
        Ok(())
    }
}

fn for_each_run(
    lines: &BTreeSet<u64>,
    mut f: impl FnMut(u64, u64) -> std::io::Result<()>,
) -> std::io::Result<()> {
    let mut iter = lines.iter().copied();
    let Some(mut first) = iter.next() else {
        return Ok(());
    };
    let mut last = first;
    for line in iter {
        if line == last + 1 {
            last = line;
        } else {
            f(first, last)?;
            first = line;
            last = line;
        }
    }
    f(first, last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_reads_back_from_volatile() {
        let d = PersistDomain::new(4096);
        d.store(0, &[0u8; 8]).unwrap();
        d.store(100, b"abc").unwrap();
        let mut buf = [0u8; 3];
        d.read(100, &mut buf).unwrap();
        assert_eq!(&buf, b"abc");
        assert_eq!(d.events(), 0);
    }

    #[test]
    fn store_out_of_bounds() {
        let d = PersistDomain::new(4096);
        assert!(matches!(d.store(4096, &[1]), Err(Error::Range { .. })));
        assert!(matches!(d.flush(4090, 7), Err(Error::Range { .. })));
    }

    #[test]
    fn flush_line_arithmetic() {
        let d = PersistDomain::new(4096);
        d.flush(10, 4).unwrap();
        assert_eq!(d.pending_lines(), vec![0]);
        d.fence().unwrap();
        d.flush(60, 8).unwrap();
        assert_eq!(d.pending_lines(), vec![0, 1]);
    }

    #[test]
    fn zero_length_flush_counts_an_event() {
        let d = PersistDomain::new(4096);
        d.flush(128, 0).unwrap();
        assert!(d.pending_lines().is_empty());
        assert_eq!(d.events(), 1);
        assert_eq!(d.counters().flush_calls, 1);
    }

    #[test]
    fn fence_persists_only_flushed_lines() {
        let d = PersistDomain::new(4096);
        d.store(0, b"AAAA").unwrap();
        d.flush(0, 4).unwrap();
        d.store(256, b"BBBB").unwrap();
        d.fence().unwrap();
        let durable = d.durable_image().unwrap();
        assert_eq!(&durable[0..4], b"AAAA");
        assert_eq!(&durable[256..260], &[0; 4]);
        assert!(d.pending_lines().is_empty());
        assert_eq!(d.unpersisted_lines(), vec![4]);
    }

    #[test]
    fn empty_and_repeated_fences() {
        let d = PersistDomain::new(1024);
        d.fence().unwrap();
        assert_eq!(d.durable_image().unwrap(), PoolImage(vec![0; 1024]));
        d.store(0, b"x").unwrap();
        d.flush(0, 1).unwrap();
        d.fence().unwrap();
        let once = d.durable_image().unwrap();
        d.fence().unwrap();
        assert_eq!(d.durable_image().unwrap(), once);
        assert_eq!(d.events(), 4);
    }

    #[test]
    fn crash_at_zero_is_initial_image() {
        let d = PersistDomain::new(512);
        d.arm(0).unwrap();
        d.store(0, b"zz").unwrap();
        d.flush(0, 2).unwrap();
        d.fence().unwrap();
        let img = d.materialize_crash(&CrashPlan::at(0)).unwrap();
        assert_eq!(img, PoolImage(vec![0; 512]));
    }

    #[test]
    fn store_without_flush_is_lost() {
        let d = PersistDomain::new(512);
        d.store(64, b"lost").unwrap();
        d.fence().unwrap();
        let img = d.materialize_crash(&CrashPlan::at(1)).unwrap();
        assert_eq!(&img[64..68], &[0; 4]);
    }

    #[test]
    fn crash_beyond_trace() {
        let d = PersistDomain::new(512);
        d.fence().unwrap();
        assert!(matches!(
            d.materialize_crash(&CrashPlan::at(5)),
            Err(Error::TraceExhausted { requested: 5, reached: 1 })
        ));
    }

    #[test]
    fn adversary_with_nothing_pending_matches_plain_crash() {
        let d = PersistDomain::new(512);
        d.arm(2).unwrap();
        d.store(0, b"q").unwrap();
        d.flush(0, 1).unwrap();
        d.fence().unwrap();
        let plain = d.materialize_crash(&CrashPlan::at(2)).unwrap();
        for seed in 0..5 {
            let adv = d
                .materialize_crash(&CrashPlan::at(2).with_adversary(seed))
                .unwrap();
            assert_eq!(adv, plain);
        }
    }

    #[test]
    fn adversary_may_persist_flushed_lines_only() {
        let d = PersistDomain::new(1024);
        d.arm(1).unwrap();
        d.store(0, &[7; 64]).unwrap();
        d.store(64, &[8; 64]).unwrap();
        d.flush(0, 64).unwrap();
        let mut seen_leak = false;
        for seed in 0..32 {
            let img = d
                .materialize_crash(&CrashPlan::at(1).with_adversary(seed))
                .unwrap();
            assert_eq!(&img[64..128], &[0; 64]);
            seen_leak |= img[0] == 7;
        }
        assert!(seen_leak);
    }

    #[test]
    fn custom_line_size() {
        let d = PersistDomain::with_line_size(1024, 256);
        d.flush(250, 10).unwrap();
        assert_eq!(d.pending_lines(), vec![0, 1]);
    }

    #[test]
    fn runs_of_lines() {
        let set: BTreeSet<u64> = [1, 2, 3, 7, 9, 10].into_iter().collect();
        let mut runs = vec![];
        for_each_run(&set, |a, b| {
            runs.push((a, b));
            Ok(())
        })
        .unwrap();
        assert_eq!(runs, vec![(1, 3), (7, 7), (9, 10)]);
    }
}
