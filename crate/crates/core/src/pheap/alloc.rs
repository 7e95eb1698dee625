//! First-fit allocator with an address-ordered free list.
//!
//! Every block starts with a 32-byte header:
//!
//! ```text
//! 0..8    payload size in bytes (multiple of 16)
//! 8..16   next free block (0 ends the list), meaningful only when free
//! 16..20  state tag
//! 20..24  crc32 of (header offset, size, state)
//! 24..32  reserved
//! ```
//!
//! Blocks tile the object space from its start to the end of the pool.
//! The list head lives in the first eight payload bytes of the metadata
//! block. All reads and writes go through a [`TxMem`] so the active backend
//! decides when the allocator's own changes become durable.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::pheap::PRef;
use crate::txn::TxMem;

pub const BLOCK_HEADER: u64 = 32;
pub const ALIGN: u64 = 16;
const MIN_SPLIT_PAYLOAD: u64 = 16;

const STATE_FREE: u32 = u32::from_le_bytes(*b"FREE");
const STATE_LIVE: u32 = u32::from_le_bytes(*b"LIVE");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockState {
    Free,
    Live,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockHeader {
    pub size: u64,
    pub next_free: u64,
    pub state: BlockState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Heap {
    pub start: u64,
    pub end: u64,
    pub meta: PRef,
}

impl Heap {
    fn free_head_addr(&self) -> u64 {
        self.meta.payload()
    }
}

pub(crate) fn round_up(n: u64, to: u64) -> u64 {
    n.div_ceil(to) * to
}

fn header_crc(offset: u64, size: u64, state: u32) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&offset.to_le_bytes());
    h.update(&size.to_le_bytes());
    h.update(&state.to_le_bytes());
    h.finalize()
}

pub(crate) fn encode_header(offset: u64, header: &BlockHeader) -> [u8; 24] {
    let state = match header.state {
        BlockState::Free => STATE_FREE,
        BlockState::Live => STATE_LIVE,
    };
    let mut b = [0u8; 24];
    b[0..8].copy_from_slice(&header.size.to_le_bytes());
    b[8..16].copy_from_slice(&header.next_free.to_le_bytes());
    b[16..20].copy_from_slice(&state.to_le_bytes());
    b[20..24].copy_from_slice(&header_crc(offset, header.size, state).to_le_bytes());
    b
}

/// Decode the header at `offset`; `None` if it does not validate.
pub(crate) fn decode_header(offset: u64, b: &[u8; 24], heap_end: u64) -> Option<BlockHeader> {
    let size = u64::from_le_bytes(b[0..8].try_into().unwrap());
    let next_free = u64::from_le_bytes(b[8..16].try_into().unwrap());
    let raw_state = u32::from_le_bytes(b[16..20].try_into().unwrap());
    let crc = u32::from_le_bytes(b[20..24].try_into().unwrap());
    let state = match raw_state {
        STATE_FREE => BlockState::Free,
        STATE_LIVE => BlockState::Live,
        _ => return None,
    };
    if crc != header_crc(offset, size, raw_state) || size % ALIGN != 0 {
        return None;
    }
    let end = offset.checked_add(BLOCK_HEADER)?.checked_add(size)?;
    if end > heap_end {
        return None;
    }
    Some(BlockHeader {
        size,
        next_free,
        state,
    })
}

pub(crate) fn read_header<M: TxMem + ?Sized>(
    m: &M,
    heap: &Heap,
    offset: u64,
) -> Result<Option<BlockHeader>> {
    if offset < heap.start || !offset.is_multiple_of(ALIGN) || offset + BLOCK_HEADER > heap.end {
        return Ok(None);
    }
    let mut b = [0u8; 24];
    m.read(offset, &mut b)?;
    Ok(decode_header(offset, &b, heap.end))
}

fn expect_free<M: TxMem + ?Sized>(m: &M, heap: &Heap, offset: u64) -> Result<BlockHeader> {
    match read_header(m, heap, offset)? {
        Some(h) if h.state == BlockState::Free => Ok(h),
        _ => Err(Error::Corruption(format!(
            "free list entry {offset:#x} is not a free block"
        ))),
    }
}

fn write_header<M: TxMem + ?Sized>(m: &mut M, offset: u64, header: &BlockHeader) -> Result<()> {
    m.write(offset, &encode_header(offset, header))
}

fn invalidate_header<M: TxMem + ?Sized>(m: &mut M, offset: u64) -> Result<()> {
    m.write(offset + 16, &[0u8; 8])
}

/// Header of the live block `r`, or `None` if `r` does not name one.
pub(crate) fn live_header<M: TxMem + ?Sized>(
    m: &M,
    heap: &Heap,
    r: PRef,
) -> Result<Option<BlockHeader>> {
    Ok(read_header(m, heap, r.offset())?.filter(|h| h.state == BlockState::Live))
}

pub(crate) fn alloc<M: TxMem + ?Sized>(m: &mut M, heap: &Heap, size: u64) -> Result<PRef> {
    if size == 0 {
        return Err(Error::Precondition("allocation size must be positive"));
    }
    let need = round_up(size, ALIGN);
    let mut link = heap.free_head_addr();
    let mut cur = m.read_u64(link)?;
    while cur != 0 {
        let h = expect_free(m, heap, cur)?;
        if h.size >= need {
            let taken = if h.size - need >= BLOCK_HEADER + MIN_SPLIT_PAYLOAD {
                let rest = cur + BLOCK_HEADER + need;
                write_header(
                    m,
                    rest,
                    &BlockHeader {
                        size: h.size - need - BLOCK_HEADER,
                        next_free: h.next_free,
                        state: BlockState::Free,
                    },
                )?;
                m.write_u64(link, rest)?;
                need
            } else {
                m.write_u64(link, h.next_free)?;
                h.size
            };
            write_header(
                m,
                cur,
                &BlockHeader {
                    size: taken,
                    next_free: 0,
                    state: BlockState::Live,
                },
            )?;
            let mut payload = vec![0u8; taken as usize];
            m.read(cur + BLOCK_HEADER, &mut payload)?;
            if payload.iter().any(|&b| b != 0) {
                payload.fill(0);
                m.write(cur + BLOCK_HEADER, &payload)?;
            }
            return Ok(PRef::new(cur));
        }
        link = cur + 8;
        cur = h.next_free;
    }
    Err(Error::OutOfSpace { requested: size })
}

pub(crate) fn free<M: TxMem + ?Sized>(m: &mut M, heap: &Heap, r: PRef) -> Result<()> {
    if r.is_null() || r == heap.meta {
        return Err(Error::InvalidFree(r));
    }
    let Some(h) = live_header(m, heap, r)? else {
        return Err(Error::InvalidFree(r));
    };
    let off = r.offset();
    let block_end = off + BLOCK_HEADER + h.size;

    let mut link = heap.free_head_addr();
    let mut prev: Option<(u64, BlockHeader)> = None;
    let mut cur = m.read_u64(link)?;
    while cur != 0 && cur < off {
        let ch = expect_free(m, heap, cur)?;
        prev = Some((cur, ch));
        link = cur + 8;
        cur = ch.next_free;
    }

    let mut size = h.size;
    let mut next = cur;
    if cur != 0 && cur == block_end {
        let nh = expect_free(m, heap, cur)?;
        size += BLOCK_HEADER + nh.size;
        next = nh.next_free;
        invalidate_header(m, cur)?;
    }

    match prev {
        Some((p, ph)) if p + BLOCK_HEADER + ph.size == off => {
            write_header(
                m,
                p,
                &BlockHeader {
                    size: ph.size + BLOCK_HEADER + size,
                    next_free: next,
                    state: BlockState::Free,
                },
            )?;
            invalidate_header(m, off)?;
        }
        _ => {
            write_header(
                m,
                off,
                &BlockHeader {
                    size,
                    next_free: next,
                    state: BlockState::Free,
                },
            )?;
            m.write_u64(link, off)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HeapViolation {
    BadHeader { offset: u64 },
    Tiling { stopped_at: u64, end: u64 },
    AdjacentFree { offset: u64 },
    FreeListEntry { offset: u64 },
    FreeListOrder { offset: u64 },
    LeakedFreeBlock { offset: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HeapAudit {
    pub live_blocks: u64,
    pub free_blocks: u64,
    pub live_bytes: u64,
    pub free_bytes: u64,
    pub violations: Vec<HeapViolation>,
    /// (header offset, payload size) for every live block, in address order.
    pub live: Vec<(u64, u64)>,
}

impl HeapAudit {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub(crate) fn audit<M: TxMem + ?Sized>(m: &M, heap: &Heap) -> Result<HeapAudit> {
    let mut report = HeapAudit::default();
    let mut free_blocks = BTreeSet::new();
    let mut off = heap.start;
    let mut prev_free = false;
    while off < heap.end {
        let Some(h) = read_header(m, heap, off)? else {
            report.violations.push(HeapViolation::BadHeader { offset: off });
            break;
        };
        match h.state {
            BlockState::Live => {
                report.live_blocks += 1;
                report.live_bytes += h.size;
                report.live.push((off, h.size));
                prev_free = false;
            }
            BlockState::Free => {
                if prev_free {
                    report.violations.push(HeapViolation::AdjacentFree { offset: off });
                }
                report.free_blocks += 1;
                report.free_bytes += h.size;
                free_blocks.insert(off);
                prev_free = true;
            }
        }
        off += BLOCK_HEADER + h.size;
    }
    if off != heap.end && report.violations.is_empty() {
        report.violations.push(HeapViolation::Tiling {
            stopped_at: off,
            end: heap.end,
        });
    }

    let mut cur = m.read_u64(heap.free_head_addr())?;
    let mut last = 0;
    let mut on_list = BTreeSet::new();
    while cur != 0 {
        if cur <= last {
            report.violations.push(HeapViolation::FreeListOrder { offset: cur });
            break;
        }
        if !free_blocks.contains(&cur) {
            report.violations.push(HeapViolation::FreeListEntry { offset: cur });
            break;
        }
        on_list.insert(cur);
        last = cur;
        cur = match read_header(m, heap, cur)? {
            Some(h) => h.next_free,
            None => break,
        };
    }
    for &b in free_blocks.difference(&on_list) {
        report.violations.push(HeapViolation::LeakedFreeBlock { offset: b });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain byte-vector memory for exercising the allocator in isolation.
    struct VecMem(Vec<u8>);

    impl TxMem for VecMem {
        fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
            let s = offset as usize;
            buf.copy_from_slice(&self.0[s..s + buf.len()]);
            Ok(())
        }

        fn write(&mut self, offset: u64, data: &[u8]) -> Result<()> {
            let s = offset as usize;
            self.0[s..s + data.len()].copy_from_slice(data);
            Ok(())
        }
    }

    fn fresh(size: u64) -> (VecMem, Heap) {
        let mut m = VecMem(vec![0; size as usize]);
        let heap = Heap {
            start: 0,
            end: size,
            meta: PRef::new(0),
        };
        write_header(
            &mut m,
            0,
            &BlockHeader {
                size: 32,
                next_free: 0,
                state: BlockState::Live,
            },
        )
        .unwrap();
        let first = 64;
        write_header(
            &mut m,
            first,
            &BlockHeader {
                size: size - first - BLOCK_HEADER,
                next_free: 0,
                state: BlockState::Free,
            },
        )
        .unwrap();
        m.write_u64(heap.meta.payload(), first).unwrap();
        (m, heap)
    }

    #[test]
    fn first_fit_and_reuse() {
        let (mut m, heap) = fresh(4096);
        let a = alloc(&mut m, &heap, 24).unwrap();
        assert_eq!(a.offset(), 64);
        let b = alloc(&mut m, &heap, 24).unwrap();
        assert_eq!(b.offset(), 64 + 32 + 32);
        free(&mut m, &heap, a).unwrap();
        assert_eq!(alloc(&mut m, &heap, 24).unwrap(), a);
        assert!(audit(&m, &heap).unwrap().is_clean());
    }

    #[test]
    fn coalesces_both_neighbours() {
        let (mut m, heap) = fresh(4096);
        let a = alloc(&mut m, &heap, 16).unwrap();
        let b = alloc(&mut m, &heap, 16).unwrap();
        let c = alloc(&mut m, &heap, 16).unwrap();
        free(&mut m, &heap, a).unwrap();
        free(&mut m, &heap, c).unwrap();
        free(&mut m, &heap, b).unwrap();
        let rep = audit(&m, &heap).unwrap();
        assert!(rep.is_clean(), "{:?}", rep.violations);
        assert_eq!(rep.free_blocks, 1);
        assert_eq!(rep.live_blocks, 1);
    }

    #[test]
    fn invalid_and_double_free() {
        let (mut m, heap) = fresh(4096);
        assert!(matches!(free(&mut m, &heap, PRef::NULL), Err(Error::InvalidFree(_))));
        let a = alloc(&mut m, &heap, 40).unwrap();
        assert!(matches!(
            free(&mut m, &heap, PRef::new(a.offset() + 16)),
            Err(Error::InvalidFree(_))
        ));
        free(&mut m, &heap, a).unwrap();
        assert!(matches!(free(&mut m, &heap, a), Err(Error::InvalidFree(_))));
    }

    #[test]
    fn payload_is_zeroed() {
        let (mut m, heap) = fresh(4096);
        let a = alloc(&mut m, &heap, 32).unwrap();
        m.write(a.payload(), &[0xAB; 32]).unwrap();
        free(&mut m, &heap, a).unwrap();
        let b = alloc(&mut m, &heap, 32).unwrap();
        let mut buf = [1u8; 32];
        m.read(b.payload(), &mut buf).unwrap();
        assert_eq!(buf, [0; 32]);
    }

    #[test]
    fn exhaustion() {
        let (mut m, heap) = fresh(1024);
        let mut n = 0;
        loop {
            match alloc(&mut m, &heap, 48) {
                Ok(_) => n += 1,
                Err(Error::OutOfSpace { requested: 48 }) => break,
                Err(e) => panic!("{e}"),
            }
        }
        assert!(n > 0);
        assert!(audit(&m, &heap).unwrap().is_clean());
        assert!(matches!(alloc(&mut m, &heap, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn audit_detects_smashed_header() {
        let (mut m, heap) = fresh(4096);
        let a = alloc(&mut m, &heap, 24).unwrap();
        m.write(a.offset(), &[0xFF; 8]).unwrap();
        let rep = audit(&m, &heap).unwrap();
        assert!(rep
            .violations
            .contains(&HeapViolation::BadHeader { offset: a.offset() }));
    }
}
