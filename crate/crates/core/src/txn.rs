//! Transaction plumbing shared by the three backends.

use std::cell::RefCell;
use std::marker::PhantomData;

use crate::error::{Error, Result};
use crate::named::NamedTxn;
use crate::pheap::{alloc, PRef, Pool};
use crate::redo::RedoTxn;
use crate::undo::UndoTxn;

/// Byte-addressed view of pool memory as seen by one writer.
pub trait TxMem {
    fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()>;
    fn write(&mut self, offset: u64, data: &[u8]) -> Result<()>;

    fn read_u64(&self, offset: u64) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read(offset, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn write_u64(&mut self, offset: u64, value: u64) -> Result<()> {
        self.write(offset, &value.to_le_bytes())
    }
}

/// Operations common to every durable transaction.
///
/// `alloc` and `free` take the pool's allocator lock and hold it until the
/// transaction ends, so no other transaction observes allocator state that
/// could still be rolled back or discarded.
pub trait Transaction<'p>: TxMem {
    fn pool(&self) -> &'p Pool;
    fn hold_allocator(&mut self);
    fn commit(self) -> Result<()>;
    fn abort(self) -> Result<()>;

    fn alloc(&mut self, size: u64) -> Result<PRef> {
        self.hold_allocator();
        let heap = self.pool().heap();
        alloc::alloc(self, &heap, size)
    }

    fn free(&mut self, r: PRef) -> Result<()> {
        if self.pool().is_reserved(r) {
            return Err(Error::InvalidFree(r));
        }
        self.hold_allocator();
        let heap = self.pool().heap();
        alloc::free(self, &heap, r)
    }

    /// Payload size of the live allocation `r`.
    fn allocation_size(&self, r: PRef) -> Result<u64> {
        let heap = self.pool().heap();
        match alloc::live_header(self, &heap, r)? {
            Some(h) => Ok(h.size),
            None => Err(Error::InvalidRef(r)),
        }
    }

    /// Point the pool root at `r` as part of this transaction.
    fn set_root(&mut self, r: PRef) -> Result<()> {
        if self.pool().backend() == crate::pheap::Backend::Named {
            return Err(Error::Backend("named pools are rooted by name".into()));
        }
        if !r.is_null() {
            self.allocation_size(r)?;
        }
        self.write_u64(crate::pheap::OFF_ROOT, r.offset())
    }

    fn write_field(&mut self, r: PRef, field_offset: u64, data: &[u8]) -> Result<()> {
        let size = self.allocation_size(r)?;
        check_field(field_offset, data.len() as u64, size)?;
        self.write(r.payload() + field_offset, data)
    }

    fn read_field(&self, r: PRef, field_offset: u64, buf: &mut [u8]) -> Result<()> {
        let size = self.allocation_size(r)?;
        check_field(field_offset, buf.len() as u64, size)?;
        self.read(r.payload() + field_offset, buf)
    }
}

pub(crate) fn check_field(field_offset: u64, len: u64, size: u64) -> Result<()> {
    match field_offset.checked_add(len) {
        Some(end) if end <= size => Ok(()),
        _ => Err(Error::Range {
            offset: field_offset,
            len,
            limit: size,
        }),
    }
}

thread_local! {
    static ACTIVE: RefCell<Vec<u64>> = const { RefCell::new(Vec::new()) };
}

/// Marks a pool as having an active transaction on the current thread.
pub(crate) struct NestGuard {
    pool_id: u64,
    _not_send: PhantomData<*const ()>,
}

impl NestGuard {
    pub(crate) fn enter(pool_id: u64) -> Result<Self> {
        ACTIVE.with(|a| {
            let mut a = a.borrow_mut();
            if a.contains(&pool_id) {
                return Err(Error::Nesting);
            }
            a.push(pool_id);
            Ok(NestGuard {
                pool_id,
                _not_send: PhantomData,
            })
        })
    }
}

impl Drop for NestGuard {
    fn drop(&mut self) {
        ACTIVE.with(|a| a.borrow_mut().retain(|&p| p != self.pool_id));
    }
}

pub(crate) fn in_transaction(pool_id: u64) -> bool {
    ACTIVE.with(|a| a.borrow().contains(&pool_id))
}

/// A transaction on whichever backend the pool was created with.
pub enum Tx<'p> {
    Redo(RedoTxn<'p>),
    Undo(UndoTxn<'p>),
    Named(NamedTxn<'p>),
}

macro_rules! dispatch {
    ($self:expr, $t:ident => $body:expr) => {
        match $self {
            Tx::Redo($t) => $body,
            Tx::Undo($t) => $body,
            Tx::Named($t) => $body,
        }
    };
}

impl TxMem for Tx<'_> {
    fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        dispatch!(self, t => t.read(offset, buf))
    }

    fn write(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        dispatch!(self, t => t.write(offset, data))
    }
}

impl<'p> Transaction<'p> for Tx<'p> {
    fn pool(&self) -> &'p Pool {
        dispatch!(self, t => t.pool())
    }

    fn hold_allocator(&mut self) {
        dispatch!(self, t => t.hold_allocator())
    }

    fn commit(self) -> Result<()> {
        dispatch!(self, t => t.commit())
    }

    fn abort(self) -> Result<()> {
        dispatch!(self, t => t.abort())
    }
}

impl<'p> Tx<'p> {
    /// Allocate `size` bytes under a unique name. Only the named backend
    /// keeps a catalog; on the others this is a configuration error.
    pub fn nv_alloc(&mut self, name: &str, size: u64) -> Result<PRef> {
        match self {
            Tx::Named(t) => t.nv_alloc(name, size).map(|h| PRef::new(h.offset())),
            _ => Err(Error::Backend("names exist only on the named backend".into())),
        }
    }

    pub fn nv_free(&mut self, name: &str) -> Result<()> {
        match self {
            Tx::Named(t) => t.nv_free(name),
            _ => Err(Error::Backend("names exist only on the named backend".into())),
        }
    }
}
