//! Thread-local recycling pool for large `f64` buffers.
//!
//! Training replays the same graph shapes every iteration, so activation and
//! gradient buffers can be recycled by exact length instead of round-tripping
//! through the allocator (and its page faults) tens of times per iteration.
//! Buffers below [`MIN_POOL_LEN`] fall through to the allocator untouched —
//! small allocations are cheap and pooling them would only bloat the map.
//!
//! `take_uninit` hands back a buffer with **arbitrary stale contents**; the
//! caller must overwrite every element before any is read. `take_zeroed` is
//! for scatter-style accumulation sinks.
//!
//! Without `std` there is no `thread_local!`, so the pool degrades to plain
//! allocation; correctness never depends on reuse.

use alloc::vec;
use alloc::vec::Vec;

/// Smallest buffer length worth recycling (32 KiB of f64s).
const MIN_POOL_LEN: usize = 1 << 12;

#[cfg(feature = "std")]
mod imp {
    use super::MIN_POOL_LEN;
    use std::cell::RefCell;
    use std::collections::BTreeMap;
    use std::vec::Vec;

    /// Retained buffers per exact length.
    const MAX_PER_CLASS: usize = 16;
    /// Total retained bytes before `give` starts dropping buffers.
    const MAX_TOTAL_BYTES: usize = 2 << 30;

    struct Pool<T> {
        classes: BTreeMap<usize, Vec<Vec<T>>>,
        total_bytes: usize,
    }

    impl<T> Pool<T> {
        fn pop(&mut self, len: usize) -> Option<Vec<T>> {
            let v = self.classes.get_mut(&len).and_then(Vec::pop);
            if let Some(ref b) = v {
                self.total_bytes -= b.len() * core::mem::size_of::<T>();
            }
            v
        }

        fn give(&mut self, v: Vec<T>) {
            let bytes = v.len() * core::mem::size_of::<T>();
            if self.total_bytes + bytes > MAX_TOTAL_BYTES {
                return;
            }
            let class = self.classes.entry(v.len()).or_default();
            if class.len() < MAX_PER_CLASS {
                self.total_bytes += bytes;
                class.push(v);
            }
        }
    }

    thread_local! {
        static POOL: RefCell<Pool<f64>> = RefCell::new(Pool {
            classes: BTreeMap::new(),
            total_bytes: 0,
        });
        static POOL_U32: RefCell<Pool<u32>> = RefCell::new(Pool {
            classes: BTreeMap::new(),
            total_bytes: 0,
        });
    }

    pub fn pop(len: usize) -> Option<Vec<f64>> {
        POOL.with(|p| p.borrow_mut().pop(len))
    }

    pub fn give(v: Vec<f64>) {
        if v.len() < MIN_POOL_LEN {
            return;
        }
        POOL.with(|p| p.borrow_mut().give(v));
    }

    pub fn pop_u32(len: usize) -> Option<Vec<u32>> {
        POOL_U32.with(|p| p.borrow_mut().pop(len))
    }

    pub fn give_u32(v: Vec<u32>) {
        if v.len() < MIN_POOL_LEN {
            return;
        }
        POOL_U32.with(|p| p.borrow_mut().give(v));
    }
}

#[cfg(not(feature = "std"))]
mod imp {
    use alloc::vec::Vec;

    pub fn pop(_len: usize) -> Option<Vec<f64>> {
        None
    }

    pub fn give(_v: Vec<f64>) {}

    pub fn pop_u32(_len: usize) -> Option<Vec<u32>> {
        None
    }

    pub fn give_u32(_v: Vec<u32>) {}
}

/// A length-`len` buffer whose contents are arbitrary. Every element must be
/// written before it is read.
pub fn take_uninit(len: usize) -> Vec<f64> {
    if len >= MIN_POOL_LEN {
        if let Some(v) = imp::pop(len) {
            return v;
        }
    }
    vec![0.0; len]
}

/// A length-`len` buffer of zeros, for accumulation sinks.
pub fn take_zeroed(len: usize) -> Vec<f64> {
    if len >= MIN_POOL_LEN {
        if let Some(mut v) = imp::pop(len) {
            v.fill(0.0);
            return v;
        }
    }
    vec![0.0; len]
}

/// Return a buffer to the pool (drops it when small or the pool is full).
pub fn give(v: Vec<f64>) {
    imp::give(v);
}

/// A length-`len` index buffer whose contents are arbitrary. Every element
/// must be written before it is read.
pub fn take_uninit_u32(len: usize) -> Vec<u32> {
    if len >= MIN_POOL_LEN {
        if let Some(v) = imp::pop_u32(len) {
            return v;
        }
    }
    vec![0; len]
}

/// Return an index buffer to the pool.
pub fn give_u32(v: Vec<u32>) {
    imp::give_u32(v);
}
