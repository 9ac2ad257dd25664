//! Byte-counting allocator for verifying what a timed region allocates.
//!
//! The library never installs it; a binary or integration test opts in with
//! `#[global_allocator]`. Without it the counter stays at zero and the bench
//! report's allocation column reads 0.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicU64, Ordering};

static ALLOCATED: AtomicU64 = AtomicU64::new(0);

/// Delegates to the system allocator and counts every byte handed out.
/// Frees are not subtracted: the counter is a monotone total, so a delta
/// across a region bounds its transient allocation from above.
pub struct CountingAllocator;

impl CountingAllocator {
    pub const fn new() -> CountingAllocator {
        CountingAllocator
    }
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        ALLOCATED.fetch_add(layout.size() as u64, Ordering::Relaxed);
        System.alloc(layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        ALLOCATED.fetch_add(layout.size() as u64, Ordering::Relaxed);
        System.alloc_zeroed(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        if new_size > layout.size() {
            ALLOCATED.fetch_add((new_size - layout.size()) as u64, Ordering::Relaxed);
        }
        System.realloc(ptr, layout, new_size)
    }
}

/// Total bytes allocated since process start, or 0 if the counting
/// allocator is not the global allocator.
pub fn allocated_bytes() -> u64 {
    ALLOCATED.load(Ordering::Relaxed)
}
