//! Process-level performance knobs.

use std::sync::Once;

static TUNE: Once = Once::new();

/// Keep large tensor buffers on the heap free lists instead of per-call
/// mmaps. Training allocates and frees multi-megabyte activation buffers
/// thousands of times per epoch; with glibc's default mmap threshold every
/// one of those is a fresh kernel mapping that must be zero-filled and
/// page-faulted in, which dominates the elementwise ops. Called once from
/// the hot entry points; safe to call repeatedly.
pub fn tune_allocator() {
    TUNE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    });
}
