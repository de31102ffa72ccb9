//! Library side of the `ecc` command: configuration, whole-frame
//! correction and the self-check registry.

pub mod config;
pub mod frames;
pub mod selfcheck;

/// Keeps freed tensor buffers on the heap instead of returning them to the
/// kernel after every graph. Large per-iteration allocations otherwise cost
/// a page fault per touched page.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}
