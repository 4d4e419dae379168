//! Per-thread counter of floating-point work done by checksum kernels.
//!
//! A multiply-add counts as 2, a plain add or subtract as 1. The protected
//! forward pass reads the counter around each section to report how much ABFT
//! work it actually performed.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Current value of this thread's counter.
pub fn read() -> u64 {
    COUNTER.with(|c| c.get())
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

/// Runs `f` and returns its result with the flops it recorded.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let start = read();
    let out = f();
    (out, read().wrapping_sub(start))
}
