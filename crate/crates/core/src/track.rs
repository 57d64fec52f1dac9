//! Tracked-allocation instrumentation for the working buffers of the numeric
//! core (tensor storage and k-NN scratch).
//!
//! The completion step is supposed to hold a working set that depends on the
//! model configuration only, no matter how large the input shape is. To make
//! that claim measurable on CPU, every tensor buffer and k-NN scratch buffer
//! registers its size here; the peak of the live total is the analogue of the
//! accelerator-memory figures usually quoted for this kind of pipeline.
//! Long-lived results (point clouds, volumes, reports) are deliberately not
//! tracked: they are outputs, not working memory.
//!
//! Counters are per thread. A case completed on one thread reports its own
//! peak regardless of what other cases do concurrently.

use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn on_alloc(bytes: usize) {
    CURRENT.with(|c| {
        let now = c.get() + bytes;
        c.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

pub(crate) fn on_free(bytes: usize) {
    CURRENT.with(|c| c.set(c.get().saturating_sub(bytes)));
}

/// Live tracked bytes on this thread.
pub fn current_bytes() -> usize {
    CURRENT.with(|c| c.get())
}

/// Peak tracked bytes on this thread since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(|p| p.get())
}

/// Collapse the peak back to the current live total.
pub fn reset_peak() {
    let now = current_bytes();
    PEAK.with(|p| p.set(now));
}

/// Runs `f` and returns its result together with the peak tracked bytes
/// observed while it ran (relative to the live total at entry).
pub fn with_peak<T>(f: impl FnOnce() -> T) -> (T, usize) {
    reset_peak();
    let out = f();
    (out, peak_bytes())
}

/// Fixed-capacity scratch buffer whose backing storage counts toward the
/// tracked working set.
pub(crate) struct TrackedBuf<T> {
    data: Vec<T>,
}

impl<T: Clone + Default> TrackedBuf<T> {
    pub fn zeroed(len: usize) -> Self {
        on_alloc(len * std::mem::size_of::<T>());
        TrackedBuf {
            data: vec![T::default(); len],
        }
    }
}

impl<T> std::ops::Deref for TrackedBuf<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> std::ops::DerefMut for TrackedBuf<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T> Drop for TrackedBuf<T> {
    fn drop(&mut self) {
        on_free(self.data.capacity() * std::mem::size_of::<T>());
    }
}
