//! Single-slot latest-wins frame buffer.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

/// Holds at most one frame. A push replaces any frame not yet taken and
/// counts it as dropped; a take empties the slot.
#[derive(Debug, Default)]
pub struct FrameBuffer<T> {
    slot: Mutex<Slot<T>>,
    ready: Condvar,
    dropped: AtomicU64,
    pushed: AtomicU64,
}

#[derive(Debug)]
struct Slot<T> {
    frame: Option<T>,
    closed: bool,
}

impl<T> Default for Slot<T> {
    fn default() -> Self {
        Self { frame: None, closed: false }
    }
}

impl<T> FrameBuffer<T> {
    pub fn new() -> Self {
        Self { slot: Mutex::new(Slot::default()), ready: Condvar::new(), dropped: AtomicU64::new(0), pushed: AtomicU64::new(0) }
    }

    fn lock(&self) -> MutexGuard<'_, Slot<T>> {
        // A panicking holder cannot leave the slot half-written.
        self.slot.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn push(&self, frame: T) {
        let mut slot = self.lock();
        if slot.frame.replace(frame).is_some() {
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        self.pushed.fetch_add(1, Ordering::Relaxed);
        drop(slot);
        self.ready.notify_one();
    }

    /// Edits the pending frame in place, if there is one.
    pub fn update_pending<R>(&self, f: impl FnOnce(&mut T) -> R) -> Option<R> {
        self.lock().frame.as_mut().map(f)
    }

    pub fn take_latest(&self) -> Option<T> {
        self.lock().frame.take()
    }

    /// Waits up to `timeout` for a frame. Returns `None` on timeout or once
    /// the buffer is closed and drained.
    pub fn wait_take(&self, timeout: Duration) -> Option<T> {
        let slot = self.lock();
        let (mut slot, _) = self
            .ready
            .wait_timeout_while(slot, timeout, |s| s.frame.is_none() && !s.closed)
            .unwrap_or_else(|e| e.into_inner());
        slot.frame.take()
    }

    /// Wakes waiting readers; frames already pushed can still be taken.
    pub fn close(&self) {
        self.lock().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    pub fn has_pending(&self) -> bool {
        self.lock().frame.is_some()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn pushed(&self) -> u64 {
        self.pushed.load(Ordering::Relaxed)
    }
}
