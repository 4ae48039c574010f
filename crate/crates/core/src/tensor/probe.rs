//! Live-buffer accounting for attention intermediates.
//!
//! While a [`Probe`] is active on the current thread, every tensor buffer
//! allocated inside an [`attention_scope`] is counted until it is dropped. The
//! probe reports the peak of live counted bytes and the number of attention
//! score elements materialized.

use std::cell::Cell;

thread_local! {
    static SESSION: Cell<u64> = const { Cell::new(0) };
    static NEXT_SESSION: Cell<u64> = const { Cell::new(1) };
    static DEPTH: Cell<usize> = const { Cell::new(0) };
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static SCORES: Cell<u64> = const { Cell::new(0) };
}

const ELEM_BYTES: usize = std::mem::size_of::<f64>();

pub(crate) fn on_alloc(elems: usize) -> u64 {
    let session = SESSION.with(Cell::get);
    if session == 0 || DEPTH.with(Cell::get) == 0 {
        return 0;
    }
    let live = LIVE.with(|l| {
        let v = l.get() + elems * ELEM_BYTES;
        l.set(v);
        v
    });
    PEAK.with(|p| p.set(p.get().max(live)));
    session
}

pub(crate) fn on_free(session: u64, elems: usize) {
    if SESSION.with(Cell::get) == session {
        LIVE.with(|l| l.set(l.get().saturating_sub(elems * ELEM_BYTES)));
    }
}

/// Records materialized attention logits; called by the attention kernels.
pub(crate) fn record_scores(elems: usize) {
    if SESSION.with(Cell::get) != 0 {
        SCORES.with(|s| s.set(s.get() + elems as u64));
    }
}

/// Marks the enclosed region as attention computation for the probe.
pub struct AttentionScope(());

pub fn attention_scope() -> AttentionScope {
    DEPTH.with(|d| d.set(d.get() + 1));
    AttentionScope(())
}

impl Drop for AttentionScope {
    fn drop(&mut self) {
        DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Measurement session; at most one per thread.
pub struct Probe {
    session: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeReading {
    /// Peak live bytes of counted buffers, at 8 bytes per element.
    pub peak_bytes: usize,
    pub live_bytes: usize,
    pub score_elements: u64,
}

impl Probe {
    pub fn start() -> Probe {
        let session = NEXT_SESSION.with(|n| {
            let s = n.get();
            n.set(s + 1);
            s
        });
        SESSION.with(|s| {
            assert_eq!(s.get(), 0, "nested probe sessions are not supported");
            s.set(session)
        });
        LIVE.with(|l| l.set(0));
        PEAK.with(|p| p.set(0));
        SCORES.with(|s| s.set(0));
        Probe { session }
    }

    pub fn reading(&self) -> ProbeReading {
        debug_assert_eq!(SESSION.with(Cell::get), self.session);
        ProbeReading {
            peak_bytes: PEAK.with(Cell::get),
            live_bytes: LIVE.with(Cell::get),
            score_elements: SCORES.with(Cell::get),
        }
    }

    pub fn finish(self) -> ProbeReading {
        self.reading()
    }
}

impl Drop for Probe {
    fn drop(&mut self) {
        SESSION.with(|s| s.set(0));
    }
}
