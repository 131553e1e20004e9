//! Allocation accounting for tensor buffers.
//!
//! A probe counts live tensor *elements* (not bytes) created on the current
//! thread while it is installed. Allocations are attributed to the innermost
//! active label, see [`label`]. Buffers that outlive the probe scope still
//! decrement the counters when they are dropped.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

pub const UNLABELED: &str = "unlabeled";

thread_local! {
    static ACTIVE: RefCell<Option<Arc<Mutex<ProbeState>>>> = const { RefCell::new(None) };
    static LABELS: RefCell<Vec<&'static str>> = const { RefCell::new(Vec::new()) };
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub current: usize,
    pub peak: usize,
}

impl Counts {
    fn add(&mut self, n: usize) {
        self.current += n;
        self.peak = self.peak.max(self.current);
    }
}

#[derive(Debug, Default)]
struct ProbeState {
    total: Counts,
    labels: BTreeMap<&'static str, Counts>,
    limit: Option<usize>,
}

/// Raised (as a panic payload) when a probe with an element budget would be
/// pushed over it. The memory benchmark catches it and records a sentinel,
/// the same way a real device runs out of memory mid-forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetExceeded {
    pub requested: usize,
    pub live: usize,
    pub limit: usize,
}

#[derive(Debug, Clone, Default)]
pub struct AllocationProbe {
    state: Arc<Mutex<ProbeState>>,
}

impl AllocationProbe {
    pub fn new() -> Self {
        Self::default()
    }

    /// A probe that refuses to let live elements exceed `limit`.
    pub fn with_limit(limit: usize) -> Self {
        let probe = Self::default();
        probe.lock().limit = Some(limit);
        probe
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ProbeState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Runs `f` with this probe installed on the current thread.
    pub fn scope<R>(&self, f: impl FnOnce() -> R) -> R {
        struct Restore(Option<Arc<Mutex<ProbeState>>>);
        impl Drop for Restore {
            fn drop(&mut self) {
                let prev = self.0.take();
                ACTIVE.with(|a| *a.borrow_mut() = prev);
            }
        }
        let prev = ACTIVE.with(|a| a.borrow_mut().replace(self.state.clone()));
        let _restore = Restore(prev);
        f()
    }

    pub fn current(&self) -> usize {
        self.lock().total.current
    }

    pub fn peak(&self) -> usize {
        self.lock().total.peak
    }

    pub fn label_counts(&self, label: &str) -> Counts {
        self.lock().labels.get(label).copied().unwrap_or_default()
    }

    pub fn peak_for(&self, label: &str) -> usize {
        self.label_counts(label).peak
    }

    /// Peak of each label, keyed by label.
    pub fn breakdown(&self) -> BTreeMap<String, usize> {
        self.lock()
            .labels
            .iter()
            .map(|(k, v)| (k.to_string(), v.peak))
            .collect()
    }

    /// Resets peaks down to the currently live counts.
    pub fn reset(&self) {
        let mut st = self.lock();
        st.total.peak = st.total.current;
        for c in st.labels.values_mut() {
            c.peak = c.current;
        }
    }
}

/// Runs `f` with allocations attributed to `name`.
pub fn label<R>(name: &'static str, f: impl FnOnce() -> R) -> R {
    struct Pop;
    impl Drop for Pop {
        fn drop(&mut self) {
            LABELS.with(|l| {
                l.borrow_mut().pop();
            });
        }
    }
    LABELS.with(|l| l.borrow_mut().push(name));
    let _pop = Pop;
    f()
}

/// Live-element registration held by a tensor buffer.
#[derive(Debug)]
pub(crate) struct Ticket {
    state: Arc<Mutex<ProbeState>>,
    label: &'static str,
    elements: usize,
}

impl Drop for Ticket {
    fn drop(&mut self) {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        st.total.current -= self.elements;
        if let Some(c) = st.labels.get_mut(self.label) {
            c.current -= self.elements;
        }
    }
}

fn over_budget(st: &ProbeState, elements: usize) -> Option<BudgetExceeded> {
    let limit = st.limit?;
    (st.total.current + elements > limit).then_some(BudgetExceeded {
        requested: elements,
        live: st.total.current,
        limit,
    })
}

/// Fails like an allocation would if `elements` more could not fit in the
/// active probe's budget. Lets batched kernels refuse before allocating.
pub fn ensure_capacity(elements: usize) {
    let Some(state) = ACTIVE.with(|a| a.borrow().clone()) else {
        return;
    };
    let over = over_budget(&state.lock().unwrap_or_else(|e| e.into_inner()), elements);
    if let Some(payload) = over {
        std::panic::panic_any(payload);
    }
}

pub(crate) fn register(elements: usize) -> Option<Ticket> {
    let state = ACTIVE.with(|a| a.borrow().clone())?;
    let label = LABELS.with(|l| l.borrow().last().copied().unwrap_or(UNLABELED));
    {
        let mut st = state.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(payload) = over_budget(&st, elements) {
            drop(st);
            std::panic::panic_any(payload);
        }
        st.total.add(elements);
        st.labels.entry(label).or_default().add(elements);
    }
    Some(Ticket { state, label, elements })
}
