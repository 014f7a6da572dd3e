//! Per-thread call counters used to check the inference-cost contract: a
//! trained generator must craft an attack without touching the detector or
//! running any backward pass.

use std::cell::Cell;

thread_local! {
    static DETECTOR_FORWARDS: Cell<u64> = const { Cell::new(0) };
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record_detector_forward() {
    DETECTOR_FORWARDS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_backward() {
    BACKWARD_PASSES.with(|c| c.set(c.get() + 1));
}

/// Snapshot of the calling thread's counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub detector_forwards: u64,
    pub backward_passes: u64,
}

impl Counters {
    pub fn now() -> Self {
        Self {
            detector_forwards: DETECTOR_FORWARDS.with(Cell::get),
            backward_passes: BACKWARD_PASSES.with(Cell::get),
        }
    }

    pub fn since(self, earlier: Counters) -> Counters {
        Counters {
            detector_forwards: self.detector_forwards - earlier.detector_forwards,
            backward_passes: self.backward_passes - earlier.backward_passes,
        }
    }
}
