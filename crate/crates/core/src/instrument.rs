//! Per-thread invocation counters for the expensive batch fitters.
//!
//! The simulation harness reads these to prove that nothing is refit once a
//! router has been frozen. Counters are thread-local so parallel test threads
//! do not see each other's runs.

use std::cell::Cell;

thread_local! {
    static CALIBRATION_RUNS: Cell<u64> = const { Cell::new(0) };
    static PREDICTOR_TRAINING_RUNS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record_calibration() {
    CALIBRATION_RUNS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_predictor_training() {
    PREDICTOR_TRAINING_RUNS.with(|c| c.set(c.get() + 1));
}

/// Number of `fit_calibration` calls made on this thread.
pub fn calibration_runs() -> u64 {
    CALIBRATION_RUNS.with(Cell::get)
}

/// Number of predictor `train` calls made on this thread.
pub fn predictor_training_runs() -> u64 {
    PREDICTOR_TRAINING_RUNS.with(Cell::get)
}

/// Sum of both counters.
pub fn training_runs() -> u64 {
    calibration_runs() + predictor_training_runs()
}
