use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::tensor::arena;

pub const DEFAULT_POWER_WATTS: f64 = 250.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub run_time_s: f64,
    /// Peak bytes held by tensors on the metered thread, in MiB.
    pub ram_mb: f64,
    /// `power × time`, with the configured device power.
    pub energy_kwh: f64,
}

impl ResourceReport {
    pub fn from_parts(run_time_s: f64, peak_bytes: i64, power_watts: f64) -> Self {
        ResourceReport {
            run_time_s,
            ram_mb: peak_bytes.max(0) as f64 / (1024.0 * 1024.0),
            energy_kwh: power_watts * run_time_s / 3.6e6,
        }
    }
}

/// Runs `f`, timing it and tracking the tensor-byte high-water mark on the
/// current thread. Meters nest: an outer meter still sees the inner peak.
pub fn meter<R>(power_watts: f64, f: impl FnOnce() -> R) -> (R, ResourceReport) {
    let outer_peak = arena::reset_peak();
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed().as_secs_f64();
    let peak = arena::peak_bytes();
    arena::raise_peak(outer_peak);
    (out, ResourceReport::from_parts(elapsed, peak, power_watts))
}

/// Peak resident set size of the whole process from `/proc`, if available.
pub fn os_peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}
