#![allow(dead_code)]

pub mod contract;
pub mod edf_oracle;
pub mod gic_diff;
pub mod gic_oracle;
pub mod layout;

use hypsim::metrics::MetricsReport;
use hypsim::trace::Trace;

/// Guest execution slices `(vm, start_ns, end_ns)` from a trace, with
/// back-to-back slices of the same VM merged.
pub fn merged_slices(trace: &Trace) -> Vec<(u32, u64, u64)> {
    let mut out: Vec<(u32, u64, u64)> = Vec::new();
    for r in trace.of_kind("guest_run") {
        let vm = r.vm().expect("guest_run has a vm actor").0;
        let start = r.get_u64("start_ns").expect("start_ns");
        let end = start + r.get_u64("dur_ns").expect("dur_ns");
        if start == end {
            continue;
        }
        match out.last_mut() {
            Some(last) if last.0 == vm && last.2 == start => last.2 = end,
            _ => out.push((vm, start, end)),
        }
    }
    out
}

/// Sum of CPU, hypervisor and idle time, recomputed from raw records.
pub fn accounted_time(trace: &Trace) -> u64 {
    trace
        .records
        .iter()
        .map(|r| match r.kind.as_str() {
            "guest_run" | "idle" => r.get_u64("dur_ns").unwrap_or(0),
            _ => r.cost_ns,
        })
        .sum()
}

pub fn conserves(trace: &Trace, m: &MetricsReport) -> bool {
    accounted_time(trace) == m.horizon_ns
        && m.vms.iter().map(|v| v.cpu_time_ns).sum::<u64>() + m.hypervisor_overhead_ns + m.idle_time_ns == m.horizon_ns
}
