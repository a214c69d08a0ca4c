//! Run summary, computed from a trace and nothing else.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::VmId;
use crate::trace::{Trace, TraceRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmMetrics {
    pub vm: u32,
    pub cpu_time_ns: u64,
    pub switch_in_count: u64,
    pub deadline_misses: u64,
    pub irqs_received: u64,
    pub faults: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizon_ns: u64,
    pub scheduler: String,
    pub vms: Vec<VmMetrics>,
    pub hypervisor_overhead_ns: u64,
    /// Hypervisor time by cost-model field.
    pub overhead_by_field: BTreeMap<String, u64>,
    pub idle_time_ns: u64,
    pub ivc_transfers: u64,
    pub deadline_misses: u64,
    /// Fraction of the horizon spent executing guest code.
    pub utilization: f64,
}

impl MetricsReport {
    pub fn from_trace(trace: &Trace) -> Result<MetricsReport, String> {
        let start = trace.records.iter().find(|r| r.kind == "run_start").ok_or("trace has no run_start record")?;
        let n = start.get_u64("vms").ok_or("run_start lacks vms")? as usize;
        let horizon_ns = start.get_u64("horizon_ns").ok_or("run_start lacks horizon_ns")?;
        let scheduler = start.get("scheduler").unwrap_or_default().to_string();
        let mut vms: Vec<VmMetrics> = (0..n as u32)
            .map(|vm| VmMetrics { vm, cpu_time_ns: 0, switch_in_count: 0, deadline_misses: 0, irqs_received: 0, faults: 0 })
            .collect();
        let mut m = MetricsReport {
            horizon_ns,
            scheduler,
            vms: Vec::new(),
            hypervisor_overhead_ns: 0,
            overhead_by_field: BTreeMap::new(),
            idle_time_ns: 0,
            ivc_transfers: 0,
            deadline_misses: 0,
            utilization: 0.0,
        };
        let vm_of = |r: &TraceRecord| -> Result<Option<usize>, String> {
            match r.vm() {
                Some(VmId(i)) if (i as usize) < n => Ok(Some(i as usize)),
                Some(vm) => Err(format!("record for unknown {vm}")),
                None => Ok(None),
            }
        };
        for r in &trace.records {
            if r.cost_ns > 0 || !r.cost_field.is_empty() {
                m.hypervisor_overhead_ns += r.cost_ns;
                *m.overhead_by_field.entry(r.cost_field.clone()).or_default() += r.cost_ns;
            }
            match r.kind.as_str() {
                "guest_run" => {
                    let vm = vm_of(r)?.ok_or("guest_run without vm")?;
                    vms[vm].cpu_time_ns += r.get_u64("dur_ns").ok_or("guest_run lacks dur_ns")?;
                }
                "idle" => m.idle_time_ns += r.get_u64("dur_ns").ok_or("idle lacks dur_ns")?,
                "dispatch" => {
                    if let Some(vm) = vm_of(r)? {
                        vms[vm].switch_in_count += 1;
                    }
                }
                "deadline_miss" => {
                    if let Some(vm) = vm_of(r)? {
                        vms[vm].deadline_misses += 1;
                    }
                    m.deadline_misses += 1;
                }
                "virq_fill" => {
                    if let Some(vm) = vm_of(r)? {
                        vms[vm].irqs_received += 1;
                    }
                }
                "fault_inject" => {
                    if let Some(vm) = vm_of(r)? {
                        vms[vm].faults += 1;
                    }
                }
                "ivc_notify" => m.ivc_transfers += 1,
                _ => {}
            }
        }
        let cpu: u64 = vms.iter().map(|v| v.cpu_time_ns).sum();
        m.utilization = if horizon_ns == 0 { 0.0 } else { cpu as f64 / horizon_ns as f64 };
        m.vms = vms;
        Ok(m)
    }

    pub fn total_cpu_ns(&self) -> u64 {
        self.vms.iter().map(|v| v.cpu_time_ns).sum()
    }

    /// Guest time, hypervisor time and idle time partition the horizon.
    pub fn conserves_time(&self) -> bool {
        self.total_cpu_ns() + self.hypervisor_overhead_ns + self.idle_time_ns == self.horizon_ns
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}
